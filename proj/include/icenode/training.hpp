#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "icenode/diff/parameter_set.hpp"
#include "icenode/ehr.hpp"
#include "icenode/model.hpp"

namespace icenode::train {

struct TrainConfig {
  double lr_dynamics = 7.15e-5;  // eta_1
  double lr_other = 1.14e-3;     // eta_2
  double decay_rate = 0.3;
  std::size_t batch_size = 256;
  std::size_t epochs = 60;
  std::uint64_t seed = 0;
  std::size_t eval_every = 10;  // iterations between validation evaluations
  int threads = 1;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t step = 0;
};

/// One Adam update; arrays tagged Dynamics move with lr_dynamics, the rest
/// with lr_other. A non-finite gradient raises an error naming its array.
void adam_step(diff::ParameterSet& params, std::span<const double> grad, AdamState& state,
               double lr_dynamics, double lr_other);

/// base * decay_rate^(epoch / epochs).
double decayed_rate(double base, double decay_rate, std::size_t epoch, std::size_t epochs);

/// Uniform draw of `batch_size` entries of `split`, with replacement.
std::vector<std::size_t> sample_batch(const std::vector<std::size_t>& split,
                                      std::size_t batch_size, std::mt19937_64& rng);

std::size_t iterations_per_epoch(std::size_t n_train, std::size_t batch_size);

struct BatchGradient {
  double loss = 0.0;  // mean patient loss
  std::vector<double> grad;  // mean gradient over the batch, ParameterSet layout
};

/// Mean loss and gradient over a batch. Patients are processed in parallel;
/// partial sums are formed over fixed chunks and added in chunk order, so
/// the result does not depend on the thread count.
BatchGradient batch_gradient(const model::Model& model, const diff::ParameterSet& params,
                             const std::vector<ehr::PatientRecord>& patients,
                             const std::vector<std::size_t>& batch, int threads);

/// Single-threaded reference accumulating patients in batch order.
BatchGradient batch_gradient_serial(const model::Model& model, const diff::ParameterSet& params,
                                    const std::vector<ehr::PatientRecord>& patients,
                                    const std::vector<std::size_t>& batch);

inline constexpr std::size_t kReduceChunk = 4;

struct TrainHistory {
  std::vector<double> loss;  // per iteration; NaN where the batch was skipped
  std::vector<std::size_t> eval_iterations;
  std::vector<double> valid_auc;
  std::size_t skipped_batches = 0;
  std::size_t best_iteration = 0;
  double best_auc = 0.0;
  std::size_t iterations = 0;
};

struct TrainResult {
  diff::ParameterSet best;
  diff::ParameterSet last;
  TrainHistory history;
};

/// Adam training with validation visit-AUC model selection.
TrainResult train_loop(const model::Model& model, diff::ParameterSet params,
                       const std::vector<ehr::PatientRecord>& patients,
                       const ehr::DatasetSplit& split, const TrainConfig& config);

void write_history_csv(const std::filesystem::path& dir, const TrainHistory& history);

// Checkpoints are parameter archives whose manifest carries the format
// version, the artifact version string, the model config, the vocabulary,
// the ontology edges (GRAM) and caller metadata.
inline constexpr int kCheckpointFormat = 1;

struct Checkpoint {
  diff::ParameterSet params;
  model::ModelConfig config;
  ehr::Vocabulary vocabulary;
  std::vector<std::pair<std::string, std::string>> ontology;  // empty unless GRAM
  nlohmann::json metadata;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Checks a loaded parameter set against the layout the config implies.
void check_layout(const Checkpoint& checkpoint);

/// Code hierarchy for GRAM checkpoints, null otherwise.
std::shared_ptr<const ehr::CodeHierarchy> checkpoint_hierarchy(const Checkpoint& checkpoint);

/// Version string compiled into the artifact (git describe style).
std::string artifact_version();

}  // namespace icenode::train
