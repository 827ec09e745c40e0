#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "icenode/diff/executor.hpp"
#include "icenode/diff/parameter_set.hpp"
#include "icenode/diff/program.hpp"
#include "icenode/ehr.hpp"
#include "icenode/embeddings.hpp"
#include "icenode/ode.hpp"

namespace icenode::model {

enum class ModelKind { IceNode, IceNodeUniform, Gru, LogReg };
enum class DynamicsKind { Mlp2, Mlp3, Gru };
enum class GradientMethod { Adjoint, Discrete };

ModelKind parse_model_kind(std::string_view text);
DynamicsKind parse_dynamics(std::string_view text);
GradientMethod parse_gradient_method(std::string_view text);
std::string_view to_string(ModelKind kind);
std::string_view to_string(DynamicsKind kind);
std::string_view to_string(GradientMethod method);

inline constexpr double kLeakySlope = 0.01;
inline constexpr double kProbFloor = 1e-12;

struct ModelConfig {
  ModelKind kind = ModelKind::IceNode;
  std::size_t d_e = 300;
  std::size_t d_m = 30;
  DynamicsKind dynamics = DynamicsKind::Mlp3;
  std::size_t decoder_depth = 2;
  emb::EmbeddingKind embedding = emb::EmbeddingKind::Matrix;
  emb::Attention attention = emb::Attention::Tanh;
  std::size_t attention_size = 200;
  int reg_order = 3;
  double reg_weight = 1000.0;
  // Keep the integrated h_e after an update instead of the observed g.
  bool keep_integrated_embedding = false;
  GradientMethod gradient = GradientMethod::Adjoint;
  ode::SolverConfig solver;
  // Logistic-regression baseline.
  double logreg_l1 = 1e-4;
  double logreg_l2 = 1e-3;
  std::size_t logreg_max_iter = 500;

  std::size_t d_h() const { return d_m + d_e; }
  bool uniform_time() const { return kind == ModelKind::IceNodeUniform; }
  bool is_ode() const { return kind == ModelKind::IceNode || kind == ModelKind::IceNodeUniform; }
  emb::EmbeddingConfig embedding_config() const {
    return {embedding, attention, d_e, attention_size};
  }
  void validate() const;
};

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Per-visit predictions of one patient: scores[k - 1] for admission k >= 1.
struct PatientPredictions {
  std::vector<std::vector<double>> scores;
};

struct PatientLoss {
  double loss = 0.0;            // mean over predicted visits of BCE + alpha * R
  double bce = 0.0;             // mean BCE part
  double regularization = 0.0;  // mean R_K part (unweighted)
  PatientPredictions predictions;
};

double binary_cross_entropy(std::span<const double> truth_bits, std::span<const double> pred);

/// Parameters that depend only on ParameterSet values and are shared by
/// every patient in a batch (the GRAM table).
struct BatchContext {
  std::vector<double> table;
};

/// ICE-NODE, its uniform-time ablation and the GRU sequence baseline.
///
/// Parameter layout: dynamics arrays first (a contiguous window), then
/// embedding, decoder and update arrays.
class Model {
 public:
  Model(ModelConfig config, std::size_t n_codes,
        std::shared_ptr<const ehr::CodeHierarchy> hierarchy = nullptr);

  const ModelConfig& config() const { return config_; }
  std::size_t n_codes() const { return n_codes_; }
  const emb::Embedding& embedding() const { return embedding_; }
  const ode::VectorField& field() const { return *field_; }
  const diff::Program& decoder() const { return *decoder_; }
  const diff::Program& update() const { return *update_; }

  diff::ParameterSet make_params(std::uint64_t seed) const;
  /// Size of the gradient buffer: parameters plus the embedding table.
  std::size_t grad_size(const diff::ParameterSet& params) const;

  BatchContext prepare(const diff::ParameterSet& params) const;

  /// Loss and predictions; with `grad` non-empty also accumulates the loss
  /// gradient into grad (layout: flat params, then embedding table).
  PatientLoss patient_forward(const diff::ParameterSet& params, const BatchContext& ctx,
                              const ehr::PatientRecord& patient, std::span<double> grad = {},
                              bool with_regularization = true) const;

  /// Moves the table part of a gradient buffer onto the parameters.
  void finish_gradient(const diff::ParameterSet& params, std::span<double> grad) const;

  /// Risk at t_f >= t_last after consuming every admission (ODE models).
  std::vector<double> predict_future(const diff::ParameterSet& params, const BatchContext& ctx,
                                     const ehr::PatientRecord& patient, double t_f) const;

  // Building blocks, exposed for the trajectory module and tests.
  std::vector<double> embed(const diff::ParameterSet& params, const BatchContext& ctx,
                            const std::vector<ehr::CodeId>& codes) const;
  std::vector<double> decode(const diff::ParameterSet& params, std::span<const double> h_e) const;
  std::vector<double> update_memory(const diff::ParameterSet& params,
                                    std::span<const double> h_m, std::span<const double> g) const;
  /// Interval actually integrated for a real gap [t0, t1].
  std::pair<double, double> solve_interval(double t0, double t1) const;
  ode::TrajectorySolution integrate(const diff::ParameterSet& params, std::span<const double> h,
                                    double t0, double t1, const ode::SolveOptions& options) const;

 private:
  ModelConfig config_;
  std::size_t n_codes_;
  emb::Embedding embedding_;
  std::shared_ptr<const ode::VectorField> field_;  // ODE models only
  std::shared_ptr<const diff::Program> decoder_;
  std::shared_ptr<const diff::Program> update_;  // update cell or sequence GRU cell
};

/// Per-code elastic-net logistic regression on the union of codes seen so
/// far, predicting the next visit. Parameters: logreg.W (C x C), logreg.b.
class LogReg {
 public:
  LogReg(ModelConfig config, std::size_t n_codes);
  const ModelConfig& config() const { return config_; }
  diff::ParameterSet make_params() const;

  struct FitReport {
    std::size_t iterations = 0;
    bool converged = false;
    double objective = 0.0;
  };
  /// Proximal gradient descent on the training visits.
  FitReport fit(diff::ParameterSet& params, const std::vector<ehr::PatientRecord>& patients,
                const std::vector<std::size_t>& subset) const;

  std::vector<double> forward(const diff::ParameterSet& params,
                              const std::vector<std::uint8_t>& history) const;
  PatientPredictions predict(const diff::ParameterSet& params,
                             const ehr::PatientRecord& patient) const;

 private:
  ModelConfig config_;
  std::size_t n_codes_;
};

/// Uniform scoring interface over every model family.
class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual PatientPredictions predict(const ehr::PatientRecord& patient) const = 0;
};

/// Binds a model (or logistic regression) to fixed parameters.
std::unique_ptr<Predictor> make_predictor(const ModelConfig& config, std::size_t n_codes,
                                          std::shared_ptr<const ehr::CodeHierarchy> hierarchy,
                                          const diff::ParameterSet& params);

}  // namespace icenode::model
