#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "icenode/ehr.hpp"
#include "icenode/model.hpp"

namespace icenode::eval {

/// One admission after the first, with the model's scores for it.
struct ScoredVisit {
  std::string subject_id;
  double time = 0.0;  // weeks
  std::vector<std::uint8_t> truth;
  std::vector<double> scores;
};

/// Scores every patient of `subset` (all patients if empty), in patient
/// order. Parallel over patients with at most `threads` workers.
std::vector<ScoredVisit> score_patients(const model::Predictor& predictor,
                                        const std::vector<ehr::PatientRecord>& patients,
                                        const std::vector<std::size_t>& subset,
                                        std::size_t n_codes, int threads = 1);

/// Single-threaded reference for score_patients.
std::vector<ScoredVisit> score_patients_serial(const model::Predictor& predictor,
                                               const std::vector<ehr::PatientRecord>& patients,
                                               const std::vector<std::size_t>& subset,
                                               std::size_t n_codes);

/// Mann-Whitney AUC with midranks for ties; nullopt unless both classes occur.
std::optional<double> binary_auc(std::span<const double> scores,
                                 std::span<const std::uint8_t> labels);

struct VisitAuc {
  double mean = 0.0;
  std::size_t visits = 0;   // visits averaged
  std::size_t skipped = 0;  // visits without both classes
};

VisitAuc visit_auc(const std::vector<ScoredVisit>& visits);

/// AUC of one code across visits; nullopt for a single-class code.
std::optional<double> code_auc(const std::vector<ScoredVisit>& visits, ehr::CodeId code);

inline constexpr std::size_t kQuantiles = 5;

/// Codes with nonzero training frequency, sorted by ascending frequency
/// (ties by code id) and cut into five groups whose sizes differ by <= 1.
struct QuantilePartition {
  std::array<std::vector<ehr::CodeId>, kQuantiles> groups;
};

QuantilePartition quantile_partition(const std::vector<std::size_t>& train_frequency);

struct TopKAccuracy {
  std::array<std::optional<double>, kQuantiles> accuracy;  // absent for empty groups
  std::array<std::size_t, kQuantiles> hits{};
  std::array<std::size_t, kQuantiles> occurrences{};
};

/// Share of true codes that land in the k highest scores of their visit
/// (ties to the lower code id), per quantile group. With `macro`, each group
/// averages per-code accuracies instead of pooling occurrences.
TopKAccuracy top_k_accuracy(const std::vector<ScoredVisit>& visits,
                            const QuantilePartition& partition, std::size_t k = 15,
                            bool macro = false);

/// Indices of the k highest scores, ties broken by the lower index.
std::vector<ehr::CodeId> top_k_codes(std::span<const double> scores, std::size_t k);

struct DeLongResult {
  double auc_a = 0.0;
  double auc_b = 0.0;
  double variance = 0.0;  // of auc_a - auc_b
  double z = 0.0;
  double p = 1.0;
};

/// Paired comparison of two correlated AUCs (fast DeLong).
DeLongResult delong_test(std::span<const std::uint8_t> truth, std::span<const double> scores_a,
                         std::span<const double> scores_b);

/// DeLong variance estimate of a single AUC.
double delong_variance(std::span<const std::uint8_t> truth, std::span<const double> scores);

struct CodeCompetency {
  ehr::CodeId code = 0;
  std::vector<std::optional<double>> aucs;  // per model
  std::size_t best = 0;
  std::vector<bool> members;  // models holding the code
};

struct CompetencyReport {
  std::vector<std::string> models;
  std::vector<CodeCompetency> codes;  // qualifying codes only
  /// Count of codes per exact member subset, keyed by a bit mask over models.
  std::vector<std::pair<std::uint64_t, std::size_t>> subset_counts;
};

/// Assigns each code whose best AUC exceeds `auc_threshold` to the best
/// model and every model not significantly different from it (DeLong
/// p > p_threshold). All models must score the same visits.
CompetencyReport relative_competency(const std::vector<std::string>& models,
                                     const std::vector<std::vector<ScoredVisit>>& scored,
                                     double p_threshold = 0.01, double auc_threshold = 0.9);

std::string subset_label(const std::vector<std::string>& models, std::uint64_t mask);

/// Rejects differing vocabularies with a description of the difference.
void require_same_vocabulary(const ehr::Vocabulary& trained, const ehr::Vocabulary& data);

// Report files. Schemas:
//   quantiles.csv  group,range,hits,occurrences,accuracy
//   code_auc.csv   code_id,code,positives,negatives,auc
//   competency.csv subset,count
//   assignments.csv code_id,code,<model>_auc...,members
void write_quantile_csv(const std::filesystem::path& path, const TopKAccuracy& acc);
void write_code_auc_csv(const std::filesystem::path& path, const std::vector<ScoredVisit>& visits,
                        const ehr::Vocabulary& vocab);
void write_competency_csv(const std::filesystem::path& dir, const CompetencyReport& report,
                          const ehr::Vocabulary& vocab);

}  // namespace icenode::eval
