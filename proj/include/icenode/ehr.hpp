#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace icenode::ehr {

using CodeId = std::uint32_t;

/// Dense code vocabulary, ids 0..C-1 in file order.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> labels);

  std::size_t size() const { return labels_.size(); }
  const std::string& label(CodeId id) const { return labels_.at(id); }
  const std::vector<std::string>& labels() const { return labels_; }
  std::optional<CodeId> find(std::string_view label) const;

 private:
  std::vector<std::string> labels_;
  std::unordered_map<std::string, CodeId> index_;
};

Vocabulary load_vocabulary(const std::filesystem::path& path);
void save_vocabulary(const std::filesystem::path& path, const Vocabulary& vocab);

struct Admission {
  double time = 0.0;       // weeks since the patient's first admission timestamp
  double time_days = 0.0;  // timestamp as read from the file
  double stay_days = 0.0;
  std::vector<CodeId> codes;  // sorted, unique, non-empty
};

struct PatientRecord {
  std::string subject_id;
  std::vector<Admission> admissions;  // time strictly increasing
};

// The one place days become weeks, so a written file reads back bit-exactly.
inline double days_to_weeks(double days) { return days / 7.0; }

// Which timestamp anchors an admission. Files carry the discharge time;
// Admission subtracts the stay.
enum class TimeAnchor { Discharge, Admission };
TimeAnchor parse_time_anchor(std::string_view text);

// Records as read, codes still strings.
struct RawAdmission {
  double time_days = 0.0;
  double stay_days = 0.0;
  std::vector<std::string> codes;
};
struct RawPatient {
  std::string subject_id;
  std::vector<RawAdmission> admissions;
  std::size_t line = 0;
};

// Versioned records format: a header line `# icenode-records 1`, then one
// patient per line: subject_id, TAB, then TAB-separated admissions written
// as `time_days;stay_days;code|code|...`. Blank lines and later `#` lines are
// ignored.
inline constexpr std::string_view kRecordsHeader = "# icenode-records 1";

std::vector<RawPatient> parse_raw_records(const std::filesystem::path& path);

/// Many-to-one map from source code strings to vocabulary ids.
struct CodeMapping {
  std::unordered_map<std::string, CodeId> entries;
};

CodeMapping load_code_mapping(const std::filesystem::path& path, const Vocabulary& vocab);

/// Resolves codes (through `mapping` if given, else directly against the
/// vocabulary), deduplicates them, sorts admissions and converts times to
/// weeks. Unknown codes abort with a list of offenders.
std::vector<PatientRecord> resolve_records(const std::vector<RawPatient>& raw,
                                           const Vocabulary& vocab,
                                           const CodeMapping* mapping = nullptr,
                                           TimeAnchor anchor = TimeAnchor::Discharge);

std::vector<PatientRecord> parse_patient_records(const std::filesystem::path& path,
                                                 const Vocabulary& vocab,
                                                 const CodeMapping* mapping = nullptr,
                                                 TimeAnchor anchor = TimeAnchor::Discharge);

void write_patient_records(const std::filesystem::path& path,
                           const std::vector<PatientRecord>& records, const Vocabulary& vocab);

// --- cohort ---------------------------------------------------------------

inline constexpr std::size_t kMinAdmissions = 2;
inline constexpr double kMaxStayDays = 14.0;

struct Cohort {
  std::vector<PatientRecord> patients;
  std::size_t excluded_too_few = 0;  // fewer than two admissions
  std::size_t excluded_long_stay = 0;
};

Cohort filter_cohort(std::vector<PatientRecord> records);

struct DatasetSplit {
  std::vector<std::size_t> train, valid, test;  // indices into the cohort
};

/// Seeded 0.70 / 0.15 / remainder partition of n patients.
DatasetSplit split_cohort(std::size_t n_patients, std::uint64_t seed);

/// One count per (code, admission) over the given patients.
std::vector<std::size_t> code_frequency(const std::vector<PatientRecord>& patients,
                                        const std::vector<std::size_t>& subset, std::size_t n_codes);

std::vector<std::uint8_t> encode_multi_hot(const std::vector<CodeId>& codes, std::size_t n_codes);
std::vector<CodeId> decode_multi_hot(const std::vector<std::uint8_t>& bits);

// --- ontology -------------------------------------------------------------

/// Child-to-parent DAG over code labels and internal concepts.
class Ontology {
 public:
  /// Validates acyclicity; throws DataError naming an edge on a cycle.
  explicit Ontology(std::vector<std::pair<std::string, std::string>> edges);

  std::size_t node_count() const { return labels_.size(); }
  const std::vector<std::string>& labels() const { return labels_; }
  const std::vector<std::pair<std::string, std::string>>& edges() const { return edges_; }
  std::optional<std::size_t> find(std::string_view label) const;
  const std::vector<std::size_t>& parents(std::size_t node) const { return parents_[node]; }

  /// The node and every node reachable through parent edges, sorted.
  const std::vector<std::size_t>& ancestors(std::size_t node) const { return closure_[node]; }

 private:
  std::vector<std::pair<std::string, std::string>> edges_;
  std::vector<std::string> labels_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<std::vector<std::size_t>> parents_;
  std::vector<std::vector<std::size_t>> closure_;
};

Ontology load_ontology(const std::filesystem::path& path);
void save_ontology(const std::filesystem::path& path, const Ontology& ontology);

/// Ancestor lists in embedding-node numbering: vocabulary codes first
/// (0..C-1), then the ontology's internal concepts. ancestors[i] lists code
/// i itself followed by its proper ancestors in ascending node order.
struct CodeHierarchy {
  std::size_t n_codes = 0;
  std::size_t n_nodes = 0;
  std::vector<std::string> node_labels;
  std::vector<std::vector<std::uint32_t>> ancestors;
};

/// Requires every leaf of the ontology to be a vocabulary code. Codes the
/// ontology does not mention get themselves as sole ancestor.
CodeHierarchy build_hierarchy(const Ontology& ontology, const Vocabulary& vocab);

// --- synthetic cohorts ----------------------------------------------------

/// Seeded cohort with a planted temporal rule: code 1 ("effect") appears at
/// an admission iff code 0 ("cause") appeared at an earlier admission more
/// than `threshold_weeks` ago.
struct SyntheticConfig {
  std::size_t n_patients = 2000;
  std::uint64_t seed = 1;
  std::size_t n_codes = 24;
  double threshold_weeks = 8.0;
  double gap_median_days = 30.0;
  double gap_sigma = 1.0;           // log-normal shape
  double admissions_p = 0.35;       // geometric continuation, truncated to [2, 8]
  std::size_t min_admissions = 2;
  std::size_t max_admissions = 8;
  double p_cause = 0.7;             // chance a patient ever carries the cause code
  double p_cause_visit = 0.8;       // per-admission chance once a carrier
  double p_switch = 0.2;            // latent state switch probability per admission
  std::size_t background_per_visit = 3;

  void validate() const;
};

inline constexpr CodeId kCauseCode = 0;
inline constexpr CodeId kEffectCode = 1;

struct SyntheticCohort {
  std::vector<PatientRecord> records;
  Vocabulary vocabulary;
  Ontology ontology;
};

SyntheticCohort generate_synthetic_cohort(const SyntheticConfig& config);

}  // namespace icenode::ehr
