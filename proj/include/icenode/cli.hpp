#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "icenode/ehr.hpp"
#include "icenode/evaluation.hpp"
#include "icenode/model.hpp"
#include "icenode/training.hpp"

// Command implementations behind tools/icenode. Each command reads its
// inputs, writes its outputs into one directory and a manifest.json there.
namespace icenode::cli {

// --- settings -------------------------------------------------------------

/// Flat key=value settings; later sources override earlier ones.
using Settings = std::map<std::string, std::string>;

/// `key = value` per line; `#` starts a comment; blank lines are ignored.
/// Duplicate keys and lines without `=` are configuration errors.
Settings read_settings_file(const std::filesystem::path& path);

/// Parses `key=value` overrides as given on the command line.
Settings parse_overrides(const std::vector<std::string>& items);

/// `base` with every entry of `overrides` applied on top.
Settings merge(Settings base, const Settings& overrides);

ehr::SyntheticConfig resolve_synthetic(const Settings& settings);

struct TrainSetup {
  model::ModelConfig model;
  train::TrainConfig train;
  std::uint64_t split_seed = 0;
  ehr::TimeAnchor anchor = ehr::TimeAnchor::Discharge;
};

/// Applies `preset` (full or desk) first, then every other key. Unknown
/// keys and unparsable values are errors naming the key.
TrainSetup resolve_train(const Settings& settings);

nlohmann::json to_json(const TrainSetup& setup);

// --- data -----------------------------------------------------------------

// A dataset directory holds these files; the ontology and mapping are
// optional.
inline constexpr const char* kRecordsFile = "records.tsv";
inline constexpr const char* kVocabularyFile = "vocabulary.txt";
inline constexpr const char* kOntologyFile = "ontology.tsv";
inline constexpr const char* kMappingFile = "mapping.tsv";

struct Dataset {
  ehr::Vocabulary vocabulary;
  std::optional<ehr::Ontology> ontology;
  ehr::Cohort cohort;  // after filtering
  std::vector<std::filesystem::path> files;  // inputs actually read
};

Dataset load_dataset(const std::filesystem::path& dir, ehr::TimeAnchor anchor,
                     const std::optional<std::filesystem::path>& ontology = std::nullopt);

void write_dataset(const std::filesystem::path& dir, const ehr::SyntheticCohort& cohort);

/// Lowercase hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);

// --- manifest -------------------------------------------------------------

struct RunManifest {
  std::string command;
  nlohmann::json config;
  std::uint64_t seed = 0;
  std::vector<std::filesystem::path> inputs;
  std::vector<std::filesystem::path> outputs;
  double wall_clock_seconds = 0.0;
  int threads = 1;
  nlohmann::json extra = nlohmann::json::object();
};

inline constexpr const char* kManifestFile = "manifest.json";

/// Writes dir/manifest.json with SHA-256 digests of inputs and outputs.
void write_manifest(const std::filesystem::path& dir, const RunManifest& manifest);

// --- commands -------------------------------------------------------------

struct SynthOptions {
  Settings settings;
  std::filesystem::path out;
};

struct SynthResult {
  std::size_t patients = 0;
};

SynthResult cmd_synth(const SynthOptions& options);

struct TrainOptions {
  std::filesystem::path data;
  Settings settings;
  std::filesystem::path out;
  std::optional<std::filesystem::path> ontology;
  int threads = 1;
};

inline constexpr const char* kCheckpointFile = "model.ckpt";

struct TrainOutcome {
  train::TrainHistory history;
  std::filesystem::path checkpoint;
  std::size_t solver_calls = 0;  // ODE solves made while training
};

TrainOutcome cmd_train(const TrainOptions& options);

/// Which patients of the data directory a command scores. Named splits use
/// the split seed stored in the checkpoint.
enum class Subset { Train, Valid, Test, All };
Subset parse_subset(std::string_view text);

struct EvaluateOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path data;
  std::filesystem::path out;
  Subset subset = Subset::Test;
  std::size_t k = 15;
  bool macro = false;
  int threads = 1;
};

struct EvaluateOutcome {
  eval::VisitAuc visit_auc;
  eval::TopKAccuracy top_k;
};

EvaluateOutcome cmd_evaluate(const EvaluateOptions& options);

struct CompareOptions {
  std::vector<std::filesystem::path> checkpoints;
  std::vector<std::string> names;  // optional, one per checkpoint
  std::filesystem::path data;
  std::filesystem::path out;
  Subset subset = Subset::Test;
  double p_threshold = 0.01;
  double auc_threshold = 0.9;
  int threads = 1;
};

eval::CompetencyReport cmd_compare(const CompareOptions& options);

struct TrajectoryCommandOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path data;
  std::string subject;
  std::vector<std::string> codes;  // labels; empty selects the patient's recorded codes
  std::size_t resolution = 64;
  std::optional<double> until;
  std::filesystem::path out;
};

/// Returns the path of the written trajectory CSV.
std::filesystem::path cmd_trajectory(const TrajectoryCommandOptions& options);

struct GradcheckOptions {
  std::filesystem::path out;
  bool inject_tanh_fault = false;  // mutation test of the checker itself
};

struct GradcheckResult {
  struct Check {
    std::string name;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    bool passed = false;
  };
  std::vector<Check> checks;
  bool passed() const;
};

GradcheckResult cmd_gradcheck(const GradcheckOptions& options);

}  // namespace icenode::cli
