#include <algorithm>
#include <chrono>
#include <fstream>
#include <set>

#include <openssl/evp.h>
#include <spdlog/spdlog.h>

#include "icenode/cli.hpp"
#include "icenode/error.hpp"
#include "icenode/ode.hpp"
#include "icenode/text_io.hpp"
#include "icenode/trajectory.hpp"

namespace icenode::cli {

namespace fs = std::filesystem;

namespace {

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

nlohmann::json to_json(const ehr::SyntheticConfig& c) {
  return {{"n_patients", c.n_patients},
          {"seed", c.seed},
          {"n_codes", c.n_codes},
          {"threshold_weeks", c.threshold_weeks},
          {"gap_median_days", c.gap_median_days},
          {"gap_sigma", c.gap_sigma},
          {"admissions_p", c.admissions_p},
          {"min_admissions", c.min_admissions},
          {"max_admissions", c.max_admissions},
          {"p_cause", c.p_cause},
          {"p_cause_visit", c.p_cause_visit},
          {"p_switch", c.p_switch},
          {"background_per_visit", c.background_per_visit}};
}

std::vector<std::size_t> subset_indices(Subset subset, std::size_t n, std::uint64_t split_seed) {
  if (subset == Subset::All) {
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    return all;
  }
  auto split = ehr::split_cohort(n, split_seed);
  switch (subset) {
    case Subset::Train: return split.train;
    case Subset::Valid: return split.valid;
    default: return split.test;
  }
}

const char* subset_name(Subset s) {
  switch (s) {
    case Subset::Train: return "train";
    case Subset::Valid: return "valid";
    case Subset::Test: return "test";
    default: return "all";
  }
}

// Checkpoint plus the run metadata cmd_train stores with it.
struct LoadedModel {
  train::Checkpoint checkpoint;
  std::uint64_t split_seed = 0;
  ehr::TimeAnchor anchor = ehr::TimeAnchor::Discharge;
  std::vector<std::size_t> train_frequency;
};

LoadedModel load_model(const fs::path& path) {
  LoadedModel m;
  m.checkpoint = train::load_checkpoint(path);
  const auto& meta = m.checkpoint.metadata;
  try {
    m.split_seed = meta.at("split_seed").get<std::uint64_t>();
    m.anchor = ehr::parse_time_anchor(meta.at("time_anchor").get<std::string>());
    m.train_frequency = meta.at("train_frequency").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": checkpoint lacks training metadata: " + e.what());
  }
  if (m.train_frequency.size() != m.checkpoint.vocabulary.size())
    throw ConfigError(path.string() + ": training frequencies do not match the vocabulary");
  return m;
}

std::unique_ptr<model::Predictor> predictor_for(const train::Checkpoint& ck) {
  return model::make_predictor(ck.config, ck.vocabulary.size(), train::checkpoint_hierarchy(ck),
                               ck.params);
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  auto out = detail::open_output(path);
  out << j.dump(2) << '\n';
  detail::finish_output(out, path);
}

std::string file_safe(const std::string& s) {
  std::string out = s;
  for (char& c : out)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_' && c != '.') c = '_';
  return out;
}

}  // namespace

// --- data -----------------------------------------------------------------

Dataset load_dataset(const fs::path& dir, ehr::TimeAnchor anchor,
                     const std::optional<fs::path>& ontology) {
  Dataset d;
  const auto vocab_path = dir / kVocabularyFile;
  const auto records_path = dir / kRecordsFile;
  if (!fs::exists(records_path)) throw IoError("no " + std::string(kRecordsFile) + " in " + dir.string());
  d.vocabulary = ehr::load_vocabulary(vocab_path);
  d.files = {vocab_path, records_path};
  std::optional<ehr::CodeMapping> mapping;
  if (const auto mp = dir / kMappingFile; fs::exists(mp)) {
    mapping = ehr::load_code_mapping(mp, d.vocabulary);
    d.files.push_back(mp);
  }
  auto records = ehr::parse_patient_records(records_path, d.vocabulary,
                                            mapping ? &*mapping : nullptr, anchor);
  d.cohort = ehr::filter_cohort(std::move(records));
  spdlog::info("{}: {} patients kept, {} with fewer than two admissions and {} with a long stay "
               "excluded",
               dir.string(), d.cohort.patients.size(), d.cohort.excluded_too_few,
               d.cohort.excluded_long_stay);
  const fs::path op = ontology ? *ontology : dir / kOntologyFile;
  if (ontology || fs::exists(op)) {
    d.ontology = ehr::load_ontology(op);
    d.files.push_back(op);
  }
  return d;
}

void write_dataset(const fs::path& dir, const ehr::SyntheticCohort& cohort) {
  ehr::save_vocabulary(dir / kVocabularyFile, cohort.vocabulary);
  ehr::write_patient_records(dir / kRecordsFile, cohort.records, cohort.vocabulary);
  ehr::save_ontology(dir / kOntologyFile, cohort.ontology);
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1)
    throw IoError("SHA-256 unavailable");
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  if (in.bad()) throw IoError("read error on " + path.string());
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

void write_manifest(const fs::path& dir, const RunManifest& m) {
  auto digests = [](const std::vector<fs::path>& files) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& f : files) arr.push_back({{"path", f.string()}, {"sha256", sha256_file(f)}});
    return arr;
  };
  nlohmann::json j = {{"command", m.command},
                      {"version", train::artifact_version()},
                      {"config", m.config},
                      {"seed", m.seed},
                      {"threads", m.threads},
                      {"inputs", digests(m.inputs)},
                      {"outputs", digests(m.outputs)},
                      {"wall_clock_seconds", m.wall_clock_seconds}};
  for (const auto& [k, v] : m.extra.items()) j[k] = v;
  write_json(dir / kManifestFile, j);
}

Subset parse_subset(std::string_view text) {
  if (text == "train") return Subset::Train;
  if (text == "valid") return Subset::Valid;
  if (text == "test") return Subset::Test;
  if (text == "all") return Subset::All;
  throw ConfigError("unknown subset '" + std::string(text) + "' (expected train, valid, test or all)");
}

// --- synth ----------------------------------------------------------------

SynthResult cmd_synth(const SynthOptions& o) {
  Stopwatch clock;
  const auto cfg = resolve_synthetic(o.settings);
  const auto cohort = ehr::generate_synthetic_cohort(cfg);
  fs::create_directories(o.out);
  write_dataset(o.out, cohort);
  RunManifest m{"synth", to_json(cfg), cfg.seed, {},
                {o.out / kVocabularyFile, o.out / kRecordsFile, o.out / kOntologyFile}};
  m.wall_clock_seconds = clock.seconds();
  write_manifest(o.out, m);
  return {cohort.records.size()};
}

// --- train ----------------------------------------------------------------

TrainOutcome cmd_train(const TrainOptions& o) {
  Stopwatch clock;
  auto setup = resolve_train(o.settings);
  setup.train.threads = o.threads;
  const auto data = load_dataset(o.data, setup.anchor, o.ontology);
  const auto& patients = data.cohort.patients;
  const std::size_t C = data.vocabulary.size();
  const bool gram = setup.model.embedding == emb::EmbeddingKind::Gram &&
                    setup.model.kind != model::ModelKind::LogReg;
  if (gram && !data.ontology) {
    throw ConfigError("embedding=gram needs an ontology: put " + std::string(kOntologyFile) +
                      " in the data directory or pass --ontology");
  }
  std::shared_ptr<const ehr::CodeHierarchy> hierarchy;
  if (gram)
    hierarchy = std::make_shared<const ehr::CodeHierarchy>(
        ehr::build_hierarchy(*data.ontology, data.vocabulary));
  const auto split = ehr::split_cohort(patients.size(), setup.split_seed);
  if (split.train.empty() || split.valid.empty())
    throw DataError("too few patients (" + std::to_string(patients.size()) +
                    ") for a training and a validation split");
  const auto freq = ehr::code_frequency(patients, split.train, C);

  const std::size_t calls_before = ode::solver_call_count();
  TrainOutcome outcome;
  diff::ParameterSet best;
  if (setup.model.kind == model::ModelKind::LogReg) {
    model::LogReg lr(setup.model, C);
    best = lr.make_params();
    const auto rep = lr.fit(best, patients, split.train);
    auto pred = model::make_predictor(setup.model, C, nullptr, best);
    const double auc =
        eval::visit_auc(eval::score_patients(*pred, patients, split.valid, C, o.threads)).mean;
    auto& h = outcome.history;
    h.loss = {rep.objective};
    h.eval_iterations = {rep.iterations};
    h.valid_auc = {auc};
    h.best_auc = auc;
    h.best_iteration = h.iterations = rep.iterations;
  } else {
    model::Model m(setup.model, C, hierarchy);
    auto result = train::train_loop(m, m.make_params(setup.train.seed), patients, split, setup.train);
    outcome.history = std::move(result.history);
    best = std::move(result.best);
  }
  outcome.solver_calls = ode::solver_call_count() - calls_before;

  fs::create_directories(o.out);
  train::Checkpoint ck{std::move(best), setup.model, data.vocabulary,
                       gram ? data.ontology->edges() : decltype(data.ontology->edges()){},
                       {{"split_seed", setup.split_seed},
                        {"time_anchor", to_json(setup)["time_anchor"]},
                        {"train_frequency", freq},
                        {"train_config", train::to_json(setup.train)},
                        {"best_iteration", outcome.history.best_iteration},
                        {"best_valid_auc", outcome.history.best_auc}}};
  outcome.checkpoint = o.out / kCheckpointFile;
  train::save_checkpoint(outcome.checkpoint, ck);
  train::write_history_csv(o.out, outcome.history);

  RunManifest man{"train", to_json(setup), setup.train.seed, data.files,
                  {outcome.checkpoint, o.out / "loss_trace.csv", o.out / "valid_auc.csv"}};
  man.threads = o.threads;
  man.wall_clock_seconds = clock.seconds();
  man.extra = {{"best_iteration", outcome.history.best_iteration},
               {"best_valid_auc", outcome.history.best_auc},
               {"skipped_batches", outcome.history.skipped_batches},
               {"solver_calls", outcome.solver_calls},
               {"patients", patients.size()}};
  write_manifest(o.out, man);
  return outcome;
}

// --- evaluate -------------------------------------------------------------

EvaluateOutcome cmd_evaluate(const EvaluateOptions& o) {
  Stopwatch clock;
  if (o.k == 0) throw ConfigError("k must be >= 1");
  const auto lm = load_model(o.checkpoint);
  const auto& ck = lm.checkpoint;
  const auto data = load_dataset(o.data, lm.anchor);
  eval::require_same_vocabulary(ck.vocabulary, data.vocabulary);
  const std::size_t C = ck.vocabulary.size();
  const auto pred = predictor_for(ck);
  const auto idx = subset_indices(o.subset, data.cohort.patients.size(), lm.split_seed);
  const auto visits = eval::score_patients(*pred, data.cohort.patients, idx, C, o.threads);

  EvaluateOutcome r;
  r.visit_auc = eval::visit_auc(visits);
  r.top_k = eval::top_k_accuracy(visits, eval::quantile_partition(lm.train_frequency), o.k, o.macro);

  fs::create_directories(o.out);
  eval::write_quantile_csv(o.out / "quantiles.csv", r.top_k);
  eval::write_code_auc_csv(o.out / "code_auc.csv", visits, ck.vocabulary);
  write_json(o.out / "metrics.json", {{"visit_auc", r.visit_auc.mean},
                                       {"visits", r.visit_auc.visits},
                                       {"skipped_visits", r.visit_auc.skipped},
                                       {"k", o.k},
                                       {"macro", o.macro},
                                       {"subset", subset_name(o.subset)},
                                       {"patients", idx.size()}});
  RunManifest man{"evaluate",
                  {{"subset", subset_name(o.subset)}, {"k", o.k}, {"macro", o.macro}},
                  0, data.files,
                  {o.out / "quantiles.csv", o.out / "code_auc.csv", o.out / "metrics.json"}};
  man.inputs.insert(man.inputs.begin(), o.checkpoint);
  man.threads = o.threads;
  man.wall_clock_seconds = clock.seconds();
  write_manifest(o.out, man);
  return r;
}

// --- compare --------------------------------------------------------------

eval::CompetencyReport cmd_compare(const CompareOptions& o) {
  Stopwatch clock;
  if (o.checkpoints.size() < 2) throw ConfigError("compare needs at least two checkpoints");
  if (!o.names.empty() && o.names.size() != o.checkpoints.size())
    throw ConfigError("give one name per checkpoint");
  std::vector<LoadedModel> models;
  for (const auto& p : o.checkpoints) models.push_back(load_model(p));
  for (std::size_t i = 1; i < models.size(); ++i) {
    eval::require_same_vocabulary(models[0].checkpoint.vocabulary, models[i].checkpoint.vocabulary);
    if (o.subset != Subset::All && models[i].split_seed != models[0].split_seed)
      throw ConfigError("checkpoints were trained with different split seeds; use --subset all");
    if (models[i].anchor != models[0].anchor)
      throw ConfigError("checkpoints were trained with different time anchors");
  }
  std::vector<std::string> names = o.names;
  if (names.empty()) {
    for (const auto& p : o.checkpoints) {
      std::string n = p.stem().string();
      if (n == "model" && p.has_parent_path()) n = p.parent_path().filename().string();
      std::string unique = n;
      for (int k = 2; std::count(names.begin(), names.end(), unique); ++k)
        unique = n + "#" + std::to_string(k);
      names.push_back(unique);
    }
  }
  const auto data = load_dataset(o.data, models[0].anchor);
  const auto& vocab = models[0].checkpoint.vocabulary;
  eval::require_same_vocabulary(vocab, data.vocabulary);
  const std::size_t C = vocab.size();
  const auto idx = subset_indices(o.subset, data.cohort.patients.size(), models[0].split_seed);
  std::vector<std::vector<eval::ScoredVisit>> scored;
  for (const auto& m : models) {
    auto pred = predictor_for(m.checkpoint);
    scored.push_back(eval::score_patients(*pred, data.cohort.patients, idx, C, o.threads));
  }
  auto report = eval::relative_competency(names, scored, o.p_threshold, o.auc_threshold);

  fs::create_directories(o.out);
  eval::write_competency_csv(o.out, report, vocab);
  const auto pair_path = o.out / "pairwise_delong.csv";
  {
    auto out = detail::open_output(pair_path);
    out << "code_id,code,model_a,model_b,auc_a,auc_b,z,p\n";
    std::vector<std::uint8_t> truth;
    std::vector<std::vector<double>> scores(models.size());
    for (const auto& cc : report.codes) {
      truth.clear();
      for (auto& s : scores) s.clear();
      for (std::size_t v = 0; v < scored[0].size(); ++v) {
        truth.push_back(scored[0][v].truth[cc.code]);
        for (std::size_t m = 0; m < models.size(); ++m) scores[m].push_back(scored[m][v].scores[cc.code]);
      }
      for (std::size_t a = 0; a < models.size(); ++a) {
        for (std::size_t b = a + 1; b < models.size(); ++b) {
          const auto d = eval::delong_test(truth, scores[a], scores[b]);
          out << cc.code << ',' << vocab.label(cc.code) << ',' << names[a] << ',' << names[b] << ','
              << detail::format_double(d.auc_a) << ',' << detail::format_double(d.auc_b) << ','
              << detail::format_double(d.z) << ',' << detail::format_double(d.p) << '\n';
        }
      }
    }
    detail::finish_output(out, pair_path);
  }
  RunManifest man{"compare",
                  {{"subset", subset_name(o.subset)},
                   {"p_threshold", o.p_threshold},
                   {"auc_threshold", o.auc_threshold},
                   {"names", names}},
                  0, o.checkpoints,
                  {o.out / "competency.csv", o.out / "assignments.csv", pair_path}};
  man.inputs.insert(man.inputs.end(), data.files.begin(), data.files.end());
  man.threads = o.threads;
  man.wall_clock_seconds = clock.seconds();
  write_manifest(o.out, man);
  return report;
}

// --- trajectory -----------------------------------------------------------

fs::path cmd_trajectory(const TrajectoryCommandOptions& o) {
  Stopwatch clock;
  const auto lm = load_model(o.checkpoint);
  const auto& ck = lm.checkpoint;
  if (!ck.config.is_ode())
    throw ConfigError("trajectories need an ICE-NODE checkpoint, got model '" +
                      std::string(model::to_string(ck.config.kind)) + "'");
  const auto data = load_dataset(o.data, lm.anchor);
  eval::require_same_vocabulary(ck.vocabulary, data.vocabulary);
  const auto& patients = data.cohort.patients;
  auto it = std::find_if(patients.begin(), patients.end(),
                         [&](const auto& p) { return p.subject_id == o.subject; });
  if (it == patients.end()) {
    std::string list;
    const std::size_t shown = std::min<std::size_t>(patients.size(), 50);
    for (std::size_t i = 0; i < shown; ++i) list += (i ? ", " : "") + patients[i].subject_id;
    if (shown < patients.size()) list += ", ... (" + std::to_string(patients.size() - shown) + " more)";
    throw DataError("unknown subject '" + o.subject + "'; available: " + list);
  }
  std::vector<ehr::CodeId> codes;
  if (o.codes.empty()) {
    std::set<ehr::CodeId> seen;
    for (const auto& a : it->admissions) seen.insert(a.codes.begin(), a.codes.end());
    codes.assign(seen.begin(), seen.end());
  } else {
    std::string unknown;
    for (const auto& label : o.codes) {
      if (auto id = ck.vocabulary.find(label)) {
        codes.push_back(*id);
      } else {
        unknown += (unknown.empty() ? "" : ", ") + label;
      }
    }
    if (!unknown.empty()) throw ConfigError("codes not in the vocabulary: " + unknown);
  }
  std::vector<std::string> labels;
  for (auto c : codes) labels.push_back(ck.vocabulary.label(c));

  model::Model m(ck.config, ck.vocabulary.size(), train::checkpoint_hierarchy(ck));
  const auto t = traj::sample_risk_trajectory(m, ck.params, *it, codes, labels,
                                              {o.resolution, o.until});
  fs::create_directories(o.out);
  const auto path = o.out / ("trajectory_" + file_safe(o.subject) + ".csv");
  traj::export_trajectory_csv(path, t);
  nlohmann::json cfg = {{"subject", o.subject}, {"codes", labels}, {"resolution", o.resolution}};
  cfg["until"] = o.until ? nlohmann::json(*o.until) : nlohmann::json(nullptr);
  RunManifest man{"trajectory", cfg, 0, {o.checkpoint}, {path}};
  man.inputs.insert(man.inputs.end(), data.files.begin(), data.files.end());
  man.wall_clock_seconds = clock.seconds();
  write_manifest(o.out, man);
  return path;
}

}  // namespace icenode::cli
