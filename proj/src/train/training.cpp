#include "icenode/training.hpp"

#include <cmath>
#include <exception>
#include <limits>

#include <spdlog/spdlog.h>

#include "icenode/error.hpp"
#include "icenode/evaluation.hpp"
#include "icenode/text_io.hpp"

#ifndef ICENODE_VERSION
#define ICENODE_VERSION "unknown"
#endif

namespace icenode::train {

void TrainConfig::validate() const {
  if (!(lr_dynamics >= 0.0) || !(lr_other >= 0.0) || !std::isfinite(lr_dynamics) ||
      !std::isfinite(lr_other))
    throw ConfigError("learning rates must be finite and >= 0");
  if (!(decay_rate > 0.0) || !std::isfinite(decay_rate))
    throw ConfigError("decay_rate must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (epochs == 0) throw ConfigError("epochs must be >= 1");
  if (eval_every == 0) throw ConfigError("eval_every must be >= 1");
  if (threads < 1) throw ConfigError("threads must be >= 1");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr_dynamics", c.lr_dynamics}, {"lr_other", c.lr_other},
          {"decay_rate", c.decay_rate},   {"batch_size", c.batch_size},
          {"epochs", c.epochs},           {"seed", c.seed},
          {"eval_every", c.eval_every}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  try {
    TrainConfig c;
    c.lr_dynamics = j.at("lr_dynamics").get<double>();
    c.lr_other = j.at("lr_other").get<double>();
    c.decay_rate = j.at("decay_rate").get<double>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.epochs = j.at("epochs").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.eval_every = j.at("eval_every").get<std::size_t>();
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed training config: ") + e.what());
  }
}

void adam_step(diff::ParameterSet& params, std::span<const double> grad, AdamState& s,
               double lr_dynamics, double lr_other) {
  if (grad.size() != params.size()) throw ConfigError("gradient size differs from parameters");
  for (const auto& spec : params.specs()) {
    for (std::size_t i = spec.offset; i < spec.offset + spec.size; ++i) {
      if (!std::isfinite(grad[i]))
        throw NumericalError("non-finite gradient in array '" + spec.name + "'");
    }
  }
  if (s.m.empty()) {
    s.m.assign(params.size(), 0.0);
    s.v.assign(params.size(), 0.0);
  }
  ++s.step;
  const double c1 = 1.0 - std::pow(kAdamBeta1, double(s.step));
  const double c2 = 1.0 - std::pow(kAdamBeta2, double(s.step));
  auto x = params.flat();
  for (const auto& spec : params.specs()) {
    const double lr = spec.group == diff::ParamGroup::Dynamics ? lr_dynamics : lr_other;
    for (std::size_t i = spec.offset; i < spec.offset + spec.size; ++i) {
      s.m[i] = kAdamBeta1 * s.m[i] + (1.0 - kAdamBeta1) * grad[i];
      s.v[i] = kAdamBeta2 * s.v[i] + (1.0 - kAdamBeta2) * grad[i] * grad[i];
      x[i] -= lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + kAdamEps);
    }
  }
}

double decayed_rate(double base, double decay_rate, std::size_t epoch, std::size_t epochs) {
  return base * std::pow(decay_rate, double(epoch) / double(epochs));
}

std::vector<std::size_t> sample_batch(const std::vector<std::size_t>& split,
                                      std::size_t batch_size, std::mt19937_64& rng) {
  if (split.empty()) throw DataError("cannot sample from an empty split");
  std::uniform_int_distribution<std::size_t> pick(0, split.size() - 1);
  std::vector<std::size_t> out(batch_size);
  for (auto& i : out) i = split[pick(rng)];
  return out;
}

std::size_t iterations_per_epoch(std::size_t n_train, std::size_t batch_size) {
  return (n_train + batch_size - 1) / batch_size;
}

namespace {

BatchGradient finish(const model::Model& model, const diff::ParameterSet& params,
                     std::vector<double> total, double loss_sum, std::size_t n) {
  const double inv = 1.0 / double(n);
  for (double& g : total) g *= inv;
  model.finish_gradient(params, total);
  total.resize(params.size());
  return {loss_sum * inv, std::move(total)};
}

}  // namespace

BatchGradient batch_gradient(const model::Model& model, const diff::ParameterSet& params,
                             const std::vector<ehr::PatientRecord>& patients,
                             const std::vector<std::size_t>& batch, int threads) {
  if (batch.empty()) throw DataError("empty batch");
  const auto ctx = model.prepare(params);
  const std::size_t G = model.grad_size(params);
  const std::size_t chunks = (batch.size() + kReduceChunk - 1) / kReduceChunk;
  std::vector<std::vector<double>> partial(chunks);
  std::vector<double> losses(chunks, 0.0);
  std::vector<std::exception_ptr> errors(chunks);
#pragma omp parallel for schedule(dynamic) num_threads(std::max(threads, 1))
  for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(chunks); ++c) {
    try {
      partial[c].assign(G, 0.0);
      const std::size_t end = std::min(batch.size(), (c + 1) * kReduceChunk);
      for (std::size_t i = c * kReduceChunk; i < end; ++i)
        losses[c] += model.patient_forward(params, ctx, patients.at(batch[i]), partial[c]).loss;
    } catch (...) {
      errors[c] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  std::vector<double> total(G, 0.0);
  double loss = 0.0;
  for (std::size_t c = 0; c < chunks; ++c) {
    loss += losses[c];
    for (std::size_t i = 0; i < G; ++i) total[i] += partial[c][i];
  }
  return finish(model, params, std::move(total), loss, batch.size());
}

BatchGradient batch_gradient_serial(const model::Model& model, const diff::ParameterSet& params,
                                    const std::vector<ehr::PatientRecord>& patients,
                                    const std::vector<std::size_t>& batch) {
  if (batch.empty()) throw DataError("empty batch");
  const auto ctx = model.prepare(params);
  std::vector<double> total(model.grad_size(params), 0.0);
  double loss = 0.0;
  for (std::size_t i : batch) loss += model.patient_forward(params, ctx, patients.at(i), total).loss;
  return finish(model, params, std::move(total), loss, batch.size());
}

namespace {

class BoundModel final : public model::Predictor {
 public:
  BoundModel(const model::Model& m, const diff::ParameterSet& p)
      : model_(m), params_(p), ctx_(m.prepare(p)) {}
  model::PatientPredictions predict(const ehr::PatientRecord& patient) const override {
    return model_.patient_forward(params_, ctx_, patient, {}, false).predictions;
  }

 private:
  const model::Model& model_;
  const diff::ParameterSet& params_;
  model::BatchContext ctx_;
};

}  // namespace

TrainResult train_loop(const model::Model& model, diff::ParameterSet params,
                       const std::vector<ehr::PatientRecord>& patients,
                       const ehr::DatasetSplit& split, const TrainConfig& config) {
  config.validate();
  if (split.train.empty()) throw DataError("training split is empty");
  if (split.valid.empty()) throw DataError("validation split is empty");
  const std::size_t per_epoch = iterations_per_epoch(split.train.size(), config.batch_size);
  const std::size_t total = config.epochs * per_epoch;
  std::mt19937_64 rng(config.seed);
  AdamState adam;
  TrainResult result;
  auto& h = result.history;
  h.iterations = total;
  h.best_auc = -std::numeric_limits<double>::infinity();
  result.best = params;

  for (std::size_t it = 0; it < total; ++it) {
    const std::size_t epoch = it / per_epoch;
    const auto batch = sample_batch(split.train, config.batch_size, rng);
    try {
      auto bg = batch_gradient(model, params, patients, batch, config.threads);
      adam_step(params, bg.grad, adam,
                decayed_rate(config.lr_dynamics, config.decay_rate, epoch, config.epochs),
                decayed_rate(config.lr_other, config.decay_rate, epoch, config.epochs));
      h.loss.push_back(bg.loss);
    } catch (const ode::SolverDivergence& e) {
      spdlog::warn("iteration {}: skipping batch after solver divergence: {}", it + 1, e.what());
      h.loss.push_back(std::numeric_limits<double>::quiet_NaN());
      ++h.skipped_batches;
    }
    if ((it + 1) % config.eval_every != 0 && it + 1 != total) continue;
    try {
      BoundModel bound(model, params);
      const auto visits = eval::score_patients(bound, patients, split.valid, model.n_codes(),
                                               config.threads);
      const double auc = eval::visit_auc(visits).mean;
      h.eval_iterations.push_back(it + 1);
      h.valid_auc.push_back(auc);
      spdlog::info("iteration {}/{}: loss {:.5f}, validation visit-AUC {:.5f}", it + 1, total,
                   h.loss.back(), auc);
      if (auc > h.best_auc) {
        h.best_auc = auc;
        h.best_iteration = it + 1;
        result.best = params;
      }
    } catch (const ode::SolverDivergence& e) {
      spdlog::warn("iteration {}: validation skipped after solver divergence: {}", it + 1,
                   e.what());
    }
  }
  result.last = std::move(params);
  return result;
}

void write_history_csv(const std::filesystem::path& dir, const TrainHistory& h) {
  auto path = dir / "loss_trace.csv";
  auto out = detail::open_output(path);
  out << "iteration,loss\n";
  for (std::size_t i = 0; i < h.loss.size(); ++i)
    out << i + 1 << ',' << detail::format_double(h.loss[i]) << '\n';
  detail::finish_output(out, path);
  path = dir / "valid_auc.csv";
  auto va = detail::open_output(path);
  va << "iteration,visit_auc\n";
  for (std::size_t i = 0; i < h.valid_auc.size(); ++i)
    va << h.eval_iterations[i] << ',' << detail::format_double(h.valid_auc[i]) << '\n';
  detail::finish_output(va, path);
}

std::string artifact_version() { return ICENODE_VERSION; }

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  nlohmann::json meta = {{"format", kCheckpointFormat},
                         {"version", artifact_version()},
                         {"model", model::to_json(ck.config)},
                         {"vocabulary", ck.vocabulary.labels()},
                         {"ontology", ck.ontology},
                         {"metadata", ck.metadata}};
  diff::save_archive(path, ck.params, meta);
}

std::shared_ptr<const ehr::CodeHierarchy> checkpoint_hierarchy(const Checkpoint& ck) {
  if (ck.config.embedding != emb::EmbeddingKind::Gram || ck.config.kind == model::ModelKind::LogReg)
    return nullptr;
  if (ck.ontology.empty()) throw ConfigError("GRAM checkpoint carries no ontology");
  return std::make_shared<const ehr::CodeHierarchy>(
      ehr::build_hierarchy(ehr::Ontology(ck.ontology), ck.vocabulary));
}

void check_layout(const Checkpoint& ck) {
  const std::size_t C = ck.vocabulary.size();
  diff::ParameterSet expected;
  if (ck.config.kind == model::ModelKind::LogReg) {
    expected = model::LogReg(ck.config, C).make_params();
  } else {
    expected = model::Model(ck.config, C, checkpoint_hierarchy(ck)).make_params(0);
  }
  if (!ck.params.same_layout(expected)) {
    std::string detail;
    for (const auto& s : expected.specs()) {
      if (!ck.params.contains(s.name)) {
        detail = "missing array '" + s.name + "'";
        break;
      }
      if (ck.params.spec(s.name).shape != s.shape) {
        detail = "array '" + s.name + "' has the wrong shape for C = " + std::to_string(C);
        break;
      }
    }
    if (detail.empty()) detail = "array list differs";
    throw ConfigError("checkpoint parameters do not match its configuration: " + detail);
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  auto archive = diff::load_archive(path);
  const auto& meta = archive.metadata;
  Checkpoint ck;
  try {
    const int format = meta.at("format").get<int>();
    if (format != kCheckpointFormat)
      throw ConfigError("checkpoint format " + std::to_string(format) + " is not supported (expected " +
                        std::to_string(kCheckpointFormat) + ")");
    ck.config = model::model_config_from_json(meta.at("model"));
    ck.vocabulary = ehr::Vocabulary(meta.at("vocabulary").get<std::vector<std::string>>());
    ck.ontology = meta.at("ontology").get<std::vector<std::pair<std::string, std::string>>>();
    ck.metadata = meta.at("metadata");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": malformed checkpoint manifest: " + e.what());
  }
  ck.params = std::move(archive.params);
  check_layout(ck);
  return ck;
}

}  // namespace icenode::train
