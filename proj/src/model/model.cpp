#include "icenode/model.hpp"

#include <algorithm>
#include <cmath>

#include <spdlog/spdlog.h>

#include "icenode/error.hpp"
#include "init.hpp"

namespace icenode::model {

using diff::GraphBuilder;
using diff::NodeId;
using diff::ParamGroup;

ModelKind parse_model_kind(std::string_view text) {
  if (text == "icenode") return ModelKind::IceNode;
  if (text == "icenode_uniform") return ModelKind::IceNodeUniform;
  if (text == "gru") return ModelKind::Gru;
  if (text == "logreg") return ModelKind::LogReg;
  throw ConfigError("unknown model '" + std::string(text) +
                    "' (expected icenode, icenode_uniform, gru or logreg)");
}

DynamicsKind parse_dynamics(std::string_view text) {
  if (text == "mlp2") return DynamicsKind::Mlp2;
  if (text == "mlp3") return DynamicsKind::Mlp3;
  if (text == "gru") return DynamicsKind::Gru;
  throw ConfigError("unknown dynamics '" + std::string(text) + "' (expected mlp2, mlp3 or gru)");
}

GradientMethod parse_gradient_method(std::string_view text) {
  if (text == "adjoint") return GradientMethod::Adjoint;
  if (text == "discrete") return GradientMethod::Discrete;
  throw ConfigError("unknown gradient method '" + std::string(text) +
                    "' (expected adjoint or discrete)");
}

std::string_view to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::IceNode: return "icenode";
    case ModelKind::IceNodeUniform: return "icenode_uniform";
    case ModelKind::Gru: return "gru";
    case ModelKind::LogReg: return "logreg";
  }
  return "?";
}

std::string_view to_string(DynamicsKind kind) {
  switch (kind) {
    case DynamicsKind::Mlp2: return "mlp2";
    case DynamicsKind::Mlp3: return "mlp3";
    case DynamicsKind::Gru: return "gru";
  }
  return "?";
}

std::string_view to_string(GradientMethod method) {
  return method == GradientMethod::Adjoint ? "adjoint" : "discrete";
}

void ModelConfig::validate() const {
  if (d_e == 0) throw ConfigError("d_e must be positive");
  if (is_ode() && d_m == 0) throw ConfigError("d_m must be positive");
  if (decoder_depth != 2 && decoder_depth != 3) throw ConfigError("decoder_depth must be 2 or 3");
  if (reg_order < 1 || reg_order > 3) throw ConfigError("reg_order must be 1, 2 or 3");
  if (!(reg_weight >= 0.0) || !std::isfinite(reg_weight))
    throw ConfigError("reg_weight must be finite and >= 0");
  if (embedding == emb::EmbeddingKind::Gram && attention_size == 0)
    throw ConfigError("attention_size must be >= 1");
  if (!(logreg_l1 >= 0.0) || !(logreg_l2 >= 0.0))
    throw ConfigError("logreg_l1 and logreg_l2 must be >= 0");
  if (logreg_max_iter == 0) throw ConfigError("logreg_max_iter must be >= 1");
  solver.validate();
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"model", to_string(c.kind)},
          {"d_e", c.d_e},
          {"d_m", c.d_m},
          {"dynamics", to_string(c.dynamics)},
          {"decoder_depth", c.decoder_depth},
          {"embedding", emb::to_string(c.embedding)},
          {"attention", emb::to_string(c.attention)},
          {"attention_size", c.attention_size},
          {"reg_order", c.reg_order},
          {"reg_weight", c.reg_weight},
          {"keep_integrated_embedding", c.keep_integrated_embedding},
          {"gradient", to_string(c.gradient)},
          {"rtol", c.solver.rtol},
          {"atol", c.solver.atol},
          {"max_steps", c.solver.max_steps},
          {"logreg_l1", c.logreg_l1},
          {"logreg_l2", c.logreg_l2},
          {"logreg_max_iter", c.logreg_max_iter}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    c.kind = parse_model_kind(j.at("model").get<std::string>());
    c.d_e = j.at("d_e").get<std::size_t>();
    c.d_m = j.at("d_m").get<std::size_t>();
    c.dynamics = parse_dynamics(j.at("dynamics").get<std::string>());
    c.decoder_depth = j.at("decoder_depth").get<std::size_t>();
    c.embedding = emb::parse_embedding_kind(j.at("embedding").get<std::string>());
    c.attention = emb::parse_attention(j.at("attention").get<std::string>());
    c.attention_size = j.at("attention_size").get<std::size_t>();
    c.reg_order = j.at("reg_order").get<int>();
    c.reg_weight = j.at("reg_weight").get<double>();
    c.keep_integrated_embedding = j.at("keep_integrated_embedding").get<bool>();
    c.gradient = parse_gradient_method(j.at("gradient").get<std::string>());
    c.solver.rtol = j.at("rtol").get<double>();
    c.solver.atol = j.at("atol").get<double>();
    c.solver.max_steps = j.at("max_steps").get<std::size_t>();
    c.logreg_l1 = j.at("logreg_l1").get<double>();
    c.logreg_l2 = j.at("logreg_l2").get<double>();
    c.logreg_max_iter = j.at("logreg_max_iter").get<std::size_t>();
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  }
}

double binary_cross_entropy(std::span<const double> truth, std::span<const double> pred) {
  double s = 0.0;
  for (std::size_t c = 0; c < pred.size(); ++c) {
    const double p = std::clamp(pred[c], kProbFloor, 1.0 - kProbFloor);
    s -= truth[c] > 0.5 ? std::log(p) : std::log1p(-p);
  }
  return s / static_cast<double>(pred.size());
}

namespace {

// Standard GRU cell with gates ordered (update z, reset r, candidate a);
// the reset gate multiplies the state before its recurrent projection.
NodeId gru_cell(GraphBuilder& b, const std::string& prefix, NodeId x, NodeId h, std::size_t n) {
  const NodeId wi = b.param(prefix + ".Wi", 3 * n * b.size(x));
  const NodeId wh = b.param(prefix + ".Wh", 3 * n * n);
  const NodeId bias = b.param(prefix + ".b", 3 * n);
  const NodeId gx = b.matvec(wi, x);
  const NodeId zr_h = b.matvec(b.slice(wh, 0, 2 * n * n), h);
  const NodeId zr = b.sigmoid(b.add(b.add(b.slice(gx, 0, 2 * n), zr_h), b.slice(bias, 0, 2 * n)));
  const NodeId z = b.slice(zr, 0, n);
  const NodeId r = b.slice(zr, n, n);
  const NodeId a_h = b.matvec(b.slice(wh, 2 * n * n, n * n), b.mul(r, h));
  const NodeId a = b.tanh(b.add(b.add(b.slice(gx, 2 * n, n), a_h), b.slice(bias, 2 * n, n)));
  return b.add(h, b.mul(z, b.sub(a, h)));  // (1 - z) h + z a
}

diff::Program build_field(const ModelConfig& c) {
  const std::size_t d = c.d_h();
  GraphBuilder b(d);
  NodeId h = b.input();
  if (c.dynamics == DynamicsKind::Gru) {
    const NodeId z = b.sigmoid(b.affine("dyn.Wz", "dyn.bz", d, h));
    const NodeId r = b.sigmoid(b.affine("dyn.Wr", "dyn.br", d, h));
    const NodeId cand = b.tanh(b.affine("dyn.Wc", "dyn.bc", d, b.mul(r, h)));
    return std::move(b).finish(b.mul(b.scale_shift(z, -1.0, 1.0), b.sub(cand, h)));
  }
  const int layers = c.dynamics == DynamicsKind::Mlp2 ? 2 : 3;
  for (int l = 1; l <= layers; ++l) h = b.tanh(b.linear("dyn.W" + std::to_string(l), d, h));
  return std::move(b).finish(h);
}

diff::Program build_decoder(const ModelConfig& c, std::size_t n_codes) {
  GraphBuilder b(c.d_e);
  NodeId x = b.input();
  const std::size_t depth = c.decoder_depth;
  for (std::size_t l = 1; l < depth; ++l) {
    const auto s = std::to_string(l);
    x = b.leaky_relu(b.affine("dec.W" + s, "dec.b" + s, c.d_e, x), kLeakySlope);
  }
  const auto s = std::to_string(depth);
  return std::move(b).finish(b.sigmoid(b.affine("dec.W" + s, "dec.b" + s, n_codes, x)));
}

// ICE-NODE: input [h_m; g] -> h_m(t+). GRU baseline: input [g; h] -> h.
diff::Program build_update(const ModelConfig& c) {
  if (c.kind == ModelKind::Gru) {
    GraphBuilder b(2 * c.d_e);
    const NodeId x = b.slice(b.input(), 0, c.d_e);
    const NodeId h = b.slice(b.input(), c.d_e, c.d_e);
    return std::move(b).finish(gru_cell(b, "gru", x, h, c.d_e));
  }
  GraphBuilder b(c.d_h());
  const NodeId u = b.affine("upd.W", "upd.b", c.d_e, b.input());
  const NodeId hm = b.slice(b.input(), 0, c.d_m);
  return std::move(b).finish(gru_cell(b, "upd.gru", u, hm, c.d_m));
}

void add_gru_params(diff::ParameterSet& p, const std::string& prefix, std::size_t in,
                    std::size_t n) {
  p.add(prefix + ".Wi", ParamGroup::Other, {3 * n, in});
  p.add(prefix + ".Wh", ParamGroup::Other, {3 * n, n});
  p.add(prefix + ".b", ParamGroup::Other, {3 * n});
}

void init_gru_params(diff::ParameterSet& p, const std::string& prefix, std::size_t in,
                     std::size_t n, std::mt19937_64& rng) {
  detail::truncated_normal(p.values(prefix + ".Wi"), in, rng);
  detail::truncated_normal(p.values(prefix + ".Wh"), n, rng);
}

std::vector<double> truth_bits(const std::vector<ehr::CodeId>& codes, std::size_t n_codes) {
  std::vector<double> v(n_codes, 0.0);
  for (auto c : codes) v[c] = 1.0;
  return v;
}

std::string interval_label(const ehr::PatientRecord& p, std::size_t k) {
  return "patient '" + p.subject_id + "', interval " + std::to_string(k) + " [" +
         std::to_string(p.admissions[k - 1].time) + ", " + std::to_string(p.admissions[k].time) +
         "] weeks";
}

template <class F>
auto with_context(const std::string& where, F&& f) {
  try {
    return f();
  } catch (const ode::SolverDivergence& e) {
    throw ode::SolverDivergence(std::string(e.what()) + " (" + where + ")", e.time(), e.state());
  }
}

void add_to(std::span<double> dst, std::span<const double> src) {
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

}  // namespace

Model::Model(ModelConfig config, std::size_t n_codes,
             std::shared_ptr<const ehr::CodeHierarchy> hierarchy)
    : config_(std::move(config)),
      n_codes_(n_codes),
      embedding_((config_.validate(), config_.embedding_config()), n_codes, std::move(hierarchy)) {
  if (config_.kind == ModelKind::LogReg) throw ConfigError("logreg is not a neural model");
  if (config_.is_ode()) field_ = std::make_shared<const ode::VectorField>(build_field(config_));
  decoder_ = std::make_shared<const diff::Program>(build_decoder(config_, n_codes_));
  update_ = std::make_shared<const diff::Program>(build_update(config_));
}

diff::ParameterSet Model::make_params(std::uint64_t seed) const {
  const std::size_t d = config_.d_h(), de = config_.d_e, dm = config_.d_m;
  diff::ParameterSet p;
  if (config_.is_ode()) {
    if (config_.dynamics == DynamicsKind::Gru) {
      for (const char* g : {"z", "r", "c"}) {
        p.add(std::string("dyn.W") + g, ParamGroup::Dynamics, {d, d});
        p.add(std::string("dyn.b") + g, ParamGroup::Dynamics, {d});
      }
    } else {
      const int layers = config_.dynamics == DynamicsKind::Mlp2 ? 2 : 3;
      for (int l = 1; l <= layers; ++l)
        p.add("dyn.W" + std::to_string(l), ParamGroup::Dynamics, {d, d});
    }
  }
  embedding_.declare(p);
  for (std::size_t l = 1; l <= config_.decoder_depth; ++l) {
    const std::size_t rows = l == config_.decoder_depth ? n_codes_ : de;
    p.add("dec.W" + std::to_string(l), ParamGroup::Other, {rows, de});
    p.add("dec.b" + std::to_string(l), ParamGroup::Other, {rows});
  }
  if (config_.is_ode()) {
    p.add("upd.W", ParamGroup::Other, {de, dm + de});
    p.add("upd.b", ParamGroup::Other, {de});
    add_gru_params(p, "upd.gru", de, dm);
  } else {
    add_gru_params(p, "gru", de, de);
  }

  std::mt19937_64 rng(seed);
  for (const auto& s : p.specs()) {
    if (s.group == ParamGroup::Dynamics && s.shape.size() == 2)
      detail::truncated_normal(p.values(s.name), s.shape[1], rng);
  }
  embedding_.initialize(p, rng);
  for (std::size_t l = 1; l <= config_.decoder_depth; ++l)
    detail::truncated_normal(p.values("dec.W" + std::to_string(l)), de, rng);
  if (config_.is_ode()) {
    detail::truncated_normal(p.values("upd.W"), dm + de, rng);
    init_gru_params(p, "upd.gru", de, dm, rng);
  } else {
    init_gru_params(p, "gru", de, de, rng);
  }
  return p;
}

std::size_t Model::grad_size(const diff::ParameterSet& params) const {
  return params.size() + embedding_.table_size();
}

BatchContext Model::prepare(const diff::ParameterSet& params) const {
  BatchContext ctx;
  ctx.table.resize(embedding_.table_size());
  embedding_.prepare(params, ctx.table);
  return ctx;
}

void Model::finish_gradient(const diff::ParameterSet& params, std::span<double> grad) const {
  const std::size_t P = params.size();
  embedding_.table_backward(params, grad.subspan(P), grad.subspan(0, P));
}

std::vector<double> Model::embed(const diff::ParameterSet& params, const BatchContext& ctx,
                                 const std::vector<ehr::CodeId>& codes) const {
  std::vector<double> g(config_.d_e);
  embedding_.embed(params, ctx.table, codes, g);
  return g;
}

std::vector<double> Model::decode(const diff::ParameterSet& params,
                                  std::span<const double> h_e) const {
  diff::Executor ex(*decoder_, params);
  auto out = ex.forward(h_e);
  return {out.begin(), out.end()};
}

std::vector<double> Model::update_memory(const diff::ParameterSet& params,
                                         std::span<const double> h_m,
                                         std::span<const double> g) const {
  if (!config_.is_ode()) throw ConfigError("update_memory applies to ODE models only");
  std::vector<double> x(h_m.begin(), h_m.end());
  x.insert(x.end(), g.begin(), g.end());
  diff::Executor ex(*update_, params);
  auto out = ex.forward(x);
  return {out.begin(), out.end()};
}

std::pair<double, double> Model::solve_interval(double t0, double t1) const {
  if (!config_.uniform_time()) return {t0, t1};
  return {0.0, t1 > t0 ? 1.0 : 0.0};
}

ode::TrajectorySolution Model::integrate(const diff::ParameterSet& params,
                                         std::span<const double> h, double t0, double t1,
                                         const ode::SolveOptions& options) const {
  if (!field_) throw ConfigError("integrate applies to ODE models only");
  if (t1 < t0) throw ConfigError("integration interval must satisfy t_next >= t_prev");
  const auto [a, b] = solve_interval(t0, t1);
  return ode::ivp_solve(*field_, params, h, a, b, config_.solver, options);
}

PatientLoss Model::patient_forward(const diff::ParameterSet& params, const BatchContext& ctx,
                                   const ehr::PatientRecord& patient, std::span<double> grad,
                                   bool with_regularization) const {
  const auto& adm = patient.admissions;
  if (adm.size() < 2)
    throw DataError("patient '" + patient.subject_id + "' has fewer than two admissions");
  const bool want_grad = !grad.empty();
  if (want_grad && grad.size() != grad_size(params))
    throw ConfigError("gradient buffer has the wrong size");
  const std::size_t n = adm.size() - 1, de = config_.d_e, dm = config_.d_m;
  const double inv_n = 1.0 / static_cast<double>(n);

  std::vector<std::vector<double>> g(adm.size());
  for (std::size_t k = 0; k < adm.size(); ++k) g[k] = embed(params, ctx, adm[k].codes);

  diff::Executor dec(*decoder_, params);
  diff::Executor upd(*update_, params);
  PatientLoss out;
  out.predictions.scores.resize(n);
  std::vector<std::vector<double>> truth(n);
  // Per-interval records for the reverse pass.
  std::vector<ode::TrajectorySolution> sols;
  std::vector<std::vector<double>> cell_in(n);  // update or GRU cell inputs

  const bool ode_model = config_.is_ode();
  std::vector<double> h;
  if (ode_model) {
    h.assign(dm, 0.0);
    h.insert(h.end(), g[0].begin(), g[0].end());
  } else {
    h.assign(de, 0.0);
  }
  const bool use_reg = ode_model && with_regularization;
  ode::SolveOptions opts;
  opts.dense = false;
  opts.reg_order = use_reg ? config_.reg_order : 0;
  opts.record_stages = want_grad && config_.gradient == GradientMethod::Discrete;

  for (std::size_t k = 1; k <= n; ++k) {
    std::span<const double> h_e;
    double reg = 0.0;
    if (ode_model) {
      auto sol = with_context(interval_label(patient, k), [&] {
        return integrate(params, h, adm[k - 1].time, adm[k].time, opts);
      });
      reg = sol.regularization;
      sols.push_back(std::move(sol));
      h_e = std::span<const double>(sols.back().final_state).subspan(dm, de);
    } else {
      auto& x = cell_in[k - 1];
      x = g[k - 1];
      x.insert(x.end(), h.begin(), h.end());
      auto y = upd.forward(x);
      h.assign(y.begin(), y.end());
      h_e = h;
    }
    auto y = dec.forward(h_e);
    auto& pred = out.predictions.scores[k - 1];
    pred.assign(y.begin(), y.end());
    truth[k - 1] = truth_bits(adm[k].codes, n_codes_);
    const double bce = binary_cross_entropy(truth[k - 1], pred);
    out.bce += bce * inv_n;
    out.regularization += reg * inv_n;

    if (ode_model && k < n) {
      const auto& hm = sols.back().final_state;
      auto& x = cell_in[k - 1];
      x.assign(hm.begin(), hm.begin() + static_cast<std::ptrdiff_t>(dm));
      x.insert(x.end(), g[k].begin(), g[k].end());
      auto y2 = upd.forward(x);
      h.assign(y2.begin(), y2.end());
      if (config_.keep_integrated_embedding) {
        h.insert(h.end(), hm.begin() + static_cast<std::ptrdiff_t>(dm), hm.end());
      } else {
        h.insert(h.end(), g[k].begin(), g[k].end());
      }
    }
  }
  out.loss = out.bce + (use_reg ? config_.reg_weight * out.regularization : 0.0);
  if (!want_grad) return out;

  // Reverse pass.
  const std::size_t P = params.size();
  const diff::ParamGradView pview{grad.subspan(0, P), 0};
  std::vector<std::vector<double>> gbar(adm.size(), std::vector<double>(de, 0.0));
  const std::size_t dh = ode_model ? config_.d_h() : de;
  std::vector<double> hbar_next(dh, 0.0);  // cotangent of the state carried into interval k+1
  std::vector<double> ybar(n_codes_);
  for (std::size_t k = n; k >= 1; --k) {
    const auto& pred = out.predictions.scores[k - 1];
    const auto& v = truth[k - 1];
    for (std::size_t c = 0; c < n_codes_; ++c) {
      const double p = pred[c];
      const bool clamped = p < kProbFloor || p > 1.0 - kProbFloor;
      ybar[c] = clamped ? 0.0
                        : inv_n / static_cast<double>(n_codes_) *
                              (v[c] > 0.5 ? -1.0 / p : 1.0 / (1.0 - p));
    }
    if (ode_model) {
      const auto& sol = sols[k - 1];
      std::vector<double> hbar(dh, 0.0);  // cotangent of h(t_k^-)
      if (k < n) {
        upd.forward(cell_in[k - 1]);
        std::vector<double> xbar(dh, 0.0);
        upd.backward(std::span<const double>(hbar_next).subspan(0, dm), xbar, pview);
        for (std::size_t i = 0; i < dm; ++i) hbar[i] += xbar[i];
        for (std::size_t i = 0; i < de; ++i) {
          gbar[k][i] += xbar[dm + i];
          if (config_.keep_integrated_embedding) {
            hbar[dm + i] += hbar_next[dm + i];
          } else {
            gbar[k][i] += hbar_next[dm + i];
          }
        }
      }
      const auto h_e = std::span<const double>(sol.final_state).subspan(dm, de);
      dec.forward(h_e);
      dec.backward(ybar, std::span<double>(hbar).subspan(dm, de), pview);

      const double w = use_reg ? config_.reg_weight * inv_n : 0.0;
      auto res = with_context(interval_label(patient, k), [&] {
        return config_.gradient == GradientMethod::Adjoint
                   ? ode::adjoint_gradient(*field_, params, sol, hbar, w, config_.reg_order,
                                           config_.solver)
                   : ode::discrete_gradient(*field_, params, sol, hbar, w, config_.reg_order);
      });
      add_to(grad.subspan(res.param_begin, res.param_grad.size()), res.param_grad);
      hbar_next = std::move(res.state_grad);
    } else {
      // State after the cell at step k feeds the decoder and the next cell.
      std::vector<double> hbar = hbar_next;
      upd.forward(cell_in[k - 1]);
      const auto h_k = upd.output();
      std::vector<double> hk(h_k.begin(), h_k.end());
      dec.forward(hk);
      dec.backward(ybar, hbar, pview);
      upd.forward(cell_in[k - 1]);
      std::vector<double> xbar(2 * de, 0.0);
      upd.backward(hbar, xbar, pview);
      for (std::size_t i = 0; i < de; ++i) gbar[k - 1][i] += xbar[i];
      hbar_next.assign(xbar.begin() + static_cast<std::ptrdiff_t>(de), xbar.end());
    }
  }
  if (ode_model) add_to(gbar[0], std::span<const double>(hbar_next).subspan(dm, de));

  for (std::size_t k = 0; k < adm.size(); ++k) {
    embedding_.embed_backward(params, adm[k].codes, g[k], gbar[k], grad.subspan(0, P),
                              grad.subspan(P));
  }
  return out;
}

std::vector<double> Model::predict_future(const diff::ParameterSet& params,
                                          const BatchContext& ctx,
                                          const ehr::PatientRecord& patient, double t_f) const {
  if (!config_.is_ode()) throw ConfigError("predict_future applies to ODE models only");
  const auto& adm = patient.admissions;
  if (adm.empty()) throw DataError("patient '" + patient.subject_id + "' has no admissions");
  if (t_f < adm.back().time) throw ConfigError("t_f must not precede the last admission");
  const std::size_t dm = config_.d_m;
  ode::SolveOptions opts;
  opts.dense = false;
  std::vector<double> h(dm, 0.0);
  auto g0 = embed(params, ctx, adm[0].codes);
  h.insert(h.end(), g0.begin(), g0.end());
  for (std::size_t k = 1; k < adm.size(); ++k) {
    auto sol = with_context(interval_label(patient, k), [&] {
      return integrate(params, h, adm[k - 1].time, adm[k].time, opts);
    });
    const auto& hm = sol.final_state;
    auto g = embed(params, ctx, adm[k].codes);
    h = update_memory(params, std::span<const double>(hm).subspan(0, dm), g);
    if (config_.keep_integrated_embedding) {
      h.insert(h.end(), hm.begin() + static_cast<std::ptrdiff_t>(dm), hm.end());
    } else {
      h.insert(h.end(), g.begin(), g.end());
    }
  }
  auto sol = integrate(params, h, adm.back().time, t_f, opts);
  return decode(params, std::span<const double>(sol.final_state).subspan(dm));
}

// ---------------------------------------------------------------------------

LogReg::LogReg(ModelConfig config, std::size_t n_codes)
    : config_(std::move(config)), n_codes_(n_codes) {
  config_.validate();
  if (n_codes_ == 0) throw ConfigError("logreg needs a non-empty vocabulary");
}

diff::ParameterSet LogReg::make_params() const {
  diff::ParameterSet p;
  p.add("logreg.W", ParamGroup::Other, {n_codes_, n_codes_});
  p.add("logreg.b", ParamGroup::Other, {n_codes_});
  return p;
}

namespace {

double sigmoid(double z) {
  return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

// log(1 + exp(z)) without overflow.
double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

}  // namespace

LogReg::FitReport LogReg::fit(diff::ParameterSet& params,
                              const std::vector<ehr::PatientRecord>& patients,
                              const std::vector<std::size_t>& subset) const {
  const std::size_t C = n_codes_;
  // Sparse design: active history codes per sample and next-visit labels.
  std::vector<std::vector<ehr::CodeId>> xs;
  std::vector<std::vector<std::uint8_t>> ys;
  for (std::size_t i : subset) {
    const auto& adm = patients.at(i).admissions;
    std::vector<std::uint8_t> seen(C, 0);
    for (std::size_t k = 0; k + 1 < adm.size(); ++k) {
      for (auto c : adm[k].codes) seen[c] = 1;
      xs.push_back(ehr::decode_multi_hot(seen));
      ys.push_back(ehr::encode_multi_hot(adm[k + 1].codes, C));
    }
  }
  FitReport report;
  if (xs.empty()) throw DataError("logreg: no training visits");
  const double N = static_cast<double>(xs.size());
  std::size_t max_active = 0;
  for (const auto& x : xs) max_active = std::max(max_active, x.size());
  // Lipschitz bound of the mean logistic loss per code, bias included.
  const double step = 1.0 / (0.25 * static_cast<double>(max_active + 1));
  const double l1 = config_.logreg_l1, l2 = config_.logreg_l2;

  auto W = params.values("logreg.W");
  auto b = params.values("logreg.b");
  // theta = [W; b], flat.
  const std::size_t nw = C * C;
  std::vector<double> x(W.begin(), W.end());
  x.insert(x.end(), b.begin(), b.end());
  auto objective = [&](const std::vector<double>& v) {
    double loss = 0.0;
    for (std::size_t s = 0; s < xs.size(); ++s) {
      for (std::size_t c = 0; c < C; ++c) {
        double zc = v[nw + c];
        for (auto j : xs[s]) zc += v[c * C + j];
        loss += softplus(zc) - (ys[s][c] ? zc : 0.0);
      }
    }
    double pen = 0.0;
    for (std::size_t i = 0; i < nw; ++i) pen += l1 * std::abs(v[i]) + 0.5 * l2 * v[i] * v[i];
    return loss / N + pen;
  };
  auto gradient = [&](const std::vector<double>& v, std::vector<double>& g) {
    std::fill(g.begin(), g.end(), 0.0);
    for (std::size_t s = 0; s < xs.size(); ++s) {
      for (std::size_t c = 0; c < C; ++c) {
        double zc = v[nw + c];
        for (auto j : xs[s]) zc += v[c * C + j];
        const double r = (sigmoid(zc) - ys[s][c]) / N;
        g[nw + c] += r;
        for (auto j : xs[s]) g[c * C + j] += r;
      }
    }
  };

  // FISTA with a function-value restart.
  std::vector<double> prev = x, y = x, g(x.size()), next(x.size());
  double f = objective(x), t = 1.0;
  std::vector<double> best_x = x;
  double best = f;
  for (report.iterations = 1; report.iterations <= config_.logreg_max_iter; ++report.iterations) {
    const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    const double mom = (t - 1.0) / t_next;
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] + mom * (x[i] - prev[i]);
    gradient(y, g);
    double change = 0.0, scale = 1.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double u = y[i] - step * g[i];
      next[i] = i < nw ? std::copysign(std::max(std::abs(u) - step * l1, 0.0), u) /
                             (1.0 + step * l2)
                       : u;
      change = std::max(change, std::abs(next[i] - x[i]));
      scale = std::max(scale, std::abs(next[i]));
    }
    const double f_next = objective(next);
    prev.swap(x);
    x.swap(next);
    t = f_next > f ? 1.0 : t_next;
    f = f_next;
    if (f < best) {
      best = f;
      best_x = x;
    }
    if (change <= 1e-8 * scale) {
      report.converged = true;
      break;
    }
  }
  if (!report.converged) {
    report.iterations = config_.logreg_max_iter;
    spdlog::warn("logreg did not converge in {} iterations; returning the best iterate",
                 config_.logreg_max_iter);
  }
  std::copy(best_x.begin(), best_x.begin() + static_cast<std::ptrdiff_t>(nw), W.begin());
  std::copy(best_x.begin() + static_cast<std::ptrdiff_t>(nw), best_x.end(), b.begin());
  report.objective = best;
  return report;
}

std::vector<double> LogReg::forward(const diff::ParameterSet& params,
                                    const std::vector<std::uint8_t>& history) const {
  if (history.size() != n_codes_) throw DataError("logreg: history vector has the wrong length");
  auto W = params.values("logreg.W");
  auto b = params.values("logreg.b");
  std::vector<double> y(n_codes_);
  for (std::size_t c = 0; c < n_codes_; ++c) {
    double z = b[c];
    for (std::size_t j = 0; j < n_codes_; ++j)
      if (history[j]) z += W[c * n_codes_ + j];
    y[c] = sigmoid(z);
  }
  return y;
}

PatientPredictions LogReg::predict(const diff::ParameterSet& params,
                                   const ehr::PatientRecord& patient) const {
  PatientPredictions out;
  std::vector<std::uint8_t> seen(n_codes_, 0);
  const auto& adm = patient.admissions;
  for (std::size_t k = 0; k + 1 < adm.size(); ++k) {
    for (auto c : adm[k].codes) seen.at(c) = 1;
    out.scores.push_back(forward(params, seen));
  }
  return out;
}

namespace {

class ModelPredictor final : public Predictor {
 public:
  ModelPredictor(Model model, diff::ParameterSet params)
      : model_(std::move(model)), params_(std::move(params)), ctx_(model_.prepare(params_)) {}
  PatientPredictions predict(const ehr::PatientRecord& patient) const override {
    return model_.patient_forward(params_, ctx_, patient, {}, false).predictions;
  }

 private:
  Model model_;
  diff::ParameterSet params_;
  BatchContext ctx_;
};

class LogRegPredictor final : public Predictor {
 public:
  LogRegPredictor(LogReg model, diff::ParameterSet params)
      : model_(std::move(model)), params_(std::move(params)) {}
  PatientPredictions predict(const ehr::PatientRecord& patient) const override {
    return model_.predict(params_, patient);
  }

 private:
  LogReg model_;
  diff::ParameterSet params_;
};

}  // namespace

std::unique_ptr<Predictor> make_predictor(const ModelConfig& config, std::size_t n_codes,
                                          std::shared_ptr<const ehr::CodeHierarchy> hierarchy,
                                          const diff::ParameterSet& params) {
  if (config.kind == ModelKind::LogReg)
    return std::make_unique<LogRegPredictor>(LogReg(config, n_codes), params);
  return std::make_unique<ModelPredictor>(Model(config, n_codes, std::move(hierarchy)), params);
}

}  // namespace icenode::model
