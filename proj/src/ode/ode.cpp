#include "icenode/ode.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <optional>
#include <string>

#include "dopri5.hpp"

namespace icenode::ode {

namespace {

std::atomic<std::size_t> g_solver_calls{0};

using diff::Executor;
using diff::GraphBuilder;
using diff::ParamGradView;

void check_order(int order, int lo) {
  if (order < lo || order > 3) {
    throw ConfigError("regularisation order must be in [" + std::to_string(lo) + ", 3], got " +
                      std::to_string(order));
  }
}

// Parameter window covering every executor passed in.
struct Window {
  std::size_t begin = 0;
  std::size_t end = 0;
};

Window window_of(std::initializer_list<const Executor*> execs) {
  Window w{static_cast<std::size_t>(-1), 0};
  for (const Executor* e : execs) {
    if (!e || e->param_window_end() <= e->param_window_begin()) continue;
    w.begin = std::min(w.begin, e->param_window_begin());
    w.end = std::max(w.end, e->param_window_end());
  }
  if (w.end == 0) w = {0, 0};
  return w;
}

}  // namespace

void SolverConfig::validate() const {
  if (!(rtol > 0.0) || !(atol > 0.0)) throw ConfigError("rtol and atol must be positive");
  if (max_steps == 0) throw ConfigError("max_steps must be positive");
  if (!(initial_step >= 0.0)) throw ConfigError("initial_step must be >= 0");
}

VectorField::VectorField(diff::Program field) : dim_(field.input_size()) {
  if (field.output_size() != dim_) {
    throw ConfigError("vector field must map R^" + std::to_string(dim_) + " to itself, got " +
                      std::to_string(field.output_size()) + " outputs");
  }
  auto p1 = std::make_shared<const diff::Program>(std::move(field));
  taylor_.push_back(p1);
  // d^{K+1}h/dt^{K+1} = D(d^K h/dt^K)[f] along the flow.
  for (int order = 2; order <= 3; ++order) {
    GraphBuilder gb(dim_);
    const auto x = gb.input();
    const auto f = gb.inline_program(*p1, x);
    auto [_, t] = gb.inline_jvp(*taylor_.back(), x, f);
    taylor_.push_back(
        std::make_shared<const diff::Program>(std::move(gb).finish(t ? *t : gb.zeros(dim_))));
  }
  for (const auto& p : taylor_) {
    GraphBuilder gb(dim_);
    const auto d = gb.inline_program(*p, gb.input());
    smoothness_.push_back(
        std::make_shared<const diff::Program>(std::move(gb).finish(gb.sum(gb.square(d)))));
  }
}

const diff::Program& VectorField::taylor(int order) const {
  check_order(order, 1);
  return *taylor_[order - 1];
}

const diff::Program& VectorField::smoothness(int order) const {
  check_order(order, 1);
  return *smoothness_[order - 1];
}

TrajectorySolution ivp_solve(const VectorField& field, const diff::ParameterSet& params,
                             std::span<const double> h0, double t0, double t1,
                             const SolverConfig& config, const SolveOptions& options) {
  ++g_solver_calls;
  config.validate();
  if (options.reg_order != 0) check_order(options.reg_order, 1);
  if (h0.size() != field.dim()) {
    throw ConfigError("initial state has size " + std::to_string(h0.size()) + ", field expects " +
                      std::to_string(field.dim()));
  }
  if (!std::isfinite(t0) || !std::isfinite(t1)) throw NumericalError("non-finite time bounds");
  if (t1 < t0) throw ConfigError("ivp_solve needs t1 >= t0");

  const std::size_t d = field.dim();
  TrajectorySolution sol;
  sol.t0 = t0;
  sol.t1 = t1;
  sol.initial.assign(h0.begin(), h0.end());
  sol.reg_order = options.reg_order;

  Executor f(field.field(), params);
  std::optional<Executor> g;
  if (options.reg_order > 0) g.emplace(field.smoothness(options.reg_order), params);

  auto rhs = [&](std::span<const double> y, std::vector<double>& out) {
    auto r = f.forward(y);
    std::copy(r.begin(), r.end(), out.begin());
  };

  std::vector<double> coeffs(5 * d), yq(d);
  if (t1 != t0) sol.mesh.push_back(t0);
  std::vector<double> y = sol.initial;
  auto on_step = [&](const detail::StepView& s) {
    if (options.dense || g) detail::dense_coefficients(s.y0, s.y1, s.k, s.dt, coeffs);
    if (g) {
      double acc = 0.0;
      for (int q = 0; q < 3; ++q) {
        detail::dense_eval(coeffs, detail::kGaussNodes[q], yq);
        acc += detail::kGaussWeights[q] * g->forward(yq)[0];
      }
      sol.regularization += std::abs(s.dt) * acc;
    }
    if (options.dense) sol.steps.push_back(DenseStep{s.t, s.dt, coeffs});
    if (options.record_stages) {
      StageRecord rec{s.t, s.dt, {s.y0.begin(), s.y0.end()}, std::vector<double>(7 * d)};
      for (int j = 0; j < 7; ++j) std::copy(s.k[j].begin(), s.k[j].end(), rec.k.begin() + j * d);
      sol.stages.push_back(std::move(rec));
    }
    sol.mesh.push_back(s.t_end);
  };
  detail::integrate(rhs, y, t0, t1, config, on_step, sol.stats);
  for (double v : y) {
    if (!std::isfinite(v)) throw SolverDivergence("ODE solution is not finite", t1, y);
  }
  sol.final_state = std::move(y);
  return sol;
}

std::vector<std::vector<double>> dense_sample(const TrajectorySolution& sol,
                                              std::span<const double> times) {
  const double lo = std::min(sol.t0, sol.t1), hi = std::max(sol.t0, sol.t1);
  const std::size_t d = sol.initial.size();
  std::vector<std::vector<double>> out;
  out.reserve(times.size());
  for (double t : times) {
    if (!(t >= lo && t <= hi)) {
      throw ConfigError("dense sample time " + std::to_string(t) + " outside [" +
                        std::to_string(lo) + ", " + std::to_string(hi) + "]");
    }
    if (t == sol.t0) {
      out.push_back(sol.initial);
      continue;
    }
    if (t == sol.t1) {
      out.push_back(sol.final_state);
      continue;
    }
    if (sol.steps.empty()) throw ConfigError("solution was computed without dense output");
    // Mesh is monotone in the direction of integration.
    const bool fwd = sol.t1 > sol.t0;
    auto it = fwd ? std::upper_bound(sol.mesh.begin(), sol.mesh.end(), t)
                  : std::upper_bound(sol.mesh.begin(), sol.mesh.end(), t, std::greater<>());
    std::size_t idx = static_cast<std::size_t>(it - sol.mesh.begin());
    idx = std::clamp<std::size_t>(idx, 1, sol.steps.size()) - 1;
    const DenseStep& step = sol.steps[idx];
    std::vector<double> y(d);
    if (t == step.t) {
      std::copy_n(step.coeffs.begin(), d, y.begin());
    } else {
      detail::dense_eval(step.coeffs, (t - step.t) / step.dt, y);
    }
    out.push_back(std::move(y));
  }
  return out;
}

std::vector<double> taylor_derivative(const VectorField& field, const diff::ParameterSet& params,
                                      std::span<const double> h, int order) {
  Executor e(field.taylor(order), params);
  auto r = e.forward(h);
  return {r.begin(), r.end()};
}

double regularization_integral(const VectorField& field, const diff::ParameterSet& params,
                               const TrajectorySolution& sol, int order) {
  Executor g(field.smoothness(order), params);
  if (sol.steps.empty() && sol.t1 != sol.t0) {
    throw ConfigError("solution was computed without dense output");
  }
  std::vector<double> yq(sol.initial.size());
  double total = 0.0;
  for (const DenseStep& s : sol.steps) {
    double acc = 0.0;
    for (int q = 0; q < 3; ++q) {
      detail::dense_eval(s.coeffs, detail::kGaussNodes[q], yq);
      acc += detail::kGaussWeights[q] * g.forward(yq)[0];
    }
    total += std::abs(s.dt) * acc;
  }
  return total;
}

AdjointResult adjoint_gradient(const VectorField& field, const diff::ParameterSet& params,
                               const TrajectorySolution& sol, std::span<const double> cotangent,
                               double reg_weight, int reg_order, const SolverConfig& config) {
  config.validate();
  const std::size_t d = field.dim();
  if (cotangent.size() != d) throw ConfigError("adjoint cotangent has the wrong size");
  const bool reg = reg_order > 0 && reg_weight != 0.0;
  if (reg) check_order(reg_order, 1);

  Executor f(field.field(), params);
  std::optional<Executor> g;
  if (reg) g.emplace(field.smoothness(reg_order), params);
  const Window w = window_of({&f, g ? &*g : nullptr});
  const std::size_t np = w.end - w.begin;

  AdjointResult res;
  res.param_begin = w.begin;
  res.param_grad.assign(np, 0.0);
  if (sol.t1 == sol.t0) {
    res.state_grad.assign(cotangent.begin(), cotangent.end());
    return res;
  }

  // Augmented state [h, a, g_theta] integrated from t1 back to t0.
  std::vector<double> z(2 * d + np, 0.0);
  std::copy(sol.final_state.begin(), sol.final_state.end(), z.begin());
  std::copy(cotangent.begin(), cotangent.end(), z.begin() + d);
  const double wcot[1] = {reg_weight};
  auto rhs = [&](std::span<const double> y, std::vector<double>& out) {
    auto h = y.subspan(0, d);
    auto a = y.subspan(d, d);
    auto fh = f.forward(h);
    std::copy(fh.begin(), fh.end(), out.begin());
    std::span<double> abar(out.data() + d, d);
    std::span<double> pbar(out.data() + 2 * d, np);
    std::fill(abar.begin(), abar.end(), 0.0);
    std::fill(pbar.begin(), pbar.end(), 0.0);
    f.backward(a, abar, ParamGradView{pbar, w.begin});
    if (g) {
      g->forward(h);
      g->backward(wcot, abar, ParamGradView{pbar, w.begin});
    }
    for (std::size_t i = d; i < out.size(); ++i) out[i] = -out[i];
  };
  detail::integrate(rhs, z, sol.t1, sol.t0, config, [](const detail::StepView&) {}, res.stats);
  for (double v : z) {
    if (!std::isfinite(v)) throw SolverDivergence("adjoint solution is not finite", sol.t0, z);
  }
  res.state_grad.assign(z.begin() + d, z.begin() + 2 * d);
  std::copy(z.begin() + 2 * d, z.end(), res.param_grad.begin());
  return res;
}

AdjointResult discrete_gradient(const VectorField& field, const diff::ParameterSet& params,
                                const TrajectorySolution& sol, std::span<const double> cotangent,
                                double reg_weight, int reg_order) {
  const std::size_t d = field.dim();
  if (cotangent.size() != d) throw ConfigError("cotangent has the wrong size");
  if (sol.t1 != sol.t0 && sol.stages.empty()) {
    throw ConfigError("solution was computed without stage records");
  }
  const bool reg = reg_order > 0 && reg_weight != 0.0;
  if (reg) check_order(reg_order, 1);

  Executor f(field.field(), params);
  std::optional<Executor> g;
  if (reg) g.emplace(field.smoothness(reg_order), params);
  const Window w = window_of({&f, g ? &*g : nullptr});

  AdjointResult res;
  res.param_begin = w.begin;
  res.param_grad.assign(w.end - w.begin, 0.0);
  const ParamGradView pview{res.param_grad, w.begin};

  std::vector<double> ybar(cotangent.begin(), cotangent.end());
  std::vector<std::vector<double>> Y(7, std::vector<double>(d)), Ybar(7, std::vector<double>(d)),
      kbar(7, std::vector<double>(d));
  std::vector<double> yq(d), yqbar(d);

  for (auto it = sol.stages.rbegin(); it != sol.stages.rend(); ++it) {
    const StageRecord& st = *it;
    const double dt = st.dt;
    auto k = [&](int j) { return std::span<const double>(st.k.data() + j * d, d); };
    for (int s = 0; s < 7; ++s) {
      for (std::size_t i = 0; i < d; ++i) {
        double acc = 0.0;
        for (int j = 0; j < s; ++j) acc += detail::A[s][j] * k(j)[i];
        Y[s][i] = st.y0[i] + dt * acc;
      }
      std::fill(Ybar[s].begin(), Ybar[s].end(), 0.0);
      std::fill(kbar[s].begin(), kbar[s].end(), 0.0);
    }
    std::vector<double> y0bar(d, 0.0);
    Ybar[6] = ybar;

    if (g) {
      // Quadrature nodes as linear combinations of y0, y1 and the stages.
      const double dj[7] = {detail::d1, 0.0, detail::d3, detail::d4,
                            detail::d5, detail::d6, detail::d7};
      for (int q = 0; q < 3; ++q) {
        const double th = detail::kGaussNodes[q], th1 = 1.0 - th;
        const double c4 = th * th * th1 * th1;
        const double cdelta = th - th * th1 + 2.0 * th * th * th1;
        double c[7];
        for (int j = 0; j < 7; ++j) c[j] = c4 * dj[j];
        c[0] += th * th1 - th * th * th1;
        c[6] += -th * th * th1;
        for (std::size_t i = 0; i < d; ++i) {
          double acc = 0.0;
          for (int j = 0; j < 7; ++j) acc += c[j] * k(j)[i];
          yq[i] = (1.0 - cdelta) * st.y0[i] + cdelta * Y[6][i] + dt * acc;
        }
        g->forward(yq);
        const double gbar[1] = {reg_weight * std::abs(dt) * detail::kGaussWeights[q]};
        std::fill(yqbar.begin(), yqbar.end(), 0.0);
        g->backward(gbar, yqbar, pview);
        for (std::size_t i = 0; i < d; ++i) {
          y0bar[i] += (1.0 - cdelta) * yqbar[i];
          Ybar[6][i] += cdelta * yqbar[i];
          for (int j = 0; j < 7; ++j) kbar[j][i] += dt * c[j] * yqbar[i];
        }
      }
    }

    for (int s = 6; s >= 0; --s) {
      if (std::any_of(kbar[s].begin(), kbar[s].end(), [](double v) { return v != 0.0; })) {
        f.forward(Y[s]);
        f.backward(kbar[s], Ybar[s], pview);
      }
      for (std::size_t i = 0; i < d; ++i) {
        y0bar[i] += Ybar[s][i];
        for (int j = 0; j < s; ++j) kbar[j][i] += dt * detail::A[s][j] * Ybar[s][i];
      }
    }
    ybar = std::move(y0bar);
  }
  res.state_grad = std::move(ybar);
  return res;
}

std::vector<double> fixed_step_solve(const VectorField& field, const diff::ParameterSet& params,
                                     std::span<const double> h0, double t0, double t1,
                                     std::size_t n_steps, Propagation propagation) {
  ++g_solver_calls;
  if (n_steps == 0) throw ConfigError("fixed-step solve needs at least one step");
  if (h0.size() != field.dim()) throw ConfigError("initial state has the wrong size");
  const std::size_t d = field.dim();
  Executor f(field.field(), params);
  const double dt = (t1 - t0) / static_cast<double>(n_steps);
  const double b4[7] = {detail::b41, 0.0,         detail::b43, detail::b44,
                        detail::b45, detail::b46, detail::b47};
  std::vector<double> y(h0.begin(), h0.end()), ytmp(d);
  std::vector<std::vector<double>> k(7, std::vector<double>(d));
  for (std::size_t n = 0; n < n_steps; ++n) {
    for (int s = 0; s < 7; ++s) {
      for (std::size_t i = 0; i < d; ++i) {
        double acc = 0.0;
        for (int j = 0; j < s; ++j) acc += detail::A[s][j] * k[j][i];
        ytmp[i] = y[i] + dt * acc;
      }
      auto r = f.forward(ytmp);
      std::copy(r.begin(), r.end(), k[s].begin());
    }
    for (std::size_t i = 0; i < d; ++i) {
      double acc = 0.0;
      if (propagation == Propagation::Fifth) {
        for (int j = 0; j < 6; ++j) acc += detail::A[6][j] * k[j][i];
      } else {
        for (int j = 0; j < 7; ++j) acc += b4[j] * k[j][i];
      }
      y[i] += dt * acc;
    }
  }
  return y;
}

std::size_t solver_call_count() { return g_solver_calls.load(); }

}  // namespace icenode::ode
