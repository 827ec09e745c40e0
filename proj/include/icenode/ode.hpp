#pragma once

#include <atomic>
#include <cstddef>
#include <memory>
#include <span>
#include <vector>

#include "icenode/diff/executor.hpp"
#include "icenode/diff/parameter_set.hpp"
#include "icenode/diff/program.hpp"
#include "icenode/error.hpp"

namespace icenode::ode {

struct SolverConfig {
  double rtol = 1e-3;
  double atol = 1e-4;
  std::size_t max_steps = 10000;  // per integration span
  double initial_step = 0.0;      // 0 selects the step automatically

  void validate() const;
  static SolverConfig tight() { return {1e-6, 1e-8, 100000, 0.0}; }
};

// Intervals longer than this are integrated in sub-spans of kSubSpan, each
// restarting the step controller.
inline constexpr double kLongInterval = 260.0;
inline constexpr double kSubSpan = 52.0;

/// Raised when a solve exceeds max_steps or the step size collapses.
class SolverDivergence : public NumericalError {
 public:
  SolverDivergence(const std::string& what, double time, std::vector<double> state)
      : NumericalError(what), time_(time), state_(std::move(state)) {}
  double time() const { return time_; }
  const std::vector<double>& state() const { return state_; }

 private:
  double time_;
  std::vector<double> state_;
};

/// Autonomous vector field dh/dt = f(h; theta) and the derived programs
/// needed for smoothness regularisation. Parameter-independent; pair it
/// with a ParameterSet at solve time.
class VectorField {
 public:
  explicit VectorField(diff::Program field);

  std::size_t dim() const { return dim_; }
  const diff::Program& field() const { return *taylor_[0]; }
  /// d^K h / dt^K as a function of h, K in {1, 2, 3}.
  const diff::Program& taylor(int order) const;
  /// ||d^K h / dt^K||^2 as a function of h.
  const diff::Program& smoothness(int order) const;

 private:
  std::size_t dim_;
  std::vector<std::shared_ptr<const diff::Program>> taylor_;
  std::vector<std::shared_ptr<const diff::Program>> smoothness_;
};

struct SolverStats {
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  std::size_t rhs_evals = 0;
};

// Hairer-style dense output of one accepted step: five d-vectors
// (y0, y1 - y0, and three correction terms) evaluated with a quartic in
// theta = (t - t_start) / dt.
struct DenseStep {
  double t = 0.0;
  double dt = 0.0;
  std::vector<double> coeffs;  // 5 * dim
};

// Everything needed to replay one step in reverse: the start state and the
// seven stage derivatives.
struct StageRecord {
  double t = 0.0;
  double dt = 0.0;
  std::vector<double> y0;
  std::vector<double> k;  // 7 * dim
};

struct SolveOptions {
  bool dense = true;           // keep DenseStep records for dense_sample
  int reg_order = 0;           // K > 0 accumulates the smoothness integral
  bool record_stages = false;  // keep StageRecords for discrete_gradient
};

struct TrajectorySolution {
  double t0 = 0.0;
  double t1 = 0.0;
  std::vector<double> initial;
  std::vector<double> final_state;
  std::vector<double> mesh;  // accepted step boundaries, t0 ... t1; empty if t1 == t0
  std::vector<DenseStep> steps;
  std::vector<StageRecord> stages;
  int reg_order = 0;
  double regularization = 0.0;
  SolverStats stats;
};

/// Adaptive Dormand-Prince 5(4) solve of dh/dt = f(h) over [t0, t1].
TrajectorySolution ivp_solve(const VectorField& field, const diff::ParameterSet& params,
                             std::span<const double> h0, double t0, double t1,
                             const SolverConfig& config, const SolveOptions& options = {});

/// States at the requested times via the quartic dense output; exact stored
/// states at mesh nodes.
std::vector<std::vector<double>> dense_sample(const TrajectorySolution& solution,
                                              std::span<const double> times);

std::vector<double> taylor_derivative(const VectorField& field, const diff::ParameterSet& params,
                                      std::span<const double> h, int order);

/// Integral of ||d^K h/dt^K||^2 over the solution, by three-point
/// Gauss-Legendre quadrature on every accepted step.
double regularization_integral(const VectorField& field, const diff::ParameterSet& params,
                               const TrajectorySolution& solution, int order);

struct AdjointResult {
  std::vector<double> state_grad;  // dL/dh(t0)
  std::vector<double> param_grad;  // dL/dtheta over [param_begin, param_begin + size)
  std::size_t param_begin = 0;
  SolverStats stats;
};

/// Gradients of L = <cotangent, h(t1)> + reg_weight * R_K by the continuous
/// adjoint method: the state is re-integrated backwards together with the
/// adjoint and the parameter accumulator.
AdjointResult adjoint_gradient(const VectorField& field, const diff::ParameterSet& params,
                               const TrajectorySolution& solution,
                               std::span<const double> cotangent, double reg_weight,
                               int reg_order, const SolverConfig& config);

/// Same gradients by reverse accumulation through the recorded RK stages
/// and quadrature (discretize-then-differentiate, step sizes held fixed).
AdjointResult discrete_gradient(const VectorField& field, const diff::ParameterSet& params,
                                const TrajectorySolution& solution,
                                std::span<const double> cotangent, double reg_weight,
                                int reg_order);

enum class Propagation { Fifth, EmbeddedFourth };

/// Fixed-step Dormand-Prince integration with n equal steps, propagating
/// either the fifth-order or the embedded fourth-order solution.
std::vector<double> fixed_step_solve(const VectorField& field, const diff::ParameterSet& params,
                                     std::span<const double> h0, double t0, double t1,
                                     std::size_t n_steps, Propagation propagation);

/// Number of ivp_solve and fixed_step_solve calls made by this process.
std::size_t solver_call_count();

}  // namespace icenode::ode
