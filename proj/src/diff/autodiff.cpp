#include "icenode/diff/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "icenode/error.hpp"

namespace icenode::diff {

std::vector<double> evaluate(const Program& program, const ParameterSet& params,
                             std::span<const double> input) {
  Executor ex(program, params);
  auto out = ex.forward(input);
  return {out.begin(), out.end()};
}

Gradients gradient(const Program& program, const ParameterSet& params,
                   std::span<const double> input, std::span<const double> cotangent) {
  Executor ex(program, params);
  ex.forward(input);
  Gradients g{params.zeros_like(), std::vector<double>(input.size(), 0.0)};
  ex.backward(cotangent, g.input, ParamGradView{g.params, 0});
  return g;
}

std::vector<double> jvp(const Program& program, const ParameterSet& params,
                        std::span<const double> input, std::span<const double> tangent) {
  if (tangent.size() != input.size()) {
    throw ConfigError("shape mismatch in jvp: tangent length differs from input length");
  }
  const Program dprog = jvp_program(program);
  std::vector<double> joint(input.begin(), input.end());
  joint.insert(joint.end(), tangent.begin(), tangent.end());
  return evaluate(dprog, params, joint);
}

Gradients finite_difference_gradient(const Program& program, const ParameterSet& params,
                                     std::span<const double> input,
                                     std::span<const double> cotangent, double step) {
  if (!(step > 0.0)) throw ConfigError("finite-difference step must be positive");
  ParameterSet work = params;
  std::vector<double> x(input.begin(), input.end());
  Executor ex(program, work);
  auto objective = [&]() {
    auto y = ex.forward(x);
    double s = 0.0;
    for (std::size_t k = 0; k < y.size(); ++k) s += cotangent[k] * y[k];
    return s;
  };
  if (cotangent.size() != program.output_size()) {
    throw ConfigError("shape mismatch in finite differences: cotangent length");
  }

  Gradients g{params.zeros_like(), std::vector<double>(x.size(), 0.0)};
  auto flat = work.flat();
  // Only arrays the program reads can have nonzero derivatives.
  for (const auto& ref : program.params()) {
    const auto& spec = work.spec(ref.name);
    for (std::size_t k = spec.offset; k < spec.offset + spec.size; ++k) {
      const double orig = flat[k];
      flat[k] = orig + step;
      const double up = objective();
      flat[k] = orig - step;
      const double down = objective();
      flat[k] = orig;
      g.params[k] = (up - down) / (2.0 * step);
    }
  }
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double orig = x[k];
    x[k] = orig + step;
    const double up = objective();
    x[k] = orig - step;
    const double down = objective();
    x[k] = orig;
    g.input[k] = (up - down) / (2.0 * step);
  }
  return g;
}

double max_relative_error(std::span<const double> a, std::span<const double> b, double floor) {
  double scale = floor;
  double worst = 0.0;
  for (double v : b) scale = std::max(scale, std::abs(v));
  for (std::size_t k = 0; k < std::min(a.size(), b.size()); ++k) {
    worst = std::max(worst, std::abs(a[k] - b[k]));
  }
  return worst / scale;
}

}  // namespace icenode::diff
