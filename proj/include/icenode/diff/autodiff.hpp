#pragma once

#include <span>
#include <vector>

#include "icenode/diff/executor.hpp"
#include "icenode/diff/parameter_set.hpp"
#include "icenode/diff/program.hpp"

// One-shot entry points. Hot loops should hold an Executor instead.
namespace icenode::diff {

std::vector<double> evaluate(const Program& program, const ParameterSet& params,
                             std::span<const double> input);

struct Gradients {
  std::vector<double> params;  // ParameterSet-shaped (flat)
  std::vector<double> input;
};

/// Reverse mode: cotangent-weighted derivatives wrt parameters and input.
Gradients gradient(const Program& program, const ParameterSet& params,
                   std::span<const double> input, std::span<const double> cotangent);

/// Forward mode: directional derivative of the output along `tangent`.
std::vector<double> jvp(const Program& program, const ParameterSet& params,
                        std::span<const double> input, std::span<const double> tangent);

/// Central differences of <cotangent, program(params, input)> per coordinate
/// of every parameter array and of the input. Test oracle.
Gradients finite_difference_gradient(const Program& program, const ParameterSet& params,
                                     std::span<const double> input,
                                     std::span<const double> cotangent, double step);

// max_i |a_i - b_i| / max(max_i |b_i|, floor)
double max_relative_error(std::span<const double> a, std::span<const double> b,
                          double floor = 1e-12);

}  // namespace icenode::diff
