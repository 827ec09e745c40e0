#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "icenode/diff/parameter_set.hpp"
#include "icenode/diff/program.hpp"

namespace icenode::diff {

/// Destination for parameter gradients: the gradient of the array stored at
/// flat offset `o` lands at data[o - base]. A window over a full
/// ParameterSet-shaped gradient uses base 0.
struct ParamGradView {
  std::span<double> data;
  std::size_t base = 0;
};

/// Reusable evaluation state for one program bound to one ParameterSet.
///
/// Not thread-safe; create one per thread. The ParameterSet must outlive the
/// executor and must not change layout, though values may change between
/// calls.
class Executor {
 public:
  Executor(const Program& program, const ParameterSet& params);

  std::span<const double> forward(std::span<const double> input);
  std::span<const double> output() const;

  /// Accumulates cotangent-weighted derivatives of the last forward() into
  /// `input_grad` (if non-empty) and `param_grad` (if non-empty).
  void backward(std::span<const double> cotangent, std::span<double> input_grad,
                ParamGradView param_grad);

  const Program& program() const { return *program_; }

  // Smallest flat window [begin, end) of the ParameterSet holding every
  // array this program reads.
  std::size_t param_window_begin() const { return window_begin_; }
  std::size_t param_window_end() const { return window_end_; }

 private:
  const Program* program_;
  const ParameterSet* params_;
  std::vector<std::size_t> offset_;  // work_/adj_ offset per node
  std::vector<std::size_t> param_offset_;
  std::vector<bool> dep_input_;
  std::vector<bool> dep_param_;
  std::vector<double> work_;
  std::vector<double> adj_;
  std::size_t window_begin_ = 0;
  std::size_t window_end_ = 0;
};

namespace testing {
// Flips the sign of the tanh reverse rule; used to check that the
// verification harness catches a corrupted derivative.
void set_tanh_vjp_fault(bool enabled);
bool tanh_vjp_fault();
}  // namespace testing

}  // namespace icenode::diff
