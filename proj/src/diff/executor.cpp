#include "icenode/diff/executor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>

#include "icenode/error.hpp"

namespace icenode::diff {

namespace testing {
namespace {
std::atomic<bool> g_tanh_fault{false};
}
void set_tanh_vjp_fault(bool enabled) { g_tanh_fault.store(enabled); }
bool tanh_vjp_fault() { return g_tanh_fault.load(std::memory_order_relaxed); }
}  // namespace testing

namespace {

constexpr std::uint8_t kDepInput = 1;
constexpr std::uint8_t kDepParam = 2;

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Executor::Executor(const Program& program, const ParameterSet& params)
    : program_(&program), params_(&params) {
  const auto& nodes = program.nodes();
  offset_.resize(nodes.size());
  dep_input_.resize(nodes.size(), false);
  dep_param_.resize(nodes.size(), false);
  std::size_t total = 0;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    offset_[i] = total;
    total += nodes[i].size;
    const Node& n = nodes[i];
    if (n.op == Op::Input) dep_input_[i] = true;
    if (n.op == Op::Param) dep_param_[i] = true;
    for (NodeId j : n.in) {
      dep_input_[i] = dep_input_[i] || dep_input_[j];
      dep_param_[i] = dep_param_[i] || dep_param_[j];
    }
  }
  work_.assign(total, 0.0);
  adj_.assign(total, 0.0);

  window_begin_ = params.size();
  window_end_ = 0;
  for (const auto& ref : program.params()) {
    const auto& spec = params.spec(ref.name);
    if (spec.size != ref.size) {
      throw ConfigError("parameter array '" + ref.name + "' has " + std::to_string(spec.size) +
                        " entries, program expects " + std::to_string(ref.size));
    }
    param_offset_.push_back(spec.offset);
    window_begin_ = std::min(window_begin_, spec.offset);
    window_end_ = std::max(window_end_, spec.offset + spec.size);
  }
  if (program.params().empty()) window_begin_ = window_end_ = 0;
}

std::span<const double> Executor::output() const {
  const NodeId out = program_->output();
  const Node& n = program_->nodes()[out];
  if (n.op == Op::Param) {
    return params_->flat().subspan(param_offset_[n.param], n.size);
  }
  if (n.op == Op::Const) return n.value;
  return std::span<const double>(work_).subspan(offset_[out], n.size);
}

std::span<const double> Executor::forward(std::span<const double> input) {
  const auto& nodes = program_->nodes();
  if (input.size() != program_->input_size()) {
    throw ConfigError("shape mismatch in input: program expects length " +
                      std::to_string(program_->input_size()) + ", got " +
                      std::to_string(input.size()));
  }
  const double* pbase = params_->flat().data();
  auto val = [&](NodeId id) -> const double* {
    const Node& n = nodes[id];
    if (n.op == Op::Param) return pbase + param_offset_[n.param];
    if (n.op == Op::Const) return n.value.data();
    return work_.data() + offset_[id];
  };

  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const Node& n = nodes[i];
    double* y = work_.data() + offset_[i];
    const std::size_t m = n.size;
    switch (n.op) {
      case Op::Input:
        std::copy(input.begin(), input.end(), y);
        break;
      case Op::Param:
      case Op::Const:
        break;
      case Op::MatVec: {
        const double* w = val(n.in[0]);
        const double* x = val(n.in[1]);
        const std::size_t cols = nodes[n.in[1]].size;
        for (std::size_t r = 0; r < m; ++r) {
          const double* row = w + r * cols;
          double acc = 0.0;
          for (std::size_t c = 0; c < cols; ++c) acc += row[c] * x[c];
          y[r] = acc;
        }
        break;
      }
      case Op::MatVecT: {
        const double* w = val(n.in[0]);
        const double* x = val(n.in[1]);
        const std::size_t rows = nodes[n.in[1]].size;
        std::fill(y, y + m, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* row = w + r * m;
          const double xr = x[r];
          for (std::size_t c = 0; c < m; ++c) y[c] += row[c] * xr;
        }
        break;
      }
      case Op::Add: {
        const double* a = val(n.in[0]);
        const double* b = val(n.in[1]);
        for (std::size_t k = 0; k < m; ++k) y[k] = a[k] + b[k];
        break;
      }
      case Op::Sub: {
        const double* a = val(n.in[0]);
        const double* b = val(n.in[1]);
        for (std::size_t k = 0; k < m; ++k) y[k] = a[k] - b[k];
        break;
      }
      case Op::Mul: {
        const double* a = val(n.in[0]);
        const double* b = val(n.in[1]);
        for (std::size_t k = 0; k < m; ++k) y[k] = a[k] * b[k];
        break;
      }
      case Op::ScaleShift: {
        const double* x = val(n.in[0]);
        for (std::size_t k = 0; k < m; ++k) y[k] = n.a * x[k] + n.b;
        break;
      }
      case Op::Tanh: {
        const double* x = val(n.in[0]);
        for (std::size_t k = 0; k < m; ++k) y[k] = std::tanh(x[k]);
        break;
      }
      case Op::Sigmoid: {
        const double* x = val(n.in[0]);
        for (std::size_t k = 0; k < m; ++k) y[k] = sigmoid(x[k]);
        break;
      }
      case Op::LeakyRelu: {
        const double* x = val(n.in[0]);
        for (std::size_t k = 0; k < m; ++k) y[k] = x[k] > 0.0 ? x[k] : n.a * x[k];
        break;
      }
      case Op::LeakyMask: {
        const double* x = val(n.in[0]);
        const double* t = val(n.in[1]);
        for (std::size_t k = 0; k < m; ++k) y[k] = x[k] > 0.0 ? t[k] : n.a * t[k];
        break;
      }
      case Op::Exp: {
        const double* x = val(n.in[0]);
        for (std::size_t k = 0; k < m; ++k) y[k] = std::exp(x[k]);
        break;
      }
      case Op::Log: {
        const double* x = val(n.in[0]);
        for (std::size_t k = 0; k < m; ++k) {
          if (!(x[k] > 0.0)) throw NumericalError("log: non-positive argument, not differentiable");
          y[k] = std::log(x[k]);
        }
        break;
      }
      case Op::Reciprocal: {
        const double* x = val(n.in[0]);
        for (std::size_t k = 0; k < m; ++k) {
          if (x[k] == 0.0) throw NumericalError("reciprocal: zero argument");
          y[k] = 1.0 / x[k];
        }
        break;
      }
      case Op::Square: {
        const double* x = val(n.in[0]);
        for (std::size_t k = 0; k < m; ++k) y[k] = x[k] * x[k];
        break;
      }
      case Op::Softmax: {
        const double* x = val(n.in[0]);
        const double mx = *std::max_element(x, x + m);
        double z = 0.0;
        for (std::size_t k = 0; k < m; ++k) {
          y[k] = std::exp(x[k] - mx);
          z += y[k];
        }
        for (std::size_t k = 0; k < m; ++k) y[k] /= z;
        break;
      }
      case Op::Sum: {
        const double* x = val(n.in[0]);
        const std::size_t len = nodes[n.in[0]].size;
        double acc = 0.0;
        for (std::size_t k = 0; k < len; ++k) acc += x[k];
        y[0] = acc;
        break;
      }
      case Op::Broadcast: {
        const double s = *val(n.in[0]);
        std::fill(y, y + m, s);
        break;
      }
      case Op::Concat: {
        double* dst = y;
        for (NodeId j : n.in) {
          const double* x = val(j);
          dst = std::copy(x, x + nodes[j].size, dst);
        }
        break;
      }
      case Op::Slice: {
        const double* x = val(n.in[0]) + n.offset;
        std::copy(x, x + m, y);
        break;
      }
    }
  }
  return output();
}

void Executor::backward(std::span<const double> cotangent, std::span<double> input_grad,
                        ParamGradView param_grad) {
  const auto& nodes = program_->nodes();
  const NodeId out = program_->output();
  if (cotangent.size() != nodes[out].size) {
    throw ConfigError("shape mismatch in output: cotangent length " +
                      std::to_string(cotangent.size()) + ", program output " +
                      std::to_string(nodes[out].size));
  }
  const bool want_in = !input_grad.empty();
  const bool want_par = !param_grad.data.empty();
  if (!want_in && !want_par) return;
  if (want_in && input_grad.size() != program_->input_size()) {
    throw ConfigError("shape mismatch in input gradient buffer");
  }
  auto need = [&](NodeId id) {
    return (want_in && dep_input_[id]) || (want_par && dep_param_[id]);
  };

  std::fill(adj_.begin(), adj_.end(), 0.0);
  if (!need(out)) return;
  std::copy(cotangent.begin(), cotangent.end(), adj_.begin() + offset_[out]);

  const double* pbase = params_->flat().data();
  auto val = [&](NodeId id) -> const double* {
    const Node& n = nodes[id];
    if (n.op == Op::Param) return pbase + param_offset_[n.param];
    if (n.op == Op::Const) return n.value.data();
    return work_.data() + offset_[id];
  };
  auto adj = [&](NodeId id) { return adj_.data() + offset_[id]; };
  const bool tanh_fault = testing::tanh_vjp_fault();

  for (std::size_t i = nodes.size(); i-- > 0;) {
    const Node& n = nodes[i];
    if (!need(static_cast<NodeId>(i))) continue;
    const double* g = adj_.data() + offset_[i];
    const double* y = val(static_cast<NodeId>(i));
    const std::size_t m = n.size;
    switch (n.op) {
      case Op::Input: {
        for (std::size_t k = 0; k < m; ++k) input_grad[k] += g[k];
        break;
      }
      case Op::Param: {
        const std::size_t off = param_offset_[n.param];
        if (want_par) {
          if (off < param_grad.base || off + m > param_grad.base + param_grad.data.size()) {
            throw ConfigError("parameter gradient window does not cover '" +
                              program_->params()[n.param].name + "'");
          }
          double* dst = param_grad.data.data() + (off - param_grad.base);
          for (std::size_t k = 0; k < m; ++k) dst[k] += g[k];
        }
        break;
      }
      case Op::Const:
        break;
      case Op::MatVec: {
        const NodeId wi = n.in[0], xi = n.in[1];
        const double* w = val(wi);
        const double* x = val(xi);
        const std::size_t cols = nodes[xi].size;
        if (need(xi)) {
          double* xa = adj(xi);
          for (std::size_t r = 0; r < m; ++r) {
            const double* row = w + r * cols;
            const double gr = g[r];
            for (std::size_t c = 0; c < cols; ++c) xa[c] += row[c] * gr;
          }
        }
        if (need(wi)) {
          double* wa = adj(wi);
          for (std::size_t r = 0; r < m; ++r) {
            double* row = wa + r * cols;
            const double gr = g[r];
            for (std::size_t c = 0; c < cols; ++c) row[c] += gr * x[c];
          }
        }
        break;
      }
      case Op::MatVecT: {
        const NodeId wi = n.in[0], xi = n.in[1];
        const double* w = val(wi);
        const double* x = val(xi);
        const std::size_t rows = nodes[xi].size;
        if (need(xi)) {
          double* xa = adj(xi);
          for (std::size_t r = 0; r < rows; ++r) {
            const double* row = w + r * m;
            double acc = 0.0;
            for (std::size_t c = 0; c < m; ++c) acc += row[c] * g[c];
            xa[r] += acc;
          }
        }
        if (need(wi)) {
          double* wa = adj(wi);
          for (std::size_t r = 0; r < rows; ++r) {
            double* row = wa + r * m;
            const double xr = x[r];
            for (std::size_t c = 0; c < m; ++c) row[c] += xr * g[c];
          }
        }
        break;
      }
      case Op::Add: {
        for (int s = 0; s < 2; ++s) {
          if (!need(n.in[s])) continue;
          double* a = adj(n.in[s]);
          for (std::size_t k = 0; k < m; ++k) a[k] += g[k];
        }
        break;
      }
      case Op::Sub: {
        if (need(n.in[0])) {
          double* a = adj(n.in[0]);
          for (std::size_t k = 0; k < m; ++k) a[k] += g[k];
        }
        if (need(n.in[1])) {
          double* a = adj(n.in[1]);
          for (std::size_t k = 0; k < m; ++k) a[k] -= g[k];
        }
        break;
      }
      case Op::Mul: {
        const double* u = val(n.in[0]);
        const double* v = val(n.in[1]);
        if (need(n.in[0])) {
          double* a = adj(n.in[0]);
          for (std::size_t k = 0; k < m; ++k) a[k] += g[k] * v[k];
        }
        if (need(n.in[1])) {
          double* a = adj(n.in[1]);
          for (std::size_t k = 0; k < m; ++k) a[k] += g[k] * u[k];
        }
        break;
      }
      default: {
        // Unary in in[0] (in[1] for LeakyMask).
        const NodeId src = n.op == Op::LeakyMask ? n.in[1] : n.in[0];
        if (!need(src)) break;
        double* a = adj(src);
        const double* x = val(n.in[0]);
        switch (n.op) {
          case Op::ScaleShift:
            for (std::size_t k = 0; k < m; ++k) a[k] += n.a * g[k];
            break;
          case Op::Tanh: {
            const double sign = tanh_fault ? -1.0 : 1.0;
            for (std::size_t k = 0; k < m; ++k) a[k] += sign * (1.0 - y[k] * y[k]) * g[k];
            break;
          }
          case Op::Sigmoid:
            for (std::size_t k = 0; k < m; ++k) a[k] += y[k] * (1.0 - y[k]) * g[k];
            break;
          case Op::LeakyRelu:
          case Op::LeakyMask:
            for (std::size_t k = 0; k < m; ++k) a[k] += (x[k] > 0.0 ? 1.0 : n.a) * g[k];
            break;
          case Op::Exp:
            for (std::size_t k = 0; k < m; ++k) a[k] += y[k] * g[k];
            break;
          case Op::Log:
            for (std::size_t k = 0; k < m; ++k) a[k] += g[k] / x[k];
            break;
          case Op::Reciprocal:
            for (std::size_t k = 0; k < m; ++k) a[k] -= y[k] * y[k] * g[k];
            break;
          case Op::Square:
            for (std::size_t k = 0; k < m; ++k) a[k] += 2.0 * x[k] * g[k];
            break;
          case Op::Softmax: {
            double dotp = 0.0;
            for (std::size_t k = 0; k < m; ++k) dotp += y[k] * g[k];
            for (std::size_t k = 0; k < m; ++k) a[k] += y[k] * (g[k] - dotp);
            break;
          }
          case Op::Sum: {
            const std::size_t len = nodes[src].size;
            for (std::size_t k = 0; k < len; ++k) a[k] += g[0];
            break;
          }
          case Op::Broadcast: {
            double acc = 0.0;
            for (std::size_t k = 0; k < m; ++k) acc += g[k];
            a[0] += acc;
            break;
          }
          case Op::Slice:
            for (std::size_t k = 0; k < m; ++k) a[n.offset + k] += g[k];
            break;
          case Op::Concat:
            break;  // handled below
          default:
            throw ConfigError(std::string("no reverse rule for ") + op_name(n.op));
        }
        break;
      }
      case Op::Concat: {
        std::size_t pos = 0;
        for (NodeId j : n.in) {
          const std::size_t len = nodes[j].size;
          if (need(j)) {
            double* a = adj(j);
            for (std::size_t k = 0; k < len; ++k) a[k] += g[pos + k];
          }
          pos += len;
        }
        break;
      }
    }
  }
}

}  // namespace icenode::diff
