#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace icenode::diff {

using NodeId = std::uint32_t;

// The closed primitive set. Every op has a forward rule, a reverse (vjp)
// rule in the executor and a forward-mode (jvp) rule in GraphBuilder.
enum class Op : std::uint8_t {
  Input,
  Param,
  Const,
  MatVec,      // W x, W row-major with size(W) = rows * size(x)
  MatVecT,     // W^T x, W row-major with size(W) = size(x) * cols
  Add,
  Sub,
  Mul,         // elementwise product
  ScaleShift,  // a * x + b, scalars a and b
  Tanh,
  Sigmoid,
  LeakyRelu,   // slope a for x <= 0
  LeakyMask,   // in[1] scaled by the leaky-rectifier derivative at in[0]
  Exp,
  Log,
  Reciprocal,
  Square,
  Softmax,
  Sum,         // reduction to a scalar
  Broadcast,   // scalar to length `size`
  Concat,
  Slice,       // [offset, offset + size) of in[0]
};

const char* op_name(Op op);

struct Node {
  Op op = Op::Const;
  std::size_t size = 0;
  std::vector<NodeId> in;
  std::size_t offset = 0;
  double a = 0.0;
  double b = 0.0;
  std::uint32_t param = 0;    // Op::Param: index into Program::params()
  std::vector<double> value;  // Op::Const payload
};

struct ParamRef {
  std::string name;
  std::size_t size = 0;
};

/// Immutable straight-line program mapping (parameters, input vector) to an
/// output vector. Nodes are stored in topological order.
class Program {
 public:
  std::size_t input_size() const { return input_size_; }
  std::size_t output_size() const { return nodes_[output_].size; }
  NodeId output() const { return output_; }
  const std::vector<Node>& nodes() const { return nodes_; }
  const std::vector<ParamRef>& params() const { return params_; }

 private:
  friend class GraphBuilder;
  std::size_t input_size_ = 0;
  std::vector<Node> nodes_;
  NodeId output_ = 0;
  std::vector<ParamRef> params_;
};

/// Builds programs. Structurally identical nodes are shared, so inlining a
/// sub-program twice on the same input costs nothing extra.
class GraphBuilder {
 public:
  explicit GraphBuilder(std::size_t input_size);

  NodeId input() const { return 0; }
  std::size_t size(NodeId id) const { return nodes_.at(id).size; }

  NodeId param(const std::string& name, std::size_t size);
  NodeId constant(std::vector<double> value);
  NodeId zeros(std::size_t n) { return constant(std::vector<double>(n, 0.0)); }

  NodeId matvec(NodeId w, NodeId x);
  NodeId matvec_t(NodeId w, NodeId x);
  NodeId add(NodeId x, NodeId y);
  NodeId sub(NodeId x, NodeId y);
  NodeId mul(NodeId x, NodeId y);
  NodeId scale_shift(NodeId x, double a, double b);
  NodeId scale(NodeId x, double a) { return scale_shift(x, a, 0.0); }
  NodeId tanh(NodeId x);
  NodeId sigmoid(NodeId x);
  NodeId leaky_relu(NodeId x, double slope);
  NodeId leaky_mask(NodeId x, NodeId t, double slope);
  NodeId exp(NodeId x);
  NodeId log(NodeId x);
  NodeId reciprocal(NodeId x);
  NodeId square(NodeId x);
  NodeId softmax(NodeId x);
  NodeId sum(NodeId x);
  NodeId broadcast(NodeId scalar, std::size_t n);
  NodeId concat(const std::vector<NodeId>& parts);
  NodeId slice(NodeId x, std::size_t offset, std::size_t len);

  NodeId dot(NodeId x, NodeId y) { return sum(mul(x, y)); }
  // W x + b, where W and b name parameter arrays of shape (rows, size(x)) and (rows).
  NodeId affine(const std::string& weight, const std::string& bias, std::size_t rows, NodeId x);
  NodeId linear(const std::string& weight, std::size_t rows, NodeId x);

  /// Splices `program` into this graph with its input bound to `x`.
  NodeId inline_program(const Program& program, NodeId x);

  /// Splices `program` and its forward-mode derivative along tangent `t`.
  /// Returns (output, output tangent); a missing tangent means zero.
  std::pair<NodeId, std::optional<NodeId>> inline_jvp(const Program& program, NodeId x,
                                                      std::optional<NodeId> t);

  Program finish(NodeId output) &&;

 private:
  NodeId push(Node node);
  std::optional<NodeId> jvp_rule(const Node& src, const std::vector<NodeId>& primal_in,
                                 const std::vector<std::optional<NodeId>>& tangent_in,
                                 NodeId primal_out);

  std::vector<Node> nodes_;
  std::vector<ParamRef> params_;
  std::map<std::string, std::uint32_t> param_index_;
  std::map<std::string, NodeId> cse_;
};

/// Program computing d/dt of the output along the input direction:
/// input [x; t] (2n), output the jvp (m).
Program jvp_program(const Program& program);

}  // namespace icenode::diff
