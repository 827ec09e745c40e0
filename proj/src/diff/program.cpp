#include "icenode/diff/program.hpp"

#include <cstring>

#include "icenode/error.hpp"

namespace icenode::diff {

const char* op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Param: return "param";
    case Op::Const: return "const";
    case Op::MatVec: return "matvec";
    case Op::MatVecT: return "matvec_t";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::ScaleShift: return "scale_shift";
    case Op::Tanh: return "tanh";
    case Op::Sigmoid: return "sigmoid";
    case Op::LeakyRelu: return "leaky_relu";
    case Op::LeakyMask: return "leaky_mask";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Reciprocal: return "reciprocal";
    case Op::Square: return "square";
    case Op::Softmax: return "softmax";
    case Op::Sum: return "sum";
    case Op::Broadcast: return "broadcast";
    case Op::Concat: return "concat";
    case Op::Slice: return "slice";
  }
  return "?";
}

namespace {

[[noreturn]] void shape_error(Op op, const std::string& detail) {
  throw ConfigError(std::string("shape mismatch in ") + op_name(op) + ": " + detail);
}

template <class T>
void append_bytes(std::string& key, const T& v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  key.append(buf, sizeof(T));
}

std::string cse_key(const Node& n) {
  std::string key;
  append_bytes(key, n.op);
  append_bytes(key, n.size);
  append_bytes(key, n.offset);
  append_bytes(key, n.a);
  append_bytes(key, n.b);
  append_bytes(key, n.param);
  for (NodeId i : n.in) append_bytes(key, i);
  return key;
}

}  // namespace

GraphBuilder::GraphBuilder(std::size_t input_size) {
  Node in;
  in.op = Op::Input;
  in.size = input_size;
  nodes_.push_back(std::move(in));
}

NodeId GraphBuilder::push(Node node) {
  if (node.op != Op::Const) {
    std::string key = cse_key(node);
    auto it = cse_.find(key);
    if (it != cse_.end()) return it->second;
    nodes_.push_back(std::move(node));
    const auto id = static_cast<NodeId>(nodes_.size() - 1);
    cse_.emplace(std::move(key), id);
    return id;
  }
  nodes_.push_back(std::move(node));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId GraphBuilder::param(const std::string& name, std::size_t size) {
  auto it = param_index_.find(name);
  std::uint32_t idx = 0;
  if (it == param_index_.end()) {
    idx = static_cast<std::uint32_t>(params_.size());
    params_.push_back({name, size});
    param_index_.emplace(name, idx);
  } else {
    idx = it->second;
    if (params_[idx].size != size) {
      shape_error(Op::Param, "array '" + name + "' used with sizes " +
                                 std::to_string(params_[idx].size) + " and " +
                                 std::to_string(size));
    }
  }
  Node n;
  n.op = Op::Param;
  n.size = size;
  n.param = idx;
  return push(std::move(n));
}

NodeId GraphBuilder::constant(std::vector<double> value) {
  Node n;
  n.op = Op::Const;
  n.size = value.size();
  n.value = std::move(value);
  return push(std::move(n));
}

NodeId GraphBuilder::matvec(NodeId w, NodeId x) {
  const std::size_t cols = size(x);
  if (cols == 0 || size(w) % cols != 0) {
    shape_error(Op::MatVec, "matrix of " + std::to_string(size(w)) +
                                " entries cannot multiply a vector of length " +
                                std::to_string(cols));
  }
  Node n;
  n.op = Op::MatVec;
  n.size = size(w) / cols;
  n.in = {w, x};
  return push(std::move(n));
}

NodeId GraphBuilder::matvec_t(NodeId w, NodeId x) {
  const std::size_t rows = size(x);
  if (rows == 0 || size(w) % rows != 0) {
    shape_error(Op::MatVecT, "matrix of " + std::to_string(size(w)) +
                                 " entries cannot be transposed against length " +
                                 std::to_string(rows));
  }
  Node n;
  n.op = Op::MatVecT;
  n.size = size(w) / rows;
  n.in = {w, x};
  return push(std::move(n));
}

namespace {
Node binary(Op op, NodeId x, NodeId y, std::size_t nx, std::size_t ny) {
  if (nx != ny) {
    shape_error(op, "operands of length " + std::to_string(nx) + " and " + std::to_string(ny));
  }
  Node n;
  n.op = op;
  n.size = nx;
  n.in = {x, y};
  return n;
}

Node unary(Op op, NodeId x, std::size_t nx) {
  Node n;
  n.op = op;
  n.size = nx;
  n.in = {x};
  return n;
}
}  // namespace

NodeId GraphBuilder::add(NodeId x, NodeId y) { return push(binary(Op::Add, x, y, size(x), size(y))); }
NodeId GraphBuilder::sub(NodeId x, NodeId y) { return push(binary(Op::Sub, x, y, size(x), size(y))); }
NodeId GraphBuilder::mul(NodeId x, NodeId y) { return push(binary(Op::Mul, x, y, size(x), size(y))); }

NodeId GraphBuilder::scale_shift(NodeId x, double a, double b) {
  Node n = unary(Op::ScaleShift, x, size(x));
  n.a = a;
  n.b = b;
  return push(std::move(n));
}

NodeId GraphBuilder::tanh(NodeId x) { return push(unary(Op::Tanh, x, size(x))); }
NodeId GraphBuilder::sigmoid(NodeId x) { return push(unary(Op::Sigmoid, x, size(x))); }

NodeId GraphBuilder::leaky_relu(NodeId x, double slope) {
  Node n = unary(Op::LeakyRelu, x, size(x));
  n.a = slope;
  return push(std::move(n));
}

NodeId GraphBuilder::leaky_mask(NodeId x, NodeId t, double slope) {
  Node n = binary(Op::LeakyMask, x, t, size(x), size(t));
  n.a = slope;
  return push(std::move(n));
}

NodeId GraphBuilder::exp(NodeId x) { return push(unary(Op::Exp, x, size(x))); }
NodeId GraphBuilder::log(NodeId x) { return push(unary(Op::Log, x, size(x))); }
NodeId GraphBuilder::reciprocal(NodeId x) { return push(unary(Op::Reciprocal, x, size(x))); }
NodeId GraphBuilder::square(NodeId x) { return push(unary(Op::Square, x, size(x))); }

NodeId GraphBuilder::softmax(NodeId x) {
  if (size(x) == 0) shape_error(Op::Softmax, "empty input");
  return push(unary(Op::Softmax, x, size(x)));
}

NodeId GraphBuilder::sum(NodeId x) { return push(unary(Op::Sum, x, 1)); }

NodeId GraphBuilder::broadcast(NodeId scalar, std::size_t n) {
  if (size(scalar) != 1) shape_error(Op::Broadcast, "operand is not a scalar");
  return push(unary(Op::Broadcast, scalar, n));
}

NodeId GraphBuilder::concat(const std::vector<NodeId>& parts) {
  if (parts.empty()) shape_error(Op::Concat, "no operands");
  if (parts.size() == 1) return parts.front();
  Node n;
  n.op = Op::Concat;
  for (NodeId p : parts) n.size += size(p);
  n.in = parts;
  return push(std::move(n));
}

NodeId GraphBuilder::slice(NodeId x, std::size_t offset, std::size_t len) {
  if (offset + len > size(x)) {
    shape_error(Op::Slice, "range [" + std::to_string(offset) + ", " + std::to_string(offset + len) +
                               ") exceeds length " + std::to_string(size(x)));
  }
  if (offset == 0 && len == size(x)) return x;
  Node n = unary(Op::Slice, x, len);
  n.offset = offset;
  return push(std::move(n));
}

NodeId GraphBuilder::affine(const std::string& weight, const std::string& bias, std::size_t rows,
                            NodeId x) {
  return add(matvec(param(weight, rows * size(x)), x), param(bias, rows));
}

NodeId GraphBuilder::linear(const std::string& weight, std::size_t rows, NodeId x) {
  return matvec(param(weight, rows * size(x)), x);
}

NodeId GraphBuilder::inline_program(const Program& program, NodeId x) {
  return inline_jvp(program, x, std::nullopt).first;
}

std::optional<NodeId> GraphBuilder::jvp_rule(const Node& src, const std::vector<NodeId>& p,
                                             const std::vector<std::optional<NodeId>>& t,
                                             NodeId y) {
  auto sum_terms = [this](std::optional<NodeId> u, std::optional<NodeId> v) -> std::optional<NodeId> {
    if (u && v) return add(*u, *v);
    return u ? u : v;
  };
  switch (src.op) {
    case Op::Input:
    case Op::Param:
    case Op::Const:
      return std::nullopt;
    case Op::MatVec: {
      std::optional<NodeId> a, b;
      if (t[0]) a = matvec(*t[0], p[1]);
      if (t[1]) b = matvec(p[0], *t[1]);
      return sum_terms(a, b);
    }
    case Op::MatVecT: {
      std::optional<NodeId> a, b;
      if (t[0]) a = matvec_t(*t[0], p[1]);
      if (t[1]) b = matvec_t(p[0], *t[1]);
      return sum_terms(a, b);
    }
    case Op::Add:
      return sum_terms(t[0], t[1]);
    case Op::Sub:
      if (t[0] && t[1]) return sub(*t[0], *t[1]);
      if (t[0]) return t[0];
      if (t[1]) return scale(*t[1], -1.0);
      return std::nullopt;
    case Op::Mul: {
      std::optional<NodeId> a, b;
      if (t[0]) a = mul(*t[0], p[1]);
      if (t[1]) b = mul(p[0], *t[1]);
      return sum_terms(a, b);
    }
    default:
      break;
  }

  // Remaining ops are unary in their differentiable argument.
  const std::size_t arg = src.op == Op::LeakyMask ? 1 : 0;
  if (!t[arg]) return std::nullopt;
  const NodeId dx = *t[arg];
  switch (src.op) {
    case Op::ScaleShift: return scale(dx, src.a);
    case Op::Tanh: return mul(scale_shift(square(y), -1.0, 1.0), dx);
    case Op::Sigmoid: return mul(mul(y, scale_shift(y, -1.0, 1.0)), dx);
    case Op::LeakyRelu: return leaky_mask(p[0], dx, src.a);
    case Op::LeakyMask: return leaky_mask(p[0], dx, src.a);
    case Op::Exp: return mul(y, dx);
    case Op::Log: return mul(reciprocal(p[0]), dx);
    case Op::Reciprocal: return scale(mul(square(y), dx), -1.0);
    case Op::Square: return scale(mul(p[0], dx), 2.0);
    case Op::Softmax: return mul(y, sub(dx, broadcast(dot(y, dx), src.size)));
    case Op::Sum: return sum(dx);
    case Op::Broadcast: return broadcast(dx, src.size);
    case Op::Slice: return slice(dx, src.offset, src.size);
    default: break;
  }
  throw ConfigError(std::string("no forward-mode rule for ") + op_name(src.op));
}

std::pair<NodeId, std::optional<NodeId>> GraphBuilder::inline_jvp(const Program& program,
                                                                  NodeId x,
                                                                  std::optional<NodeId> t) {
  if (size(x) != program.input_size()) {
    shape_error(Op::Input, "program expects input length " + std::to_string(program.input_size()) +
                               ", got " + std::to_string(size(x)));
  }
  if (t && size(*t) != size(x)) shape_error(Op::Input, "tangent length differs from input length");

  const auto& src = program.nodes();
  std::vector<NodeId> primal(src.size());
  std::vector<std::optional<NodeId>> tangent(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    const Node& n = src[i];
    std::vector<NodeId> p;
    std::vector<std::optional<NodeId>> tin;
    for (NodeId j : n.in) {
      p.push_back(primal[j]);
      tin.push_back(tangent[j]);
    }
    switch (n.op) {
      case Op::Input:
        primal[i] = x;
        tangent[i] = t;
        continue;
      case Op::Param:
        primal[i] = param(program.params()[n.param].name, n.size);
        continue;
      case Op::Const:
        primal[i] = constant(n.value);
        continue;
      default:
        break;
    }
    Node copy = n;
    copy.in = p;
    copy.param = 0;
    primal[i] = push(std::move(copy));

    if (n.op == Op::Concat) {
      bool any = false;
      for (const auto& ti : tin) any = any || ti.has_value();
      if (any) {
        std::vector<NodeId> parts;
        for (std::size_t k = 0; k < tin.size(); ++k) {
          parts.push_back(tin[k] ? *tin[k] : zeros(size(p[k])));
        }
        tangent[i] = concat(parts);
      }
      continue;
    }
    bool any = false;
    for (const auto& ti : tin) any = any || ti.has_value();
    if (any) tangent[i] = jvp_rule(n, p, tin, primal[i]);
  }
  return {primal[program.output()], tangent[program.output()]};
}

Program GraphBuilder::finish(NodeId output) && {
  // Drop nodes the output does not depend on and renumber.
  std::vector<bool> live(nodes_.size(), false);
  live[0] = true;
  live[output] = true;
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    if (!live[i]) continue;
    for (NodeId j : nodes_[i].in) live[j] = true;
  }
  std::vector<NodeId> remap(nodes_.size(), 0);
  std::vector<bool> param_used(params_.size(), false);
  Program prog;
  prog.input_size_ = nodes_[0].size;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!live[i]) continue;
    Node n = std::move(nodes_[i]);
    for (auto& j : n.in) j = remap[j];
    if (n.op == Op::Param) param_used[n.param] = true;
    remap[i] = static_cast<NodeId>(prog.nodes_.size());
    prog.nodes_.push_back(std::move(n));
  }
  std::vector<std::uint32_t> param_remap(params_.size(), 0);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    if (!param_used[k]) continue;
    param_remap[k] = static_cast<std::uint32_t>(prog.params_.size());
    prog.params_.push_back(params_[k]);
  }
  for (auto& n : prog.nodes_) {
    if (n.op == Op::Param) n.param = param_remap[n.param];
  }
  prog.output_ = remap[output];
  return prog;
}

Program jvp_program(const Program& program) {
  const std::size_t n = program.input_size();
  GraphBuilder b(2 * n);
  const NodeId x = b.slice(b.input(), 0, n);
  const NodeId t = b.slice(b.input(), n, n);
  auto [y, dy] = b.inline_jvp(program, x, t);
  return std::move(b).finish(dy ? *dy : b.zeros(b.size(y)));
}

}  // namespace icenode::diff
