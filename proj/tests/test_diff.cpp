#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <functional>

#include "icenode/diff/autodiff.hpp"
#include "icenode/error.hpp"
#include "test_support.hpp"

using namespace icenode;
using namespace icenode::diff;
using icenode::test::dot;
using icenode::test::random_vector;

namespace {

// Three-layer perceptron used by several checks.
Program perceptron(std::size_t n, std::size_t hidden, std::size_t out) {
  GraphBuilder b(n);
  NodeId h = b.tanh(b.affine("W1", "b1", hidden, b.input()));
  h = b.leaky_relu(b.affine("W2", "b2", hidden, h), 0.01);
  h = b.sigmoid(b.affine("W3", "b3", out, h));
  return std::move(b).finish(h);
}

ParameterSet perceptron_params(std::size_t n, std::size_t hidden, std::size_t out,
                               std::mt19937_64& rng) {
  ParameterSet p;
  p.add("W1", ParamGroup::Other, {hidden, n});
  p.add("b1", ParamGroup::Other, {hidden});
  p.add("W2", ParamGroup::Other, {hidden, hidden});
  p.add("b2", ParamGroup::Other, {hidden});
  p.add("W3", ParamGroup::Other, {out, hidden});
  p.add("b3", ParamGroup::Other, {out});
  icenode::test::randomize(p, rng);
  return p;
}

// Single-primitive programs over an input of length n, paired with a domain
// transform of the input so that log/reciprocal stay well defined.
struct PrimitiveCase {
  const char* name;
  std::size_t n;
  std::function<NodeId(GraphBuilder&)> build;
};

std::vector<PrimitiveCase> primitive_cases() {
  return {
      {"matvec", 4, [](GraphBuilder& b) { return b.matvec(b.param("W", 12), b.input()); }},
      {"matvec_t", 4, [](GraphBuilder& b) { return b.matvec_t(b.param("W", 12), b.input()); }},
      {"matvec_input_matrix", 6,
       [](GraphBuilder& b) { return b.matvec(b.input(), b.slice(b.input(), 0, 3)); }},
      {"add", 4, [](GraphBuilder& b) { return b.add(b.input(), b.param("v", 4)); }},
      {"sub", 4, [](GraphBuilder& b) { return b.sub(b.param("v", 4), b.input()); }},
      {"mul", 4, [](GraphBuilder& b) { return b.mul(b.input(), b.exp(b.input())); }},
      {"scale_shift", 4, [](GraphBuilder& b) { return b.scale_shift(b.input(), -1.7, 0.3); }},
      {"tanh", 4, [](GraphBuilder& b) { return b.tanh(b.input()); }},
      {"sigmoid", 4, [](GraphBuilder& b) { return b.sigmoid(b.input()); }},
      {"leaky_relu", 4, [](GraphBuilder& b) { return b.leaky_relu(b.input(), 0.1); }},
      {"leaky_mask", 4,
       [](GraphBuilder& b) { return b.leaky_mask(b.param("v", 4), b.input(), 0.2); }},
      {"exp", 4, [](GraphBuilder& b) { return b.exp(b.input()); }},
      {"log", 4, [](GraphBuilder& b) { return b.log(b.exp(b.input())); }},
      {"reciprocal", 4,
       [](GraphBuilder& b) { return b.reciprocal(b.scale_shift(b.square(b.input()), 1.0, 1.0)); }},
      {"square", 4, [](GraphBuilder& b) { return b.square(b.input()); }},
      {"softmax", 5, [](GraphBuilder& b) { return b.softmax(b.input()); }},
      {"sum", 4, [](GraphBuilder& b) { return b.sum(b.input()); }},
      {"broadcast", 4,
       [](GraphBuilder& b) { return b.broadcast(b.slice(b.input(), 1, 1), 3); }},
      {"concat", 4,
       [](GraphBuilder& b) { return b.concat({b.input(), b.param("v", 4), b.tanh(b.input())}); }},
      {"slice", 5, [](GraphBuilder& b) { return b.slice(b.input(), 1, 3); }},
  };
}

ParameterSet primitive_params(std::mt19937_64& rng) {
  ParameterSet p;
  p.add("W", ParamGroup::Other, {3, 4});
  p.add("v", ParamGroup::Other, {4});
  icenode::test::randomize(p, rng);
  return p;
}

}  // namespace

TEST_CASE("evaluate: identity affine, equal-logit softmax, tanh at zero") {
  GraphBuilder b(3);
  const NodeId y = b.affine("W", "b", 3, b.input());
  Program aff = std::move(b).finish(y);
  ParameterSet p;
  p.add("W", ParamGroup::Other, {3, 3});
  p.add("b", ParamGroup::Other, {3});
  auto w = p.values("W");
  w[0] = w[4] = w[8] = 1.0;
  std::vector<double> x{0.5, -2.0, 3.25};
  CHECK(evaluate(aff, p, x) == x);

  GraphBuilder bs(6);
  Program sm = std::move(bs).finish(bs.softmax(bs.input()));
  for (double v : evaluate(sm, ParameterSet{}, std::vector<double>(6, 2.5))) {
    CHECK(v == doctest::Approx(1.0 / 6.0).epsilon(1e-15));
  }

  GraphBuilder bt(4);
  Program th = std::move(bt).finish(bt.tanh(bt.input()));
  for (double v : evaluate(th, ParameterSet{}, std::vector<double>(4, 0.0))) CHECK(v == 0.0);
}

TEST_CASE("evaluate: shape mismatch names the primitive") {
  GraphBuilder b(3);
  try {
    b.add(b.input(), b.param("v", 4));
    FAIL("expected shape error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("add") != std::string::npos);
  }
  GraphBuilder b2(3);
  CHECK_THROWS_AS(b2.matvec(b2.param("W", 7), b2.input()), ConfigError);
  Program p = std::move(b2).finish(b2.tanh(b2.input()));
  CHECK_THROWS_AS(evaluate(p, ParameterSet{}, std::vector<double>(2, 0.0)), ConfigError);

  GraphBuilder b3(2);
  Program q = std::move(b3).finish(b3.affine("W", "b", 2, b3.input()));
  ParameterSet wrong;
  wrong.add("W", ParamGroup::Other, {3, 2});
  wrong.add("b", ParamGroup::Other, {2});
  CHECK_THROWS_AS(evaluate(q, wrong, std::vector<double>(2, 0.0)), ConfigError);
}

TEST_CASE("gradient: scalar p*x, zero cotangent, log of zero") {
  GraphBuilder b(1);
  Program prog = std::move(b).finish(b.mul(b.param("p", 1), b.input()));
  ParameterSet p;
  p.add("p", ParamGroup::Dynamics, {1})[0] = 3.0;
  std::vector<double> x{1.75}, one{1.0}, zero{0.0};
  auto g = gradient(prog, p, x, one);
  CHECK(g.params[0] == 1.75);
  CHECK(g.input[0] == 3.0);
  auto z = gradient(prog, p, x, zero);
  CHECK(z.params[0] == 0.0);
  CHECK(z.input[0] == 0.0);

  GraphBuilder bl(2);
  Program lg = std::move(bl).finish(bl.sum(bl.log(bl.input())));
  CHECK_THROWS_AS(gradient(lg, ParameterSet{}, std::vector<double>{1.0, 0.0}, one), NumericalError);
}

TEST_CASE("gradient: sum(tanh(Wx)) against central differences") {
  std::mt19937_64 rng(7);
  GraphBuilder b(5);
  Program prog = std::move(b).finish(b.sum(b.tanh(b.linear("W", 4, b.input()))));
  ParameterSet p;
  p.add("W", ParamGroup::Other, {4, 5});
  icenode::test::randomize(p, rng);
  auto x = random_vector(rng, 5);
  std::vector<double> one{1.0};
  auto g = gradient(prog, p, x, one);
  auto fd = finite_difference_gradient(prog, p, x, one, 1e-6);
  CHECK(max_relative_error(g.params, fd.params) < 1e-6);
  CHECK(max_relative_error(g.input, fd.input) < 1e-6);
}

TEST_CASE("finite differences: quadratic, perceptron self-consistency, constant") {
  GraphBuilder b(2);
  Program quad = std::move(b).finish(b.scale(b.sum(b.square(b.input())), 0.5));
  std::vector<double> one{1.0};
  auto fd = finite_difference_gradient(quad, ParameterSet{}, std::vector<double>{1.0, 2.0}, one, 1e-4);
  CHECK(fd.input[0] == doctest::Approx(1.0).epsilon(1e-8));
  CHECK(fd.input[1] == doctest::Approx(2.0).epsilon(1e-8));

  std::mt19937_64 rng(11);
  Program mlp = perceptron(4, 6, 3);
  ParameterSet p = perceptron_params(4, 6, 3, rng);
  auto x = random_vector(rng, 4);
  auto cot = random_vector(rng, 3);
  auto g = gradient(mlp, p, x, cot);
  auto f = finite_difference_gradient(mlp, p, x, cot, 1e-6);
  CHECK(max_relative_error(g.params, f.params) < 1e-5);
  CHECK(max_relative_error(g.input, f.input) < 1e-5);

  GraphBuilder bc(3);
  Program cst = std::move(bc).finish(bc.sum(bc.constant({1.0, 2.0})));
  auto c = finite_difference_gradient(cst, ParameterSet{}, std::vector<double>{0.1, 0.2, 0.3}, one, 1e-6);
  for (double v : c.input) CHECK(v == 0.0);
}

TEST_CASE("jvp: linear map, central differences, zero tangent") {
  std::mt19937_64 rng(3);
  GraphBuilder b(3);
  Program lin = std::move(b).finish(b.linear("A", 3, b.input()));
  ParameterSet p;
  auto a = p.add("A", ParamGroup::Dynamics, {3, 3});
  icenode::test::randomize(p, rng);
  auto x = random_vector(rng, 3);
  auto u = random_vector(rng, 3);
  auto d = jvp(lin, p, x, u);
  for (std::size_t r = 0; r < 3; ++r) {
    double expect = 0.0;
    for (std::size_t c = 0; c < 3; ++c) expect += a[r * 3 + c] * u[c];
    CHECK(d[r] == doctest::Approx(expect).epsilon(1e-14));
  }
  auto z = jvp(lin, p, x, std::vector<double>(3, 0.0));
  for (double v : z) CHECK(v == 0.0);

  Program mlp = perceptron(3, 5, 4);
  ParameterSet q = perceptron_params(3, 5, 4, rng);
  auto dj = jvp(mlp, q, x, u);
  for (double eps : {1e-3, 5e-4}) {
    std::vector<double> xp = x, xm = x;
    for (std::size_t k = 0; k < 3; ++k) {
      xp[k] += eps * u[k];
      xm[k] -= eps * u[k];
    }
    auto yp = evaluate(mlp, q, xp);
    auto ym = evaluate(mlp, q, xm);
    for (std::size_t k = 0; k < 4; ++k) {
      // O(eps^2) truncation with a generous constant.
      CHECK(std::abs((yp[k] - ym[k]) / (2 * eps) - dj[k]) < 10 * eps * eps);
    }
  }
}

TEST_CASE("every primitive: reverse rule is the transpose of the forward rule") {
  std::mt19937_64 rng(101);
  for (const auto& c : primitive_cases()) {
    CAPTURE(c.name);
    GraphBuilder b(c.n);
    const NodeId out = c.build(b);
    Program prog = std::move(b).finish(out);
    ParameterSet p = primitive_params(rng);
    for (int trial = 0; trial < 5; ++trial) {
      auto x = random_vector(rng, c.n);
      auto u = random_vector(rng, c.n);
      auto cot = random_vector(rng, prog.output_size());
      auto g = gradient(prog, p, x, cot);
      auto d = jvp(prog, p, x, u);
      const double lhs = dot(g.input, u);
      const double rhs = dot(cot, d);
      CHECK(std::abs(lhs - rhs) <= 1e-10 * std::max({1.0, std::abs(lhs), std::abs(rhs)}));
      auto fd = finite_difference_gradient(prog, p, x, cot, 1e-6);
      CHECK(max_relative_error(g.input, fd.input) < 1e-5);
      CHECK(max_relative_error(g.params, fd.params) < 1e-5);
    }
  }
}

namespace {

// Random straight-line composition of depth <= 5 over the primitive set.
Program random_composition(std::mt19937_64& rng, std::size_t n) {
  GraphBuilder b(n);
  std::vector<NodeId> pool{b.input(), b.param("v", n)};
  std::uniform_int_distribution<int> pick_op(0, 11);
  std::uniform_int_distribution<int> depth_dist(1, 5);
  const int depth = depth_dist(rng);
  NodeId cur = b.input();
  for (int d = 0; d < depth; ++d) {
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    const NodeId other = pool[pick(rng)];
    switch (pick_op(rng)) {
      case 0: cur = b.matvec(b.param("W", n * n), cur); break;
      case 1: cur = b.tanh(cur); break;
      case 2: cur = b.sigmoid(cur); break;
      case 3: cur = b.mul(cur, other); break;
      case 4: cur = b.add(cur, other); break;
      case 5: cur = b.softmax(cur); break;
      case 6: cur = b.log(b.sigmoid(cur)); break;
      case 7: cur = b.leaky_relu(cur, 0.05); break;
      case 8: cur = b.sub(b.scale_shift(cur, 0.7, -0.2), other); break;
      case 9: cur = b.matvec_t(b.param("W", n * n), cur); break;
      case 10: cur = b.exp(b.scale(cur, 0.5)); break;
      default: cur = b.concat({b.slice(cur, 1, n - 1), b.sum(other)}); break;
    }
    pool.push_back(cur);
  }
  return std::move(b).finish(cur);
}

}  // namespace

TEST_CASE("random compositions: gradient matches finite differences, jvp is linear") {
  std::mt19937_64 rng(2024);
  const std::size_t n = 4;
  for (int trial = 0; trial < 200; ++trial) {
    CAPTURE(trial);
    Program prog = random_composition(rng, n);
    ParameterSet p;
    p.add("v", ParamGroup::Other, {n});
    p.add("W", ParamGroup::Dynamics, {n, n});
    icenode::test::randomize(p, rng);
    auto x = random_vector(rng, n);
    auto cot = random_vector(rng, prog.output_size());
    auto g = gradient(prog, p, x, cot);
    auto fd = finite_difference_gradient(prog, p, x, cot, 1e-6);
    CHECK(max_relative_error(g.params, fd.params, 1e-6) < 1e-5);
    CHECK(max_relative_error(g.input, fd.input, 1e-6) < 1e-5);

    auto u = random_vector(rng, n);
    auto v = random_vector(rng, n);
    const double alpha = 0.75, beta = -1.25;
    std::vector<double> w(n);
    for (std::size_t k = 0; k < n; ++k) w[k] = alpha * u[k] + beta * v[k];
    auto ju = jvp(prog, p, x, u);
    auto jv = jvp(prog, p, x, v);
    auto jw = jvp(prog, p, x, w);
    std::vector<double> combo(ju.size());
    for (std::size_t k = 0; k < ju.size(); ++k) combo[k] = alpha * ju[k] + beta * jv[k];
    CHECK(max_relative_error(jw, combo, 1e-3) < 1e-12);
  }
}

TEST_CASE("nested forward mode: second directional derivative") {
  std::mt19937_64 rng(5);
  Program mlp = perceptron(3, 4, 3);
  ParameterSet p = perceptron_params(3, 4, 3, rng);
  // Second derivative of f along u: jvp of (x -> jvp(f, x, u)) along u.
  const auto x = random_vector(rng, 3);
  const auto u = random_vector(rng, 3);
  GraphBuilder b(3);
  auto [y, dy] = b.inline_jvp(mlp, b.input(), b.constant(u));
  Program first = std::move(b).finish(*dy);
  auto second = jvp(first, p, x, u);
  const double eps = 1e-4;
  std::vector<double> xp = x, xm = x;
  for (std::size_t k = 0; k < 3; ++k) {
    xp[k] += eps * u[k];
    xm[k] -= eps * u[k];
  }
  auto f0 = evaluate(mlp, p, x);
  auto fp = evaluate(mlp, p, xp);
  auto fm = evaluate(mlp, p, xm);
  for (std::size_t k = 0; k < 3; ++k) {
    const double fd2 = (fp[k] - 2 * f0[k] + fm[k]) / (eps * eps);
    CHECK(second[k] == doctest::Approx(fd2).epsilon(1e-4));
  }
}

TEST_CASE("common subexpressions are shared when inlining twice") {
  Program mlp = perceptron(3, 4, 3);
  GraphBuilder b(3);
  const NodeId a = b.inline_program(mlp, b.input());
  const NodeId c = b.inline_program(mlp, b.input());
  CHECK(a == c);
}

TEST_CASE("parameter archive: bit-exact round trip and corruption errors") {
  std::mt19937_64 rng(9);
  ParameterSet p = perceptron_params(3, 4, 2, rng);
  ParameterSet q;
  q.add("dyn", ParamGroup::Dynamics, {2, 2});
  q.add("oth", ParamGroup::Other, {3});
  q.values("dyn")[0] = -0.0;
  q.values("dyn")[1] = std::numeric_limits<double>::denorm_min();
  q.values("oth")[2] = 1.0 / 3.0;
  const auto dir = std::filesystem::temp_directory_path() / "icenode_test_diff";
  std::filesystem::create_directories(dir);
  for (const ParameterSet* ps : {&p, &q}) {
    const auto path = dir / "params.bin";
    save_archive(path, *ps, {{"note", "x"}});
    auto loaded = load_archive(path);
    CHECK(loaded.params.same_layout(*ps));
    CHECK(loaded.metadata.at("note") == "x");
    CHECK(std::memcmp(loaded.params.flat().data(), ps->flat().data(),
                      ps->size() * sizeof(double)) == 0);
  }
  CHECK(load_archive(dir / "params.bin").params.spec("dyn").group == ParamGroup::Dynamics);

  const auto path = dir / "params.bin";
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
  CHECK_THROWS_AS(load_archive(path), DataError);
  {
    std::ofstream junk(path, std::ios::trunc);
    junk << "something else\n";
  }
  CHECK_THROWS_AS(load_archive(path), DataError);
  CHECK_THROWS_AS(load_archive(dir / "missing.bin"), IoError);
}

TEST_CASE("fault injection in the tanh rule is caught by the finite-difference oracle") {
  std::mt19937_64 rng(17);
  GraphBuilder b(3);
  Program prog = std::move(b).finish(b.sum(b.tanh(b.linear("W", 3, b.input()))));
  ParameterSet p;
  p.add("W", ParamGroup::Other, {3, 3});
  icenode::test::randomize(p, rng);
  auto x = random_vector(rng, 3);
  std::vector<double> one{1.0};
  testing::set_tanh_vjp_fault(true);
  auto g = gradient(prog, p, x, one);
  testing::set_tanh_vjp_fault(false);
  auto fd = finite_difference_gradient(prog, p, x, one, 1e-6);
  CHECK(max_relative_error(g.params, fd.params) > 0.5);
}
