#include <chrono>
#include <cmath>
#include <random>

#include "icenode/cli.hpp"
#include "icenode/diff/autodiff.hpp"
#include "icenode/ode.hpp"
#include "icenode/text_io.hpp"

namespace icenode::cli {

namespace {

// Restores the fault flag however the checks exit.
class FaultGuard {
 public:
  explicit FaultGuard(bool on) { diff::testing::set_tanh_vjp_fault(on); }
  ~FaultGuard() { diff::testing::set_tanh_vjp_fault(false); }
  FaultGuard(const FaultGuard&) = delete;
  FaultGuard& operator=(const FaultGuard&) = delete;
};

std::vector<double> random_vector(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

std::shared_ptr<const ehr::CodeHierarchy> toy_hierarchy(std::size_t C) {
  std::vector<std::string> labels;
  std::vector<std::pair<std::string, std::string>> edges;
  for (std::size_t i = 0; i < C; ++i) {
    labels.push_back("c" + std::to_string(i));
    edges.emplace_back(labels.back(), i % 2 ? "odd" : "even");
  }
  edges.emplace_back("odd", "root");
  edges.emplace_back("even", "root");
  return std::make_shared<const ehr::CodeHierarchy>(
      ehr::build_hierarchy(ehr::Ontology(edges), ehr::Vocabulary(labels)));
}

ehr::PatientRecord toy_patient() {
  const std::vector<double> times{0.0, 2.5, 7.0};
  const std::vector<std::vector<ehr::CodeId>> codes{{0, 3}, {1, 2, 5}, {4}};
  ehr::PatientRecord p;
  p.subject_id = "toy";
  for (std::size_t k = 0; k < times.size(); ++k) {
    ehr::Admission a;
    a.time = times[k];
    a.time_days = times[k] * 7.0;
    a.codes = codes[k];
    p.admissions.push_back(a);
  }
  return p;
}

model::ModelConfig toy_config() {
  model::ModelConfig c;
  c.d_e = 4;
  c.d_m = 3;
  c.attention_size = 5;
  c.reg_order = 3;
  c.reg_weight = 1000.0;
  c.solver = {1e-9, 1e-12, 1000000, 0.0};
  return c;
}

// Reverse mode against central differences for one program.
double program_check(const diff::Program& prog, const diff::ParameterSet& params,
                     std::mt19937_64& rng) {
  auto x = random_vector(rng, prog.input_size());
  auto c = random_vector(rng, prog.output_size());
  auto g = diff::gradient(prog, params, x, c);
  auto fd = diff::finite_difference_gradient(prog, params, x, c, 1e-6);
  return std::max(diff::max_relative_error(g.params, fd.params),
                  diff::max_relative_error(g.input, fd.input));
}

// Full patient loss gradient against central differences.
double model_check(const model::Model& m, diff::ParameterSet p) {
  const auto patient = toy_patient();
  std::vector<double> grad(m.grad_size(p), 0.0);
  m.patient_forward(p, m.prepare(p), patient, grad);
  m.finish_gradient(p, grad);
  grad.resize(p.size());
  auto loss = [&] { return m.patient_forward(p, m.prepare(p), patient).loss; };
  std::vector<double> fd(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double x = p.flat()[i];
    const double h = 1e-5 * std::max(1.0, std::abs(x));
    p.flat()[i] = x + h;
    const double up = loss();
    p.flat()[i] = x - h;
    const double down = loss();
    p.flat()[i] = x;
    fd[i] = (up - down) / (2 * h);
  }
  return diff::max_relative_error(grad, fd);
}

}  // namespace

bool GradcheckResult::passed() const {
  for (const auto& c : checks)
    if (!c.passed) return false;
  return true;
}

GradcheckResult cmd_gradcheck(const GradcheckOptions& o) {
  const auto start = std::chrono::steady_clock::now();
  FaultGuard fault(o.inject_tanh_fault);
  GradcheckResult r;
  auto add = [&](std::string name, double err, double tol) {
    r.checks.push_back({std::move(name), err, tol, std::isfinite(err) && err < tol});
  };
  std::mt19937_64 rng(20240611);

  // Programs the model is built from.
  for (auto dyn : {model::DynamicsKind::Mlp3, model::DynamicsKind::Gru}) {
    auto cfg = toy_config();
    cfg.dynamics = dyn;
    cfg.decoder_depth = dyn == model::DynamicsKind::Gru ? 3 : 2;
    model::Model m(cfg, 6);
    auto p = m.make_params(1);
    const std::string tag = std::string(model::to_string(dyn));
    add("program: dynamics " + tag, program_check(m.field().field(), p, rng), 1e-6);
    add("program: smoothness K=3 " + tag, program_check(m.field().smoothness(3), p, rng), 1e-5);
    add("program: decoder depth " + std::to_string(cfg.decoder_depth),
        program_check(m.decoder(), p, rng), 1e-6);
    if (dyn == model::DynamicsKind::Mlp3) add("program: update cell", program_check(m.update(), p, rng), 1e-6);
  }

  // Adjoint against finite differences and the discrete gradient.
  {
    auto cfg = toy_config();
    cfg.d_m = 3;
    cfg.d_e = 5;
    model::Model m(cfg, 6);
    auto p = m.make_params(2);
    const auto& f = m.field();
    auto h0 = random_vector(rng, f.dim());
    auto c = random_vector(rng, f.dim());
    const double w = 0.5;
    const auto& sc = cfg.solver;
    auto loss = [&](const diff::ParameterSet& q) {
      auto sol = ode::ivp_solve(f, q, h0, 0.0, 1.0, sc, {false, 3, false});
      double s = w * sol.regularization;
      for (std::size_t i = 0; i < c.size(); ++i) s += c[i] * sol.final_state[i];
      return s;
    };
    auto sol = ode::ivp_solve(f, p, h0, 0.0, 1.0, sc, {true, 3, true});
    auto adj = ode::adjoint_gradient(f, p, sol, c, w, 3, sc);
    auto dis = ode::discrete_gradient(f, p, sol, c, w, 3);
    std::vector<double> fd(adj.param_grad.size());
    diff::ParameterSet q = p;
    for (std::size_t i = 0; i < fd.size(); ++i) {
      double& x = q.flat()[adj.param_begin + i];
      const double keep = x;
      x = keep + 1e-4;
      const double up = loss(q);
      x = keep - 1e-4;
      const double down = loss(q);
      x = keep;
      fd[i] = (up - down) / 2e-4;
    }
    add("ode: adjoint vs finite differences (d_h 8)", diff::max_relative_error(adj.param_grad, fd), 1e-3);
    add("ode: adjoint vs discrete gradient (d_h 8)",
        diff::max_relative_error(adj.param_grad, dis.param_grad), 1e-4);
  }

  // End-to-end patient loss, all parameter groups.
  {
    model::Model m(toy_config(), 6);
    add("model: matrix embedding, adjoint", model_check(m, m.make_params(7)), 1e-3);
    auto cfg = toy_config();
    cfg.embedding = emb::EmbeddingKind::Gram;
    cfg.gradient = model::GradientMethod::Discrete;
    model::Model g(cfg, 6, toy_hierarchy(6));
    add("model: gram tanh attention, discrete", model_check(g, g.make_params(8)), 1e-3);
    cfg.attention = emb::Attention::L2;
    cfg.gradient = model::GradientMethod::Adjoint;
    model::Model l(cfg, 6, toy_hierarchy(6));
    add("model: gram l2 attention, adjoint", model_check(l, l.make_params(9)), 1e-3);
  }

  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::filesystem::create_directories(o.out);
  const auto path = o.out / "gradcheck.txt";
  auto out = detail::open_output(path);
  out.precision(3);
  for (const auto& c : r.checks) {
    out << (c.passed ? "PASS  " : "FAIL  ") << c.name << "  max rel. error " << std::scientific
        << c.max_rel_error << " (tolerance " << c.tolerance << ")\n";
  }
  out << (r.passed() ? "all checks passed\n" : "some checks FAILED\n");
  detail::finish_output(out, path);
  RunManifest man{"gradcheck", {{"inject_tanh_fault", o.inject_tanh_fault}}, 20240611, {}, {path}};
  man.wall_clock_seconds = seconds;
  nlohmann::json checks = nlohmann::json::array();
  for (const auto& c : r.checks)
    checks.push_back({{"name", c.name}, {"max_rel_error", c.max_rel_error},
                      {"tolerance", c.tolerance}, {"passed", c.passed}});
  man.extra = {{"checks", checks}, {"passed", r.passed()}};
  write_manifest(o.out, man);
  return r;
}

}  // namespace icenode::cli
