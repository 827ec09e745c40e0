#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "icenode/cli.hpp"
#include "icenode/error.hpp"

namespace fs = std::filesystem;
using namespace icenode;

namespace {

// Settings from --config, then --set items, then dedicated flags.
struct SettingsFlags {
  std::string config;
  std::vector<std::string> set;
  cli::Settings flags;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "Flat key = value settings file");
    app->add_option("--set", set, "Override a setting, key=value (repeatable)");
  }
  // A dedicated flag writing one settings key.
  void flag(CLI::App* app, const std::string& name, const std::string& key, const std::string& help) {
    app->add_option_function<std::string>(name, [this, key](const std::string& v) { flags[key] = v; },
                                          help);
  }
  cli::Settings resolve() const {
    cli::Settings s;
    if (!config.empty()) s = cli::read_settings_file(config);
    s = cli::merge(std::move(s), cli::parse_overrides(set));
    return cli::merge(std::move(s), flags);
  }
};

void add_data(CLI::App* app, fs::path& data) {
  app->add_option("--data", data, "Dataset directory")->envname("ICENODE_DATA")->required();
}

void add_out(CLI::App* app, fs::path& out) {
  app->add_option("--out", out, "Output directory")->envname("ICENODE_OUT")->required();
}

void add_threads(CLI::App* app, int& threads) {
  app->add_option("--threads", threads, "Worker threads for per-patient work")
      ->default_val(1)
      ->check(CLI::PositiveNumber);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ICE-NODE: continuous-time models of patient code histories"};
  app.require_subcommand(1);
  app.fallthrough();
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Log progress");

  // synth
  cli::SynthOptions synth;
  SettingsFlags synth_settings;
  auto* s = app.add_subcommand("synth", "Generate a seeded synthetic cohort");
  synth_settings.attach(s);
  synth_settings.flag(s, "--seed", "seed", "Generator seed");
  synth_settings.flag(s, "--n-patients", "n_patients", "Number of patients");
  add_out(s, synth.out);

  // train
  cli::TrainOptions train;
  SettingsFlags train_settings;
  std::string ontology;
  auto* t = app.add_subcommand("train", "Train a model and keep the best validation checkpoint");
  add_data(t, train.data);
  train_settings.attach(t);
  train_settings.flag(t, "--model", "model", "icenode, icenode-uniform, gru or logreg");
  train_settings.flag(t, "--embedding", "embedding", "matrix or gram");
  train_settings.flag(t, "--preset", "preset", "full or desk");
  train_settings.flag(t, "--seed", "seed", "Initialisation and batch seed");
  train_settings.flag(t, "--epochs", "epochs", "Training epochs");
  train_settings.flag(t, "--batch-size", "batch_size", "Patients per batch");
  t->add_option("--ontology", ontology, "Ontology file (default: ontology.tsv in --data)");
  add_out(t, train.out);
  add_threads(t, train.threads);

  // evaluate
  cli::EvaluateOptions ev;
  std::string ev_subset = "test";
  auto* e = app.add_subcommand("evaluate", "Top-k quantile accuracy and AUC reports");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  add_data(e, ev.data);
  e->add_option("--subset", ev_subset, "train, valid, test or all")->default_val("test");
  e->add_option("--k", ev.k, "Codes counted as predicted per visit")->default_val(15);
  e->add_flag("--macro", ev.macro, "Average per-code accuracies within each group");
  add_out(e, ev.out);
  add_threads(e, ev.threads);

  // compare
  cli::CompareOptions cmp;
  std::string cmp_subset = "test";
  auto* c = app.add_subcommand("compare", "Relative competency of models by DeLong tests");
  c->add_option("--checkpoint", cmp.checkpoints, "Checkpoint file (repeat, at least two)")
      ->required();
  c->add_option("--name", cmp.names, "Display name per checkpoint (repeatable)");
  add_data(c, cmp.data);
  c->add_option("--subset", cmp_subset, "train, valid, test or all")->default_val("test");
  c->add_option("--p-threshold", cmp.p_threshold, "DeLong significance level")->default_val(0.01);
  c->add_option("--auc-threshold", cmp.auc_threshold, "Minimum best AUC for a code")
      ->default_val(0.9);
  add_out(c, cmp.out);
  add_threads(c, cmp.threads);

  // trajectory
  cli::TrajectoryCommandOptions tr;
  double until = 0.0;
  auto* r = app.add_subcommand("trajectory", "Dense risk curves for one patient");
  r->add_option("--checkpoint", tr.checkpoint, "Checkpoint file")->required();
  add_data(r, tr.data);
  r->add_option("--subject", tr.subject, "Subject id")->required();
  r->add_option("--code", tr.codes, "Code label (repeatable; default: the patient's codes)");
  r->add_option("--resolution", tr.resolution, "Subintervals per gap")
      ->default_val(64)
      ->check(CLI::PositiveNumber);
  auto* until_opt = r->add_option("--until", until, "Continue past the last admission to this week");
  add_out(r, tr.out);

  // gradcheck
  cli::GradcheckOptions gc;
  auto* g = app.add_subcommand("gradcheck", "Run the derivative oracles");
  g->add_flag("--inject-tanh-fault", gc.inject_tanh_fault,
              "Flip the sign of the tanh derivative rule to exercise the checker");
  add_out(g, gc.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : static_cast<int>(ErrorKind::Config);
  }
  spdlog::set_level(verbose ? spdlog::level::info : spdlog::level::warn);

  try {
    if (*s) {
      synth.settings = synth_settings.resolve();
      auto res = cli::cmd_synth(synth);
      std::cout << "wrote " << res.patients << " patients to " << synth.out.string() << '\n';
    } else if (*t) {
      train.settings = train_settings.resolve();
      if (!ontology.empty()) train.ontology = ontology;
      auto res = cli::cmd_train(train);
      std::cout << "best validation visit-AUC " << res.history.best_auc << " at iteration "
                << res.history.best_iteration << "; checkpoint " << res.checkpoint.string() << '\n';
    } else if (*e) {
      ev.subset = cli::parse_subset(ev_subset);
      auto res = cli::cmd_evaluate(ev);
      std::cout << "visit-AUC " << res.visit_auc.mean << " over " << res.visit_auc.visits
                << " visits; reports in " << ev.out.string() << '\n';
    } else if (*c) {
      cmp.subset = cli::parse_subset(cmp_subset);
      auto res = cli::cmd_compare(cmp);
      std::cout << res.codes.size() << " codes assigned; reports in " << cmp.out.string() << '\n';
    } else if (*r) {
      if (*until_opt) tr.until = until;
      const auto path = cli::cmd_trajectory(tr);
      std::cout << "wrote " << path.string() << '\n';
    } else if (*g) {
      auto res = cli::cmd_gradcheck(gc);
      for (const auto& ch : res.checks) {
        std::cout << (ch.passed ? "PASS  " : "FAIL  ") << ch.name << "  max rel. error "
                  << ch.max_rel_error << " (tolerance " << ch.tolerance << ")\n";
      }
      if (!res.passed()) return static_cast<int>(ErrorKind::Numerical);
    }
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << '\n';
    return static_cast<int>(err.kind());
  } catch (const fs::filesystem_error& err) {
    std::cerr << "error: " << err.what() << '\n';
    return static_cast<int>(ErrorKind::Io);
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  }
  return 0;
}
