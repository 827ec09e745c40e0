#include <numeric>

#include <benchmark/benchmark.h>
#include <spdlog/spdlog.h>

#include "icenode/evaluation.hpp"
#include "icenode/training.hpp"

using namespace icenode;

namespace {

// Desk-scale model on a default synthetic cohort of 256 patients.
struct Setup {
  ehr::SyntheticCohort cohort;
  std::vector<ehr::PatientRecord> patients;
  std::vector<std::size_t> all;
  model::ModelConfig config;
  std::unique_ptr<model::Model> model;
  diff::ParameterSet params;

  Setup() : cohort(make()) {
    patients = ehr::filter_cohort(cohort.records).patients;
    all.resize(patients.size());
    std::iota(all.begin(), all.end(), 0);
    config.d_e = 16;
    config.d_m = 8;
    model = std::make_unique<model::Model>(config, cohort.vocabulary.size());
    params = model->make_params(1);
  }
  static ehr::SyntheticCohort make() {
    spdlog::set_level(spdlog::level::warn);
    ehr::SyntheticConfig c;
    c.n_patients = 256;
    return ehr::generate_synthetic_cohort(c);
  }
  std::vector<std::size_t> batch(std::size_t n) const { return {all.begin(), all.begin() + n}; }
  static const Setup& get() {
    static const Setup s;
    return s;
  }
};

void BM_BatchGradientSerial(benchmark::State& state) {
  const auto& s = Setup::get();
  const auto b = s.batch(state.range(0));
  for (auto _ : state)
    benchmark::DoNotOptimize(train::batch_gradient_serial(*s.model, s.params, s.patients, b));
  state.SetItemsProcessed(state.iterations() * b.size());
}

void BM_BatchGradientParallel(benchmark::State& state) {
  const auto& s = Setup::get();
  const auto b = s.batch(state.range(0));
  const int threads = static_cast<int>(state.range(1));
  for (auto _ : state)
    benchmark::DoNotOptimize(train::batch_gradient(*s.model, s.params, s.patients, b, threads));
  state.SetItemsProcessed(state.iterations() * b.size());
}

void BM_ScorePatientsSerial(benchmark::State& state) {
  const auto& s = Setup::get();
  auto pred = model::make_predictor(s.config, s.cohort.vocabulary.size(), nullptr, s.params);
  for (auto _ : state)
    benchmark::DoNotOptimize(
        eval::score_patients_serial(*pred, s.patients, s.all, s.cohort.vocabulary.size()));
  state.SetItemsProcessed(state.iterations() * s.all.size());
}

void BM_ScorePatientsParallel(benchmark::State& state) {
  const auto& s = Setup::get();
  auto pred = model::make_predictor(s.config, s.cohort.vocabulary.size(), nullptr, s.params);
  const int threads = static_cast<int>(state.range(0));
  for (auto _ : state)
    benchmark::DoNotOptimize(
        eval::score_patients(*pred, s.patients, s.all, s.cohort.vocabulary.size(), threads));
  state.SetItemsProcessed(state.iterations() * s.all.size());
}

}  // namespace

BENCHMARK(BM_BatchGradientSerial)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_BatchGradientParallel)
    ->ArgsProduct({{16, 64}, {1, 2, 4}})
    ->Unit(benchmark::kMillisecond)
    ->UseRealTime();
BENCHMARK(BM_ScorePatientsSerial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ScorePatientsParallel)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMillisecond)->UseRealTime();

BENCHMARK_MAIN();
