#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <string>
#include <utility>

#include "icenode/ehr.hpp"
#include "icenode/error.hpp"

namespace icenode::ehr {

void SyntheticConfig::validate() const {
  if (n_patients < 1) throw ConfigError("n_patients must be >= 1");
  if (n_codes < 8) throw ConfigError("n_codes must be >= 8");
  if (!(threshold_weeks >= 0.0)) throw ConfigError("threshold_weeks must be >= 0");
  if (!(gap_median_days > 0.0) || !(gap_sigma >= 0.0)) {
    throw ConfigError("gap_median_days must be positive and gap_sigma >= 0");
  }
  if (!(admissions_p >= 0.0 && admissions_p < 1.0)) {
    throw ConfigError("admissions_p must be in [0, 1)");
  }
  if (min_admissions < 1 || max_admissions < min_admissions) {
    throw ConfigError("need 1 <= min_admissions <= max_admissions");
  }
  const std::pair<const char*, double> probs[] = {
      {"p_cause", p_cause}, {"p_cause_visit", p_cause_visit}, {"p_switch", p_switch}};
  for (const auto& [key, p] : probs) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string(key) + " must be in [0, 1]");
  }
  if (background_per_visit < 1) throw ConfigError("background_per_visit must be >= 1");
}

namespace {

std::string numbered(const char* prefix, std::size_t i, int width) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%0*zu", prefix, width, i);
  return buf;
}

}  // namespace

SyntheticCohort generate_synthetic_cohort(const SyntheticConfig& cfg) {
  cfg.validate();
  const std::size_t C = cfg.n_codes;

  std::vector<std::string> labels{"CAUSE", "EFFECT"};
  for (std::size_t i = 2; i < C; ++i) labels.push_back(numbered("D", i, 3));

  // Two-level hierarchy: background codes in groups of four, the signal
  // pair in a group of its own, all groups under one root.
  std::vector<std::pair<std::string, std::string>> edges{{"CAUSE", "SIGNAL"},
                                                         {"EFFECT", "SIGNAL"},
                                                         {"SIGNAL", "ROOT"}};
  for (std::size_t i = 2; i < C; ++i) {
    const std::string group = numbered("G", (i - 2) / 4, 2);
    edges.emplace_back(labels[i], group);
    if ((i - 2) % 4 == 0) edges.emplace_back(group, "ROOT");
  }

  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> z(0.0, 1.0);
  std::uniform_int_distribution<int> stay_dist(1, 10);
  std::uniform_int_distribution<int> start_dist(0, 365);
  // Background codes split into two halves, one per latent state.
  const std::size_t n_bg = C - 2, half = n_bg / 2;
  std::uniform_int_distribution<std::size_t> in_low(0, half - 1), in_high(half, n_bg - 1);

  SyntheticCohort out{{}, Vocabulary(labels), Ontology(edges)};
  out.records.reserve(cfg.n_patients);
  const int id_width = std::max(1, static_cast<int>(std::to_string(cfg.n_patients).size()));
  for (std::size_t p = 0; p < cfg.n_patients; ++p) {
    PatientRecord rec;
    rec.subject_id = numbered("S", p, id_width);

    std::size_t n_adm = cfg.min_admissions;
    while (n_adm < cfg.max_admissions && u01(rng) < cfg.admissions_p) ++n_adm;
    const bool carrier = u01(rng) < cfg.p_cause;
    int state = u01(rng) < 0.5 ? 0 : 1;

    double discharge = start_dist(rng);
    double first_cause = -1.0;  // weeks; negative until the cause shows up
    for (std::size_t k = 0; k < n_adm; ++k) {
      const double stay = stay_dist(rng);
      if (k == 0) {
        discharge += stay;
      } else {
        const double gap =
            std::max(1.0, std::round(cfg.gap_median_days * std::exp(cfg.gap_sigma * z(rng))));
        discharge += gap + stay;
      }
      Admission a;
      a.time_days = discharge;
      a.stay_days = stay;
      a.time = days_to_weeks(discharge - (rec.admissions.empty() ? discharge
                                                                 : rec.admissions[0].time_days));

      if (u01(rng) < cfg.p_switch) state = 1 - state;
      for (std::size_t j = 0; j < cfg.background_per_visit; ++j) {
        const bool own = u01(rng) < 0.8;
        const bool low = (state == 0) == own;
        a.codes.push_back(static_cast<CodeId>(2 + (low ? in_low(rng) : in_high(rng))));
      }
      if (first_cause >= 0.0 && a.time - first_cause > cfg.threshold_weeks) {
        a.codes.push_back(kEffectCode);
      }
      if (carrier && u01(rng) < cfg.p_cause_visit) {
        a.codes.push_back(kCauseCode);
        if (first_cause < 0.0) first_cause = a.time;
      }
      std::sort(a.codes.begin(), a.codes.end());
      a.codes.erase(std::unique(a.codes.begin(), a.codes.end()), a.codes.end());
      rec.admissions.push_back(std::move(a));
    }
    out.records.push_back(std::move(rec));
  }
  return out;
}

}  // namespace icenode::ehr
