#include "icenode/trajectory.hpp"

#include <algorithm>
#include <exception>

#include "icenode/error.hpp"
#include "icenode/ode.hpp"
#include "icenode/text_io.hpp"

namespace icenode::traj {

namespace {

std::vector<double> select(const std::vector<double>& probs, const std::vector<ehr::CodeId>& codes) {
  std::vector<double> out(codes.size());
  for (std::size_t j = 0; j < codes.size(); ++j) out[j] = probs[codes[j]];
  return out;
}

}  // namespace

RiskTrajectory sample_risk_trajectory(const model::Model& model, const diff::ParameterSet& params,
                                      const ehr::PatientRecord& patient,
                                      const std::vector<ehr::CodeId>& codes,
                                      const std::vector<std::string>& labels,
                                      const TrajectoryOptions& options) {
  const auto& cfg = model.config();
  if (!cfg.is_ode()) throw ConfigError("risk trajectories need an ODE model");
  if (options.resolution == 0) throw ConfigError("trajectory resolution must be >= 1");
  if (labels.size() != codes.size()) throw ConfigError("one label per trajectory code is needed");
  for (auto c : codes) {
    if (c >= model.n_codes())
      throw ConfigError("code id " + std::to_string(c) + " is outside the vocabulary");
  }
  const auto& adm = patient.admissions;
  if (adm.size() < 2)
    throw DataError("patient '" + patient.subject_id + "' has fewer than two admissions");
  if (options.until && !(*options.until >= adm.back().time))
    throw ConfigError("trajectory end must not precede the last admission");

  RiskTrajectory out;
  out.subject_id = patient.subject_id;
  out.codes = codes;
  out.labels = labels;
  for (const auto& a : adm) {
    std::vector<std::uint8_t> flags(codes.size(), 0);
    for (std::size_t j = 0; j < codes.size(); ++j)
      flags[j] = std::binary_search(a.codes.begin(), a.codes.end(), codes[j]) ? 1 : 0;
    out.observed.push_back(std::move(flags));
  }

  const auto ctx = model.prepare(params);
  const std::size_t dm = cfg.d_m;
  const std::size_t r = options.resolution;
  ode::SolveOptions opts;  // dense, no regularizer: the step sequence matches training
  auto decode_row = [&](std::span<const double> state) {
    return select(model.decode(params, state.subspan(dm)), codes);
  };

  // Samples one interval; rows at j = 0 and j = r are left to the caller.
  auto sample = [&](std::span<const double> h, double t0, double t1) {
    auto sol = model.integrate(params, h, t0, t1, opts);
    const auto [a, b] = model.solve_interval(t0, t1);
    std::vector<double> solve_times;
    for (std::size_t j = 1; j < r; ++j) solve_times.push_back(a + (b - a) * double(j) / double(r));
    auto states = ode::dense_sample(sol, solve_times);
    for (std::size_t j = 1; j < r; ++j) {
      out.rows.push_back(
          {t0 + (t1 - t0) * double(j) / double(r), decode_row(states[j - 1]), std::nullopt, false});
    }
    return sol.final_state;
  };

  std::vector<double> h(dm, 0.0);
  {
    auto g0 = model.embed(params, ctx, adm[0].codes);
    h.insert(h.end(), g0.begin(), g0.end());
  }
  out.rows.push_back({adm[0].time, decode_row(h), 0, true});
  for (std::size_t k = 1; k < adm.size(); ++k) {
    const auto hm = sample(h, adm[k - 1].time, adm[k].time);
    out.rows.push_back({adm[k].time, decode_row(hm), k, false});
    if (k + 1 == adm.size() && !options.until) break;
    auto g = model.embed(params, ctx, adm[k].codes);
    h = model.update_memory(params, std::span<const double>(hm).subspan(0, dm), g);
    if (cfg.keep_integrated_embedding) {
      h.insert(h.end(), hm.begin() + static_cast<std::ptrdiff_t>(dm), hm.end());
    } else {
      h.insert(h.end(), g.begin(), g.end());
    }
    out.rows.push_back({adm[k].time, decode_row(h), k, true});
  }
  if (options.until && *options.until > adm.back().time) {
    const auto hf = sample(h, adm.back().time, *options.until);
    out.rows.push_back({*options.until, decode_row(hf), std::nullopt, false});
  }
  return out;
}

std::vector<RiskTrajectory> sample_risk_trajectories(
    const model::Model& model, const diff::ParameterSet& params,
    const std::vector<ehr::PatientRecord>& patients, const std::vector<std::size_t>& subset,
    const std::vector<ehr::CodeId>& codes, const std::vector<std::string>& labels,
    const TrajectoryOptions& options, int threads) {
  std::vector<RiskTrajectory> out(subset.size());
  std::vector<std::exception_ptr> errors(subset.size());
#pragma omp parallel for schedule(dynamic) num_threads(std::max(threads, 1))
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(subset.size()); ++i) {
    try {
      out[i] = sample_risk_trajectory(model, params, patients.at(subset[i]), codes, labels, options);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

void export_trajectory_csv(const std::filesystem::path& path, const RiskTrajectory& t) {
  for (const auto& l : t.labels) {
    if (l.find_first_of(",\"\n\r") != std::string::npos)
      throw ConfigError("code label '" + l + "' cannot be written as a CSV header");
  }
  auto out = detail::open_output(path);
  out << "time_weeks";
  for (const auto& l : t.labels) out << ",risk:" << l;
  for (const auto& l : t.labels) out << ",observed:" << l;
  out << '\n';
  for (const auto& row : t.rows) {
    out << detail::format_double(row.time);
    for (double v : row.risks) out << ',' << detail::format_double(v);
    for (std::size_t j = 0; j < t.labels.size(); ++j) {
      out << ',';
      if (row.admission) out << int(t.observed.at(*row.admission)[j]);
    }
    out << '\n';
  }
  detail::finish_output(out, path);
}

RiskTrajectory read_trajectory_csv(const std::filesystem::path& path) {
  RiskTrajectory t;
  std::size_t m = 0;
  bool header = false;
  double last_admission_time = 0.0;
  detail::for_each_line(path, [&](std::string_view line, std::size_t n) {
    auto where = [&] { return path.string() + ":" + std::to_string(n) + ": "; };
    if (line.empty()) return;
    const auto cells = detail::split(line, ',');
    if (!header) {
      if (cells.empty() || cells[0] != "time_weeks" || cells.size() % 2 == 0)
        throw DataError(where() + "not a trajectory header");
      m = (cells.size() - 1) / 2;
      for (std::size_t j = 0; j < m; ++j) {
        const auto c = cells[1 + j];
        if (c.substr(0, 5) != "risk:") throw DataError(where() + "expected a risk column");
        t.labels.emplace_back(c.substr(5));
      }
      header = true;
      return;
    }
    if (cells.size() != 1 + 2 * m) throw DataError(where() + "wrong number of columns");
    TrajectoryRow row;
    auto tv = detail::parse_double(cells[0]);
    if (!tv) throw DataError(where() + "bad time");
    row.time = *tv;
    for (std::size_t j = 0; j < m; ++j) {
      auto v = detail::parse_double(cells[1 + j]);
      if (!v) throw DataError(where() + "bad risk value");
      row.risks.push_back(*v);
    }
    std::vector<std::uint8_t> flags;
    for (std::size_t j = 0; j < m; ++j) {
      const auto c = cells[1 + m + j];
      if (c == "0" || c == "1") flags.push_back(c == "1" ? 1 : 0);
      else if (!c.empty()) throw DataError(where() + "observed flags must be 0, 1 or empty");
    }
    if (!flags.empty() && flags.size() != m) throw DataError(where() + "partial observed flags");
    // Without selected codes every row looks alike; admission rows are then not recoverable.
    const bool admission_row = m > 0 && flags.size() == m;
    if (admission_row) {
      const bool repeat = !t.observed.empty() && !t.rows.empty() && t.rows.back().admission &&
                          row.time == last_admission_time;
      if (repeat) {
        row.admission = t.rows.back().admission;
        row.post_update = true;
      } else {
        t.observed.push_back(flags);
        row.admission = t.observed.size() - 1;
        row.post_update = *row.admission == 0;
        last_admission_time = row.time;
      }
    }
    t.rows.push_back(std::move(row));
  });
  if (!header) throw DataError(path.string() + ": empty trajectory file");
  return t;
}

}  // namespace icenode::traj
