#include "icenode/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <map>
#include <numeric>
#include <set>
#include <unordered_map>

#include "icenode/error.hpp"
#include "icenode/text_io.hpp"

namespace icenode::eval {

namespace {

std::vector<ScoredVisit> score_one(const model::Predictor& predictor,
                                   const ehr::PatientRecord& patient, std::size_t n_codes) {
  auto pred = predictor.predict(patient);
  std::vector<ScoredVisit> out;
  for (std::size_t k = 1; k < patient.admissions.size(); ++k) {
    ScoredVisit v;
    v.subject_id = patient.subject_id;
    v.time = patient.admissions[k].time;
    v.truth = ehr::encode_multi_hot(patient.admissions[k].codes, n_codes);
    v.scores = std::move(pred.scores.at(k - 1));
    if (v.scores.size() != n_codes) throw DataError("score vector length differs from C");
    out.push_back(std::move(v));
  }
  return out;
}

std::vector<std::size_t> resolve_subset(const std::vector<std::size_t>& subset, std::size_t n) {
  if (!subset.empty()) return subset;
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  return all;
}

std::vector<ScoredVisit> flatten(std::vector<std::vector<ScoredVisit>>& parts) {
  std::vector<ScoredVisit> out;
  for (auto& p : parts)
    for (auto& v : p) out.push_back(std::move(v));
  return out;
}

// 1-based midranks; tied values share the mean of their ranks.
std::vector<double> midranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = mid;
    i = j + 1;
  }
  return r;
}

double covariance(const std::vector<double>& a, const std::vector<double>& b) {
  const std::size_t n = a.size();
  if (n < 2) return 0.0;
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / double(n);
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / double(n);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += (a[i] - ma) * (b[i] - mb);
  return s / double(n - 1);
}

// Structural components of one classifier: per-positive and per-negative.
struct Components {
  double auc = 0.0;
  std::vector<double> pos;
  std::vector<double> neg;
};

Components components(std::span<const std::uint8_t> truth, std::span<const double> scores) {
  std::vector<double> x, y;
  for (std::size_t i = 0; i < truth.size(); ++i) (truth[i] ? x : y).push_back(scores[i]);
  const double m = double(x.size()), n = double(y.size());
  if (x.empty() || y.empty()) throw DataError("DeLong test needs both classes");
  std::vector<double> z = x;
  z.insert(z.end(), y.begin(), y.end());
  const auto tx = midranks(x), ty = midranks(y), tz = midranks(z);
  Components c;
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    rank_sum += tz[i];
    c.pos.push_back((tz[i] - tx[i]) / n);
  }
  for (std::size_t j = 0; j < y.size(); ++j) c.neg.push_back(1.0 - (tz[x.size() + j] - ty[j]) / m);
  c.auc = (rank_sum - m * (m + 1) / 2) / (m * n);
  return c;
}

}  // namespace

std::vector<ScoredVisit> score_patients(const model::Predictor& predictor,
                                        const std::vector<ehr::PatientRecord>& patients,
                                        const std::vector<std::size_t>& subset,
                                        std::size_t n_codes, int threads) {
  const auto idx = resolve_subset(subset, patients.size());
  std::vector<std::vector<ScoredVisit>> parts(idx.size());
  std::vector<std::exception_ptr> errors(idx.size());
  const auto n = static_cast<std::ptrdiff_t>(idx.size());
#pragma omp parallel for schedule(dynamic) num_threads(std::max(threads, 1))
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    try {
      parts[i] = score_one(predictor, patients.at(idx[i]), n_codes);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return flatten(parts);
}

std::vector<ScoredVisit> score_patients_serial(const model::Predictor& predictor,
                                               const std::vector<ehr::PatientRecord>& patients,
                                               const std::vector<std::size_t>& subset,
                                               std::size_t n_codes) {
  std::vector<ScoredVisit> out;
  for (std::size_t i : resolve_subset(subset, patients.size())) {
    auto part = score_one(predictor, patients.at(i), n_codes);
    for (auto& v : part) out.push_back(std::move(v));
  }
  return out;
}

std::optional<double> binary_auc(std::span<const double> scores,
                                 std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw DataError("scores and labels differ in length");
  const auto r = midranks(scores);
  double m = 0.0, rank_sum = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i]) {
      m += 1.0;
      rank_sum += r[i];
    }
  }
  const double n = double(labels.size()) - m;
  if (m == 0.0 || n == 0.0) return std::nullopt;
  return (rank_sum - m * (m + 1) / 2) / (m * n);
}

VisitAuc visit_auc(const std::vector<ScoredVisit>& visits) {
  VisitAuc out;
  double sum = 0.0;
  for (const auto& v : visits) {
    if (auto a = binary_auc(v.scores, v.truth)) {
      sum += *a;
      ++out.visits;
    } else {
      ++out.skipped;
    }
  }
  if (out.visits == 0) throw DataError("visit AUC: no visit has both positive and negative codes");
  out.mean = sum / double(out.visits);
  return out;
}

std::optional<double> code_auc(const std::vector<ScoredVisit>& visits, ehr::CodeId code) {
  std::vector<double> s;
  std::vector<std::uint8_t> y;
  for (const auto& v : visits) {
    s.push_back(v.scores.at(code));
    y.push_back(v.truth.at(code));
  }
  return binary_auc(s, y);
}

QuantilePartition quantile_partition(const std::vector<std::size_t>& freq) {
  std::vector<ehr::CodeId> codes;
  for (std::size_t c = 0; c < freq.size(); ++c)
    if (freq[c] > 0) codes.push_back(static_cast<ehr::CodeId>(c));
  std::stable_sort(codes.begin(), codes.end(), [&](auto a, auto b) { return freq[a] < freq[b]; });
  QuantilePartition p;
  const std::size_t n = codes.size();
  for (std::size_t g = 0; g < kQuantiles; ++g) {
    p.groups[g].assign(codes.begin() + static_cast<std::ptrdiff_t>(g * n / kQuantiles),
                       codes.begin() + static_cast<std::ptrdiff_t>((g + 1) * n / kQuantiles));
  }
  return p;
}

std::vector<ehr::CodeId> top_k_codes(std::span<const double> scores, std::size_t k) {
  std::vector<ehr::CodeId> ids(scores.size());
  std::iota(ids.begin(), ids.end(), 0);
  k = std::min(k, ids.size());
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(),
                    [&](auto a, auto b) {
                      return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
                    });
  ids.resize(k);
  return ids;
}

TopKAccuracy top_k_accuracy(const std::vector<ScoredVisit>& visits,
                            const QuantilePartition& partition, std::size_t k, bool macro) {
  std::unordered_map<ehr::CodeId, std::size_t> group_of;
  for (std::size_t g = 0; g < kQuantiles; ++g)
    for (auto c : partition.groups[g]) group_of[c] = g;
  std::map<ehr::CodeId, std::pair<std::size_t, std::size_t>> per_code;  // hits, occurrences
  TopKAccuracy out;
  for (const auto& v : visits) {
    if (k == 0 || k > v.scores.size()) throw ConfigError("top-k needs 1 <= k <= C");
    std::vector<std::uint8_t> in_top(v.scores.size(), 0);
    for (auto c : top_k_codes(v.scores, k)) in_top[c] = 1;
    for (std::size_t c = 0; c < v.truth.size(); ++c) {
      if (!v.truth[c]) continue;
      auto it = group_of.find(static_cast<ehr::CodeId>(c));
      if (it == group_of.end()) continue;
      out.occurrences[it->second] += 1;
      out.hits[it->second] += in_top[c];
      auto& pc = per_code[static_cast<ehr::CodeId>(c)];
      pc.first += in_top[c];
      pc.second += 1;
    }
  }
  for (std::size_t g = 0; g < kQuantiles; ++g) {
    if (!macro) {
      if (out.occurrences[g] > 0) out.accuracy[g] = double(out.hits[g]) / double(out.occurrences[g]);
      continue;
    }
    double sum = 0.0;
    std::size_t n = 0;
    for (auto c : partition.groups[g]) {
      auto it = per_code.find(c);
      if (it == per_code.end()) continue;
      sum += double(it->second.first) / double(it->second.second);
      ++n;
    }
    if (n > 0) out.accuracy[g] = sum / double(n);
  }
  return out;
}

double delong_variance(std::span<const std::uint8_t> truth, std::span<const double> scores) {
  const auto c = components(truth, scores);
  return covariance(c.pos, c.pos) / double(c.pos.size()) +
         covariance(c.neg, c.neg) / double(c.neg.size());
}

DeLongResult delong_test(std::span<const std::uint8_t> truth, std::span<const double> a,
                         std::span<const double> b) {
  if (a.size() != truth.size() || b.size() != truth.size())
    throw DataError("DeLong test: score vectors differ in length from the labels");
  const auto ca = components(truth, a), cb = components(truth, b);
  const double m = double(ca.pos.size()), n = double(ca.neg.size());
  const double s_aa = covariance(ca.pos, ca.pos) / m + covariance(ca.neg, ca.neg) / n;
  const double s_bb = covariance(cb.pos, cb.pos) / m + covariance(cb.neg, cb.neg) / n;
  const double s_ab = covariance(ca.pos, cb.pos) / m + covariance(ca.neg, cb.neg) / n;
  DeLongResult r;
  r.auc_a = ca.auc;
  r.auc_b = cb.auc;
  r.variance = s_aa + s_bb - 2 * s_ab;
  const double diff = r.auc_a - r.auc_b;
  if (diff == 0.0) {
    r.z = 0.0;
    r.p = 1.0;
  } else if (!(r.variance > 0.0)) {
    r.z = std::copysign(INFINITY, diff);
    r.p = 0.0;
  } else {
    r.z = diff / std::sqrt(r.variance);
    r.p = std::erfc(std::abs(r.z) / std::sqrt(2.0));
  }
  return r;
}

CompetencyReport relative_competency(const std::vector<std::string>& models,
                                     const std::vector<std::vector<ScoredVisit>>& scored,
                                     double p_threshold, double auc_threshold) {
  if (models.empty() || models.size() != scored.size())
    throw ConfigError("relative competency needs one visit list per model");
  if (models.size() > 64) throw ConfigError("at most 64 models can be compared");
  const auto& ref = scored[0];
  for (const auto& s : scored) {
    if (s.size() != ref.size()) throw DataError("models were scored on different visits");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i].subject_id != ref[i].subject_id || s[i].time != ref[i].time)
        throw DataError("models were scored on different visits");
    }
  }
  CompetencyReport report;
  report.models = models;
  if (ref.empty()) return report;
  const std::size_t C = ref[0].truth.size(), M = models.size();
  std::map<std::uint64_t, std::size_t> counts;
  for (std::size_t c = 0; c < C; ++c) {
    std::vector<std::uint8_t> truth;
    for (const auto& v : ref) truth.push_back(v.truth[c]);
    std::vector<std::vector<double>> s(M);
    CodeCompetency cc;
    cc.code = static_cast<ehr::CodeId>(c);
    for (std::size_t m = 0; m < M; ++m) {
      for (const auto& v : scored[m]) s[m].push_back(v.scores.at(c));
      cc.aucs.push_back(binary_auc(s[m], truth));
    }
    if (!cc.aucs[0]) continue;
    for (std::size_t m = 1; m < M; ++m)
      if (*cc.aucs[m] > *cc.aucs[cc.best]) cc.best = m;
    if (!(*cc.aucs[cc.best] > auc_threshold)) continue;
    cc.members.assign(M, false);
    cc.members[cc.best] = true;
    std::uint64_t mask = std::uint64_t{1} << cc.best;
    for (std::size_t m = 0; m < M; ++m) {
      if (m == cc.best) continue;
      if (delong_test(truth, s[cc.best], s[m]).p > p_threshold) {
        cc.members[m] = true;
        mask |= std::uint64_t{1} << m;
      }
    }
    counts[mask] += 1;
    report.codes.push_back(std::move(cc));
  }
  report.subset_counts.assign(counts.begin(), counts.end());
  return report;
}

std::string subset_label(const std::vector<std::string>& models, std::uint64_t mask) {
  std::string s;
  for (std::size_t m = 0; m < models.size(); ++m) {
    if (!(mask >> m & 1)) continue;
    if (!s.empty()) s += '+';
    s += models[m];
  }
  return s;
}

void require_same_vocabulary(const ehr::Vocabulary& trained, const ehr::Vocabulary& data) {
  if (trained.labels() == data.labels()) return;
  const std::set<std::string> a(trained.labels().begin(), trained.labels().end());
  const std::set<std::string> b(data.labels().begin(), data.labels().end());
  std::vector<std::string> only_a, only_b;
  std::set_difference(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(only_a));
  std::set_difference(b.begin(), b.end(), a.begin(), a.end(), std::back_inserter(only_b));
  auto list = [](const std::vector<std::string>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size() && i < 20; ++i) s += (i ? ", " : "") + v[i];
    if (v.size() > 20) s += ", ... (" + std::to_string(v.size()) + " total)";
    return s;
  };
  std::string msg = "vocabulary mismatch: model has " + std::to_string(trained.size()) +
                    " codes, data has " + std::to_string(data.size());
  if (!only_a.empty()) msg += "; only in model: " + list(only_a);
  if (!only_b.empty()) msg += "; only in data: " + list(only_b);
  if (only_a.empty() && only_b.empty()) msg += "; same codes in a different order";
  throw DataError(msg);
}

void write_quantile_csv(const std::filesystem::path& path, const TopKAccuracy& acc) {
  auto out = detail::open_output(path);
  out << "group,range,hits,occurrences,accuracy\n";
  for (std::size_t g = 0; g < kQuantiles; ++g) {
    out << g << ',' << g * 20 << '-' << (g + 1) * 20 << ',' << acc.hits[g] << ','
        << acc.occurrences[g] << ',';
    if (acc.accuracy[g]) out << detail::format_double(*acc.accuracy[g]);
    out << '\n';
  }
  detail::finish_output(out, path);
}

void write_code_auc_csv(const std::filesystem::path& path, const std::vector<ScoredVisit>& visits,
                        const ehr::Vocabulary& vocab) {
  auto out = detail::open_output(path);
  out << "code_id,code,positives,negatives,auc\n";
  for (std::size_t c = 0; c < vocab.size(); ++c) {
    std::size_t pos = 0;
    for (const auto& v : visits) pos += v.truth.at(c);
    out << c << ',' << vocab.label(static_cast<ehr::CodeId>(c)) << ',' << pos << ','
        << visits.size() - pos << ',';
    if (auto a = code_auc(visits, static_cast<ehr::CodeId>(c))) out << detail::format_double(*a);
    out << '\n';
  }
  detail::finish_output(out, path);
}

void write_competency_csv(const std::filesystem::path& dir, const CompetencyReport& report,
                          const ehr::Vocabulary& vocab) {
  auto path = dir / "competency.csv";
  auto out = detail::open_output(path);
  out << "subset,count\n";
  for (auto [mask, count] : report.subset_counts)
    out << subset_label(report.models, mask) << ',' << count << '\n';
  detail::finish_output(out, path);

  path = dir / "assignments.csv";
  auto as = detail::open_output(path);
  as << "code_id,code";
  for (const auto& m : report.models) as << ',' << m << "_auc";
  as << ",members\n";
  for (const auto& cc : report.codes) {
    as << cc.code << ',' << vocab.label(cc.code);
    for (const auto& a : cc.aucs) as << ',' << (a ? detail::format_double(*a) : "");
    std::uint64_t mask = 0;
    for (std::size_t m = 0; m < cc.members.size(); ++m)
      if (cc.members[m]) mask |= std::uint64_t{1} << m;
    as << ',' << subset_label(report.models, mask) << '\n';
  }
  detail::finish_output(as, path);
}

}  // namespace icenode::eval
