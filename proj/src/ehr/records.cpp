#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "icenode/ehr.hpp"
#include "icenode/error.hpp"
#include "icenode/text_io.hpp"

namespace icenode::ehr {

Vocabulary::Vocabulary(std::vector<std::string> labels) : labels_(std::move(labels)) {
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    if (labels_[i].empty()) throw DataError("vocabulary entry " + std::to_string(i) + " is empty");
    if (!index_.emplace(labels_[i], static_cast<CodeId>(i)).second) {
      throw DataError("duplicate vocabulary label '" + labels_[i] + "'");
    }
  }
}

std::optional<CodeId> Vocabulary::find(std::string_view label) const {
  auto it = index_.find(std::string(label));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

Vocabulary load_vocabulary(const std::filesystem::path& path) {
  std::vector<std::string> labels;
  detail::for_each_line(path, [&](std::string_view line, std::size_t) {
    if (line.empty() || line.front() == '#') return;
    labels.emplace_back(line);
  });
  return Vocabulary(std::move(labels));
}

void save_vocabulary(const std::filesystem::path& path, const Vocabulary& vocab) {
  std::ofstream out = detail::open_output(path);
  for (const auto& l : vocab.labels()) out << l << '\n';
  detail::finish_output(out, path);
}

TimeAnchor parse_time_anchor(std::string_view text) {
  if (text == "discharge") return TimeAnchor::Discharge;
  if (text == "admission") return TimeAnchor::Admission;
  throw ConfigError("unknown time anchor '" + std::string(text) +
                    "' (expected discharge or admission)");
}

std::vector<RawPatient> parse_raw_records(const std::filesystem::path& path) {
  std::vector<RawPatient> out;
  bool header_seen = false;
  std::set<std::string> seen_ids;
  detail::for_each_line(path, [&](std::string_view line, std::size_t lineno) {
    auto fail = [&](const std::string& msg) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + msg);
    };
    if (!header_seen) {
      if (line.empty()) return;
      if (line != kRecordsHeader) fail("expected header '" + std::string(kRecordsHeader) + "'");
      header_seen = true;
      return;
    }
    if (line.empty() || line.front() == '#') return;
    auto fields = detail::split(line, '\t');
    RawPatient p;
    p.subject_id = std::string(fields[0]);
    p.line = lineno;
    if (p.subject_id.empty()) fail("empty subject_id");
    if (!seen_ids.insert(p.subject_id).second) fail("duplicate subject_id '" + p.subject_id + "'");
    for (std::size_t i = 1; i < fields.size(); ++i) {
      auto parts = detail::split(fields[i], ';');
      if (parts.size() != 3) fail("admission " + std::to_string(i) + " must be time;stay;codes");
      RawAdmission a;
      auto t = detail::parse_double(parts[0]);
      auto s = detail::parse_double(parts[1]);
      if (!t || !std::isfinite(*t)) fail("bad admission time '" + std::string(parts[0]) + "'");
      if (!s || !std::isfinite(*s) || *s < 0) fail("bad stay '" + std::string(parts[1]) + "'");
      a.time_days = *t;
      a.stay_days = *s;
      for (auto c : detail::split(parts[2], '|')) {
        if (c.empty()) fail("empty code in admission " + std::to_string(i));
        a.codes.emplace_back(c);
      }
      p.admissions.push_back(std::move(a));
    }
    out.push_back(std::move(p));
  });
  return out;
}

CodeMapping load_code_mapping(const std::filesystem::path& path, const Vocabulary& vocab) {
  CodeMapping m;
  detail::for_each_line(path, [&](std::string_view line, std::size_t lineno) {
    if (line.empty() || line.front() == '#') return;
    auto f = detail::split(line, '\t');
    const std::string where = path.string() + ":" + std::to_string(lineno) + ": ";
    if (f.size() != 2 || f[0].empty() || f[1].empty()) {
      throw DataError(where + "expected source<TAB>target");
    }
    auto target = vocab.find(f[1]);
    if (!target) throw DataError(where + "target '" + std::string(f[1]) + "' not in vocabulary");
    auto [it, fresh] = m.entries.emplace(std::string(f[0]), *target);
    if (!fresh && it->second != *target) {
      throw DataError(where + "source '" + std::string(f[0]) + "' maps to two targets");
    }
  });
  return m;
}

std::vector<PatientRecord> resolve_records(const std::vector<RawPatient>& raw,
                                           const Vocabulary& vocab, const CodeMapping* mapping,
                                           TimeAnchor anchor) {
  std::vector<PatientRecord> out;
  out.reserve(raw.size());
  std::set<std::string> unknown;
  for (const RawPatient& rp : raw) {
    PatientRecord p;
    p.subject_id = rp.subject_id;
    for (const RawAdmission& ra : rp.admissions) {
      Admission a;
      a.time_days = ra.time_days;
      a.stay_days = ra.stay_days;
      for (const auto& c : ra.codes) {
        std::optional<CodeId> id;
        if (mapping) {
          auto it = mapping->entries.find(c);
          if (it != mapping->entries.end()) id = it->second;
        } else {
          id = vocab.find(c);
        }
        if (!id) {
          unknown.insert(c);
          continue;
        }
        a.codes.push_back(*id);
      }
      std::sort(a.codes.begin(), a.codes.end());
      a.codes.erase(std::unique(a.codes.begin(), a.codes.end()), a.codes.end());
      p.admissions.push_back(std::move(a));
    }
    auto when = [&](const Admission& a) {
      return anchor == TimeAnchor::Discharge ? a.time_days : a.time_days - a.stay_days;
    };
    std::stable_sort(p.admissions.begin(), p.admissions.end(),
                     [&](const Admission& x, const Admission& y) { return when(x) < when(y); });
    for (std::size_t k = 0; k < p.admissions.size(); ++k) {
      if (k > 0 && !(when(p.admissions[k]) > when(p.admissions[k - 1]))) {
        throw DataError("line " + std::to_string(rp.line) + ": subject '" + p.subject_id +
                        "' has two admissions at the same time");
      }
      p.admissions[k].time = days_to_weeks(when(p.admissions[k]) - when(p.admissions[0]));
    }
    out.push_back(std::move(p));
  }
  if (!unknown.empty()) {
    std::ostringstream msg;
    msg << unknown.size() << (mapping ? " unmapped" : " unknown") << " code(s):";
    std::size_t shown = 0;
    for (const auto& c : unknown) {
      if (shown++ == 20) {
        msg << " ...";
        break;
      }
      msg << ' ' << c;
    }
    throw DataError(msg.str());
  }
  for (const auto& p : out) {
    for (const auto& a : p.admissions) {
      if (a.codes.empty()) throw DataError("subject '" + p.subject_id + "' has an empty admission");
    }
  }
  return out;
}

std::vector<PatientRecord> parse_patient_records(const std::filesystem::path& path,
                                                 const Vocabulary& vocab,
                                                 const CodeMapping* mapping, TimeAnchor anchor) {
  return resolve_records(parse_raw_records(path), vocab, mapping, anchor);
}

void write_patient_records(const std::filesystem::path& path,
                           const std::vector<PatientRecord>& records, const Vocabulary& vocab) {
  std::ofstream out = detail::open_output(path);
  out << kRecordsHeader << '\n';
  for (const auto& p : records) {
    out << p.subject_id;
    for (const auto& a : p.admissions) {
      out << '\t' << detail::format_double(a.time_days) << ';'
          << detail::format_double(a.stay_days) << ';';
      for (std::size_t i = 0; i < a.codes.size(); ++i) {
        if (i) out << '|';
        out << vocab.label(a.codes[i]);
      }
    }
    out << '\n';
  }
  detail::finish_output(out, path);
}

Cohort filter_cohort(std::vector<PatientRecord> records) {
  Cohort c;
  for (auto& p : records) {
    if (p.admissions.size() < kMinAdmissions) {
      ++c.excluded_too_few;
    } else if (std::any_of(p.admissions.begin(), p.admissions.end(),
                           [](const Admission& a) { return a.stay_days > kMaxStayDays; })) {
      ++c.excluded_long_stay;
    } else {
      c.patients.push_back(std::move(p));
    }
  }
  return c;
}

DatasetSplit split_cohort(std::size_t n, std::uint64_t seed) {
  if (n < 3) throw DataError("cannot split a cohort of " + std::to_string(n) + " patients");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  const std::size_t n_train = n * 70 / 100;
  const std::size_t n_valid = n * 15 / 100;
  DatasetSplit s;
  s.train.assign(idx.begin(), idx.begin() + n_train);
  s.valid.assign(idx.begin() + n_train, idx.begin() + n_train + n_valid);
  s.test.assign(idx.begin() + n_train + n_valid, idx.end());
  return s;
}

std::vector<std::size_t> code_frequency(const std::vector<PatientRecord>& patients,
                                        const std::vector<std::size_t>& subset,
                                        std::size_t n_codes) {
  std::vector<std::size_t> f(n_codes, 0);
  for (std::size_t i : subset) {
    for (const auto& a : patients.at(i).admissions) {
      for (CodeId c : a.codes) ++f.at(c);
    }
  }
  return f;
}

std::vector<std::uint8_t> encode_multi_hot(const std::vector<CodeId>& codes, std::size_t n_codes) {
  std::vector<std::uint8_t> bits(n_codes, 0);
  for (CodeId c : codes) {
    if (c >= n_codes) {
      throw DataError("code id " + std::to_string(c) + " out of range for C=" +
                      std::to_string(n_codes));
    }
    bits[c] = 1;
  }
  return bits;
}

std::vector<CodeId> decode_multi_hot(const std::vector<std::uint8_t>& bits) {
  std::vector<CodeId> codes;
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (bits[i]) codes.push_back(static_cast<CodeId>(i));
  }
  return codes;
}

}  // namespace icenode::ehr
