#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <set>
#include <sstream>

#include "icenode/ehr.hpp"
#include "icenode/error.hpp"

using namespace icenode;
using namespace icenode::ehr;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "icenode_test_ehr";
  fs::create_directories(dir);
  return dir / name;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream(p, std::ios::binary) << s;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Vocabulary abc_vocab() { return Vocabulary({"A", "B", "C", "D"}); }

PatientRecord patient(const std::string& id, std::vector<std::pair<double, double>> adm) {
  PatientRecord p;
  p.subject_id = id;
  for (auto [t, stay] : adm) {
    Admission a;
    a.time = t;
    a.time_days = t * 7;
    a.stay_days = stay;
    a.codes = {0};
    p.admissions.push_back(a);
  }
  return p;
}

}  // namespace

TEST_CASE("parse converts days to weeks and sorts admissions") {
  auto path = scratch("two.txt");
  write_text(path, std::string(kRecordsHeader) + "\np1\t70;2;B|A\t0;1;C\n");
  auto recs = parse_patient_records(path, abc_vocab());
  REQUIRE(recs.size() == 1);
  REQUIRE(recs[0].admissions.size() == 2);
  CHECK(recs[0].admissions[0].time == 0.0);
  CHECK(recs[0].admissions[1].time == 10.0);
  CHECK(recs[0].admissions[0].codes == std::vector<CodeId>{2});
  CHECK(recs[0].admissions[1].codes == std::vector<CodeId>{0, 1});

  auto empty = scratch("empty.txt");
  write_text(empty, "");
  CHECK(parse_patient_records(empty, abc_vocab()).empty());

  // Admission anchoring shifts every time by its stay.
  auto adm = parse_patient_records(path, abc_vocab(), nullptr, TimeAnchor::Admission);
  CHECK(adm[0].admissions[1].time == days_to_weeks(68.0 - (-1.0)));
}

TEST_CASE("unsorted admissions reorder to the same set") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int> days{0, 5, 13, 40, 41, 90};
    std::shuffle(days.begin(), days.end(), rng);
    std::string line = "p";
    for (int d : days) line += "\t" + std::to_string(d) + ";1;A";
    auto path = scratch("shuffled.txt");
    write_text(path, std::string(kRecordsHeader) + "\n" + line + "\n");
    auto r = parse_patient_records(path, abc_vocab());
    std::vector<double> got;
    for (auto& a : r[0].admissions) got.push_back(a.time_days);
    std::vector<double> want(days.begin(), days.end());
    std::sort(want.begin(), want.end());
    CHECK(got == want);
  }
}

TEST_CASE("malformed input is reported with its line") {
  auto path = scratch("bad.txt");
  write_text(path, std::string(kRecordsHeader) + "\np1\t0;1;A\np2\t0;1\n");
  try {
    parse_patient_records(path, abc_vocab());
    FAIL("expected a parse error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find(":3:") != std::string::npos);
  }
  write_text(path, "not a header\n");
  CHECK_THROWS_AS(parse_patient_records(path, abc_vocab()), DataError);
  write_text(path, std::string(kRecordsHeader) + "\np1\t0;1;A|ZZ\t3;1;YY\n");
  try {
    parse_patient_records(path, abc_vocab());
    FAIL("expected unknown codes");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("YY") != std::string::npos);
    CHECK(msg.find("ZZ") != std::string::npos);
  }
  write_text(path, std::string(kRecordsHeader) + "\np1\t0;1;A\t0;2;B\n");
  CHECK_THROWS_AS(parse_patient_records(path, abc_vocab()), DataError);
  CHECK_THROWS_AS(parse_patient_records(scratch("missing.txt"), abc_vocab()), IoError);
}

TEST_CASE("code mapping dedups and rejects unmapped codes") {
  auto map_path = scratch("map.tsv");
  write_text(map_path, "250.00\tA\n250.01\tA\n401.9\tB\n");
  auto vocab = abc_vocab();
  auto mapping = load_code_mapping(map_path, vocab);
  auto path = scratch("icd.txt");
  write_text(path, std::string(kRecordsHeader) + "\np1\t0;1;250.00|250.01\t9;1;401.9\n");
  auto recs = parse_patient_records(path, vocab, &mapping);
  CHECK(recs[0].admissions[0].codes == std::vector<CodeId>{0});
  CHECK(recs[0].admissions[1].codes == std::vector<CodeId>{1});

  write_text(path, std::string(kRecordsHeader) + "\np1\t0;1;250.00|999\n");
  CHECK_THROWS_WITH_AS(parse_patient_records(path, vocab, &mapping), doctest::Contains("999"),
                       DataError);
  write_text(map_path, "x\tQ\n");
  CHECK_THROWS_AS(load_code_mapping(map_path, vocab), DataError);
}

TEST_CASE("cohort filtering") {
  CHECK(filter_cohort({patient("a", {{0, 1}})}).patients.empty());
  CHECK(filter_cohort({patient("a", {{0, 1}, {1, 15}, {2, 1}})}).patients.empty());
  CHECK(filter_cohort({patient("a", {{0, 1}, {1, 14}})}).patients.size() == 1);

  // Ten patients, four of which break a rule.
  std::vector<PatientRecord> ten;
  ten.push_back(patient("p0", {{0, 1}}));
  ten.push_back(patient("p1", {{0, 1}, {2, 20}}));
  ten.push_back(patient("p2", {}));
  ten.push_back(patient("p3", {{0, 14.5}, {3, 1}, {4, 1}}));
  for (int i = 4; i < 10; ++i) ten.push_back(patient("p" + std::to_string(i), {{0, 3}, {1, 14}}));
  auto c = filter_cohort(ten);
  CHECK(c.patients.size() == 6);
  CHECK(c.excluded_too_few == 2);
  CHECK(c.excluded_long_stay == 2);

  auto again = filter_cohort(c.patients);
  CHECK(again.patients.size() == c.patients.size());
  for (std::size_t i = 0; i < again.patients.size(); ++i) {
    CHECK(again.patients[i].subject_id == c.patients[i].subject_id);
  }
}

TEST_CASE("split sizes, determinism and partition") {
  auto s = split_cohort(100, 42);
  CHECK(s.train.size() == 70);
  CHECK(s.valid.size() == 15);
  CHECK(s.test.size() == 15);
  auto t = split_cohort(100, 42);
  CHECK(s.train == t.train);
  CHECK(s.valid == t.valid);
  CHECK(s.test == t.test);
  CHECK_THROWS_AS(split_cohort(2, 1), DataError);

  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const std::size_t n = 3 + seed * 17;
    auto p = split_cohort(n, seed);
    CHECK(p.train.size() == n * 70 / 100);
    CHECK(p.valid.size() == n * 15 / 100);
    std::multiset<std::size_t> all(p.train.begin(), p.train.end());
    all.insert(p.valid.begin(), p.valid.end());
    all.insert(p.test.begin(), p.test.end());
    CHECK(all.size() == n);
    CHECK(std::set<std::size_t>(all.begin(), all.end()).size() == n);
    CHECK(*all.rbegin() == n - 1);
  }
}

TEST_CASE("multi-hot encoding") {
  CHECK(encode_multi_hot({2, 5}, 8) == std::vector<std::uint8_t>{0, 0, 1, 0, 0, 1, 0, 0});
  CHECK(encode_multi_hot({}, 4) == std::vector<std::uint8_t>{0, 0, 0, 0});
  CHECK(encode_multi_hot({0, 1, 2}, 3) == std::vector<std::uint8_t>{1, 1, 1});
  CHECK_THROWS_AS(encode_multi_hot({4}, 4), DataError);

  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t C = 1 + rng() % 40;
    std::set<CodeId> s;
    for (std::size_t i = 0; i < C; ++i)
      if (rng() % 3 == 0) s.insert(static_cast<CodeId>(i));
    std::vector<CodeId> v(s.begin(), s.end());
    auto bits = encode_multi_hot(v, C);
    CHECK(static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)) == v.size());
    CHECK(decode_multi_hot(bits) == v);
  }
}

TEST_CASE("code frequency counts once per admission on the subset") {
  std::vector<PatientRecord> ps{patient("a", {{0, 1}, {1, 1}}), patient("b", {{0, 1}})};
  ps[0].admissions[1].codes = {0, 2};
  auto f = code_frequency(ps, {0}, 3);
  CHECK(f == std::vector<std::size_t>{2, 0, 1});
  CHECK(code_frequency(ps, {0, 1}, 3)[0] == 3);
}

TEST_CASE("ontology ancestors") {
  Ontology chain({{"a", "b"}, {"b", "c"}});
  auto names = [&](const Ontology& o, const std::string& n) {
    std::set<std::string> s;
    for (auto i : o.ancestors(*o.find(n))) s.insert(o.labels()[i]);
    return s;
  };
  CHECK(names(chain, "a") == std::set<std::string>{"a", "b", "c"});
  Ontology diamond({{"a", "b"}, {"a", "c"}, {"b", "d"}, {"c", "d"}});
  CHECK(names(diamond, "a") == std::set<std::string>{"a", "b", "c", "d"});
  CHECK_THROWS_WITH_AS(Ontology({{"a", "b"}, {"b", "c"}, {"c", "a"}}), doctest::Contains("->"),
                       DataError);

  // Closure against brute-force reachability on random DAGs.
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + static_cast<int>(rng() % 30);
    std::vector<std::pair<std::string, std::string>> edges;
    for (int c = 0; c < n; ++c)
      for (int p = c + 1; p < n; ++p)
        if (rng() % 5 == 0) edges.emplace_back("n" + std::to_string(c), "n" + std::to_string(p));
    if (edges.empty()) continue;
    Ontology o(edges);
    for (std::size_t v = 0; v < o.node_count(); ++v) {
      std::set<std::size_t> seen{v};
      std::vector<std::size_t> stack{v};
      while (!stack.empty()) {
        auto x = stack.back();
        stack.pop_back();
        for (auto [c, p] : edges) {
          if (c == o.labels()[x]) {
            auto pi = *o.find(p);
            if (seen.insert(pi).second) stack.push_back(pi);
          }
        }
      }
      CHECK(std::vector<std::size_t>(seen.begin(), seen.end()) == o.ancestors(v));
    }
  }
}

TEST_CASE("code hierarchy numbering") {
  Vocabulary v({"x", "y", "z"});
  Ontology o({{"x", "g1"}, {"y", "g1"}, {"g1", "root"}});
  auto h = build_hierarchy(o, v);
  CHECK(h.n_codes == 3);
  CHECK(h.n_nodes == 5);
  CHECK(h.ancestors[0] == std::vector<std::uint32_t>{0, 3, 4});
  CHECK(h.ancestors[1] == std::vector<std::uint32_t>{1, 3, 4});
  CHECK(h.ancestors[2] == std::vector<std::uint32_t>{2});
  CHECK_THROWS_AS(build_hierarchy(Ontology({{"w", "g"}, {"g", "r"}}), v), DataError);

  auto path = scratch("onto.tsv");
  save_ontology(path, o);
  auto back = load_ontology(path);
  CHECK(back.edges() == o.edges());
}

TEST_CASE("synthetic cohort") {
  SyntheticConfig cfg;
  cfg.n_patients = 300;
  cfg.seed = 5;
  auto a = generate_synthetic_cohort(cfg);
  auto b = generate_synthetic_cohort(cfg);
  auto pa = scratch("syn_a.txt"), pb = scratch("syn_b.txt");
  write_patient_records(pa, a.records, a.vocabulary);
  write_patient_records(pb, b.records, b.vocabulary);
  CHECK(read_text(pa) == read_text(pb));

  // Round trip through the file is exact, and the planted rule holds.
  auto back = parse_patient_records(pa, a.vocabulary);
  REQUIRE(back.size() == a.records.size());
  std::size_t effects = 0, causes = 0;
  for (std::size_t i = 0; i < back.size(); ++i) {
    const auto& adm = back[i].admissions;
    REQUIRE(adm.size() == a.records[i].admissions.size());
    CHECK(adm.size() >= 2);
    CHECK(adm.size() <= 8);
    std::optional<double> first_cause;
    for (std::size_t k = 0; k < adm.size(); ++k) {
      CHECK(adm[k].time == a.records[i].admissions[k].time);
      CHECK(adm[k].codes == a.records[i].admissions[k].codes);
      const bool has_effect = std::count(adm[k].codes.begin(), adm[k].codes.end(), kEffectCode);
      const bool has_cause = std::count(adm[k].codes.begin(), adm[k].codes.end(), kCauseCode);
      CHECK(has_effect == (first_cause && adm[k].time - *first_cause > cfg.threshold_weeks));
      effects += has_effect;
      causes += has_cause;
      if (has_cause && !first_cause) first_cause = adm[k].time;
    }
  }
  CHECK(effects > 0);
  CHECK(causes > effects / 4);
  CHECK(filter_cohort(back).patients.size() == back.size());
  CHECK_NOTHROW(build_hierarchy(a.ontology, a.vocabulary));

  SyntheticConfig zero = cfg;
  zero.threshold_weeks = 0.0;
  for (const auto& p : generate_synthetic_cohort(zero).records) {
    bool seen_cause = false;
    for (const auto& adm : p.admissions) {
      const bool eff = std::count(adm.codes.begin(), adm.codes.end(), kEffectCode);
      CHECK(eff == seen_cause);
      seen_cause = seen_cause || std::count(adm.codes.begin(), adm.codes.end(), kCauseCode);
    }
  }
  SyntheticConfig never = cfg;
  never.threshold_weeks = std::numeric_limits<double>::infinity();
  for (const auto& p : generate_synthetic_cohort(never).records)
    for (const auto& adm : p.admissions)
      CHECK(std::count(adm.codes.begin(), adm.codes.end(), kEffectCode) == 0);

  SyntheticConfig bad = cfg;
  bad.n_codes = 4;
  CHECK_THROWS_AS(generate_synthetic_cohort(bad), ConfigError);
}
