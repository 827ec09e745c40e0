#include <algorithm>
#include <charconv>
#include <functional>
#include <unordered_map>

#include "icenode/cli.hpp"
#include "icenode/error.hpp"
#include "icenode/text_io.hpp"

namespace icenode::cli {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw ConfigError("setting '" + key + "': expected " + expected + ", got '" + value + "'");
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t x = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty())
    bad_value(key, v, "a non-negative integer");
  return x;
}

std::size_t to_size(const std::string& key, const std::string& v) {
  return static_cast<std::size_t>(to_u64(key, v));
}

int to_int(const std::string& key, const std::string& v) {
  int x = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) bad_value(key, v, "an integer");
  return x;
}

double to_double(const std::string& key, const std::string& v) {
  auto x = detail::parse_double(v);
  if (!x) bad_value(key, v, "a number");
  return *x;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad_value(key, v, "true or false");
}

// Wraps an enum parser so its error names the key.
template <class F>
auto named(const std::string& key, const std::string& v, F&& parse) {
  try {
    return parse(v);
  } catch (const ConfigError& e) {
    throw ConfigError("setting '" + key + "': " + e.what());
  }
}

using Setter = std::function<void(const std::string& key, const std::string& value)>;

void apply(const Settings& settings, const std::unordered_map<std::string, Setter>& setters,
           const char* what) {
  for (const auto& [key, value] : settings) {
    auto it = setters.find(key);
    if (it == setters.end()) {
      std::vector<std::string> known;
      for (const auto& [k, _] : setters) known.push_back(k);
      std::sort(known.begin(), known.end());
      std::string list;
      for (const auto& k : known) list += (list.empty() ? "" : ", ") + k;
      throw ConfigError("unknown " + std::string(what) + " setting '" + key + "' (known: " + list +
                        ")");
    }
    it->second(key, value);
  }
}

const char* anchor_name(ehr::TimeAnchor a) {
  return a == ehr::TimeAnchor::Discharge ? "discharge" : "admission";
}

}  // namespace

Settings read_settings_file(const std::filesystem::path& path) {
  Settings out;
  detail::for_each_line(path, [&](std::string_view line, std::size_t n) {
    const auto hash = line.find('#');
    const std::string body = trim(line.substr(0, hash));
    if (body.empty()) return;
    const auto eq = body.find('=');
    const auto where = path.string() + ":" + std::to_string(n) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string value = trim(std::string_view(body).substr(eq + 1));
    if (key.empty()) throw ConfigError(where + "empty key");
    if (!out.emplace(key, value).second) throw ConfigError(where + "duplicate key '" + key + "'");
  });
  return out;
}

Settings parse_overrides(const std::vector<std::string>& items) {
  Settings out;
  for (const auto& item : items) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0)
      throw ConfigError("override '" + item + "' is not of the form key=value");
    out[trim(std::string_view(item).substr(0, eq))] = trim(std::string_view(item).substr(eq + 1));
  }
  return out;
}

Settings merge(Settings base, const Settings& overrides) {
  for (const auto& [k, v] : overrides) base[k] = v;
  return base;
}

ehr::SyntheticConfig resolve_synthetic(const Settings& settings) {
  ehr::SyntheticConfig c;
  auto sz = [](std::size_t& f) { return [&f](auto& k, auto& v) { f = to_size(k, v); }; };
  auto db = [](double& f) { return [&f](auto& k, auto& v) { f = to_double(k, v); }; };
  const std::unordered_map<std::string, Setter> setters = {
      {"n_patients", sz(c.n_patients)},
      {"seed", [&](auto& k, auto& v) { c.seed = to_u64(k, v); }},
      {"n_codes", sz(c.n_codes)},
      {"threshold_weeks", db(c.threshold_weeks)},
      {"gap_median_days", db(c.gap_median_days)},
      {"gap_sigma", db(c.gap_sigma)},
      {"admissions_p", db(c.admissions_p)},
      {"min_admissions", sz(c.min_admissions)},
      {"max_admissions", sz(c.max_admissions)},
      {"p_cause", db(c.p_cause)},
      {"p_cause_visit", db(c.p_cause_visit)},
      {"p_switch", db(c.p_switch)},
      {"background_per_visit", sz(c.background_per_visit)},
  };
  apply(settings, setters, "synth");
  c.validate();
  return c;
}

TrainSetup resolve_train(const Settings& settings) {
  TrainSetup s;
  auto& m = s.model;
  auto& t = s.train;
  if (auto it = settings.find("preset"); it != settings.end()) {
    if (it->second == "desk") {
      m.d_e = 16;
      m.d_m = 8;
      m.attention_size = 16;
      t.batch_size = 16;
      t.epochs = 20;
      t.lr_dynamics = 1e-3;
      t.lr_other = 1e-2;
    } else if (it->second != "full") {
      bad_value("preset", it->second, "full or desk");
    }
  }
  auto sz = [](std::size_t& f) { return [&f](auto& k, auto& v) { f = to_size(k, v); }; };
  auto db = [](double& f) { return [&f](auto& k, auto& v) { f = to_double(k, v); }; };
  const std::unordered_map<std::string, Setter> setters = {
      {"preset", [](auto&, auto&) {}},
      {"model",
       [&](auto& k, auto& v) {
         std::string name = v;
         std::replace(name.begin(), name.end(), '-', '_');
         m.kind = named(k, name, [](auto& x) { return model::parse_model_kind(x); });
       }},
      {"embedding",
       [&](auto& k, auto& v) {
         m.embedding = named(k, v, [](auto& x) { return emb::parse_embedding_kind(x); });
       }},
      {"attention",
       [&](auto& k, auto& v) {
         m.attention = named(k, v, [](auto& x) { return emb::parse_attention(x); });
       }},
      {"attention_size", sz(m.attention_size)},
      {"d_e", sz(m.d_e)},
      {"d_m", sz(m.d_m)},
      {"dynamics",
       [&](auto& k, auto& v) {
         m.dynamics = named(k, v, [](auto& x) { return model::parse_dynamics(x); });
       }},
      {"decoder_depth", sz(m.decoder_depth)},
      {"reg_order", [&](auto& k, auto& v) { m.reg_order = to_int(k, v); }},
      {"reg_weight", db(m.reg_weight)},
      {"keep_integrated_embedding",
       [&](auto& k, auto& v) { m.keep_integrated_embedding = to_bool(k, v); }},
      {"gradient",
       [&](auto& k, auto& v) {
         m.gradient = named(k, v, [](auto& x) { return model::parse_gradient_method(x); });
       }},
      {"rtol", db(m.solver.rtol)},
      {"atol", db(m.solver.atol)},
      {"max_steps", sz(m.solver.max_steps)},
      {"logreg_l1", db(m.logreg_l1)},
      {"logreg_l2", db(m.logreg_l2)},
      {"logreg_max_iter", sz(m.logreg_max_iter)},
      {"lr_dynamics", db(t.lr_dynamics)},
      {"lr_other", db(t.lr_other)},
      {"decay_rate", db(t.decay_rate)},
      {"batch_size", sz(t.batch_size)},
      {"epochs", sz(t.epochs)},
      {"seed", [&](auto& k, auto& v) { t.seed = to_u64(k, v); }},
      {"eval_every", sz(t.eval_every)},
      {"split_seed", [&](auto& k, auto& v) { s.split_seed = to_u64(k, v); }},
      {"time_anchor",
       [&](auto& k, auto& v) {
         s.anchor = named(k, v, [](auto& x) { return ehr::parse_time_anchor(x); });
       }},
  };
  apply(settings, setters, "train");
  m.validate();
  t.validate();
  return s;
}

nlohmann::json to_json(const TrainSetup& s) {
  return {{"model", model::to_json(s.model)},
          {"train", train::to_json(s.train)},
          {"split_seed", s.split_seed},
          {"time_anchor", anchor_name(s.anchor)}};
}

}  // namespace icenode::cli
