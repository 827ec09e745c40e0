#include "icenode/diff/parameter_set.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "icenode/error.hpp"

namespace icenode::diff {

std::string_view to_string(ParamGroup group) {
  return group == ParamGroup::Dynamics ? "dynamics" : "other";
}

ParamGroup parse_param_group(std::string_view text) {
  if (text == "dynamics") return ParamGroup::Dynamics;
  if (text == "other") return ParamGroup::Other;
  throw DataError("unknown parameter group '" + std::string(text) + "'");
}

std::span<double> ParameterSet::add(std::string name, ParamGroup group,
                                    std::vector<std::size_t> shape) {
  if (index_.contains(name)) throw ConfigError("duplicate parameter array '" + name + "'");
  const std::size_t n =
      std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  ArraySpec spec{name, group, std::move(shape), data_.size(), n};
  data_.resize(data_.size() + n, 0.0);
  index_.emplace(name, specs_.size());
  specs_.push_back(std::move(spec));
  return std::span<double>(data_).subspan(specs_.back().offset, n);
}

bool ParameterSet::contains(std::string_view name) const {
  return index_.contains(std::string(name));
}

const ArraySpec& ParameterSet::spec(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ConfigError("no parameter array named '" + std::string(name) + "'");
  return specs_[it->second];
}

std::span<double> ParameterSet::values(std::string_view name) {
  const auto& s = spec(name);
  return std::span<double>(data_).subspan(s.offset, s.size);
}

std::span<const double> ParameterSet::values(std::string_view name) const {
  const auto& s = spec(name);
  return std::span<const double>(data_).subspan(s.offset, s.size);
}

bool ParameterSet::same_layout(const ParameterSet& other) const {
  if (specs_.size() != other.specs_.size()) return false;
  for (std::size_t i = 0; i < specs_.size(); ++i) {
    const auto& a = specs_[i];
    const auto& b = other.specs_[i];
    if (a.name != b.name || a.group != b.group || a.shape != b.shape) return false;
  }
  return true;
}

namespace {

static_assert(std::endian::native == std::endian::little,
              "archive payload is written as native little-endian doubles");

}  // namespace

void save_archive(const std::filesystem::path& path, const ParameterSet& params,
                  const nlohmann::json& metadata) {
  nlohmann::json manifest;
  manifest["format"] = std::string(kArchiveMagic);
  manifest["metadata"] = metadata;
  auto& arrays = manifest["arrays"] = nlohmann::json::array();
  for (const auto& s : params.specs()) {
    arrays.push_back({{"name", s.name},
                      {"group", std::string(to_string(s.group))},
                      {"shape", s.shape},
                      {"offset", s.offset}});
  }
  manifest["payload_doubles"] = params.size();
  const std::string text = manifest.dump(2);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << kArchiveMagic << '\n' << text.size() << '\n' << text << '\n';
  const auto flat = params.flat();
  out.write(reinterpret_cast<const char*>(flat.data()),
            static_cast<std::streamsize>(flat.size() * sizeof(double)));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

LoadedArchive load_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::string magic;
  std::getline(in, magic);
  if (magic != kArchiveMagic) {
    throw DataError("'" + path.string() + "' is not a parameter archive (header '" + magic + "')");
  }
  std::string len_line;
  std::getline(in, len_line);
  std::size_t len = 0;
  try {
    len = std::stoull(len_line);
  } catch (const std::exception&) {
    throw DataError("corrupt archive manifest length in '" + path.string() + "'");
  }
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in || in.get() != '\n') throw DataError("truncated archive manifest in '" + path.string() + "'");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt archive manifest in '" + path.string() + "': " + e.what());
  }

  LoadedArchive result;
  try {
    for (const auto& a : manifest.at("arrays")) {
      auto span = result.params.add(a.at("name").get<std::string>(),
                                    parse_param_group(a.at("group").get<std::string>()),
                                    a.at("shape").get<std::vector<std::size_t>>());
      if (result.params.spec(a.at("name").get<std::string>()).offset !=
          a.at("offset").get<std::size_t>()) {
        throw DataError("archive array offsets are inconsistent");
      }
      (void)span;
    }
    if (manifest.at("payload_doubles").get<std::size_t>() != result.params.size()) {
      throw DataError("archive payload size disagrees with array shapes");
    }
    result.metadata = manifest.value("metadata", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed archive manifest in '" + path.string() + "': " + e.what());
  }

  auto flat = result.params.flat();
  in.read(reinterpret_cast<char*>(flat.data()),
          static_cast<std::streamsize>(flat.size() * sizeof(double)));
  if (!in || in.gcount() != static_cast<std::streamsize>(flat.size() * sizeof(double))) {
    throw DataError("truncated archive payload in '" + path.string() + "'");
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw DataError("trailing bytes after archive payload in '" + path.string() + "'");
  }
  return result;
}

}  // namespace icenode::diff
