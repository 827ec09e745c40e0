#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace icenode::diff {

// Learning-rate routing tag carried by every parameter array.
enum class ParamGroup { Dynamics, Other };

std::string_view to_string(ParamGroup group);
ParamGroup parse_param_group(std::string_view text);

struct ArraySpec {
  std::string name;
  ParamGroup group = ParamGroup::Other;
  std::vector<std::size_t> shape;
  std::size_t offset = 0;  // into the flat storage
  std::size_t size = 0;
};

/// Named 64-bit arrays stored back to back in one flat buffer.
///
/// Arrays keep insertion order, so arrays added consecutively occupy a
/// contiguous window of the flat buffer. Gradients are plain flat vectors
/// with the same layout.
class ParameterSet {
 public:
  ParameterSet() = default;

  /// Appends a zero-initialised array. Names must be unique. The returned
  /// span is invalidated by the next add().
  std::span<double> add(std::string name, ParamGroup group, std::vector<std::size_t> shape);

  bool contains(std::string_view name) const;
  const ArraySpec& spec(std::string_view name) const;
  const std::vector<ArraySpec>& specs() const { return specs_; }

  std::span<double> values(std::string_view name);
  std::span<const double> values(std::string_view name) const;

  std::span<double> flat() { return data_; }
  std::span<const double> flat() const { return data_; }
  std::size_t size() const { return data_.size(); }

  std::vector<double> zeros_like() const { return std::vector<double>(data_.size(), 0.0); }

  // Structural equality: same names, groups, shapes, in the same order.
  bool same_layout(const ParameterSet& other) const;

 private:
  std::vector<ArraySpec> specs_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<double> data_;
};

// Archive layout: a text magic line, the byte length of a JSON manifest,
// the manifest itself, then the little-endian float64 payload. The manifest
// lists every array (name, group, shape, offset) plus caller metadata.
inline constexpr std::string_view kArchiveMagic = "ICENODE-PARAMS 1";

void save_archive(const std::filesystem::path& path, const ParameterSet& params,
                  const nlohmann::json& metadata = nlohmann::json::object());

struct LoadedArchive {
  ParameterSet params;
  nlohmann::json metadata;
};

LoadedArchive load_archive(const std::filesystem::path& path);

}  // namespace icenode::diff
