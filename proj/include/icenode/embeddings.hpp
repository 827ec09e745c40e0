#pragma once

#include <cstddef>
#include <memory>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include "icenode/diff/parameter_set.hpp"
#include "icenode/diff/program.hpp"
#include "icenode/ehr.hpp"

namespace icenode::emb {

enum class EmbeddingKind { Matrix, Gram };
enum class Attention { Tanh, L2 };

EmbeddingKind parse_embedding_kind(std::string_view text);
Attention parse_attention(std::string_view text);
std::string_view to_string(EmbeddingKind kind);
std::string_view to_string(Attention attention);

struct EmbeddingConfig {
  EmbeddingKind kind = EmbeddingKind::Matrix;
  Attention attention = Attention::Tanh;
  std::size_t d_e = 300;
  std::size_t ell = 200;  // attention hidden size
};

/// Maps a code set to a d_e vector.
///
/// Matrix: g = W v + b. GRAM: g = tanh(v G) where row i of G is the
/// attention-weighted convex combination of the basic embeddings of code i
/// and its ancestors. G depends only on parameters, so callers compute it
/// once per parameter update with prepare() and pass it to embed().
class Embedding {
 public:
  Embedding(EmbeddingConfig config, std::size_t n_codes,
            std::shared_ptr<const ehr::CodeHierarchy> hierarchy = nullptr);

  const EmbeddingConfig& config() const { return config_; }
  std::size_t n_codes() const { return n_codes_; }
  std::size_t dim() const { return config_.d_e; }

  /// Adds this embedding's arrays (group Other) to `params`.
  void declare(diff::ParameterSet& params) const;
  void initialize(diff::ParameterSet& params, std::mt19937_64& rng) const;

  /// Size of the per-update table (C * d_e for GRAM, 0 for matrix).
  std::size_t table_size() const;
  void prepare(const diff::ParameterSet& params, std::span<double> table) const;

  void embed(const diff::ParameterSet& params, std::span<const double> table,
             const std::vector<ehr::CodeId>& codes, std::span<double> g) const;

  /// Accumulates d/dparams (matrix) or d/dtable (GRAM) of <g_bar, g>.
  /// `g` is the forward output for the same codes.
  void embed_backward(const diff::ParameterSet& params, const std::vector<ehr::CodeId>& codes,
                      std::span<const double> g, std::span<const double> g_bar,
                      std::span<double> param_grad, std::span<double> table_grad) const;

  /// Pulls an accumulated table gradient back onto the parameters (GRAM).
  void table_backward(const diff::ParameterSet& params, std::span<const double> table_grad,
                      std::span<double> param_grad) const;

  /// Attention weights of code i over its ancestor list (GRAM only).
  std::vector<double> attention_weights(const diff::ParameterSet& params, ehr::CodeId code) const;

  const diff::Program& table_program() const { return *table_program_; }
  const ehr::CodeHierarchy& hierarchy() const { return *hierarchy_; }

 private:
  EmbeddingConfig config_;
  std::size_t n_codes_;
  std::shared_ptr<const ehr::CodeHierarchy> hierarchy_;
  std::shared_ptr<const diff::Program> table_program_;
  std::shared_ptr<const diff::Program> weights_program_;
  std::vector<std::size_t> weights_offset_;  // per code, into the weights output
};

/// Single-node hierarchy: every code is its own only ancestor.
ehr::CodeHierarchy flat_hierarchy(const ehr::Vocabulary& vocab);

}  // namespace icenode::emb
