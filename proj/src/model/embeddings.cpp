#include "icenode/embeddings.hpp"

#include <cmath>

#include "icenode/diff/executor.hpp"
#include "icenode/error.hpp"
#include "init.hpp"

namespace icenode::emb {

using diff::GraphBuilder;
using diff::NodeId;
using diff::ParamGroup;

EmbeddingKind parse_embedding_kind(std::string_view text) {
  if (text == "matrix") return EmbeddingKind::Matrix;
  if (text == "gram") return EmbeddingKind::Gram;
  throw ConfigError("unknown embedding '" + std::string(text) + "' (expected matrix or gram)");
}

Attention parse_attention(std::string_view text) {
  if (text == "tanh") return Attention::Tanh;
  if (text == "l2") return Attention::L2;
  throw ConfigError("unknown attention '" + std::string(text) + "' (expected tanh or l2)");
}

std::string_view to_string(EmbeddingKind kind) {
  return kind == EmbeddingKind::Matrix ? "matrix" : "gram";
}

std::string_view to_string(Attention attention) {
  return attention == Attention::Tanh ? "tanh" : "l2";
}

ehr::CodeHierarchy flat_hierarchy(const ehr::Vocabulary& vocab) {
  ehr::CodeHierarchy h;
  h.n_codes = h.n_nodes = vocab.size();
  h.node_labels = vocab.labels();
  for (std::uint32_t i = 0; i < vocab.size(); ++i) h.ancestors.push_back({i});
  return h;
}

namespace {

struct GramGraph {
  NodeId table;
  NodeId weights;
};

// Builds both outputs of the attention module in one graph: the C x d_e
// table and the concatenated per-code attention weights.
GramGraph build_gram(GraphBuilder& b, const EmbeddingConfig& cfg, const ehr::CodeHierarchy& h) {
  const std::size_t d = cfg.d_e, ell = cfg.ell;
  const NodeId E = b.param("gram.E", h.n_nodes * d);
  std::vector<NodeId> basic(h.n_nodes);
  for (std::size_t n = 0; n < h.n_nodes; ++n) basic[n] = b.slice(E, n * d, d);

  std::vector<NodeId> rows, weights;
  for (std::size_t i = 0; i < h.n_codes; ++i) {
    const auto& anc = h.ancestors[i];
    std::vector<NodeId> scores;
    for (std::uint32_t j : anc) {
      if (cfg.attention == Attention::Tanh) {
        // u^T tanh(W [e_i; e_j] + b), child first.
        const NodeId hidden =
            b.tanh(b.affine("gram.W", "gram.b", ell, b.concat({basic[i], basic[j]})));
        scores.push_back(b.dot(b.param("gram.u", ell), hidden));
      } else {
        // exp(-||theta_r (e_i - e_j)||^2 / sqrt(ell))
        const NodeId proj = b.linear("gram.theta", ell, b.sub(basic[i], basic[j]));
        scores.push_back(b.exp(b.scale(b.sum(b.square(proj)), -1.0 / std::sqrt(double(ell)))));
      }
    }
    const NodeId alpha = b.softmax(b.concat(scores));
    weights.push_back(alpha);
    NodeId row = 0;
    for (std::size_t k = 0; k < anc.size(); ++k) {
      const NodeId term = b.mul(b.broadcast(b.slice(alpha, k, 1), d), basic[anc[k]]);
      row = k == 0 ? term : b.add(row, term);
    }
    rows.push_back(row);
  }
  return {b.concat(rows), b.concat(weights)};
}

}  // namespace

Embedding::Embedding(EmbeddingConfig config, std::size_t n_codes,
                     std::shared_ptr<const ehr::CodeHierarchy> hierarchy)
    : config_(config), n_codes_(n_codes), hierarchy_(std::move(hierarchy)) {
  if (config_.d_e == 0) throw ConfigError("embedding size d_e must be positive");
  if (n_codes_ == 0) throw ConfigError("embedding needs a non-empty vocabulary");
  if (config_.kind == EmbeddingKind::Matrix) return;
  if (config_.ell == 0) throw ConfigError("attention size ell must be >= 1");
  if (!hierarchy_) throw ConfigError("GRAM embedding needs a code hierarchy");
  if (hierarchy_->n_codes != n_codes_ || hierarchy_->ancestors.size() != n_codes_) {
    throw ConfigError("code hierarchy does not match the vocabulary size");
  }
  for (std::size_t i = 0; i < n_codes_; ++i) {
    const auto& a = hierarchy_->ancestors[i];
    if (a.empty() || a.front() != i) throw ConfigError("ancestor list must start with the code");
    weights_offset_.push_back(weights_offset_.empty()
                                  ? 0
                                  : weights_offset_.back() + hierarchy_->ancestors[i - 1].size());
  }
  GraphBuilder tb(0);
  auto t = build_gram(tb, config_, *hierarchy_);
  table_program_ = std::make_shared<const diff::Program>(std::move(tb).finish(t.table));
  GraphBuilder wb(0);
  auto w = build_gram(wb, config_, *hierarchy_);
  weights_program_ = std::make_shared<const diff::Program>(std::move(wb).finish(w.weights));
}

void Embedding::declare(diff::ParameterSet& p) const {
  const std::size_t d = config_.d_e, ell = config_.ell;
  if (config_.kind == EmbeddingKind::Matrix) {
    p.add("emb.W", ParamGroup::Other, {d, n_codes_});
    p.add("emb.b", ParamGroup::Other, {d});
    return;
  }
  p.add("gram.E", ParamGroup::Other, {hierarchy_->n_nodes, d});
  if (config_.attention == Attention::Tanh) {
    p.add("gram.W", ParamGroup::Other, {ell, 2 * d});
    p.add("gram.b", ParamGroup::Other, {ell});
    p.add("gram.u", ParamGroup::Other, {ell});
  } else {
    p.add("gram.theta", ParamGroup::Other, {ell, d});
  }
}

void Embedding::initialize(diff::ParameterSet& p, std::mt19937_64& rng) const {
  if (config_.kind == EmbeddingKind::Matrix) {
    detail::truncated_normal(p.values("emb.W"), n_codes_, rng);
    return;
  }
  std::uniform_real_distribution<double> u(-0.1, 0.1);
  for (double& x : p.values("gram.E")) x = u(rng);
  if (config_.attention == Attention::Tanh) {
    detail::truncated_normal(p.values("gram.W"), 2 * config_.d_e, rng);
    detail::truncated_normal(p.values("gram.u"), config_.ell, rng);
  } else {
    detail::truncated_normal(p.values("gram.theta"), config_.d_e, rng);
  }
}

std::size_t Embedding::table_size() const {
  return config_.kind == EmbeddingKind::Gram ? n_codes_ * config_.d_e : 0;
}

void Embedding::prepare(const diff::ParameterSet& params, std::span<double> table) const {
  if (config_.kind == EmbeddingKind::Matrix) return;
  diff::Executor ex(*table_program_, params);
  auto out = ex.forward({});
  std::copy(out.begin(), out.end(), table.begin());
}

void Embedding::embed(const diff::ParameterSet& params, std::span<const double> table,
                      const std::vector<ehr::CodeId>& codes, std::span<double> g) const {
  const std::size_t d = config_.d_e;
  for (ehr::CodeId c : codes) {
    if (c >= n_codes_) throw DataError("code id " + std::to_string(c) + " out of range");
  }
  if (config_.kind == EmbeddingKind::Matrix) {
    auto W = params.values("emb.W");
    auto b = params.values("emb.b");
    for (std::size_t r = 0; r < d; ++r) {
      double s = b[r];
      for (ehr::CodeId c : codes) s += W[r * n_codes_ + c];
      g[r] = s;
    }
    return;
  }
  std::fill(g.begin(), g.end(), 0.0);
  for (ehr::CodeId c : codes) {
    for (std::size_t r = 0; r < d; ++r) g[r] += table[c * d + r];
  }
  for (double& x : g) x = std::tanh(x);
}

void Embedding::embed_backward(const diff::ParameterSet& params,
                               const std::vector<ehr::CodeId>& codes, std::span<const double> g,
                               std::span<const double> g_bar, std::span<double> param_grad,
                               std::span<double> table_grad) const {
  const std::size_t d = config_.d_e;
  if (config_.kind == EmbeddingKind::Matrix) {
    const std::size_t w0 = params.spec("emb.W").offset, b0 = params.spec("emb.b").offset;
    for (std::size_t r = 0; r < d; ++r) {
      param_grad[b0 + r] += g_bar[r];
      for (ehr::CodeId c : codes) param_grad[w0 + r * n_codes_ + c] += g_bar[r];
    }
    return;
  }
  for (ehr::CodeId c : codes) {
    for (std::size_t r = 0; r < d; ++r) table_grad[c * d + r] += g_bar[r] * (1.0 - g[r] * g[r]);
  }
}

void Embedding::table_backward(const diff::ParameterSet& params,
                               std::span<const double> table_grad,
                               std::span<double> param_grad) const {
  if (config_.kind == EmbeddingKind::Matrix) return;
  diff::Executor ex(*table_program_, params);
  ex.forward({});
  ex.backward(table_grad, {}, diff::ParamGradView{param_grad, 0});
}

std::vector<double> Embedding::attention_weights(const diff::ParameterSet& params,
                                                 ehr::CodeId code) const {
  if (config_.kind != EmbeddingKind::Gram) throw ConfigError("matrix embedding has no attention");
  if (code >= n_codes_) throw DataError("code id out of range");
  diff::Executor ex(*weights_program_, params);
  auto out = ex.forward({});
  const auto n = hierarchy_->ancestors[code].size();
  return {out.begin() + weights_offset_[code], out.begin() + weights_offset_[code] + n};
}

}  // namespace icenode::emb
