#include <algorithm>
#include <functional>
#include <set>

#include "icenode/ehr.hpp"
#include "icenode/error.hpp"
#include "icenode/text_io.hpp"

namespace icenode::ehr {

Ontology::Ontology(std::vector<std::pair<std::string, std::string>> edges)
    : edges_(std::move(edges)) {
  auto node = [&](const std::string& label) {
    auto [it, fresh] = index_.emplace(label, labels_.size());
    if (fresh) {
      labels_.push_back(label);
      parents_.emplace_back();
    }
    return it->second;
  };
  for (const auto& [child, parent] : edges_) {
    if (child.empty() || parent.empty()) throw DataError("ontology edge with an empty node");
    if (child == parent) throw DataError("ontology cycle: self-loop on '" + child + "'");
    const std::size_t c = node(child);
    const std::size_t p = node(parent);
    auto& ps = parents_[c];
    if (std::find(ps.begin(), ps.end(), p) == ps.end()) ps.push_back(p);
  }

  // Depth-first closure; a node met again while still open closes a cycle.
  enum : char { White, Grey, Black };
  std::vector<char> colour(labels_.size(), White);
  closure_.assign(labels_.size(), {});
  std::function<void(std::size_t)> visit = [&](std::size_t n) {
    colour[n] = Grey;
    std::set<std::size_t> acc{n};
    for (std::size_t p : parents_[n]) {
      if (colour[p] == Grey) {
        throw DataError("ontology cycle through edge '" + labels_[n] + "' -> '" + labels_[p] + "'");
      }
      if (colour[p] == White) visit(p);
      acc.insert(closure_[p].begin(), closure_[p].end());
    }
    closure_[n].assign(acc.begin(), acc.end());
    colour[n] = Black;
  };
  for (std::size_t n = 0; n < labels_.size(); ++n) {
    if (colour[n] == White) visit(n);
  }
}

std::optional<std::size_t> Ontology::find(std::string_view label) const {
  auto it = index_.find(std::string(label));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

Ontology load_ontology(const std::filesystem::path& path) {
  std::vector<std::pair<std::string, std::string>> edges;
  detail::for_each_line(path, [&](std::string_view line, std::size_t lineno) {
    if (line.empty() || line.front() == '#') return;
    auto f = detail::split(line, '\t');
    if (f.size() != 2 || f[0].empty() || f[1].empty()) {
      throw DataError(path.string() + ":" + std::to_string(lineno) +
                      ": expected child<TAB>parent");
    }
    edges.emplace_back(std::string(f[0]), std::string(f[1]));
  });
  return Ontology(std::move(edges));
}

void save_ontology(const std::filesystem::path& path, const Ontology& ontology) {
  std::ofstream out = detail::open_output(path);
  for (const auto& [c, p] : ontology.edges()) out << c << '\t' << p << '\n';
  detail::finish_output(out, path);
}

CodeHierarchy build_hierarchy(const Ontology& ontology, const Vocabulary& vocab) {
  CodeHierarchy h;
  h.n_codes = vocab.size();
  h.node_labels = vocab.labels();

  // Ontology node -> embedding node.
  std::vector<std::uint32_t> remap(ontology.node_count());
  std::vector<bool> has_child(ontology.node_count(), false);
  for (std::size_t n = 0; n < ontology.node_count(); ++n) {
    for (std::size_t p : ontology.parents(n)) has_child[p] = true;
  }
  std::vector<std::string> orphans;
  for (std::size_t n = 0; n < ontology.node_count(); ++n) {
    const auto& label = ontology.labels()[n];
    if (auto id = vocab.find(label)) {
      remap[n] = *id;
    } else {
      if (!has_child[n]) orphans.push_back(label);
      remap[n] = static_cast<std::uint32_t>(h.node_labels.size());
      h.node_labels.push_back(label);
    }
  }
  if (!orphans.empty()) {
    std::string msg = std::to_string(orphans.size()) + " ontology leaf node(s) not in vocabulary:";
    for (std::size_t i = 0; i < orphans.size() && i < 20; ++i) msg += " " + orphans[i];
    throw DataError(msg);
  }
  h.n_nodes = h.node_labels.size();
  h.ancestors.resize(h.n_codes);
  for (CodeId c = 0; c < h.n_codes; ++c) {
    auto& a = h.ancestors[c];
    a.push_back(c);
    if (auto n = ontology.find(vocab.label(c))) {
      std::vector<std::uint32_t> up;
      for (std::size_t m : ontology.ancestors(*n)) {
        if (m != *n) up.push_back(remap[m]);
      }
      std::sort(up.begin(), up.end());
      a.insert(a.end(), up.begin(), up.end());
    }
  }
  return h;
}

}  // namespace icenode::ehr
