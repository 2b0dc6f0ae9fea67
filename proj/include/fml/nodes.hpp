#pragma once

#include <cstddef>
#include <optional>
#include <vector>

namespace fml {

// Parent graphs index nodes as {world = 0, object o = o + 1}.
using Node = std::size_t;
inline constexpr Node kWorldNode = 0;

constexpr Node node_of(std::size_t object) { return object + 1; }
constexpr std::size_t object_of(Node node) { return node - 1; }

// parents[o] is the node object o moves relative to.
using ParentAssignment = std::vector<Node>;

// Objects ordered so every parent precedes its children (Kahn's algorithm,
// lowest index first among ready objects). Empty optional if the assignment
// has a cycle, a self-loop, or refers to a node that does not exist.
inline std::optional<std::vector<std::size_t>> topological_order(const ParentAssignment& parents) {
  const std::size_t n = parents.size();
  std::vector<std::vector<std::size_t>> children(n);
  std::vector<std::size_t> pending(n, 0);
  std::vector<std::size_t> ready;
  for (std::size_t o = 0; o < n; ++o) {
    const Node p = parents[o];
    if (p > n || p == node_of(o)) return std::nullopt;
    if (p == kWorldNode) continue;
    children[object_of(p)].push_back(o);
    pending[o] = 1;
  }
  for (std::size_t o = n; o-- > 0;) {
    if (pending[o] == 0) ready.push_back(o);
  }
  std::vector<std::size_t> order;
  order.reserve(n);
  while (!ready.empty()) {
    const std::size_t o = ready.back();
    ready.pop_back();
    order.push_back(o);
    for (auto it = children[o].rbegin(); it != children[o].rend(); ++it) ready.push_back(*it);
  }
  if (order.size() != n) return std::nullopt;
  return order;
}

inline bool is_acyclic(const ParentAssignment& parents) { return topological_order(parents).has_value(); }

// Number of edges between the object and the world.
inline std::vector<std::size_t> node_depths(const ParentAssignment& parents) {
  std::vector<std::size_t> depth(parents.size(), 0);
  if (auto order = topological_order(parents)) {
    for (std::size_t o : *order) depth[o] = parents[o] == kWorldNode ? 0 : depth[object_of(parents[o])] + 1;
  }
  return depth;
}

}  // namespace fml
