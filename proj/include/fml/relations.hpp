#pragma once

// Online estimation of the parent-of graph. Every child column holds one
// score per candidate parent ({world} plus the other objects); candidates are
// rewarded when their predicted relative motion agrees in direction with what
// is observed next.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "fml/error.hpp"
#include "fml/kinematics.hpp"
#include "fml/nodes.hpp"
#include "fml/transform_vec.hpp"

namespace fml {

inline constexpr double kStillnessEpsilon = 1e-6;  // px
// Mean cosine scores of competing candidates typically differ by only a few
// hundredths, so the softmax needs a small temperature to separate them.
inline constexpr double kDefaultTemperature = 1e-3;

// Dense row-major matrix, rows = nodes (world first), cols = child objects.
template <typename T>
struct NodeMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  NodeMatrix() = default;
  NodeMatrix(std::size_t r, std::size_t c, T fill = T{}) : rows(r), cols(c), data(r * c, fill) {}

  static NodeMatrix for_objects(std::size_t n, T fill = T{}) { return NodeMatrix(n + 1, n, fill); }

  T& operator()(Node p, std::size_t o) { return data[p * cols + o]; }
  const T& operator()(Node p, std::size_t o) const { return data[p * cols + o]; }
};

// Two still vectors agree; a still vector never agrees with a moving one.
inline double cosine_sim(const TransformVec& u, const TransformVec& v) {
  const double nu = norm(u);
  const double nv = norm(v);
  const bool still_u = nu < kStillnessEpsilon;
  const bool still_v = nv < kStillnessEpsilon;
  if (still_u && still_v) return 1.0;
  if (still_u || still_v) return 0.0;
  return std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0);
}

// Per child column: softmax over candidates of (mean score) / tau. Entries
// where a child would be its own parent stay at zero.
inline NodeMatrix<double> soft_adjacency(const NodeMatrix<double>& scores, std::size_t step_count,
                                         double tau = kDefaultTemperature) {
  if (!(tau > 0.0)) throw RangeError("soft_adjacency: temperature must be positive");
  NodeMatrix<double> soft(scores.rows, scores.cols, 0.0);
  const double denom = static_cast<double>(std::max<std::size_t>(step_count, 1)) * tau;
  for (std::size_t o = 0; o < scores.cols; ++o) {
    double peak = -std::numeric_limits<double>::infinity();
    for (Node p = 0; p < scores.rows; ++p) {
      if (p != node_of(o)) peak = std::max(peak, scores(p, o) / denom);
    }
    double total = 0.0;
    for (Node p = 0; p < scores.rows; ++p) {
      if (p == node_of(o)) continue;
      soft(p, o) = std::exp(scores(p, o) / denom - peak);
      total += soft(p, o);
    }
    for (Node p = 0; p < scores.rows; ++p) soft(p, o) /= total;
  }
  return soft;
}

struct ObjectGraph {
  std::size_t num_objects = 0;
  double tau = kDefaultTemperature;
  NodeMatrix<double> scores;  // accumulated similarities; -inf on self-edges
  NodeMatrix<double> soft;    // column-stochastic edge probabilities
  std::size_t step_count = 0;

  ObjectGraph() = default;
  explicit ObjectGraph(std::size_t n, double temperature = kDefaultTemperature)
      : num_objects(n), tau(temperature), scores(NodeMatrix<double>::for_objects(n, 0.0)) {
    for (std::size_t o = 0; o < n; ++o) scores(node_of(o), o) = -std::numeric_limits<double>::infinity();
    soft = soft_adjacency(scores, step_count, tau);
  }
};

// Adds cosine_sim(predicted, observed) to every candidate score of every
// child and recomputes the soft matrix.
inline ObjectGraph score_step(ObjectGraph graph, const NodeMatrix<TransformVec>& predicted_rel,
                              const NodeMatrix<TransformVec>& observed_rel) {
  const std::size_t n = graph.num_objects;
  for (const auto* m : {&predicted_rel, &observed_rel}) {
    if (m->rows != n + 1 || m->cols != n) {
      throw SizeError("score_step: expected " + std::to_string(n + 1) + "x" + std::to_string(n) +
                      " relative transforms, got " + std::to_string(m->rows) + "x" + std::to_string(m->cols));
    }
  }
  for (std::size_t o = 0; o < n; ++o) {
    for (Node p = 0; p <= n; ++p) {
      if (p == node_of(o)) continue;
      graph.scores(p, o) += cosine_sim(predicted_rel(p, o), observed_rel(p, o));
    }
  }
  ++graph.step_count;
  graph.soft = soft_adjacency(graph.scores, graph.step_count, graph.tau);
  return graph;
}

namespace detail {

// Edge set of a cycle reachable from `start`, or empty.
inline std::vector<std::size_t> find_cycle(const ParentAssignment& parents, std::size_t start) {
  std::vector<std::size_t> path;
  std::vector<int> seen(parents.size(), -1);
  std::size_t o = start;
  while (true) {
    if (seen[o] >= 0) return {path.begin() + seen[o], path.end()};
    seen[o] = static_cast<int>(path.size());
    path.push_back(o);
    if (parents[o] == kWorldNode) return {};
    o = object_of(parents[o]);
  }
}

inline ParentAssignment argmax_parents(const NodeMatrix<double>& soft) {
  ParentAssignment parents(soft.cols, kWorldNode);
  for (std::size_t o = 0; o < soft.cols; ++o) {
    for (Node p = 1; p < soft.rows; ++p) {
      if (p != node_of(o) && soft(p, o) > soft(parents[o], o)) parents[o] = p;
    }
  }
  return parents;
}

// Repeatedly replaces the weakest edge of a cycle by the world edge.
inline ParentAssignment cut_cycles(const NodeMatrix<double>& soft, ParentAssignment parents) {
  for (std::size_t start = 0; start < parents.size(); ++start) {
    for (auto cycle = find_cycle(parents, start); !cycle.empty(); cycle = find_cycle(parents, start)) {
      std::size_t weakest = cycle.front();
      for (std::size_t o : cycle) {
        const double w = soft(parents[o], o);
        if (w < soft(parents[weakest], weakest) || (w == soft(parents[weakest], weakest) && o < weakest)) weakest = o;
      }
      parents[weakest] = kWorldNode;
    }
  }
  return parents;
}

// Exhaustive branch-and-bound search for the acyclic assignment with the
// largest summed edge probability. Candidates are tried in index order and
// only strict improvements replace the incumbent, so ties go to lower parent
// indices.
class BestDagSearch {
 public:
  explicit BestDagSearch(const NodeMatrix<double>& soft)
      : soft_(soft), n_(soft.cols), current_(n_, kWorldNode), best_(n_, kWorldNode), column_max_(n_ + 1, 0.0) {
    for (std::size_t o = n_; o-- > 0;) {
      double m = 0.0;
      for (Node p = 0; p < soft.rows; ++p) {
        if (p != node_of(o)) m = std::max(m, soft(p, o));
      }
      column_max_[o] = column_max_[o + 1] + m;
    }
  }

  ParentAssignment run() {
    best_total_ = -1.0;
    visit(0, 0.0);
    return best_;
  }

 private:
  void visit(std::size_t o, double total) {
    if (total + column_max_[o] <= best_total_) return;
    if (o == n_) {
      if (is_acyclic(current_)) {
        best_total_ = total;
        best_ = current_;
      }
      return;
    }
    for (Node p = 0; p <= n_; ++p) {
      if (p == node_of(o)) continue;
      current_[o] = p;
      // Prune partial assignments that already close a cycle.
      if (p != kWorldNode && closes_cycle(o)) continue;
      visit(o + 1, total + soft_(p, o));
    }
    current_[o] = kWorldNode;
  }

  bool closes_cycle(std::size_t o) const {
    std::size_t cur = o;
    for (std::size_t hops = 0; hops <= n_; ++hops) {
      const Node p = current_[cur];
      if (p == kWorldNode) return false;
      cur = object_of(p);
      if (cur == o) return true;
      if (cur > o) return false;  // not assigned yet; treated as a root
    }
    return true;
  }

  const NodeMatrix<double>& soft_;
  std::size_t n_;
  ParentAssignment current_;
  ParentAssignment best_;
  std::vector<double> column_max_;  // suffix sums of per-column maxima
  double best_total_ = -1.0;
};

}  // namespace detail

inline constexpr std::size_t kExactParentSearchLimit = 8;

// Hard parent per child. When the per-column argmax is acyclic it is
// returned as is. Otherwise the acyclic assignment with the highest total
// probability is chosen (exact for up to kExactParentSearchLimit objects,
// weakest-edge-to-world cutting beyond that).
inline ParentAssignment hard_parents(const ObjectGraph& graph) {
  ParentAssignment argmax = detail::argmax_parents(graph.soft);
  if (is_acyclic(argmax)) return argmax;
  if (graph.num_objects <= kExactParentSearchLimit) return detail::BestDagSearch(graph.soft).run();
  return detail::cut_cycles(graph.soft, std::move(argmax));
}

// Global transform of every object: its relative transform composed with
// the global transform of its parent, applied down the hierarchy.
inline std::vector<PhaseTransform> relative_to_global(const std::vector<PhaseTransform>& rel,
                                                      const ParentAssignment& parents) {
  if (rel.size() != parents.size()) throw ContractError("relative_to_global: one parent per object required");
  auto order = topological_order(parents);
  if (!order) throw ContractError("relative_to_global: parent assignment contains a cycle");
  std::vector<PhaseTransform> global(rel.size());
  for (std::size_t o : *order) {
    global[o] = parents[o] == kWorldNode ? rel[o] : compose(global[object_of(parents[o])], rel[o]);
  }
  return global;
}

// Same hierarchy walk on explicit vectors.
inline std::vector<TransformVec> relative_to_global(const std::vector<TransformVec>& rel,
                                                    const ParentAssignment& parents) {
  if (rel.size() != parents.size()) throw ContractError("relative_to_global: one parent per object required");
  auto order = topological_order(parents);
  if (!order) throw ContractError("relative_to_global: parent assignment contains a cycle");
  std::vector<TransformVec> global(rel.size());
  for (std::size_t o : *order) {
    global[o] = parents[o] == kWorldNode ? rel[o] : global[object_of(parents[o])] + rel[o];
  }
  return global;
}

inline nlohmann::json graph_to_json(const ObjectGraph& graph, const ParentAssignment& parents) {
  std::vector<std::size_t> ids(graph.num_objects);
  for (std::size_t o = 0; o < ids.size(); ++o) ids[o] = node_of(o);
  return {{"soft", graph.soft.data},
          {"rows", graph.soft.rows},
          {"cols", graph.soft.cols},
          {"parents", parents},
          {"object_ids", ids},
          {"step_count", graph.step_count}};
}

inline nlohmann::json graph_to_json(const ObjectGraph& graph) { return graph_to_json(graph, hard_parents(graph)); }

}  // namespace fml
