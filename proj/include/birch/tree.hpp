#pragma once

#include <algorithm>
#include <cstdint>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "linalg.hpp"

// Weighted directed computation trees.  Every node is an iterate; the edge
// into a node carries the label (grad_point, sample) of the stochastic
// gradient that produced the step, plus the step vector itself.

namespace birch {

using NodeId = std::int64_t;
using SampleId = std::uint64_t;

inline constexpr NodeId kNoNode = -1;
inline constexpr SampleId kNoSample = ~SampleId{0};

struct GradientLabel {
  NodeId grad_point = kNoNode;
  SampleId sample = kNoSample;

  friend bool operator==(const GradientLabel& a, const GradientLabel& b) {
    return a.grad_point == b.grad_point && a.sample == b.sample;
  }
  friend bool operator<(const GradientLabel& a, const GradientLabel& b) {
    return a.grad_point != b.grad_point ? a.grad_point < b.grad_point
                                        : a.sample < b.sample;
  }
};

struct TreeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class ComputationTree {
 public:
  // Creates the root iterate.  Must be called exactly once, before extend.
  NodeId add_root(Vec point) {
    if (!parent_.empty()) throw TreeError("add_root: tree already has a root");
    parent_.push_back(kNoNode);
    label_.push_back({});
    depth_.push_back(0);
    step_.push_back({});
    point_.push_back(std::move(point));
    dead_end_.push_back(false);
    return 0;
  }

  // Appends the iterate point(base) - step.  The sample must be fresh: a draw
  // enters the tree through exactly one extend call.
  NodeId extend(NodeId base, NodeId grad_point, SampleId sample, const Vec& step) {
    check_node(base, "extend");
    check_node(grad_point, "extend");
    if (sample_edge_.count(sample))
      throw TreeError("extend: sample already labels an edge");
    return append(base, grad_point, sample, step);
  }

  // Appends an edge that re-applies an already recorded draw, e.g. when a
  // server unrolls worker-local steps onto the main branch.  The sample must
  // already label an edge with the same grad_point (it is the same gradient,
  // written down a second time), so repr containment works by value.
  NodeId extend_replay(NodeId base, NodeId grad_point, SampleId sample,
                       const Vec& step) {
    check_node(base, "extend_replay");
    check_node(grad_point, "extend_replay");
    auto it = sample_edge_.find(sample);
    if (it == sample_edge_.end())
      throw TreeError("extend_replay: sample was never recorded");
    if (label_[it->second].grad_point != grad_point)
      throw TreeError("extend_replay: grad_point differs from first use");
    return append(base, grad_point, sample, step);
  }

  void mark_dead_end(NodeId v) {
    check_node(v, "mark_dead_end");
    dead_end_[v] = true;
  }

  std::size_t node_count() const { return parent_.size(); }
  NodeId parent(NodeId v) const { check_node(v, "parent"); return parent_[v]; }
  const GradientLabel& label(NodeId v) const { check_node(v, "label"); return label_[v]; }
  std::int64_t depth(NodeId v) const { check_node(v, "depth"); return depth_[v]; }
  const Vec& step(NodeId v) const { check_node(v, "step"); return step_[v]; }
  const Vec& point(NodeId v) const { check_node(v, "point"); return point_[v]; }
  bool is_dead_end(NodeId v) const { check_node(v, "is_dead_end"); return dead_end_[v]; }

  NodeId lca(NodeId a, NodeId b) const {
    check_node(a, "lca");
    check_node(b, "lca");
    while (depth_[a] > depth_[b]) a = parent_[a];
    while (depth_[b] > depth_[a]) b = parent_[b];
    while (a != b) { a = parent_[a]; b = parent_[b]; }
    return a;
  }

  // Tree distance: the larger of the two hop counts down from the closest
  // common ancestor.
  std::int64_t dist(NodeId a, NodeId b) const {
    const NodeId c = lca(a, b);
    return std::max(depth_[a] - depth_[c], depth_[b] - depth_[c]);
  }

  // Multiset of edge labels on the path root -> v, sorted.
  std::vector<GradientLabel> repr(NodeId v) const {
    check_node(v, "repr");
    std::vector<GradientLabel> out;
    for (; v != 0; v = parent_[v]) out.push_back(label_[v]);
    std::sort(out.begin(), out.end());
    return out;
  }

  // Whether repr(inner) is a sub-multiset of repr(outer).
  bool repr_contained(NodeId inner, NodeId outer) const {
    const auto a = repr(inner);
    const auto b = repr(outer);
    return std::includes(b.begin(), b.end(), a.begin(), a.end());
  }

  // One line per node: "id parent grad_point sample step...".  The root line
  // carries parent/grad_point -1 and its coordinates in the vector slot so a
  // reader can rebuild every iterate.  with_vectors=false drops the numeric
  // payload for very high-dimensional runs.
  void write(std::ostream& os, bool with_vectors = true) const {
    os.precision(17);
    for (NodeId v = 0; v < static_cast<NodeId>(parent_.size()); ++v) {
      os << v << ' ' << parent_[v] << ' ';
      if (v == 0)
        os << -1 << ' ' << -1;
      else
        os << label_[v].grad_point << ' ' << label_[v].sample;
      if (dead_end_[v]) os << " *";
      if (with_vectors) {
        const Vec& payload = (v == 0) ? point_[0] : step_[v];
        for (double x : payload) os << ' ' << x;
      }
      os << '\n';
    }
  }

  static ComputationTree read(std::istream& is) {
    ComputationTree t;
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty() || line[0] == '#') continue;
      std::istringstream ls(line);
      NodeId id, parent, grad_point;
      std::int64_t sample_signed;
      if (!(ls >> id >> parent >> grad_point >> sample_signed))
        throw TreeError("read: malformed node line: " + line);
      bool dead = false;
      Vec payload;
      std::string tok;
      while (ls >> tok) {
        if (tok == "*") { dead = true; continue; }
        payload.push_back(std::stod(tok));
      }
      if (id != static_cast<NodeId>(t.parent_.size()))
        throw TreeError("read: node ids must be consecutive from 0");
      if (id == 0) {
        if (parent != kNoNode) throw TreeError("read: root must have parent -1");
        t.add_root(std::move(payload));
      } else {
        t.check_node(parent, "read");
        t.check_node(grad_point, "read");
        const SampleId sample = static_cast<SampleId>(sample_signed);
        if (payload.empty()) payload.assign(t.point_[0].size(), 0.0);
        t.append(parent, grad_point, sample, payload);
      }
      if (dead) t.dead_end_[id] = true;
    }
    if (t.parent_.empty()) throw TreeError("read: empty tree");
    return t;
  }

 private:
  NodeId append(NodeId base, NodeId grad_point, SampleId sample, const Vec& step) {
    if (step.size() != point_[0].size())
      throw TreeError("extend: step dimension mismatch");
    const NodeId v = static_cast<NodeId>(parent_.size());
    parent_.push_back(base);
    label_.push_back({grad_point, sample});
    depth_.push_back(depth_[base] + 1);
    step_.push_back(step);
    Vec p = point_[base];
    axpy(-1.0, step, p);
    point_.push_back(std::move(p));
    dead_end_.push_back(false);
    sample_edge_.emplace(sample, v);
    return v;
  }

  void check_node(NodeId v, const char* where) const {
    if (v < 0 || v >= static_cast<NodeId>(parent_.size()))
      throw TreeError(std::string(where) + ": node id out of range");
  }

  std::vector<NodeId> parent_;
  std::vector<GradientLabel> label_;
  std::vector<std::int64_t> depth_;
  std::vector<Vec> step_;
  std::vector<Vec> point_;
  std::vector<bool> dead_end_;
  std::unordered_map<SampleId, NodeId> sample_edge_;  // first use of each draw
};

// The nominated main branch {x^k} plus the auxiliary sequence (z^k, xi^k):
// the edge branch[k] -> branch[k+1] applies the gradient taken at aux[k].z
// with draw aux[k].sample.
struct MainBranchRecord {
  struct AuxEntry {
    NodeId z = kNoNode;
    SampleId sample = kNoSample;
  };

  std::vector<NodeId> branch;
  std::vector<AuxEntry> aux;

  void validate(const ComputationTree& tree) const {
    if (branch.empty()) throw TreeError("branch record: empty branch");
    if (branch[0] != 0) throw TreeError("branch record: must start at root");
    if (aux.size() + 1 != branch.size())
      throw TreeError("branch record: aux length must be branch length - 1");
    for (std::size_t k = 0; k + 1 < branch.size(); ++k) {
      if (tree.parent(branch[k + 1]) != branch[k])
        throw TreeError("branch record: branch nodes are not parent-linked");
      const GradientLabel& lbl = tree.label(branch[k + 1]);
      if (lbl.grad_point != aux[k].z || lbl.sample != aux[k].sample)
        throw TreeError("branch record: aux entry disagrees with edge label");
    }
  }

  void write(std::ostream& os) const {
    for (std::size_t k = 0; k < branch.size(); ++k) {
      os << branch[k];
      if (k + 1 < branch.size()) os << ' ' << aux[k].z << ' ' << aux[k].sample;
      os << '\n';
    }
  }

  static MainBranchRecord read(std::istream& is) {
    MainBranchRecord rec;
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty() || line[0] == '#') continue;
      std::istringstream ls(line);
      NodeId node;
      if (!(ls >> node)) throw TreeError("branch read: malformed line");
      rec.branch.push_back(node);
      NodeId z;
      std::int64_t sample;
      if (ls >> z >> sample)
        rec.aux.push_back({z, static_cast<SampleId>(sample)});
    }
    if (rec.branch.empty()) throw TreeError("branch read: empty record");
    return rec;
  }
};

struct ConditionReport {
  std::int64_t R_observed = 0;
  std::vector<std::int64_t> per_step_dist;      // dist(x^k, z^k) for each k
  std::vector<std::size_t> repr_violations;     // steps breaking containment
  std::vector<std::size_t> structure_violations;  // z^k not forked off x^k's past
  double fork_identity_max_residual = 0.0;
  bool within_claimed = true;

  bool ok() const {
    return repr_violations.empty() && structure_violations.empty() &&
           within_claimed;
  }
};

// Audits a recorded run against the geometric conditions: bounded tree
// distance dist(x^k, z^k) <= claimed_R, representation containment
// repr(z^k) subset-of repr(x^k), and the fork identity
//   x^k - z^k = -(sum of main-branch steps between the fork point and k-1
//                 that z^k's own path does not account for),
// replayed in exact recorded arithmetic.
inline ConditionReport verify_conditions(const ComputationTree& tree,
                                         const MainBranchRecord& rec,
                                         std::int64_t claimed_R) {
  rec.validate(tree);
  ConditionReport rep;
  std::unordered_map<NodeId, std::size_t> branch_index;
  for (std::size_t k = 0; k < rec.branch.size(); ++k)
    branch_index.emplace(rec.branch[k], k);

  const std::size_t dim = tree.point(0).size();
  for (std::size_t k = 0; k + 1 < rec.branch.size(); ++k) {
    const NodeId x = rec.branch[k];
    const NodeId z = rec.aux[k].z;
    rep.per_step_dist.push_back(tree.dist(x, z));
    rep.R_observed = std::max(rep.R_observed, rep.per_step_dist.back());

    if (!tree.repr_contained(z, x)) rep.repr_violations.push_back(k);

    // Fork point: the closest common ancestor must be a main-branch node no
    // later than x^k, otherwise the auxiliary point is not a fork off the
    // main branch's own past.
    const NodeId fork = tree.lca(x, z);
    auto it = branch_index.find(fork);
    if (it == branch_index.end() || it->second > k) {
      rep.structure_violations.push_back(k);
      continue;
    }
    const std::size_t p = it->second;

    // Draws on z's path down from the fork.
    std::unordered_map<SampleId, int> z_path;
    for (NodeId v = z; v != fork; v = tree.parent(v))
      ++z_path[tree.label(v).sample];

    // x^k - z^k must equal minus the sum of main-branch steps in (p, k] whose
    // draws z's path does not already apply.
    Vec acc(dim, 0.0);
    for (std::size_t j = p; j < k; ++j) {
      const NodeId edge_node = rec.branch[j + 1];
      auto zit = z_path.find(tree.label(edge_node).sample);
      if (zit != z_path.end() && zit->second > 0) {
        --zit->second;
        continue;
      }
      axpy(1.0, tree.step(edge_node), acc);
    }
    Vec gap = sub(tree.point(x), tree.point(z));
    axpy(1.0, acc, gap);
    rep.fork_identity_max_residual =
        std::max(rep.fork_identity_max_residual, norm(gap));
  }
  rep.within_claimed = rep.R_observed <= claimed_R;
  return rep;
}

}  // namespace birch
