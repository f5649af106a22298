#include <doctest.h>

#include <random>
#include <sstream>

#include "birch/tree.hpp"

using namespace birch;

namespace {

// Reference implementations by full ancestor enumeration; deliberately slow.
std::vector<NodeId> path_to_root(const ComputationTree& t, NodeId v) {
  std::vector<NodeId> p{v};
  while (p.back() != 0) p.push_back(t.parent(p.back()));
  return p;
}

std::int64_t naive_dist(const ComputationTree& t, NodeId a, NodeId b) {
  const auto pa = path_to_root(t, a);
  const auto pb = path_to_root(t, b);
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (std::size_t j = 0; j < pb.size(); ++j)
      if (pa[i] == pb[j])
        return static_cast<std::int64_t>(std::max(i, j));
  return -1;  // unreachable: root is always shared
}

NodeId naive_lca(const ComputationTree& t, NodeId a, NodeId b) {
  const auto pa = path_to_root(t, a);
  const auto pb = path_to_root(t, b);
  for (NodeId u : pa)
    for (NodeId v : pb)
      if (u == v) return u;
  return kNoNode;
}

std::vector<GradientLabel> naive_repr(const ComputationTree& t, NodeId v) {
  std::vector<GradientLabel> out;
  for (; v != 0; v = t.parent(v)) out.push_back(t.label(v));
  std::sort(out.begin(), out.end());
  return out;
}

ComputationTree random_tree(std::mt19937& gen, int max_nodes) {
  ComputationTree t;
  t.add_root({0.0});
  const int n = std::uniform_int_distribution<int>(2, max_nodes)(gen);
  for (int i = 1; i < n; ++i) {
    std::uniform_int_distribution<NodeId> pick(0, i - 1);
    t.extend(pick(gen), pick(gen), static_cast<SampleId>(i),
             {std::uniform_real_distribution<double>(-1, 1)(gen)});
  }
  return t;
}

// The running example: two worker chains off the root plus the main branch
// that replays their gradients.  Node ids follow insertion order.
struct WorkedTree {
  ComputationTree t;
  NodeId w0, w1, w2, w3, w4, w8, w9, w10;
  MainBranchRecord rec;
};

WorkedTree worked_tree() {
  WorkedTree wt;
  const Vec s1{0.25}, s3{0.5}, s4{1.0}, s9{2.0}, s10{4.0};
  wt.w0 = wt.t.add_root({0.0});
  wt.w1 = wt.t.extend(wt.w0, wt.w0, 0, s1);         // chain: grad at w0, draw 0
  wt.w2 = wt.t.extend_replay(wt.w0, wt.w0, 0, s1);  // main: same draw replayed
  wt.w3 = wt.t.extend(wt.w2, wt.w1, 1, s3);
  wt.w4 = wt.t.extend(wt.w1, wt.w2, 2, s4);         // chain continues off w1
  wt.w8 = wt.t.extend_replay(wt.w3, wt.w2, 2, s4);
  wt.w9 = wt.t.extend(wt.w8, wt.w4, 6, s9);
  wt.w10 = wt.t.extend(wt.w9, wt.w1, 3, s10);
  wt.rec.branch = {wt.w0, wt.w2, wt.w3, wt.w8, wt.w9, wt.w10};
  wt.rec.aux = {{wt.w0, 0}, {wt.w1, 1}, {wt.w2, 2}, {wt.w4, 6}, {wt.w1, 3}};
  return wt;
}

}  // namespace

TEST_CASE("dist, lca and repr agree with brute force on random trees") {
  for (int iter = 0; iter < 1000; ++iter) {
    std::mt19937 gen(static_cast<unsigned>(iter));
    const ComputationTree t = random_tree(gen, 200);
    const NodeId last = static_cast<NodeId>(t.node_count()) - 1;
    std::uniform_int_distribution<NodeId> pick(0, last);
    for (int k = 0; k < 20; ++k) {
      const NodeId a = pick(gen), b = pick(gen);
      REQUIRE(t.lca(a, b) == naive_lca(t, a, b));
      REQUIRE(t.dist(a, b) == naive_dist(t, a, b));
      REQUIRE(t.dist(a, a) == 0);
    }
    for (int k = 0; k < 10; ++k) {
      const NodeId v = pick(gen);
      REQUIRE(t.repr(v) == naive_repr(t, v));
      REQUIRE(static_cast<std::int64_t>(t.repr(v).size()) == t.depth(v));
      REQUIRE(t.repr_contained(v, v));
    }
    // repr(child) = repr(parent) plus the child's own edge label.
    for (NodeId v = 1; v <= last; ++v) {
      auto expect = t.repr(t.parent(v));
      expect.push_back(t.label(v));
      std::sort(expect.begin(), expect.end());
      if (v % 17 == 0) REQUIRE(t.repr(v) == expect);
    }
  }
}

TEST_CASE("worked example: distances and representations") {
  const WorkedTree wt = worked_tree();
  const ComputationTree& t = wt.t;

  CHECK(t.node_count() == 8);
  CHECK(t.lca(wt.w9, wt.w4) == wt.w0);
  CHECK(t.dist(wt.w9, wt.w4) == 4);  // max{4, 2}

  const std::vector<GradientLabel> r4{{wt.w0, 0}, {wt.w2, 2}};
  CHECK(t.repr(wt.w4) == r4);
  const std::vector<GradientLabel> r9{
      {wt.w0, 0}, {wt.w1, 1}, {wt.w2, 2}, {wt.w4, 6}};
  CHECK(t.repr(wt.w9) == r9);
  CHECK(t.repr_contained(wt.w4, wt.w9));
  CHECK(!t.repr_contained(wt.w9, wt.w4));
  CHECK(t.repr(0).empty());
}

TEST_CASE("worked example: condition audit along the main branch") {
  const WorkedTree wt = worked_tree();
  const ConditionReport rep = verify_conditions(wt.t, wt.rec, 4);
  CHECK(rep.per_step_dist == std::vector<std::int64_t>{0, 1, 1, 3, 4});
  CHECK(rep.R_observed == 4);
  CHECK(rep.repr_violations.empty());
  CHECK(rep.structure_violations.empty());
  CHECK(rep.fork_identity_max_residual == 0.0);  // replays reuse exact steps
  CHECK(rep.ok());

  const ConditionReport tight = verify_conditions(wt.t, wt.rec, 3);
  CHECK(!tight.within_claimed);
  CHECK(!tight.ok());
}

TEST_CASE("siblings with distinct labels are not repr-contained") {
  ComputationTree t;
  t.add_root({0.0});
  const NodeId a = t.extend(0, 0, 1, {0.5});
  const NodeId b = t.extend(0, 0, 2, {0.5});
  CHECK(!t.repr_contained(a, b));
  CHECK(!t.repr_contained(b, a));
  CHECK(t.dist(a, b) == 1);
}

TEST_CASE("extend rejects duplicate samples; replay demands consistency") {
  ComputationTree t;
  t.add_root({0.0, 0.0});
  t.extend(0, 0, 7, {0.1, 0.2});
  CHECK_THROWS_AS(t.extend(0, 0, 7, {0.1, 0.2}), TreeError);
  CHECK_THROWS_AS(t.extend_replay(0, 0, 8, {0.1, 0.2}), TreeError);
  CHECK_THROWS_AS(t.extend_replay(0, 1, 7, {0.1, 0.2}), TreeError);  // wrong grad point
  CHECK_NOTHROW(t.extend_replay(0, 0, 7, {0.1, 0.2}));
  CHECK_THROWS_AS(t.extend(0, 0, 9, {0.1}), TreeError);  // dimension mismatch
  CHECK_THROWS_AS(t.extend(99, 0, 9, {0.1, 0.2}), TreeError);
  CHECK_THROWS_AS(t.add_root({0.0}), TreeError);
}

TEST_CASE("points follow base minus step") {
  ComputationTree t;
  t.add_root({1.0, 2.0});
  const NodeId v = t.extend(0, 0, 1, {0.25, -0.5});
  CHECK(t.point(v) == Vec{0.75, 2.5});
  CHECK(t.depth(v) == 1);
}

TEST_CASE("tree serialization round-trips") {
  const WorkedTree wt = worked_tree();
  ComputationTree t = wt.t;
  t.mark_dead_end(wt.w10);

  std::stringstream ss;
  t.write(ss);
  const std::string first = ss.str();
  ComputationTree back = ComputationTree::read(ss);
  std::stringstream ss2;
  back.write(ss2);
  CHECK(ss2.str() == first);
  CHECK(back.is_dead_end(wt.w10));
  CHECK(back.dist(wt.w9, wt.w4) == 4);

  // Without vectors the shape and labels survive; steps read back as zeros.
  std::stringstream lean;
  t.write(lean, false);
  const ComputationTree shape = ComputationTree::read(lean);
  CHECK(shape.node_count() == t.node_count());
  CHECK(shape.label(wt.w9) == t.label(wt.w9));
  CHECK(shape.dist(wt.w9, wt.w4) == 4);
}

TEST_CASE("branch record serialization and validation") {
  const WorkedTree wt = worked_tree();
  std::stringstream ss;
  wt.rec.write(ss);
  const MainBranchRecord back = MainBranchRecord::read(ss);
  CHECK(back.branch == wt.rec.branch);
  CHECK_NOTHROW(back.validate(wt.t));

  MainBranchRecord bad = wt.rec;
  bad.branch[0] = wt.w1;  // must start at the root
  CHECK_THROWS_AS(bad.validate(wt.t), TreeError);

  bad = wt.rec;
  bad.branch[2] = wt.w4;  // not parent-linked to w2
  CHECK_THROWS_AS(bad.validate(wt.t), TreeError);

  bad = wt.rec;
  bad.aux[1].sample = 999;  // disagrees with the edge label
  CHECK_THROWS_AS(bad.validate(wt.t), TreeError);

  bad = wt.rec;
  bad.aux.pop_back();
  CHECK_THROWS_AS(bad.validate(wt.t), TreeError);
}

TEST_CASE("vanilla-shaped chain audits with R = 0") {
  ComputationTree t;
  MainBranchRecord rec;
  t.add_root({1.0});
  rec.branch = {0};
  for (int k = 0; k < 10; ++k) {
    const NodeId v = t.extend(rec.branch.back(), rec.branch.back(),
                              static_cast<SampleId>(k), {0.01});
    rec.aux.push_back({rec.branch.back(), static_cast<SampleId>(k)});
    rec.branch.push_back(v);
  }
  const ConditionReport rep = verify_conditions(t, rec, 0);
  CHECK(rep.R_observed == 0);
  CHECK(rep.fork_identity_max_residual == 0.0);
  CHECK(rep.ok());
}
