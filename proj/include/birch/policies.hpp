#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <memory>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "rng.hpp"
#include "simulator.hpp"

// The distributed SGD methods.  Conventions shared by every policy:
//  - each draw first enters the tree on the edge where its gradient is
//    applied for the first time (a worker-local chain edge or a main-branch
//    edge); when a server later unrolls worker-local steps onto the main
//    branch, those edges are recorded as replays of the same draw;
//  - a worker-local point gets a tree node only once another gradient is
//    evaluated there, so the last step of a local batch surfaces directly as
//    a fresh main-branch edge;
//  - gradients that are computed but never applied become dead-end leaves
//    and count as discarded;
//  - stopped workers finish their in-flight gradient (discarding it) before
//    rejoining, and transfers cost tau_i per direction, in parallel.

namespace birch {

struct PolicyError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GradItem {
  NodeId eval = kNoNode;
  SampleId sample = kNoSample;
  Vec grad;
  bool chained = false;          // a chain edge already carries this draw
  NodeId chain_node = kNoNode;   // that edge's node, when chained
};

inline void discard_item(SimContext& ctx, const GradItem& it) {
  if (it.chained) {
    ctx.tree.mark_dead_end(it.chain_node);
    ++ctx.trace.discarded;
  } else {
    ctx.record_discard(it.eval, it.sample, scaled(it.grad, ctx.gamma));
  }
}

// ---------------------------------------------------------------------------
// Vanilla SGD: one worker, one sequential chain.
class VanillaPolicy : public Policy {
 public:
  std::string name() const override { return "vanilla"; }
  std::int64_t claimed_R() const override { return 0; }
  double step_size(double L, double sigma_sq, double eps) const override {
    return theorem1_step_size(L, 0, sigma_sq, eps);
  }
  void start(SimContext& ctx) override { compute(ctx); }

 private:
  void compute(SimContext& ctx) {
    const NodeId at = ctx.head();
    auto [g, s] = ctx.draw_grad(0, at);
    ctx.q.after(ctx.h(0), [this, &ctx, at, g = std::move(g), s]() {
      ctx.extend_main(at, s, scaled(g, ctx.gamma), false);
      if (!ctx.stopping) compute(ctx);
    });
  }
};

// ---------------------------------------------------------------------------
// Synchronized SGD: every round all n workers evaluate at the same point,
// then the batch is applied as n consecutive steps of gamma/n each.
class SynchronizedPolicy : public Policy {
 public:
  explicit SynchronizedPolicy(int n) : n_(n) {
    if (n < 1) throw PolicyError("synchronized: need at least one worker");
  }
  std::string name() const override { return "synchronized"; }
  std::int64_t claimed_R() const override { return n_ - 1; }
  double step_size(double L, double sigma_sq, double eps) const override {
    return theorem1_step_size(L, static_cast<double>(n_ - 1), sigma_sq, eps);
  }

  void start(SimContext& ctx) override {
    if (ctx.n() != n_) throw PolicyError("synchronized: worker count mismatch");
    round(ctx, 0.0);
  }

 private:
  void round(SimContext& ctx, double t0) {
    const NodeId at = ctx.head();
    auto grads = std::make_shared<std::vector<std::pair<Vec, SampleId>>>();
    grads->resize(n_);
    auto pending = std::make_shared<int>(n_);
    for (int w = 0; w < n_; ++w) {
      (*grads)[w] = ctx.draw_grad(w, at);
      ctx.q.at(t0 + ctx.h(w), [this, &ctx, at, grads, pending, w]() {
        if (--*pending > 0) return;
        barrier(ctx, at, *grads);
      });
    }
  }

  void barrier(SimContext& ctx, NodeId at,
               const std::vector<std::pair<Vec, SampleId>>& grads) {
    const double t_bar = ctx.q.now();
    double t_up = t_bar;
    for (int w = 0; w < n_; ++w) {
      ctx.add_comm(t_bar, t_bar + ctx.tau(w), w, 0, 1);
      t_up = std::max(t_up, t_bar + ctx.tau(w));
    }
    auto apply = [this, &ctx, at, grads]() {
      const double scale = ctx.gamma / static_cast<double>(n_);
      for (int w = 0; w < n_; ++w)
        ctx.extend_main(at, grads[w].second, scaled(grads[w].first, scale), false);
      if (ctx.stopping) return;
      const double t_u = ctx.q.now();
      double t_next = t_u;
      for (int w = 0; w < n_; ++w) {
        ctx.add_comm(t_u, t_u + ctx.tau(w), w, 1, 1);
        t_next = std::max(t_next, t_u + ctx.tau(w));
      }
      if (t_next <= t_u)
        round(ctx, t_u);
      else
        ctx.q.at(t_next, [this, &ctx, t_next]() { round(ctx, t_next); });
    };
    if (t_up <= t_bar)
      apply();
    else
      ctx.q.at(t_up, std::move(apply));
  }

  int n_;
};

// ---------------------------------------------------------------------------
// Rennala SGD: collect B gradients at the round point, ignoring stale ones.
class RennalaPolicy : public Policy {
 public:
  explicit RennalaPolicy(std::int64_t B) : B_(B) {
    if (B <= 0) throw PolicyError("rennala: B must be positive");
  }
  std::string name() const override { return "rennala"; }
  std::int64_t claimed_R() const override { return B_ - 1; }
  double step_size(double L, double sigma_sq, double eps) const override {
    double g = 1.0 / (2.0 * static_cast<double>(B_) * L);
    if (sigma_sq > 0) g = std::min(g, eps / (4.0 * sigma_sq * L));
    return g;
  }

  void start(SimContext& ctx) override {
    const int n = ctx.n();
    busy_.assign(n, false);
    busy_until_.assign(n, 0.0);
    ready_.assign(n, 0.0);
    counts_.assign(n, 0);
    round_node_ = ctx.head();
    collecting_ = true;
    for (int w = 0; w < n; ++w) worker_start(ctx, w);
  }

 private:
  void worker_start(SimContext& ctx, int w) {
    busy_[w] = true;
    busy_until_[w] = ctx.q.now() + ctx.h(w);
    const std::int64_t rid = round_id_;
    const NodeId at = round_node_;
    auto [g, s] = ctx.draw_grad(w, at);
    ctx.q.after(ctx.h(w), [this, &ctx, w, rid, at, g = std::move(g), s]() {
      completion(ctx, w, rid, at, g, s);
    });
  }

  void completion(SimContext& ctx, int w, std::int64_t rid, NodeId at,
                  const Vec& g, SampleId s) {
    busy_[w] = false;
    if (ctx.stopping) return;
    if (rid != round_id_ || !collecting_) {
      ctx.record_discard(at, s, scaled(g, ctx.gamma));
      schedule_start(ctx, w);
      return;
    }
    accepted_.push_back({at, s, g});
    ++counts_[w];
    if (static_cast<std::int64_t>(accepted_.size()) == B_)
      end_round(ctx);
    else
      worker_start(ctx, w);
  }

  void end_round(SimContext& ctx) {
    collecting_ = false;
    const double t_e = ctx.q.now();
    double t_u = t_e;
    for (int w = 0; w < ctx.n(); ++w) {
      if (ctx.tau(w) <= 0) continue;
      const double stop = busy_[w] ? busy_until_[w] : t_e;
      ctx.add_comm(stop, stop + ctx.tau(w), w, 0, counts_[w]);
      t_u = std::max(t_u, stop + ctx.tau(w));
    }
    if (t_u <= t_e)
      do_update(ctx);
    else
      ctx.q.at(t_u, [this, &ctx]() { do_update(ctx); });
  }

  void do_update(SimContext& ctx) {
    for (const GradItem& it : accepted_) {
      ctx.extend_main(it.eval, it.sample, scaled(it.grad, ctx.gamma), false);
      if (ctx.stopping) return;
    }
    accepted_.clear();
    counts_.assign(ctx.n(), 0);
    ++round_id_;
    round_node_ = ctx.head();
    collecting_ = true;
    const double t_u = ctx.q.now();
    for (int w = 0; w < ctx.n(); ++w) {
      ctx.add_comm(t_u, t_u + ctx.tau(w), w, 1, 1);
      ready_[w] = t_u + ctx.tau(w);
      schedule_start(ctx, w);
    }
  }

  void schedule_start(SimContext& ctx, int w) {
    if (busy_[w] || !collecting_ || ctx.stopping) return;
    if (ctx.q.now() >= ready_[w])
      worker_start(ctx, w);
    else
      ctx.q.at(ready_[w], [this, &ctx, w]() { schedule_start(ctx, w); });
  }

  std::int64_t B_;
  std::int64_t round_id_ = 0;
  NodeId round_node_ = 0;
  bool collecting_ = false;
  std::vector<GradItem> accepted_;
  std::vector<std::int64_t> counts_{0};
  std::vector<bool> busy_;
  std::vector<double> busy_until_, ready_;
};

// ---------------------------------------------------------------------------
// Asynchronous SGD with a delay threshold (Ringmaster when M = 1), local
// batches of M steps (Async-Local), or M-sized batches evaluated at the same
// point (Async-Batch).  Each worker ships a batch, which the server applies
// if the dispatch point is at most threshold-1 updates old; otherwise the
// whole batch is dropped and the worker re-syncs.
class AsyncLocalPolicy : public Policy {
 public:
  AsyncLocalPolicy(std::string name, std::int64_t threshold, std::int64_t M,
                   bool batch_at_start, bool ringmaster_rate)
      : name_(std::move(name)),
        threshold_(threshold),
        M_(M),
        batch_(batch_at_start),
        ringmaster_rate_(ringmaster_rate) {
    if (threshold <= 0 || M <= 0)
      throw PolicyError(name_ + ": threshold and M must be positive");
  }

  std::string name() const override { return name_; }
  std::int64_t claimed_R() const override { return threshold_ + M_ - 2; }
  double step_size(double L, double sigma_sq, double eps) const override {
    double g = ringmaster_rate_
                   ? 1.0 / (2.0 * static_cast<double>(threshold_) * L)
                   : 1.0 / (4.0 * static_cast<double>(threshold_ + M_ - 1) * L);
    if (sigma_sq > 0) g = std::min(g, eps / (4.0 * sigma_sq * L));
    return g;
  }

  void start(SimContext& ctx) override {
    st_.assign(ctx.n(), {});
    for (int w = 0; w < ctx.n(); ++w) begin(ctx, w);
  }

 private:
  struct WorkerState {
    NodeId start_node = kNoNode;
    std::int64_t start_index = 0;
    NodeId chain_at = kNoNode;
    std::int64_t p = 0;
    std::vector<GradItem> items;
  };

  void begin(SimContext& ctx, int w) {
    WorkerState& s = st_[w];
    s.start_node = ctx.head();
    s.start_index = ctx.head_index();
    s.chain_at = s.start_node;
    s.p = 0;
    s.items.clear();
    compute(ctx, w);
  }

  void compute(SimContext& ctx, int w) {
    WorkerState& s = st_[w];
    const NodeId eval = batch_ ? s.start_node : s.chain_at;
    auto [g, smp] = ctx.draw_grad(w, eval);
    ctx.q.after(ctx.h(w), [this, &ctx, w, eval, g = std::move(g), smp]() {
      completion(ctx, w, eval, g, smp);
    });
  }

  void completion(SimContext& ctx, int w, NodeId eval, const Vec& g,
                  SampleId smp) {
    if (ctx.stopping) return;
    WorkerState& s = st_[w];
    ++s.p;
    s.items.push_back({eval, smp, g});
    if (s.p < M_) {
      if (!batch_) {
        s.chain_at = ctx.tree.extend(s.chain_at, eval, smp, scaled(g, ctx.gamma));
        s.items.back().chained = true;
        s.items.back().chain_node = s.chain_at;
      }
      compute(ctx, w);
      return;
    }
    // dispatch the batch
    const double now = ctx.q.now();
    if (ctx.tau(w) > 0) {
      ctx.add_comm(now, now + ctx.tau(w), w, 0, M_);
      ctx.q.after(ctx.tau(w), [this, &ctx, w]() { arrival(ctx, w); });
    } else {
      arrival(ctx, w);
    }
  }

  void arrival(SimContext& ctx, int w) {
    if (ctx.stopping) return;
    WorkerState& s = st_[w];
    const std::int64_t delay = ctx.head_index() - s.start_index;
    if (delay < threshold_) {
      for (const GradItem& it : s.items) {
        ctx.extend_main(it.eval, it.sample, scaled(it.grad, ctx.gamma),
                        it.chained);
        if (ctx.stopping) return;
      }
    } else {
      for (const GradItem& it : s.items) discard_item(ctx, it);
    }
    const double now = ctx.q.now();
    if (ctx.tau(w) > 0) {
      ctx.add_comm(now, now + ctx.tau(w), w, 1, 1);
      ctx.q.after(ctx.tau(w), [this, &ctx, w]() { begin(ctx, w); });
    } else {
      begin(ctx, w);
    }
  }

  std::string name_;
  std::int64_t threshold_, M_;
  bool batch_, ringmaster_rate_;
  std::vector<WorkerState> st_;
};

inline std::unique_ptr<AsyncLocalPolicy> make_ringmaster(std::int64_t G) {
  return std::make_unique<AsyncLocalPolicy>("ringmaster", G, 1, false, true);
}

// ---------------------------------------------------------------------------
// Local SGD: workers run local chains until B total steps have been taken,
// then everything is aggregated and unrolled in worker order.
class LocalSGDPolicy : public Policy {
 public:
  explicit LocalSGDPolicy(std::int64_t B) : B_(B) {
    if (B <= 0) throw PolicyError("local: B must be positive");
  }
  std::string name() const override { return "local"; }
  std::int64_t claimed_R() const override { return B_ - 1; }
  double step_size(double L, double sigma_sq, double eps) const override {
    double g = 1.0 / (2.0 * static_cast<double>(B_) * L);
    if (sigma_sq > 0) g = std::min(g, eps / (4.0 * sigma_sq * L));
    return g;
  }

  void start(SimContext& ctx) override {
    const int n = ctx.n();
    busy_.assign(n, false);
    busy_until_.assign(n, 0.0);
    ready_.assign(n, 0.0);
    chain_at_.assign(n, ctx.head());
    items_.assign(n, {});
    collecting_ = true;
    for (int w = 0; w < n; ++w) worker_start(ctx, w);
  }

 private:
  void worker_start(SimContext& ctx, int w) {
    busy_[w] = true;
    busy_until_[w] = ctx.q.now() + ctx.h(w);
    const std::int64_t rid = round_id_;
    const NodeId eval = chain_at_[w];
    auto [g, s] = ctx.draw_grad(w, eval);
    ctx.q.after(ctx.h(w), [this, &ctx, w, rid, eval, g = std::move(g), s]() {
      completion(ctx, w, rid, eval, g, s);
    });
  }

  void completion(SimContext& ctx, int w, std::int64_t rid, NodeId eval,
                  const Vec& g, SampleId s) {
    busy_[w] = false;
    if (ctx.stopping) return;
    if (rid != round_id_ || !collecting_) {
      ctx.record_discard(eval, s, scaled(g, ctx.gamma));
      schedule_start(ctx, w);
      return;
    }
    items_[w].push_back({eval, s, g});
    ++total_;
    if (total_ == B_) {
      end_round(ctx);
      return;
    }
    chain_at_[w] = ctx.tree.extend(chain_at_[w], eval, s, scaled(g, ctx.gamma));
    items_[w].back().chained = true;
    items_[w].back().chain_node = chain_at_[w];
    worker_start(ctx, w);
  }

  void end_round(SimContext& ctx) {
    collecting_ = false;
    const double t_e = ctx.q.now();
    double t_u = t_e;
    for (int w = 0; w < ctx.n(); ++w) {
      if (ctx.tau(w) <= 0) continue;
      const double stop = busy_[w] ? busy_until_[w] : t_e;
      ctx.add_comm(stop, stop + ctx.tau(w), w, 0,
                   static_cast<std::int64_t>(items_[w].size()));
      t_u = std::max(t_u, stop + ctx.tau(w));
    }
    if (t_u <= t_e)
      do_update(ctx);
    else
      ctx.q.at(t_u, [this, &ctx]() { do_update(ctx); });
  }

  void do_update(SimContext& ctx) {
    for (int w = 0; w < ctx.n(); ++w)
      for (const GradItem& it : items_[w]) {
        ctx.extend_main(it.eval, it.sample, scaled(it.grad, ctx.gamma),
                        it.chained);
        if (ctx.stopping) return;
      }
    total_ = 0;
    ++round_id_;
    collecting_ = true;
    const double t_u = ctx.q.now();
    for (int w = 0; w < ctx.n(); ++w) {
      items_[w].clear();
      chain_at_[w] = ctx.head();
      ctx.add_comm(t_u, t_u + ctx.tau(w), w, 1, 1);
      ready_[w] = t_u + ctx.tau(w);
      schedule_start(ctx, w);
    }
  }

  void schedule_start(SimContext& ctx, int w) {
    if (busy_[w] || !collecting_ || ctx.stopping) return;
    if (ctx.q.now() >= ready_[w])
      worker_start(ctx, w);
    else
      ctx.q.at(ready_[w], [this, &ctx, w]() { schedule_start(ctx, w); });
  }

  std::int64_t B_;
  std::int64_t round_id_ = 0;
  std::int64_t total_ = 0;
  bool collecting_ = false;
  std::vector<bool> busy_;
  std::vector<double> busy_until_, ready_;
  std::vector<NodeId> chain_at_;
  std::vector<std::vector<GradItem>> items_;
};

// ---------------------------------------------------------------------------
// Dual-Process SGD: each worker runs a compute process and a send process;
// the sender ships whatever is newly computed whenever its link is free, and
// the server closes the round after receiving B gradients.
class DualProcessPolicy : public Policy {
 public:
  explicit DualProcessPolicy(std::int64_t B) : B_(B) {
    if (B <= 0) throw PolicyError("dual-process: B must be positive");
  }
  std::string name() const override { return "dual-process"; }
  std::int64_t claimed_R() const override { return B_ - 1; }
  double step_size(double L, double sigma_sq, double eps) const override {
    double g = 1.0 / (2.0 * static_cast<double>(B_) * L);
    if (sigma_sq > 0) g = std::min(g, eps / (4.0 * sigma_sq * L));
    return g;
  }

  void start(SimContext& ctx) override {
    const int n = ctx.n();
    busy_.assign(n, false);
    ready_.assign(n, 0.0);
    sending_.assign(n, false);
    chain_at_.assign(n, ctx.head());
    buffer_.assign(n, {});
    delivered_.assign(n, {});
    collecting_ = true;
    for (int w = 0; w < n; ++w) worker_start(ctx, w);
  }

 private:
  using ItemPtr = std::shared_ptr<GradItem>;

  void worker_start(SimContext& ctx, int w) {
    busy_[w] = true;
    const std::int64_t rid = round_id_;
    const NodeId eval = chain_at_[w];
    auto [g, s] = ctx.draw_grad(w, eval);
    ctx.q.after(ctx.h(w), [this, &ctx, w, rid, eval, g = std::move(g), s]() {
      completion(ctx, w, rid, eval, g, s);
    });
  }

  void completion(SimContext& ctx, int w, std::int64_t rid, NodeId eval,
                  const Vec& g, SampleId s) {
    busy_[w] = false;
    if (ctx.stopping) return;
    if (rid != round_id_ || !collecting_) {
      ctx.record_discard(eval, s, scaled(g, ctx.gamma));
      schedule_start(ctx, w);
      return;
    }
    auto item = std::make_shared<GradItem>(GradItem{eval, s, g});
    buffer_[w].push_back(item);
    trigger_send(ctx, w);
    if (!collecting_ || rid != round_id_) {
      // the instant delivery above just closed the round
      schedule_start(ctx, w);
      return;
    }
    chain_at_[w] = ctx.tree.extend(chain_at_[w], eval, s, scaled(g, ctx.gamma));
    item->chained = true;
    item->chain_node = chain_at_[w];
    worker_start(ctx, w);
  }

  void trigger_send(SimContext& ctx, int w) {
    if (sending_[w] || buffer_[w].empty() || !collecting_ || ctx.stopping)
      return;
    if (ctx.tau(w) <= 0) {
      while (!buffer_[w].empty() && collecting_) {
        ItemPtr it = buffer_[w].front();
        buffer_[w].pop_front();
        deliver(ctx, w, {it}, round_id_);
      }
      return;
    }
    sending_[w] = true;
    auto batch = std::make_shared<std::vector<ItemPtr>>(buffer_[w].begin(),
                                                        buffer_[w].end());
    buffer_[w].clear();
    const double now = ctx.q.now();
    ctx.add_comm(now, now + ctx.tau(w), w, 0,
                 static_cast<std::int64_t>(batch->size()));
    const std::int64_t rid = round_id_;
    ctx.q.after(ctx.tau(w), [this, &ctx, w, batch, rid]() {
      sending_[w] = false;
      deliver(ctx, w, *batch, rid);
      trigger_send(ctx, w);
    });
  }

  void deliver(SimContext& ctx, int w, const std::vector<ItemPtr>& batch,
               std::int64_t rid) {
    if (ctx.stopping) return;
    if (rid != round_id_ || !collecting_) {
      for (const ItemPtr& it : batch) discard_item(ctx, *it);
      return;
    }
    for (const ItemPtr& it : batch) {
      // end_round may fire mid-batch; anything after it belongs to the old
      // round and must not leak into the fresh one
      if (ctx.stopping || rid != round_id_ || received_ == B_) {
        discard_item(ctx, *it);
        continue;
      }
      delivered_[w].push_back(it);
      ++received_;
      if (received_ == B_) end_round(ctx);
    }
  }

  void end_round(SimContext& ctx) {
    collecting_ = false;
    for (int w = 0; w < ctx.n(); ++w)
      for (const ItemPtr& it : delivered_[w]) {
        ctx.extend_main(it->eval, it->sample, scaled(it->grad, ctx.gamma),
                        it->chained);
        if (ctx.stopping) return;
      }
    // computed but unsent gradients are lost to the round; in-flight sends
    // get refused on delivery because the round id moved on
    for (int w = 0; w < ctx.n(); ++w) {
      for (const ItemPtr& it : buffer_[w]) discard_item(ctx, *it);
      buffer_[w].clear();
      delivered_[w].clear();
    }
    received_ = 0;
    ++round_id_;
    collecting_ = true;
    const double t_u = ctx.q.now();
    for (int w = 0; w < ctx.n(); ++w) {
      chain_at_[w] = ctx.head();
      ctx.add_comm(t_u, t_u + ctx.tau(w), w, 1, 1);
      ready_[w] = t_u + ctx.tau(w);
      schedule_start(ctx, w);
    }
  }

  void schedule_start(SimContext& ctx, int w) {
    if (busy_[w] || !collecting_ || ctx.stopping) return;
    if (ctx.q.now() >= ready_[w])
      worker_start(ctx, w);
    else
      ctx.q.at(ready_[w], [this, &ctx, w]() { schedule_start(ctx, w); });
  }

  std::int64_t B_;
  std::int64_t round_id_ = 0;
  std::int64_t received_ = 0;
  bool collecting_ = false;
  std::vector<bool> busy_, sending_;
  std::vector<double> ready_;
  std::vector<NodeId> chain_at_;
  std::vector<std::deque<ItemPtr>> buffer_;
  std::vector<std::vector<ItemPtr>> delivered_;
};

// ---------------------------------------------------------------------------
// Cycle SGD: lock-step iterations; groups of s workers synchronize with the
// server in round-robin order while everyone else keeps a local chain going.
class CyclePolicy : public Policy {
 public:
  CyclePolicy(std::int64_t s, std::int64_t n) : s_(s), n_(n) {
    if (s <= 0 || n <= 0 || s > n) throw PolicyError("cycle: need 1 <= s <= n");
  }
  std::string name() const override { return "cycle"; }
  std::int64_t claimed_R() const override {
    return static_cast<std::int64_t>(
        std::ceil(2.0 * static_cast<double>(n_) * static_cast<double>(n_) /
                  static_cast<double>(s_)));
  }
  double step_size(double L, double sigma_sq, double eps) const override {
    const double nn = static_cast<double>(n_);
    double g = static_cast<double>(s_) / (4.0 * nn * nn * L);
    if (sigma_sq > 0) g = std::min(g, eps / (4.0 * sigma_sq * L));
    return g;
  }

  void start(SimContext& ctx) override {
    chain_at_.assign(ctx.n(), ctx.head());
    items_.assign(ctx.n(), {});
    iteration(ctx, 0.0);
  }

 private:
  int group_count() const {
    return static_cast<int>((n_ + s_ - 1) / s_);
  }
  std::pair<int, int> group_range(int g) const {
    const int lo = static_cast<int>(g * s_);
    const int hi = std::min(static_cast<int>(n_), static_cast<int>((g + 1) * s_));
    return {lo, hi};
  }

  void iteration(SimContext& ctx, double t0) {
    auto grads = std::make_shared<std::vector<std::pair<Vec, SampleId>>>();
    auto evals = std::make_shared<std::vector<NodeId>>();
    grads->resize(ctx.n());
    evals->resize(ctx.n());
    auto pending = std::make_shared<int>(ctx.n());
    for (int w = 0; w < ctx.n(); ++w) {
      (*evals)[w] = chain_at_[w];
      (*grads)[w] = ctx.draw_grad(w, chain_at_[w]);
      ctx.q.at(t0 + ctx.h(w), [this, &ctx, grads, evals, pending]() {
        if (--*pending > 0) return;
        barrier(ctx, *grads, *evals);
      });
    }
  }

  void barrier(SimContext& ctx, const std::vector<std::pair<Vec, SampleId>>& grads,
               const std::vector<NodeId>& evals) {
    for (int w = 0; w < ctx.n(); ++w)
      items_[w].push_back({evals[w], grads[w].second, grads[w].first});
    const int g = static_cast<int>(iter_ % group_count());
    const auto [lo, hi] = group_range(g);
    const double t_bar = ctx.q.now();
    double t_u = t_bar;
    for (int w = lo; w < hi; ++w) {
      ctx.add_comm(t_bar, t_bar + ctx.tau(w), w, 0,
                   static_cast<std::int64_t>(items_[w].size()));
      t_u = std::max(t_u, t_bar + ctx.tau(w));
    }
    auto apply = [this, &ctx, lo, hi]() {
      for (int w = lo; w < hi; ++w) {
        for (const GradItem& it : items_[w]) {
          ctx.extend_main(it.eval, it.sample, scaled(it.grad, ctx.gamma),
                          it.chained);
          if (ctx.stopping) return;
        }
        items_[w].clear();
      }
      const double t_u = ctx.q.now();
      double t_next = t_u;
      for (int w = lo; w < hi; ++w) {
        chain_at_[w] = ctx.head();
        ctx.add_comm(t_u, t_u + ctx.tau(w), w, 1, 1);
        t_next = std::max(t_next, t_u + ctx.tau(w));
      }
      // everyone not in the group keeps extending a local chain
      for (int w = 0; w < ctx.n(); ++w) {
        if (w >= lo && w < hi) continue;
        GradItem& it = items_[w].back();
        chain_at_[w] = ctx.tree.extend(chain_at_[w], it.eval, it.sample,
                                       scaled(it.grad, ctx.gamma));
        it.chained = true;
        it.chain_node = chain_at_[w];
      }
      ++iter_;
      if (t_next <= t_u)
        iteration(ctx, t_u);
      else
        ctx.q.at(t_next, [this, &ctx, t_next]() { iteration(ctx, t_next); });
    };
    if (t_u <= t_bar)
      apply();
    else
      ctx.q.at(t_u, std::move(apply));
  }

  std::int64_t s_, n_;
  std::int64_t iter_ = 0;
  std::vector<NodeId> chain_at_;
  std::vector<std::vector<GradItem>> items_;
};

// ---------------------------------------------------------------------------
// Nested local-asynchronous SGD.  Clusters hold groups of workers; each group
// maintains an asynchronous chain, clusters may resynchronize internally
// every cluster_B steps, and the server collects B total steps per round.
// Local-Async SGD is the flat variant (no cluster layer).
class NestedPolicy : public Policy {
 public:
  // clusters[c][g] is a list of worker ids; cluster_B[c] <= 0 means infinity.
  NestedPolicy(std::string name,
               std::vector<std::vector<std::vector<int>>> clusters,
               std::int64_t B, std::vector<std::int64_t> cluster_B)
      : name_(std::move(name)),
        clusters_(std::move(clusters)),
        B_(B),
        cluster_B_(std::move(cluster_B)) {
    if (B <= 0) throw PolicyError(name_ + ": B must be positive");
    if (clusters_.empty()) throw PolicyError(name_ + ": need clusters");
    if (cluster_B_.size() != clusters_.size())
      throw PolicyError(name_ + ": one threshold per cluster");
  }

  std::string name() const override { return name_; }
  std::int64_t claimed_R() const override {
    // without internal syncs the bound tightens to B - 1
    for (std::int64_t b : cluster_B_)
      if (b > 0) return B_;
    return B_ - 1;
  }
  double step_size(double L, double sigma_sq, double eps) const override {
    double g = 1.0 / (4.0 * static_cast<double>(B_) * L);
    if (sigma_sq > 0) g = std::min(g, eps / (4.0 * sigma_sq * L));
    return g;
  }

  void start(SimContext& ctx) override {
    const int n = ctx.n();
    worker_cluster_.assign(n, -1);
    worker_group_.assign(n, -1);
    for (std::size_t c = 0; c < clusters_.size(); ++c)
      for (std::size_t g = 0; g < clusters_[c].size(); ++g)
        for (int w : clusters_[c][g]) {
          if (w < 0 || w >= n || worker_cluster_[w] != -1)
            throw PolicyError(name_ + ": bad worker partition");
          worker_cluster_[w] = static_cast<int>(c);
          worker_group_[w] = static_cast<int>(g);
        }
    for (int w = 0; w < n; ++w)
      if (worker_cluster_[w] == -1)
        throw PolicyError(name_ + ": worker missing from partition");

    busy_.assign(n, false);
    busy_until_.assign(n, 0.0);
    ready_.assign(n, 0.0);
    epoch_.assign(n, 0);
    cl_.assign(clusters_.size(), {});
    for (std::size_t c = 0; c < clusters_.size(); ++c) {
      cl_[c].chain_tail = ctx.head();
      cl_[c].group_chain.assign(clusters_[c].size(), ctx.head());
      cl_[c].group_items.assign(clusters_[c].size(), {});
      cl_[c].steps = 0;
    }
    collecting_ = true;
    for (int w = 0; w < n; ++w) worker_start(ctx, w);
  }

 private:
  struct ClusterState {
    NodeId chain_tail = kNoNode;               // latest cluster-level point
    std::vector<NodeId> group_chain;           // per-group chain head
    std::vector<std::vector<GradItem>> group_items;
    std::vector<GradItem> done_items;          // flushed by cluster syncs
    std::int64_t steps = 0;                    // current cluster round
  };

  void worker_start(SimContext& ctx, int w) {
    busy_[w] = true;
    busy_until_[w] = ctx.q.now() + ctx.h(w);
    const std::int64_t ep = epoch_[w];
    const NodeId eval = cl_[worker_cluster_[w]].group_chain[worker_group_[w]];
    auto [g, s] = ctx.draw_grad(w, eval);
    ctx.q.after(ctx.h(w), [this, &ctx, w, ep, eval, g = std::move(g), s]() {
      completion(ctx, w, ep, eval, g, s);
    });
  }

  void completion(SimContext& ctx, int w, std::int64_t ep, NodeId eval,
                  const Vec& g, SampleId s) {
    busy_[w] = false;
    if (ctx.stopping) return;
    if (ep != epoch_[w] || !collecting_) {
      ctx.record_discard(eval, s, scaled(g, ctx.gamma));
      schedule_start(ctx, w);
      return;
    }
    const int c = worker_cluster_[w];
    const int grp = worker_group_[w];
    ClusterState& cs = cl_[c];
    cs.group_items[grp].push_back({eval, s, g});
    ++cs.steps;
    ++total_;
    if (total_ == B_) {
      end_round(ctx);
      return;
    }
    if (cluster_B_[c] > 0 && cs.steps == cluster_B_[c]) {
      cluster_sync(ctx, c);
      schedule_start(ctx, w);
      return;
    }
    cs.group_chain[grp] = ctx.tree.extend(cs.group_chain[grp], eval, s,
                                          scaled(g, ctx.gamma));
    cs.group_items[grp].back().chained = true;
    cs.group_items[grp].back().chain_node = cs.group_chain[grp];
    worker_start(ctx, w);
  }

  // Flush the cluster's current round onto its own chain; free inside the
  // cluster (fast links), so it happens at the current instant.
  void cluster_sync(SimContext& ctx, int c) {
    ClusterState& cs = cl_[c];
    for (std::size_t grp = 0; grp < cs.group_items.size(); ++grp) {
      for (GradItem& it : cs.group_items[grp]) {
        cs.chain_tail =
            it.chained
                ? ctx.tree.extend_replay(cs.chain_tail, it.eval, it.sample,
                                         scaled(it.grad, ctx.gamma))
                : ctx.tree.extend(cs.chain_tail, it.eval, it.sample,
                                  scaled(it.grad, ctx.gamma));
        it.chained = true;
        it.chain_node = cs.chain_tail;
        cs.done_items.push_back(std::move(it));
      }
      cs.group_items[grp].clear();
      cs.group_chain[grp] = cs.chain_tail;
    }
    cs.steps = 0;
    ++ctx.trace.aux_syncs;
    for (int w = 0; w < ctx.n(); ++w)
      if (worker_cluster_[w] == c) {
        ++epoch_[w];
        schedule_start(ctx, w);
      }
  }

  void end_round(SimContext& ctx) {
    collecting_ = false;
    const double t_e = ctx.q.now();
    double t_u = t_e;
    for (int w = 0; w < ctx.n(); ++w) {
      if (ctx.tau(w) <= 0) continue;
      const double stop = busy_[w] ? busy_until_[w] : t_e;
      ctx.add_comm(stop, stop + ctx.tau(w), w, 0, 1);
      t_u = std::max(t_u, stop + ctx.tau(w));
    }
    if (t_u <= t_e)
      do_update(ctx);
    else
      ctx.q.at(t_u, [this, &ctx]() { do_update(ctx); });
  }

  void do_update(SimContext& ctx) {
    for (ClusterState& cs : cl_) {
      for (const GradItem& it : cs.done_items) {
        ctx.extend_main(it.eval, it.sample, scaled(it.grad, ctx.gamma), true);
        if (ctx.stopping) return;
      }
      for (auto& items : cs.group_items)
        for (const GradItem& it : items) {
          ctx.extend_main(it.eval, it.sample, scaled(it.grad, ctx.gamma),
                          it.chained);
          if (ctx.stopping) return;
        }
    }
    total_ = 0;
    collecting_ = true;
    const double t_u = ctx.q.now();
    for (ClusterState& cs : cl_) {
      cs.chain_tail = ctx.head();
      cs.done_items.clear();
      cs.steps = 0;
      for (std::size_t grp = 0; grp < cs.group_chain.size(); ++grp) {
        cs.group_chain[grp] = ctx.head();
        cs.group_items[grp].clear();
      }
    }
    for (int w = 0; w < ctx.n(); ++w) {
      ++epoch_[w];
      ctx.add_comm(t_u, t_u + ctx.tau(w), w, 1, 1);
      ready_[w] = t_u + ctx.tau(w);
      schedule_start(ctx, w);
    }
  }

  void schedule_start(SimContext& ctx, int w) {
    if (busy_[w] || !collecting_ || ctx.stopping) return;
    if (ctx.q.now() >= ready_[w])
      worker_start(ctx, w);
    else
      ctx.q.at(ready_[w], [this, &ctx, w]() { schedule_start(ctx, w); });
  }

  std::string name_;
  std::vector<std::vector<std::vector<int>>> clusters_;
  std::int64_t B_;
  std::vector<std::int64_t> cluster_B_;
  std::vector<int> worker_cluster_, worker_group_;
  std::vector<ClusterState> cl_;
  std::vector<bool> busy_;
  std::vector<double> busy_until_, ready_;
  std::vector<std::int64_t> epoch_;
  bool collecting_ = false;
  std::int64_t total_ = 0;
};

// Flat grouped local-asynchronous SGD, written out separately so the nested
// reduction can be checked against an independent implementation.
class LocalAsyncPolicy : public Policy {
 public:
  LocalAsyncPolicy(std::vector<std::vector<int>> groups, std::int64_t B)
      : groups_(std::move(groups)), B_(B) {
    if (B <= 0) throw PolicyError("local-async: B must be positive");
    if (groups_.empty()) throw PolicyError("local-async: need groups");
    std::set<int> seen;
    for (const auto& g : groups_)
      for (int w : g)
        if (w < 0 || !seen.insert(w).second)
          throw PolicyError("local-async: bad worker partition");
  }
  std::string name() const override { return "local-async"; }
  std::int64_t claimed_R() const override { return B_ - 1; }
  double step_size(double L, double sigma_sq, double eps) const override {
    double g = 1.0 / (4.0 * static_cast<double>(B_) * L);
    if (sigma_sq > 0) g = std::min(g, eps / (4.0 * sigma_sq * L));
    return g;
  }

  void start(SimContext& ctx) override {
    const int n = ctx.n();
    worker_group_.assign(n, -1);
    for (std::size_t g = 0; g < groups_.size(); ++g)
      for (int w : groups_[g]) {
        if (w < 0 || w >= n || worker_group_[w] != -1)
          throw PolicyError("local-async: bad worker partition");
        worker_group_[w] = static_cast<int>(g);
      }
    for (int w = 0; w < n; ++w)
      if (worker_group_[w] == -1)
        throw PolicyError("local-async: worker missing from partition");

    busy_.assign(n, false);
    busy_until_.assign(n, 0.0);
    ready_.assign(n, 0.0);
    group_chain_.assign(groups_.size(), ctx.head());
    group_items_.assign(groups_.size(), {});
    collecting_ = true;
    for (int w = 0; w < n; ++w) worker_start(ctx, w);
  }

 private:
  void worker_start(SimContext& ctx, int w) {
    busy_[w] = true;
    busy_until_[w] = ctx.q.now() + ctx.h(w);
    const std::int64_t rid = round_id_;
    const NodeId eval = group_chain_[worker_group_[w]];
    auto [g, s] = ctx.draw_grad(w, eval);
    ctx.q.after(ctx.h(w), [this, &ctx, w, rid, eval, g = std::move(g), s]() {
      completion(ctx, w, rid, eval, g, s);
    });
  }

  void completion(SimContext& ctx, int w, std::int64_t rid, NodeId eval,
                  const Vec& g, SampleId s) {
    busy_[w] = false;
    if (ctx.stopping) return;
    if (rid != round_id_ || !collecting_) {
      ctx.record_discard(eval, s, scaled(g, ctx.gamma));
      schedule_start(ctx, w);
      return;
    }
    const int grp = worker_group_[w];
    group_items_[grp].push_back({eval, s, g});
    ++total_;
    if (total_ == B_) {
      end_round(ctx);
      return;
    }
    group_chain_[grp] = ctx.tree.extend(group_chain_[grp], eval, s,
                                        scaled(g, ctx.gamma));
    group_items_[grp].back().chained = true;
    group_items_[grp].back().chain_node = group_chain_[grp];
    worker_start(ctx, w);
  }

  void end_round(SimContext& ctx) {
    collecting_ = false;
    const double t_e = ctx.q.now();
    double t_u = t_e;
    for (int w = 0; w < ctx.n(); ++w) {
      if (ctx.tau(w) <= 0) continue;
      const double stop = busy_[w] ? busy_until_[w] : t_e;
      ctx.add_comm(stop, stop + ctx.tau(w), w, 0, 1);
      t_u = std::max(t_u, stop + ctx.tau(w));
    }
    if (t_u <= t_e)
      do_update(ctx);
    else
      ctx.q.at(t_u, [this, &ctx]() { do_update(ctx); });
  }

  void do_update(SimContext& ctx) {
    for (auto& items : group_items_)
      for (const GradItem& it : items) {
        ctx.extend_main(it.eval, it.sample, scaled(it.grad, ctx.gamma),
                        it.chained);
        if (ctx.stopping) return;
      }
    total_ = 0;
    ++round_id_;
    collecting_ = true;
    const double t_u = ctx.q.now();
    for (std::size_t g = 0; g < groups_.size(); ++g) {
      group_chain_[g] = ctx.head();
      group_items_[g].clear();
    }
    for (int w = 0; w < ctx.n(); ++w) {
      ctx.add_comm(t_u, t_u + ctx.tau(w), w, 1, 1);
      ready_[w] = t_u + ctx.tau(w);
      schedule_start(ctx, w);
    }
  }

  void schedule_start(SimContext& ctx, int w) {
    if (busy_[w] || !collecting_ || ctx.stopping) return;
    if (ctx.q.now() >= ready_[w])
      worker_start(ctx, w);
    else
      ctx.q.at(ready_[w], [this, &ctx, w]() { schedule_start(ctx, w); });
  }

  std::vector<std::vector<int>> groups_;
  std::int64_t B_;
  std::int64_t round_id_ = 0;
  std::int64_t total_ = 0;
  bool collecting_ = false;
  std::vector<int> worker_group_;
  std::vector<bool> busy_;
  std::vector<double> busy_until_, ready_;
  std::vector<NodeId> group_chain_;
  std::vector<std::vector<GradItem>> group_items_;
};

// ---------------------------------------------------------------------------
// Meta Local SGD: the server synchronizes arbitrary subsets of workers.  A
// per-worker distance counter d_i tracks how far each worker's base point
// lags; workers only apply local steps while max_j d_j + sum_i M_i < B, and
// the sync of the whole lagging set is forced once that budget is exhausted.
class MetaLocalPolicy : public Policy {
 public:
  MetaLocalPolicy(std::int64_t B, std::string strategy, std::uint64_t seed)
      : B_(B), strategy_(std::move(strategy)), seed_(seed) {
    if (B <= 0) throw PolicyError("meta-local: B must be positive");
    if (strategy_ != "random-subset" && strategy_ != "fastest-tau-first" &&
        strategy_ != "all-ready" && strategy_ != "defer")
      throw PolicyError("meta-local: unknown strategy " + strategy_);
  }
  std::string name() const override { return "meta-local"; }
  std::int64_t claimed_R() const override { return B_; }
  double step_size(double L, double sigma_sq, double eps) const override {
    double g = 1.0 / (4.0 * static_cast<double>(B_) * L);
    if (sigma_sq > 0) g = std::min(g, eps / (4.0 * sigma_sq * L));
    return g;
  }

  void start(SimContext& ctx) override {
    const int n = ctx.n();
    busy_.assign(n, false);
    busy_until_.assign(n, 0.0);
    ready_.assign(n, 0.0);
    epoch_.assign(n, 0);
    d_.assign(n, 0);
    chain_at_.assign(n, ctx.head());
    items_.assign(n, {});
    frozen_.assign(n, {});
    idle_wait_.assign(n, false);
    for (int w = 0; w < n; ++w) worker_start(ctx, w);
  }

 private:
  struct Held {
    bool present = false;
    NodeId eval = kNoNode;
    SampleId sample = kNoSample;
    Vec grad;
  };

  std::int64_t total_M() const {
    std::int64_t t = 0;
    for (const auto& v : items_) t += static_cast<std::int64_t>(v.size());
    return t;
  }
  std::int64_t max_d() const {
    return *std::max_element(d_.begin(), d_.end());
  }
  std::int64_t budget() const { return max_d() + total_M(); }

  void worker_start(SimContext& ctx, int w) {
    busy_[w] = true;
    busy_until_[w] = ctx.q.now() + ctx.h(w);
    const std::int64_t ep = epoch_[w];
    const NodeId eval = chain_at_[w];
    auto [g, s] = ctx.draw_grad(w, eval);
    ctx.q.after(ctx.h(w), [this, &ctx, w, ep, eval, g = std::move(g), s]() {
      completion(ctx, w, ep, eval, g, s);
    });
  }

  void completion(SimContext& ctx, int w, std::int64_t ep, NodeId eval,
                  const Vec& g, SampleId s) {
    busy_[w] = false;
    if (ctx.stopping) return;
    if (ep != epoch_[w]) {
      ctx.record_discard(eval, s, scaled(g, ctx.gamma));
      schedule_start(ctx, w);
      return;
    }
    if (sync_inflight_ || budget() >= B_) {
      // apply condition failed: hold the gradient until a sync frees room
      frozen_[w] = {true, eval, s, g};
      pump(ctx);
      return;
    }
    items_[w].push_back({eval, s, g});
    pump(ctx);  // runs the forced sync if the budget just hit B
    if (ctx.stopping || epoch_[w] != ep || busy_[w]) return;
    maybe_soft_sync(ctx);
    if (ctx.stopping || epoch_[w] != ep || busy_[w]) return;
    continue_worker(ctx, w);
  }

  // Chain the worker's newest collected gradient and start the next compute,
  // or park the worker when the step budget is exhausted.
  void continue_worker(SimContext& ctx, int w) {
    if (busy_[w] || ctx.stopping) return;
    if (sync_inflight_ || budget() >= B_ || items_[w].empty()) {
      idle_wait_[w] = true;
      return;
    }
    idle_wait_[w] = false;
    GradItem& it = items_[w].back();
    chain_at_[w] = ctx.tree.extend(chain_at_[w], it.eval, it.sample,
                                   scaled(it.grad, ctx.gamma));
    it.chained = true;
    it.chain_node = chain_at_[w];
    worker_start(ctx, w);
  }

  // Forced syncs plus frozen/parked worker resumption, until quiescent.
  void pump(SimContext& ctx) {
    if (pumping_ || sync_inflight_ || ctx.stopping) return;
    pumping_ = true;
    bool progress = true;
    while (progress && !ctx.stopping && !sync_inflight_) {
      progress = false;
      const std::int64_t tm = total_M();
      if (max_d() + tm == B_) {
        std::vector<int> S;
        for (int w = 0; w < ctx.n(); ++w)
          if (d_[w] + tm == B_) S.push_back(w);
        sync(ctx, std::move(S));
        progress = true;
        continue;
      }
      for (int w = 0; w < ctx.n(); ++w) {
        if (busy_[w]) continue;
        if (frozen_[w].present && budget() < B_) {
          const Held h = frozen_[w];
          frozen_[w].present = false;
          items_[w].push_back({h.eval, h.sample, h.grad});
          continue_worker(ctx, w);
          progress = true;
          break;
        }
        if (idle_wait_[w] && budget() < B_ && !items_[w].empty()) {
          continue_worker(ctx, w);
          progress = true;
          break;
        }
      }
    }
    pumping_ = false;
  }

  void maybe_soft_sync(SimContext& ctx) {
    if (strategy_ == "defer" || sync_inflight_ || ctx.stopping) return;
    std::vector<int> ready;
    for (int w = 0; w < ctx.n(); ++w)
      if (!items_[w].empty()) ready.push_back(w);
    if (ready.empty()) return;
    std::vector<int> S = choose_soft(ctx, ready);
    if (!S.empty()) sync(ctx, std::move(S));
  }

  std::vector<int> choose_soft(SimContext& ctx, const std::vector<int>& ready) {
    ++soft_counter_;
    if (strategy_ == "all-ready") return ready;
    if (strategy_ == "fastest-tau-first") {
      int best = ready[0];
      for (int w : ready)
        if (ctx.tau(w) < ctx.tau(best)) best = w;
      return {best};
    }
    // random-subset
    std::vector<int> S;
    for (std::size_t i = 0; i < ready.size(); ++i)
      if (rng_bits(seed_, 0xffff, soft_counter_, i) & 1) S.push_back(ready[i]);
    if (S.empty()) S.push_back(ready[0]);  // documented fallback
    return S;
  }

  void sync(SimContext& ctx, std::vector<int> S) {
    sync_inflight_ = true;
    const double t_e = ctx.q.now();
    double t_u = t_e;
    for (int w : S) {
      if (ctx.tau(w) <= 0) continue;
      const double stop = busy_[w] ? busy_until_[w] : t_e;
      ctx.add_comm(stop, stop + ctx.tau(w), w, 0,
                   static_cast<std::int64_t>(items_[w].size()));
      t_u = std::max(t_u, stop + ctx.tau(w));
    }
    auto apply = [this, &ctx, S = std::move(S)]() {
      std::int64_t moved = 0;
      for (int w : S) moved += static_cast<std::int64_t>(items_[w].size());
      for (int w : S)
        for (const GradItem& it : items_[w]) {
          ctx.extend_main(it.eval, it.sample, scaled(it.grad, ctx.gamma),
                          it.chained);
          if (ctx.stopping) return;
        }
      const double t_u = ctx.q.now();
      std::vector<bool> in_S(ctx.n(), false);
      for (int w : S) in_S[w] = true;
      for (int w = 0; w < ctx.n(); ++w) {
        if (in_S[w]) {
          d_[w] = 0;
          items_[w].clear();
          chain_at_[w] = ctx.head();
          ++epoch_[w];
          ctx.add_comm(t_u, t_u + ctx.tau(w), w, 1, 1);
          ready_[w] = t_u + ctx.tau(w);
          if (frozen_[w].present) {
            const Held h = frozen_[w];
            frozen_[w].present = false;
            ctx.record_discard(h.eval, h.sample, scaled(h.grad, ctx.gamma));
          }
          idle_wait_[w] = false;
        } else {
          d_[w] += moved;
        }
      }
      sync_inflight_ = false;
      for (int w : S) schedule_start(ctx, w);
      pump(ctx);
    };
    if (t_u <= t_e)
      apply();
    else
      ctx.q.at(t_u, std::move(apply));
  }

  void schedule_start(SimContext& ctx, int w) {
    if (busy_[w] || ctx.stopping) return;
    if (ctx.q.now() >= ready_[w])
      worker_start(ctx, w);
    else
      ctx.q.at(ready_[w], [this, &ctx, w]() { schedule_start(ctx, w); });
  }

  std::int64_t B_;
  std::string strategy_;
  std::uint64_t seed_;
  std::uint64_t soft_counter_ = 0;
  bool sync_inflight_ = false;
  bool pumping_ = false;
  std::vector<bool> busy_;
  std::vector<double> busy_until_, ready_;
  std::vector<std::int64_t> epoch_, d_;
  std::vector<NodeId> chain_at_;
  std::vector<std::vector<GradItem>> items_;
  std::vector<Held> frozen_;
  std::vector<bool> idle_wait_;
};

// ---------------------------------------------------------------------------
// Canonical FedAvg: fixed K local steps per worker per round, iterates are
// averaged.  Averaging is not a single-gradient step, so no computation tree
// is grown; only the loss curve is traced.
class FedAvgPolicy : public Policy {
 public:
  explicit FedAvgPolicy(std::int64_t K) : K_(K) {
    if (K <= 0) throw PolicyError("fedavg-canonical: K must be positive");
  }
  std::string name() const override { return "fedavg-canonical"; }
  std::int64_t claimed_R() const override { return -1; }  // not tree-audited
  double step_size(double L, double sigma_sq, double eps) const override {
    double g = 1.0 / (2.0 * static_cast<double>(K_) * L);
    if (sigma_sq > 0) g = std::min(g, eps / (4.0 * sigma_sq * L));
    return g;
  }

  void start(SimContext& ctx) override {
    x_ = ctx.tree.point(0);
    round(ctx, 0.0);
  }

 private:
  void round(SimContext& ctx, double t0) {
    const int n = ctx.n();
    auto locals = std::make_shared<std::vector<Vec>>(n, x_);
    auto pending = std::make_shared<int>(n);
    for (int w = 0; w < n; ++w) local_step(ctx, w, t0, 0, locals, pending);
  }

  void local_step(SimContext& ctx, int w, double t0, std::int64_t j,
                  std::shared_ptr<std::vector<Vec>> locals,
                  std::shared_ptr<int> pending) {
    Vec g = ctx.oracle->grad(*ctx.prob, (*locals)[w],
                             static_cast<std::uint64_t>(w), ctx.draws[w]++);
    ctx.q.at(t0 + static_cast<double>(j + 1) * ctx.h(w),
             [this, &ctx, w, t0, j, locals, pending, g = std::move(g)]() {
               axpy(-ctx.gamma, g, (*locals)[w]);
               if (j + 1 < K_) {
                 local_step(ctx, w, t0, j + 1, locals, pending);
                 return;
               }
               if (--*pending > 0) return;
               barrier(ctx, locals);
             });
  }

  void barrier(SimContext& ctx, std::shared_ptr<std::vector<Vec>> locals) {
    const double t_bar = ctx.q.now();
    double t_u = t_bar;
    for (int w = 0; w < ctx.n(); ++w) {
      ctx.add_comm(t_bar, t_bar + ctx.tau(w), w, 0, 1);
      t_u = std::max(t_u, t_bar + ctx.tau(w));
    }
    auto apply = [this, &ctx, locals]() {
      Vec avg(x_.size(), 0.0);
      for (const Vec& z : *locals) axpy(1.0 / static_cast<double>(ctx.n()), z, avg);
      x_ = std::move(avg);
      ctx.trace.branch_clock.push_back(ctx.q.now());
      const Vec g = ctx.prob->grad(x_);
      ctx.trace.branch_grad_sq.push_back(norm_sq(g));
      ctx.trace.branch_loss.push_back(ctx.prob->value(x_));
      ctx.grad_sq_running_sum += ctx.trace.branch_grad_sq.back();
      ++rounds_;
      if (ctx.stop.kind == StopKind::MaxBranchLen &&
          static_cast<double>(rounds_) >= ctx.stop.value)
        ctx.stopping = true;
      if (ctx.stop.kind == StopKind::GradNormTarget &&
          ctx.grad_sq_running_sum / static_cast<double>(rounds_) <=
              ctx.stop.value)
        ctx.stopping = true;
      if (ctx.stopping) return;
      const double t_u = ctx.q.now();
      double t_next = t_u;
      for (int w = 0; w < ctx.n(); ++w) {
        ctx.add_comm(t_u, t_u + ctx.tau(w), w, 1, 1);
        t_next = std::max(t_next, t_u + ctx.tau(w));
      }
      if (t_next <= t_u)
        round(ctx, t_u);
      else
        ctx.q.at(t_next, [this, &ctx, t_next]() { round(ctx, t_next); });
    };
    if (t_u <= t_bar)
      apply();
    else
      ctx.q.at(t_u, std::move(apply));
  }

  std::int64_t K_;
  std::int64_t rounds_ = 0;
  Vec x_;
};

// ---------------------------------------------------------------------------

struct Hyper {
  std::int64_t B = 1;
  std::int64_t M = 1;
  std::int64_t G = 1;
  std::int64_t s = 1;
  std::int64_t K_local = 1;
  std::vector<std::vector<int>> groups;                  // local-async
  std::vector<std::vector<std::vector<int>>> clusters;   // nested
  std::vector<std::int64_t> cluster_B;                   // <= 0 means infinity
  std::string meta_strategy = "all-ready";
  std::uint64_t seed = 0;
};

// Default partition: workers dealt round-robin into `parts` groups.
inline std::vector<std::vector<int>> default_groups(int n, int parts) {
  std::vector<std::vector<int>> g(std::max(parts, 1));
  for (int w = 0; w < n; ++w) g[w % g.size()].push_back(w);
  return g;
}

inline std::unique_ptr<Policy> make_policy(const std::string& name,
                                           const Hyper& hp, int n) {
  if (name == "vanilla") return std::make_unique<VanillaPolicy>();
  if (name == "synchronized") return std::make_unique<SynchronizedPolicy>(n);
  if (name == "rennala") return std::make_unique<RennalaPolicy>(hp.B);
  if (name == "ringmaster") return make_ringmaster(hp.G);
  if (name == "async-local")
    return std::make_unique<AsyncLocalPolicy>("async-local", hp.B, hp.M, false,
                                              false);
  if (name == "async-batch")
    return std::make_unique<AsyncLocalPolicy>("async-batch", hp.B, hp.M, true,
                                              false);
  if (name == "local") return std::make_unique<LocalSGDPolicy>(hp.B);
  if (name == "dual-process") return std::make_unique<DualProcessPolicy>(hp.B);
  if (name == "cycle") return std::make_unique<CyclePolicy>(hp.s, n);
  if (name == "local-async") {
    auto groups = hp.groups.empty() ? default_groups(n, 2) : hp.groups;
    return std::make_unique<LocalAsyncPolicy>(std::move(groups), hp.B);
  }
  if (name == "nested") {
    auto clusters = hp.clusters;
    if (clusters.empty()) clusters.push_back(default_groups(n, 2));
    auto cb = hp.cluster_B;
    if (cb.empty()) cb.assign(clusters.size(), 0);  // infinity by default
    return std::make_unique<NestedPolicy>("nested", std::move(clusters), hp.B,
                                          std::move(cb));
  }
  if (name == "meta-local")
    return std::make_unique<MetaLocalPolicy>(hp.B, hp.meta_strategy, hp.seed);
  if (name == "fedavg-canonical")
    return std::make_unique<FedAvgPolicy>(hp.K_local);
  throw PolicyError("unknown method: " + name);
}

inline const std::vector<std::string>& all_method_names() {
  static const std::vector<std::string> names = {
      "vanilla",     "synchronized", "rennala",    "ringmaster",
      "async-local", "async-batch",  "local",      "dual-process",
      "cycle",       "local-async",  "nested",     "meta-local",
      "fedavg-canonical"};
  return names;
}

}  // namespace birch
