#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <ostream>
#include <queue>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "linalg.hpp"
#include "problems.hpp"
#include "timing.hpp"
#include "tree.hpp"

namespace birch {

struct SimError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Deterministic event queue: ties in time break by insertion order.
class EventQueue {
 public:
  using Fn = std::function<void()>;

  void at(double t, Fn fn) {
    if (t < now_) throw SimError("event scheduled in the past");
    heap_.push(Item{t, seq_++, std::move(fn)});
  }
  void after(double dt, Fn fn) { at(now_ + dt, std::move(fn)); }

  bool empty() const { return heap_.empty(); }
  double peek_time() const { return heap_.top().t; }
  double now() const { return now_; }

  void run_next() {
    Item it = heap_.top();
    heap_.pop();
    now_ = it.t;
    it.fn();
  }

 private:
  struct Item {
    double t;
    std::uint64_t seq;
    Fn fn;
    bool operator>(const Item& o) const {
      return t != o.t ? t > o.t : seq > o.seq;
    }
  };
  std::priority_queue<Item, std::vector<Item>, std::greater<Item>> heap_;
  double now_ = 0.0;
  std::uint64_t seq_ = 0;
};

enum class StopKind { MaxSimTime, MaxBranchLen, GradNormTarget };

struct StopRule {
  StopKind kind = StopKind::MaxBranchLen;
  double value = 0.0;  // time limit, branch-step count, or running-mean target
};

struct CommEvent {
  double start = 0.0;
  double end = 0.0;
  int worker = 0;
  int direction = 0;  // 0 = worker -> server, 1 = server -> worker
  std::int64_t payload = 1;  // gradients (up) or models (down) carried
};

struct SimTrace {
  std::vector<double> branch_clock;     // sim time of main-branch step k
  std::vector<double> branch_grad_sq;   // |grad f(x^k)|^2
  std::vector<double> branch_loss;      // f(x^k)
  std::vector<CommEvent> comm;
  std::int64_t discarded = 0;           // gradients computed but never applied
  std::int64_t aux_syncs = 0;           // cluster/group internal sync count
  double final_time = 0.0;

  std::int64_t update_count() const {
    return static_cast<std::int64_t>(branch_clock.size());
  }
};

// Peak number of transfers simultaneously in flight.  Intervals are half
// open, [start, end): a transfer ending exactly when another begins does not
// overlap it.  Zero-cost transfers are not recorded at all.
inline std::int64_t measure_peak_bandwidth(const SimTrace& trace) {
  std::vector<std::pair<double, int>> deltas;
  deltas.reserve(2 * trace.comm.size());
  for (const CommEvent& c : trace.comm) {
    if (!(c.end > c.start)) continue;
    deltas.emplace_back(c.start, +1);
    deltas.emplace_back(c.end, -1);
  }
  std::sort(deltas.begin(), deltas.end(),
            [](const auto& a, const auto& b) {
              return a.first != b.first ? a.first < b.first : a.second < b.second;
            });
  std::int64_t cur = 0, peak = 0;
  for (const auto& [t, d] : deltas) {
    cur += d;
    peak = std::max(peak, cur);
  }
  return peak;
}

// Main-branch extensions per unit of simulated time.
inline double measure_update_frequency(const SimTrace& trace) {
  if (trace.final_time <= 0.0) return 0.0;
  return static_cast<double>(trace.update_count()) / trace.final_time;
}

// Shared state handed to a policy: the clock, the audit structures, and the
// gradient oracle.  Policies must route every main-branch extension and every
// discarded gradient through the helpers here so traces stay comparable
// across methods.
struct SimContext {
  EventQueue q;
  ComputationTree tree;
  MainBranchRecord rec;
  SimTrace trace;

  const Problem* prob = nullptr;
  const StochasticOracle* oracle = nullptr;
  TimingModel timing;
  double gamma = 0.0;
  StopRule stop;

  bool stopping = false;
  double grad_sq_running_sum = 0.0;
  std::vector<std::uint64_t> draws;  // per-worker draw counters

  int n() const { return static_cast<int>(timing.h.size()); }
  double h(int w) const { return timing.h[w]; }
  double tau(int w) const { return timing.tau[w]; }
  NodeId head() const { return rec.branch.back(); }
  std::int64_t head_index() const {
    return static_cast<std::int64_t>(rec.branch.size()) - 1;
  }

  void init(Vec x0) {
    const NodeId root = tree.add_root(std::move(x0));
    rec.branch.push_back(root);
    draws.assign(timing.h.size(), 0);
  }

  // Issues the next draw for a worker and evaluates the oracle at a node.
  std::pair<Vec, SampleId> draw_grad(int w, NodeId at) {
    const std::uint64_t idx = draws[w]++;
    const SampleId sample =
        (static_cast<SampleId>(w) << 32) | static_cast<SampleId>(idx);
    Vec g = oracle->grad(*prob, tree.point(at), static_cast<std::uint64_t>(w), idx);
    return {std::move(g), sample};
  }

  // Appends one step to the main branch.  step is subtracted from the head.
  NodeId extend_main(NodeId grad_point, SampleId sample, const Vec& step,
                     bool replay) {
    const NodeId node = replay
                            ? tree.extend_replay(head(), grad_point, sample, step)
                            : tree.extend(head(), grad_point, sample, step);
    rec.branch.push_back(node);
    rec.aux.push_back({grad_point, sample});
    trace.branch_clock.push_back(q.now());
    const Vec g = prob->grad(tree.point(node));
    trace.branch_grad_sq.push_back(norm_sq(g));
    trace.branch_loss.push_back(prob->value(tree.point(node)));
    grad_sq_running_sum += trace.branch_grad_sq.back();
    check_stop();
    return node;
  }

  // Records a gradient that was computed but never applied anywhere.
  void record_discard(NodeId eval_node, SampleId sample, const Vec& step) {
    const NodeId leaf = tree.extend(eval_node, eval_node, sample, step);
    tree.mark_dead_end(leaf);
    ++trace.discarded;
  }

  void add_comm(double start, double end, int worker, int direction,
                std::int64_t payload) {
    if (end <= start) return;  // free transfers are not traced
    trace.comm.push_back({start, end, worker, direction, payload});
  }

  void check_stop() {
    if (stopping) return;
    switch (stop.kind) {
      case StopKind::MaxBranchLen:
        if (static_cast<double>(rec.aux.size()) >= stop.value) stopping = true;
        break;
      case StopKind::GradNormTarget:
        if (!trace.branch_grad_sq.empty() &&
            grad_sq_running_sum /
                    static_cast<double>(trace.branch_grad_sq.size()) <=
                stop.value)
          stopping = true;
        break;
      case StopKind::MaxSimTime:
        break;  // enforced by the run loop
    }
  }
};

class Policy;

struct RunResult {
  ComputationTree tree;
  MainBranchRecord rec;
  SimTrace trace;
  bool deadlock = false;
};

// A distributed SGD method: seeds the initial events, then reacts to its own
// scheduled callbacks through the context.
class Policy {
 public:
  virtual ~Policy() = default;
  virtual std::string name() const = 0;
  // Worst-case tree distance the method guarantees for its hyper-parameters.
  virtual std::int64_t claimed_R() const = 0;
  // Step size the method's guarantee prescribes.
  virtual double step_size(double L, double sigma_sq, double eps) const = 0;
  virtual void start(SimContext& ctx) = 0;
};

inline RunResult simulate(Policy& policy, const Problem& prob,
                          const StochasticOracle& oracle,
                          const TimingModel& timing, double gamma, Vec x0,
                          StopRule stop) {
  timing.validate();
  if (!(gamma > 0)) throw SimError("simulate: step size must be positive");
  if (x0.size() != prob.dim()) throw SimError("simulate: x0 dimension mismatch");

  SimContext ctx;
  ctx.prob = &prob;
  ctx.oracle = &oracle;
  ctx.timing = timing;
  ctx.gamma = gamma;
  ctx.stop = stop;
  ctx.init(std::move(x0));

  policy.start(ctx);
  while (!ctx.q.empty() && !ctx.stopping) {
    if (stop.kind == StopKind::MaxSimTime && ctx.q.peek_time() > stop.value)
      break;
    ctx.q.run_next();
  }
  ctx.trace.final_time = (stop.kind == StopKind::MaxSimTime && !ctx.stopping)
                             ? stop.value
                             : ctx.q.now();

  RunResult out;
  out.deadlock = ctx.q.empty() && !ctx.stopping &&
                 stop.kind != StopKind::MaxSimTime;
  out.tree = std::move(ctx.tree);
  out.rec = std::move(ctx.rec);
  out.trace = std::move(ctx.trace);
  return out;
}

// Trace CSV: one row per main-branch step.
inline void write_trace_csv(std::ostream& os, const SimTrace& trace,
                            std::int64_t decimate = 1) {
  if (decimate < 1) decimate = 1;
  os.precision(17);
  os << "k,sim_time,grad_norm_sq,loss,comm_inflight\n";
  std::size_t ci = 0;
  std::int64_t inflight = 0;
  std::vector<std::pair<double, int>> deltas;
  for (const CommEvent& c : trace.comm) {
    if (!(c.end > c.start)) continue;
    deltas.emplace_back(c.start, +1);
    deltas.emplace_back(c.end, -1);
  }
  std::sort(deltas.begin(), deltas.end());
  for (std::size_t k = 0; k < trace.branch_clock.size(); ++k) {
    while (ci < deltas.size() && deltas[ci].first <= trace.branch_clock[k])
      inflight += deltas[ci++].second;
    if (static_cast<std::int64_t>(k) % decimate != 0 &&
        k + 1 != trace.branch_clock.size())
      continue;
    os << k << ',' << trace.branch_clock[k] << ',' << trace.branch_grad_sq[k]
       << ',' << trace.branch_loss[k] << ',' << inflight << '\n';
  }
}

}  // namespace birch
