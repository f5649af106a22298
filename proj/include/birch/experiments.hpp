#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "policies.hpp"
#include "problems.hpp"
#include "simulator.hpp"
#include "timing.hpp"

namespace birch {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flat key-value config with [section] headers and '#' comments.  Keys are
// exposed as "section.key".
class Config {
 public:
  static Config parse(std::istream& is) {
    Config cfg;
    std::string line, section;
    while (std::getline(is, line)) {
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const std::string t = trim(line);
      if (t.empty()) continue;
      if (t.front() == '[') {
        if (t.back() != ']') throw ConfigError("bad section header: " + t);
        section = trim(t.substr(1, t.size() - 2));
        continue;
      }
      const auto eq = t.find('=');
      if (eq == std::string::npos) throw ConfigError("expected key = value: " + t);
      const std::string key = trim(t.substr(0, eq));
      if (key.empty()) throw ConfigError("empty key in line: " + t);
      cfg.kv_[section.empty() ? key : section + "." + key] = trim(t.substr(eq + 1));
    }
    return cfg;
  }

  bool has(const std::string& key) const { return kv_.count(key) > 0; }

  std::string get(const std::string& key, const std::string& dflt = "") const {
    auto it = kv_.find(key);
    return it == kv_.end() ? dflt : it->second;
  }

  double get_num(const std::string& key, double dflt) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return dflt;
    try {
      std::size_t pos = 0;
      const double v = std::stod(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("not a number: " + key + " = " + it->second);
    }
  }

  std::int64_t get_int(const std::string& key, std::int64_t dflt) const {
    const double v = get_num(key, static_cast<double>(dflt));
    if (v != std::floor(v)) throw ConfigError("not an integer: " + key);
    return static_cast<std::int64_t>(v);
  }

  void set(const std::string& key, const std::string& value) { kv_[key] = value; }

  const std::map<std::string, std::string>& entries() const { return kv_; }

  static std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
  }

  static std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::istringstream is(s);
    std::string tok;
    while (std::getline(is, tok, sep)) {
      tok = trim(tok);
      if (!tok.empty()) out.push_back(tok);
    }
    return out;
  }

  // accepts "1 2 3" or "1, 2, 3"
  static std::vector<double> split_nums(const std::string& s) {
    std::string flat = s;
    std::replace(flat.begin(), flat.end(), ',', ' ');
    std::vector<double> out;
    std::istringstream is(flat);
    double v;
    while (is >> v) out.push_back(v);
    if (!is.eof()) throw ConfigError("bad numeric list: " + s);
    return out;
  }

 private:
  std::map<std::string, std::string> kv_;
};

// "0 1|2 3" -> {{0,1},{2,3}}
inline std::vector<std::vector<int>> parse_groups(const std::string& s) {
  std::vector<std::vector<int>> groups;
  for (const std::string& part : Config::split(s, '|')) {
    std::vector<int> g;
    std::istringstream is(part);
    int w;
    while (is >> w) g.push_back(w);
    if (!g.empty()) groups.push_back(std::move(g));
  }
  return groups;
}

// "0 1|2 3 ; 4 5" -> two clusters, the first with two groups
inline std::vector<std::vector<std::vector<int>>> parse_clusters(
    const std::string& s) {
  std::vector<std::vector<std::vector<int>>> clusters;
  for (const std::string& part : Config::split(s, ';')) {
    auto g = parse_groups(part);
    if (!g.empty()) clusters.push_back(std::move(g));
  }
  return clusters;
}

// Everything needed to execute one simulation.
struct RunSpec {
  std::string method = "vanilla";
  std::shared_ptr<Problem> problem;
  NoiseKind noise = NoiseKind::Exact;
  double sigma = 0.0;
  std::uint64_t seed = 1;
  TimingModel timing;
  Hyper hyper;
  double gamma = 0.0;  // 0 => use the method's rule at accuracy eps
  double eps = 0.1;
  Vec x0;
  StopRule stop{StopKind::MaxBranchLen, 1000};
};

inline std::shared_ptr<Problem> make_problem(const Config& cfg) {
  const std::string kind = cfg.get("problem.kind", "quadratic");
  if (kind == "quadratic")
    return std::make_shared<QuadraticProblem>(cfg.get_num("problem.mu", 1.0),
                                              cfg.get_num("problem.L", 1.0));
  if (kind == "logistic-synthetic")
    return make_synthetic_logistic(
        static_cast<std::size_t>(cfg.get_int("problem.samples", 200)),
        static_cast<std::size_t>(cfg.get_int("problem.features", 10)),
        cfg.get_num("problem.reg", 1e-3));
  if (kind == "logistic-csv") {
    if (!cfg.has("problem.dataset"))
      throw ConfigError("logistic-csv needs problem.dataset");
    return load_logistic_csv(cfg.get("problem.dataset"),
                             cfg.get_num("problem.reg", 1e-3));
  }
  throw ConfigError("unknown problem.kind: " + kind);
}

inline NoiseKind parse_noise(const std::string& s) {
  if (s == "exact") return NoiseKind::Exact;
  if (s == "gaussian") return NoiseKind::AdditiveGaussian;
  if (s == "single-sample") return NoiseKind::SingleSample;
  throw ConfigError("unknown noise kind: " + s);
}

inline StopRule parse_stop(const std::string& s) {
  const auto colon = s.find(':');
  if (colon == std::string::npos) throw ConfigError("stop must be kind:value");
  const std::string kind = s.substr(0, colon);
  const double value = std::stod(s.substr(colon + 1));
  if (kind == "branch") return {StopKind::MaxBranchLen, value};
  if (kind == "time") return {StopKind::MaxSimTime, value};
  if (kind == "gradsq") return {StopKind::GradNormTarget, value};
  throw ConfigError("unknown stop kind: " + kind);
}

inline RunSpec build_run_spec(const Config& cfg) {
  RunSpec rs;
  rs.method = cfg.get("run.method", "vanilla");
  rs.problem = make_problem(cfg);
  rs.noise = parse_noise(cfg.get("noise.kind", cfg.get("problem.noise", "exact")));
  rs.sigma = cfg.get_num("noise.sigma",
                         cfg.get_num("problem.sigma",
                                     rs.noise == NoiseKind::Exact ? 0.0 : 1.0));
  rs.seed = static_cast<std::uint64_t>(cfg.get_int("run.seed", 1));
  rs.eps = cfg.get_num("run.eps", 0.1);

  const std::int64_t n = cfg.get_int("run.n", 1);
  if (n <= 0) throw ConfigError("run.n must be positive");
  const std::string regime =
      cfg.get("timing.regime", cfg.get("run.regime", "custom"));
  if (regime == "custom") {
    rs.timing.h = cfg.has("timing.h") ? Config::split_nums(cfg.get("timing.h"))
                                      : std::vector<double>(n, 1.0);
    rs.timing.tau = cfg.has("timing.tau")
                        ? Config::split_nums(cfg.get("timing.tau"))
                        : std::vector<double>(rs.timing.h.size(), 0.0);
  } else {
    rs.timing = regime_preset(regime, static_cast<std::size_t>(n), rs.seed);
  }
  rs.timing.validate();

  Hyper& hp = rs.hyper;
  hp.seed = rs.seed;
  const double sig_sq = rs.sigma * rs.sigma;
  const auto auto_int = [&](const char* key, std::int64_t fallback) {
    const std::string v = cfg.get(key, "auto");
    return v == "auto" ? fallback : static_cast<std::int64_t>(std::stoll(v));
  };
  hp.B = auto_int("hyper.B", optimal_B(std::max(sig_sq, 1e-12), rs.eps));
  hp.M = auto_int("hyper.M",
                  optimal_M(std::max(sig_sq, 1e-12),
                            static_cast<std::int64_t>(rs.timing.n()), rs.eps));
  hp.G = auto_int("hyper.G", hp.B);
  hp.s = auto_int("hyper.s",
                  optimal_s(static_cast<std::int64_t>(rs.timing.n()), rs.eps,
                            std::max(sig_sq, 1e-12)));
  hp.K_local = auto_int("hyper.K_local", hp.M);
  if (cfg.has("hyper.groups")) hp.groups = parse_groups(cfg.get("hyper.groups"));
  if (cfg.has("hyper.clusters"))
    hp.clusters = parse_clusters(cfg.get("hyper.clusters"));
  if (cfg.has("hyper.cluster_B")) {
    for (double v : Config::split_nums(cfg.get("hyper.cluster_B")))
      hp.cluster_B.push_back(static_cast<std::int64_t>(v));
  }
  hp.meta_strategy = cfg.get("hyper.meta_strategy", "all-ready");

  const std::string gamma_s = cfg.get("run.gamma", "auto");
  rs.gamma = gamma_s == "auto" ? 0.0 : std::stod(gamma_s);

  if (cfg.has("run.x0")) {
    rs.x0 = Config::split_nums(cfg.get("run.x0"));
  } else {
    rs.x0.assign(rs.problem->dim(), 1.0);
  }
  rs.stop = parse_stop(cfg.get("run.stop", "branch:1000"));
  return rs;
}

struct RunOutput {
  RunResult result;
  std::unique_ptr<Policy> policy;
  double gamma = 0.0;
};

inline RunOutput execute(const RunSpec& rs) {
  RunOutput out;
  out.policy = make_policy(rs.method, rs.hyper, static_cast<int>(rs.timing.n()));
  const double sig_sq = rs.sigma * rs.sigma;
  out.gamma = rs.gamma > 0
                  ? rs.gamma
                  : out.policy->step_size(rs.problem->smoothness(), sig_sq, rs.eps);
  StochasticOracle oracle(rs.noise, rs.sigma, rs.seed);
  out.result = simulate(*out.policy, *rs.problem, oracle, rs.timing, out.gamma,
                        rs.x0, rs.stop);
  return out;
}

// ---------------------------------------------------------------------------
// Grid runner

struct GridCell {
  std::string method;
  double gamma = 0.0;
  std::int64_t B = 0;
  std::uint64_t seed = 0;
  // results
  bool deadlock = false;
  std::int64_t updates = 0;
  double final_time = 0.0;
  double final_loss = std::numeric_limits<double>::infinity();
  double min_loss = std::numeric_limits<double>::infinity();
  double auc = std::numeric_limits<double>::infinity();
  double time_to_target = std::numeric_limits<double>::infinity();
  std::int64_t discarded = 0;
  std::int64_t peak_bandwidth = 0;
  bool top1 = false;
};

struct GridSpec {
  RunSpec base;                      // template; method/gamma/B/seed overridden
  std::vector<std::string> methods;
  std::vector<double> gamma_grid;    // empty => auto rule
  std::vector<std::int64_t> B_grid;  // empty => keep base B
  std::vector<std::uint64_t> seeds{1};
  double horizon = 1000.0;           // simulated-time budget per cell
  double loss_target = std::numeric_limits<double>::quiet_NaN();
};

inline void fill_metrics(GridCell& cell, const RunResult& r, double horizon,
                         double f0, double loss_target) {
  cell.deadlock = r.deadlock;
  cell.updates = r.trace.update_count();
  cell.final_time = r.trace.final_time;
  cell.discarded = r.trace.discarded;
  cell.peak_bandwidth = measure_peak_bandwidth(r.trace);
  const auto& loss = r.trace.branch_loss;
  const auto& clock = r.trace.branch_clock;
  cell.final_loss = loss.empty() ? f0 : loss.back();
  cell.min_loss = f0;
  double auc = 0.0;
  double prev_t = 0.0, prev_f = f0;
  for (std::size_t k = 0; k < loss.size(); ++k) {
    cell.min_loss = std::min(cell.min_loss, loss[k]);
    auc += 0.5 * (prev_f + loss[k]) * (clock[k] - prev_t);
    prev_t = clock[k];
    prev_f = loss[k];
    if (!std::isnan(loss_target) && loss[k] <= loss_target &&
        std::isinf(cell.time_to_target))
      cell.time_to_target = clock[k];
  }
  auc += prev_f * std::max(0.0, horizon - prev_t);
  cell.auc = auc;
}

inline std::vector<GridCell> run_grid(const GridSpec& gs, int jobs = 1) {
  std::vector<GridCell> cells;
  for (const std::string& m : gs.methods) {
    const std::vector<double> gammas =
        gs.gamma_grid.empty() ? std::vector<double>{0.0} : gs.gamma_grid;
    const std::vector<std::int64_t> Bs =
        gs.B_grid.empty() ? std::vector<std::int64_t>{gs.base.hyper.B} : gs.B_grid;
    for (double g : gammas)
      for (std::int64_t B : Bs)
        for (std::uint64_t seed : gs.seeds) {
          GridCell c;
          c.method = m;
          c.gamma = g;
          c.B = B;
          c.seed = seed;
          cells.push_back(c);
        }
  }

  const auto work = [&](GridCell& cell) {
    RunSpec rs = gs.base;
    rs.method = cell.method;
    rs.gamma = cell.gamma;
    rs.hyper.B = cell.B;
    rs.hyper.G = cell.B;
    rs.seed = cell.seed;
    rs.hyper.seed = cell.seed;
    rs.stop = {StopKind::MaxSimTime, gs.horizon};
    const double f0 = rs.problem->value(rs.x0);
    try {
      RunOutput out = execute(rs);
      cell.gamma = out.gamma;
      fill_metrics(cell, out.result, gs.horizon, f0, gs.loss_target);
    } catch (const std::exception&) {
      cell.deadlock = true;
    }
  };

  if (jobs <= 1) {
    for (GridCell& c : cells) work(c);
  } else {
    std::mutex mu;
    std::size_t next = 0;
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j)
      pool.emplace_back([&]() {
        for (;;) {
          std::size_t i;
          {
            std::lock_guard<std::mutex> lk(mu);
            if (next >= cells.size()) return;
            i = next++;
          }
          work(cells[i]);
        }
      });
    for (std::thread& t : pool) t.join();
  }

  // top-1 per method: the (gamma, B) combo with the lowest mean final loss
  for (const std::string& m : gs.methods) {
    std::map<std::pair<double, std::int64_t>, std::pair<double, int>> agg;
    for (const GridCell& c : cells)
      if (c.method == m && !c.deadlock) {
        auto& a = agg[{c.gamma, c.B}];
        a.first += c.final_loss;
        a.second += 1;
      }
    double best = std::numeric_limits<double>::infinity();
    std::pair<double, std::int64_t> best_key{0.0, 0};
    for (const auto& [key, a] : agg) {
      const double mean = a.first / a.second;
      if (mean < best) {
        best = mean;
        best_key = key;
      }
    }
    for (GridCell& c : cells)
      if (c.method == m && c.gamma == best_key.first && c.B == best_key.second &&
          !c.deadlock)
        c.top1 = true;
  }
  return cells;
}

inline void write_grid_csv(std::ostream& os, const std::vector<GridCell>& cells) {
  os.precision(17);
  os << "method,gamma,B,seed,deadlock,updates,final_time,final_loss,min_loss,"
        "auc,time_to_target,discarded,peak_bandwidth,top1\n";
  for (const GridCell& c : cells)
    os << c.method << ',' << c.gamma << ',' << c.B << ',' << c.seed << ','
       << c.deadlock << ',' << c.updates << ',' << c.final_time << ','
       << c.final_loss << ',' << c.min_loss << ',' << c.auc << ','
       << c.time_to_target << ',' << c.discarded << ',' << c.peak_bandwidth
       << ',' << c.top1 << '\n';
}

// Same table in gnuplot-friendly whitespace format.
inline void write_grid_dat(std::ostream& os, const std::vector<GridCell>& cells) {
  os.precision(17);
  os << "# method gamma B seed updates final_time final_loss min_loss auc "
        "time_to_target discarded peak_bandwidth top1\n";
  for (const GridCell& c : cells)
    os << c.method << ' ' << c.gamma << ' ' << c.B << ' ' << c.seed << ' '
       << c.updates << ' ' << c.final_time << ' ' << c.final_loss << ' '
       << c.min_loss << ' ' << c.auc << ' ' << c.time_to_target << ' '
       << c.discarded << ' ' << c.peak_bandwidth << ' ' << c.top1 << '\n';
}

// ---------------------------------------------------------------------------
// The two-coordinate race: an ill-conditioned quadratic with exact gradients,
// where delay-bounded asynchronous steps beat large collected batches.

struct RaceResult {
  double time_rennala = std::numeric_limits<double>::infinity();
  double time_ringmaster = std::numeric_limits<double>::infinity();
  double gamma_rennala = 0.0;
  double gamma_ringmaster = 0.0;
  bool ringmaster_x_monotone = false;
};

inline double first_time_below(const SimTrace& tr, double target) {
  for (std::size_t k = 0; k < tr.branch_loss.size(); ++k)
    if (tr.branch_loss[k] <= target) return tr.branch_clock[k];
  return std::numeric_limits<double>::infinity();
}

inline RaceResult quadratic_race(double mu, double L, int n, std::int64_t B,
                                 double h, double loss_target = 1e-6) {
  QuadraticProblem prob(mu, L);
  StochasticOracle oracle(NoiseKind::Exact, 0.0, 1);
  TimingModel tm;
  tm.h.assign(n, h);
  tm.tau.assign(n, 0.0);
  const Vec x0 = {1.0, 1.0};
  RaceResult res;

  // Rennala, tuned over powers of two.
  const double max_steps =
      64.0 * static_cast<double>(B) * std::max(1.0, L / mu);
  for (int j = 0; j < 24; ++j) {
    const double gamma = std::ldexp(1.0, -j);  // 2^-j
    // Batch contraction needs |1 - gamma B L| < 1; the boundary case only
    // oscillates, so it is excluded from the tuning sweep.
    if (gamma * static_cast<double>(B) * L >= 2.0) continue;
    RennalaPolicy pol(B);
    RunResult r = simulate(pol, prob, oracle, tm, gamma, x0,
                           {StopKind::MaxBranchLen, max_steps});
    const double t = first_time_below(r.trace, loss_target);
    if (t < res.time_rennala) {
      res.time_rennala = t;
      res.gamma_rennala = gamma;
    }
  }

  // Ringmaster at the prescribed conservative step size.
  {
    const double gamma = 1.0 / (2.0 * L * static_cast<double>(n));
    res.gamma_ringmaster = gamma;
    auto pol = make_ringmaster(n);  // threshold n: equal speeds never discard
    RunResult r = simulate(*pol, prob, oracle, tm, gamma, x0,
                           {StopKind::MaxBranchLen, max_steps});
    res.time_ringmaster = first_time_below(r.trace, loss_target);
    res.ringmaster_x_monotone = true;
    for (std::size_t k = 0; k + 1 < r.rec.branch.size(); ++k) {
      const double x = r.tree.point(r.rec.branch[k + 1])[0];
      if (x < -1e-12 || x > x0[0] + 1e-12) res.ringmaster_x_monotone = false;
    }
  }
  return res;
}

}  // namespace birch
