#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "rng.hpp"

namespace birch {

struct TimingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Fixed computation model: worker i spends h[i] seconds per stochastic
// gradient and tau[i] seconds per model-sized transfer (either direction).
struct TimingModel {
  std::vector<double> h;
  std::vector<double> tau;

  std::size_t n() const { return h.size(); }

  void validate() const {
    if (h.empty() || h.size() != tau.size())
      throw TimingError("timing model: h and tau must be non-empty, same size");
    for (double x : h)
      if (!(x > 0)) throw TimingError("timing model: h must be positive");
    for (double x : tau)
      if (!(x >= 0)) throw TimingError("timing model: tau must be non-negative");
  }
};

namespace detail {

inline std::vector<double> sorted_ascending(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v;
}

}  // namespace detail

// 2 min_m ( (sum_{i<=m} 1/h_i)^{-1} (B + m) ), h taken in ascending order.
// Equilibrium time for collecting B gradients with the m fastest workers.
inline double t_rennala(std::vector<double> h, std::int64_t B) {
  if (h.empty() || B <= 0) throw TimingError("t_rennala: bad inputs");
  h = detail::sorted_ascending(std::move(h));
  double best = std::numeric_limits<double>::infinity();
  double inv_sum = 0.0;
  for (std::size_t m = 1; m <= h.size(); ++m) {
    inv_sum += 1.0 / h[m - 1];
    best = std::min(best, (static_cast<double>(B) + static_cast<double>(m)) / inv_sum);
  }
  return 2.0 * best;
}

// Local SGD and grouped local-asynchronous SGD share Rennala's round bound.
inline double t_local(std::vector<double> h, std::int64_t B) {
  return t_rennala(std::move(h), B);
}
inline double t_localasync(std::vector<double> h, std::int64_t B) {
  return t_rennala(std::move(h), B);
}

// 2 min_m ( (sum_{i<=m} 1/h_i)^{-1} (B + M m) ) for batches of M local steps.
inline double t_asynclocal(std::vector<double> h, std::int64_t B, std::int64_t M) {
  if (h.empty() || B <= 0 || M <= 0) throw TimingError("t_asynclocal: bad inputs");
  h = detail::sorted_ascending(std::move(h));
  double best = std::numeric_limits<double>::infinity();
  double inv_sum = 0.0;
  for (std::size_t m = 1; m <= h.size(); ++m) {
    inv_sum += 1.0 / h[m - 1];
    best = std::min(best, (static_cast<double>(B) +
                           static_cast<double>(M) * static_cast<double>(m)) /
                              inv_sum);
  }
  return 2.0 * best;
}

// 4 min_m max{ max{h_m, tau_m}, (sum_{i<=m} 1/h_i)^{-1} B } with workers
// ordered by max{h_i, tau_i} ascending.
inline double t_dualprocess(std::vector<double> h, std::vector<double> tau,
                            std::int64_t B) {
  if (h.empty() || h.size() != tau.size() || B <= 0)
    throw TimingError("t_dualprocess: bad inputs");
  std::vector<std::size_t> order(h.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::max(h[a], tau[a]) < std::max(h[b], tau[b]);
  });
  double best = std::numeric_limits<double>::infinity();
  double inv_sum = 0.0;
  for (std::size_t m = 1; m <= order.size(); ++m) {
    const std::size_t i = order[m - 1];
    inv_sum += 1.0 / h[i];
    const double cand = std::max(std::max(h[i], tau[i]),
                                 static_cast<double>(B) / inv_sum);
    best = std::min(best, cand);
  }
  return 4.0 * best;
}

// Batch size that equalizes optimization and statistical terms.
inline std::int64_t optimal_B(double sigma_sq, double eps) {
  if (eps <= 0 || sigma_sq < 0) throw TimingError("optimal_B: bad inputs");
  return std::max<std::int64_t>(
      static_cast<std::int64_t>(std::ceil(sigma_sq / eps)), 1);
}

inline std::int64_t optimal_M(double sigma_sq, std::int64_t n, double eps) {
  if (eps <= 0 || sigma_sq < 0 || n <= 0) throw TimingError("optimal_M: bad inputs");
  return std::max<std::int64_t>(
      static_cast<std::int64_t>(std::ceil(sigma_sq / (static_cast<double>(n) * eps))), 1);
}

inline std::int64_t optimal_s(std::int64_t n, double eps, double sigma_sq) {
  if (eps <= 0 || sigma_sq <= 0 || n <= 0) throw TimingError("optimal_s: bad inputs");
  const double nn = static_cast<double>(n);
  const std::int64_t s = std::max<std::int64_t>(
      static_cast<std::int64_t>(std::ceil(nn * nn * eps / sigma_sq)), 1);
  return std::min(s, n);
}

struct BoundInputs {
  double L = 1.0;
  double delta = 1.0;   // f(x^0) - f*
  double sigma_sq = 1.0;
  double eps = 1.0;
  std::int64_t n = 1;
};

// Worst-case total-time guarantees with all O-constants set to 1 and the
// optimal hyper-parameters substituted.  For scalar formulas the model is
// summarized by h = max h_i, tau = max tau_i.
inline double total_time_bound(const std::string& method, const TimingModel& tm,
                               const BoundInputs& in) {
  tm.validate();
  if (in.L <= 0 || in.delta <= 0 || in.eps <= 0 || in.sigma_sq < 0 || in.n <= 0)
    throw TimingError("total_time_bound: bad inputs");
  const double h = *std::max_element(tm.h.begin(), tm.h.end());
  const double tau = *std::max_element(tm.tau.begin(), tm.tau.end());
  const double opt = in.L * in.delta / in.eps;
  const double stat =
      in.sigma_sq * in.L * in.delta / (static_cast<double>(in.n) * in.eps * in.eps);

  if (method == "rennala" || method == "local" || method == "async-local" ||
      method == "local-async" || method == "dual-process")
    return tau * opt + h * (opt + stat);
  if (method == "ringmaster" || method == "cycle")
    return (tau + h) * (opt + stat);
  if (method == "fedavg-canonical")
    return std::sqrt(tau * h * in.L * in.L * in.sigma_sq * in.delta * in.delta /
                     (in.eps * in.eps * in.eps)) +
           tau * opt + h * (opt + stat);
  if (method == "synchronized")
    return (tau + h) * (opt + in.sigma_sq * in.L * in.delta /
                                  (static_cast<double>(in.n) * in.eps * in.eps));
  throw TimingError("total_time_bound: unknown method " + method);
}

// Named (h, tau) generators used by the experiment suite.
inline TimingModel regime_preset(const std::string& name, std::size_t n,
                                 std::uint64_t seed = 0) {
  if (n == 0) throw TimingError("regime_preset: n must be positive");
  TimingModel tm;
  tm.h.resize(n);
  tm.tau.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (name == "classical") {
      tm.h[i] = 10.0;
      tm.tau[i] = 0.0;
    } else if (name == "slow-comm") {
      tm.h[i] = 10.0;
      tm.tau[i] = 100.0;
    } else if (name == "hetero-compute") {
      tm.h[i] = rng_bits(seed, 101, i) % 2 == 0 ? 1.0 : 10.0;
      tm.tau[i] = 0.0;
    } else if (name == "hetero-comm") {
      tm.h[i] = 10.0;
      tm.tau[i] = rng_bits(seed, 102, i) % 2 == 0 ? 1.0 : 100.0;
    } else {
      throw TimingError("regime_preset: unknown regime " + name);
    }
  }
  return tm;
}

}  // namespace birch
