#include <doctest.h>

#include <random>

#include "birch/timing.hpp"

using namespace birch;

TEST_CASE("round-time formulas on small worked cases") {
  CHECK(t_rennala({1.0, 1.0}, 2) == 4.0);
  CHECK(t_rennala({1.0}, 1) == 4.0);
  CHECK(t_asynclocal({1.0, 1.0}, 4, 2) == 8.0);
  CHECK(t_dualprocess({1.0}, {1.0}, 2) == 8.0);
  CHECK(t_dualprocess({1.0, 1.0}, {0.0, 0.0}, 4) == 8.0);
  CHECK(t_local({2.0, 3.0}, 5) == t_rennala({2.0, 3.0}, 5));
  CHECK(t_localasync({2.0, 3.0}, 5) == t_rennala({2.0, 3.0}, 5));
  CHECK_THROWS_AS(t_rennala({}, 2), TimingError);
  CHECK_THROWS_AS(t_rennala({1.0}, 0), TimingError);
  CHECK_THROWS_AS(t_dualprocess({1.0}, {1.0, 2.0}, 2), TimingError);
}

TEST_CASE("formulas ignore appended slow workers") {
  const std::vector<double> h{1.0, 2.0, 4.0};
  std::vector<double> more = h;
  more.push_back(1e12);
  CHECK(t_rennala(more, 8) == t_rennala(h, 8));
  CHECK(t_asynclocal(more, 8, 3) == t_asynclocal(h, 8, 3));
  std::vector<double> tau{0.5, 0.5, 0.5};
  std::vector<double> tau_more = tau;
  tau_more.push_back(1e12);
  CHECK(t_dualprocess(more, tau_more, 8) == t_dualprocess(h, tau, 8));
}

TEST_CASE("t_asynclocal matches t_rennala at M = 1 and grows with M") {
  std::mt19937 gen(3);
  std::uniform_real_distribution<double> u(0.5, 8.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> h(1 + trial % 6);
    for (double& x : h) x = u(gen);
    const std::int64_t B = 1 + trial % 16;
    CHECK(t_asynclocal(h, B, 1) == t_rennala(h, B));
    double prev = 0.0;
    for (std::int64_t M = 1; M <= 4; ++M) {
      const double v = t_asynclocal(h, B, M);
      CHECK(v >= prev);
      prev = v;
    }
  }
}

TEST_CASE("T-formulas are nonincreasing when a worker speeds up") {
  std::mt19937 gen(5);
  std::uniform_real_distribution<double> u(0.5, 8.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> h(2 + trial % 5), tau(h.size());
    for (double& x : h) x = u(gen);
    for (double& x : tau) x = u(gen);
    const std::int64_t B = 1 + trial % 12;
    std::vector<double> faster = h;
    faster[trial % faster.size()] *= 0.5;
    CHECK(t_rennala(faster, B) <= t_rennala(h, B));
    CHECK(t_asynclocal(faster, B, 2) <= t_asynclocal(h, B, 2));
    CHECK(t_dualprocess(faster, tau, B) <= t_dualprocess(h, tau, B));
    // Full-prefix upper bound.
    double inv = 0.0;
    for (double x : h) inv += 1.0 / x;
    CHECK(t_rennala(h, B) <=
          2.0 * (static_cast<double>(B) + static_cast<double>(h.size())) / inv *
              (1.0 + 1e-12));
  }
}

TEST_CASE("optimal hyper-parameters") {
  CHECK(optimal_B(100.0, 1.0) == 100);
  CHECK(optimal_B(0.0, 1.0) == 1);
  CHECK(optimal_B(10.0, 3.0) == 4);
  CHECK(optimal_M(100.0, 10, 1.0) == 10);
  CHECK(optimal_M(0.0, 10, 1.0) == 1);
  CHECK(optimal_M(100.0, 7, 1.0) == 15);
  CHECK(optimal_s(10, 1.0, 1000.0) == 1);
  CHECK(optimal_s(4, 1.0, 1e-12) == 4);  // vanishing noise clamps at n
  CHECK(optimal_s(4, 1.0, 8.0) == 2);
  // The cyclic group size shrinks below n exactly when the noise budget
  // n^2 eps / sigma^2 rounds up to less than n, and never grows with noise.
  for (std::int64_t n : {2, 4, 8}) {
    const double eps = 1.0;
    std::int64_t prev = n;
    for (double sig_sq : {0.5, 2.0, 30.0, 100.0, 1e4}) {
      const std::int64_t s = optimal_s(n, eps, sig_sq);
      const double want = static_cast<double>(n) * static_cast<double>(n) *
                          eps / sig_sq;
      CHECK((s < n) == (std::ceil(want) < static_cast<double>(n)));
      CHECK(s <= prev);
      prev = s;
    }
    CHECK(prev == 1);  // overwhelming noise always favors a single group
  }
}

TEST_CASE("total time bounds") {
  TimingModel tm;
  tm.h = {2.0, 2.0};
  tm.tau = {0.0, 0.0};
  BoundInputs in;
  in.L = 1.0;
  in.delta = 2.0;
  in.sigma_sq = 4.0;
  in.eps = 0.5;
  in.n = 2;
  // tau = 0 collapses the batch-collecting and delay-threshold bounds.
  CHECK(total_time_bound("rennala", tm, in) ==
        total_time_bound("ringmaster", tm, in));
  tm.tau = {3.0, 3.0};
  CHECK(total_time_bound("ringmaster", tm, in) >
        total_time_bound("rennala", tm, in));
  CHECK(total_time_bound("local", tm, in) ==
        total_time_bound("rennala", tm, in));
  CHECK(total_time_bound("fedavg-canonical", tm, in) >=
        total_time_bound("local", tm, in));
  CHECK_THROWS_AS(total_time_bound("nope", tm, in), TimingError);

  // The delay-threshold bound dominates batch collection whenever the
  // per-worker statistical term is at least the optimization term.
  std::mt19937 gen(9);
  std::uniform_real_distribution<double> u(0.1, 10.0);
  for (int trial = 0; trial < 100; ++trial) {
    TimingModel t;
    t.h = {u(gen), u(gen)};
    t.tau = {u(gen), u(gen)};
    BoundInputs b;
    b.L = u(gen);
    b.delta = u(gen);
    b.eps = u(gen);
    b.n = 1 + trial % 8;
    b.sigma_sq = u(gen) * static_cast<double>(b.n) * b.eps;
    if (b.sigma_sq / (static_cast<double>(b.n) * b.eps) >= 1.0)
      CHECK(total_time_bound("ringmaster", t, b) >=
            total_time_bound("rennala", t, b));
  }
}

TEST_CASE("regime presets") {
  const TimingModel classical = regime_preset("classical", 4);
  CHECK(classical.h == std::vector<double>(4, 10.0));
  CHECK(classical.tau == std::vector<double>(4, 0.0));

  const TimingModel slow = regime_preset("slow-comm", 2);
  CHECK(slow.h == std::vector<double>(2, 10.0));
  CHECK(slow.tau == std::vector<double>(2, 100.0));

  const TimingModel hc = regime_preset("hetero-compute", 16, 1);
  for (std::size_t i = 0; i < 16; ++i) {
    CHECK((hc.h[i] == 1.0 || hc.h[i] == 10.0));
    CHECK(hc.tau[i] == 0.0);
  }
  const TimingModel hm = regime_preset("hetero-comm", 16, 1);
  for (std::size_t i = 0; i < 16; ++i) {
    CHECK(hm.h[i] == 10.0);
    CHECK((hm.tau[i] == 1.0 || hm.tau[i] == 100.0));
  }
  CHECK(regime_preset("hetero-compute", 8, 5).h ==
        regime_preset("hetero-compute", 8, 5).h);
  CHECK_THROWS_AS(regime_preset("unknown", 4), TimingError);
  CHECK_THROWS_AS(regime_preset("classical", 0), TimingError);
}

TEST_CASE("timing model validation") {
  TimingModel tm;
  CHECK_THROWS_AS(tm.validate(), TimingError);
  tm.h = {1.0};
  tm.tau = {-1.0};
  CHECK_THROWS_AS(tm.validate(), TimingError);
  tm.tau = {0.0};
  CHECK_NOTHROW(tm.validate());
  tm.h = {0.0};
  CHECK_THROWS_AS(tm.validate(), TimingError);
}
