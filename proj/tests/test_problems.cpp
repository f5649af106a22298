#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "birch/problems.hpp"

using namespace birch;

namespace {

Vec central_difference(const Problem& p, const Vec& x, double eps = 1e-6) {
  Vec g(x.size());
  Vec lo = x, hi = x;
  for (std::size_t j = 0; j < x.size(); ++j) {
    hi[j] = x[j] + eps;
    lo[j] = x[j] - eps;
    g[j] = (p.value(hi) - p.value(lo)) / (2.0 * eps);
    hi[j] = lo[j] = x[j];
  }
  return g;
}

Vec random_point(std::mt19937& gen, std::size_t dim, double scale = 2.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Vec x(dim);
  for (double& v : x) v = u(gen);
  return x;
}

}  // namespace

TEST_CASE("quadratic gradient is analytic") {
  QuadraticProblem q(1.0, 2.0);
  CHECK(q.grad({1.0, 1.0}) == Vec{1.0, 2.0});
  CHECK(q.grad({0.0, 0.0}) == Vec{0.0, 0.0});
  CHECK(q.value({0.0, 0.0}) == 0.0);
  CHECK(q.smoothness() == 2.0);
  CHECK_THROWS_AS(QuadraticProblem(0.0, 1.0), ProblemError);
  CHECK_THROWS_AS(QuadraticProblem(2.0, 1.0), ProblemError);
}

TEST_CASE("gradients match central finite differences") {
  QuadraticProblem quad(0.5, 3.0);
  const auto logistic = make_synthetic_logistic(40, 5);
  std::mt19937 gen(11);
  for (int i = 0; i < 100; ++i) {
    for (const Problem* p :
         {static_cast<const Problem*>(&quad),
          static_cast<const Problem*>(logistic.get())}) {
      const Vec x = random_point(gen, p->dim());
      const Vec g = p->grad(x);
      const Vec fd = central_difference(*p, x);
      CHECK(norm(sub(g, fd)) <= 1e-5 * (1.0 + norm(g)));
    }
  }
}

TEST_CASE("sampled L-smoothness") {
  QuadraticProblem quad(0.5, 3.0);
  const auto logistic = make_synthetic_logistic(40, 5);
  std::mt19937 gen(13);
  for (int i = 0; i < 1000; ++i) {
    for (const Problem* p :
         {static_cast<const Problem*>(&quad),
          static_cast<const Problem*>(logistic.get())}) {
      const Vec x = random_point(gen, p->dim());
      const Vec y = random_point(gen, p->dim());
      CHECK(norm(sub(p->grad(x), p->grad(y))) <=
            p->smoothness() * norm(sub(x, y)) * (1.0 + 1e-9));
    }
  }
}

TEST_CASE("logistic per-sample gradients average to the full gradient") {
  const auto p = make_synthetic_logistic(30, 4);
  std::mt19937 gen(17);
  const Vec x = random_point(gen, p->dim());
  Vec mean(p->dim(), 0.0);
  for (std::size_t i = 0; i < p->sample_count(); ++i)
    axpy(1.0, p->grad_sample(x, i), mean);
  for (double& v : mean) v /= static_cast<double>(p->sample_count());
  CHECK(norm(sub(mean, p->grad(x))) <= 1e-12 * (1.0 + norm(p->grad(x))));
  CHECK_THROWS_AS(p->grad_sample(x, p->sample_count()), ProblemError);
}

TEST_CASE("csv dataset loader") {
  const std::string path = "test_dataset_tmp.csv";
  {
    std::ofstream out(path);
    out << "a,y,b\n1.0,1,2.0\n-1.0,-1,0.5\n0.25,1,-0.75\n";
  }
  const auto p = load_logistic_csv(path, 1e-3);
  CHECK(p->dim() == 2);
  CHECK(p->sample_count() == 3);
  const Vec fd = central_difference(*p, {0.3, -0.2});
  CHECK(norm(sub(p->grad({0.3, -0.2}), fd)) <= 1e-6);
  std::remove(path.c_str());
  CHECK_THROWS_AS(load_logistic_csv("does_not_exist.csv", 1e-3), ProblemError);
}

TEST_CASE("oracle: exact and zero-noise modes equal the true gradient") {
  QuadraticProblem q(1.0, 2.0);
  const Vec x{0.7, -0.3};
  const StochasticOracle exact(NoiseKind::Exact, 0.0, 1);
  CHECK(exact.grad(q, x, 0, 0) == q.grad(x));
  const StochasticOracle silent(NoiseKind::AdditiveGaussian, 0.0, 1);
  CHECK(silent.grad(q, x, 3, 5) == q.grad(x));
}

TEST_CASE("oracle: draws are a pure function of the address") {
  QuadraticProblem q(1.0, 2.0);
  const Vec x{0.7, -0.3};
  const StochasticOracle a(NoiseKind::AdditiveGaussian, 1.0, 42);
  const StochasticOracle b(NoiseKind::AdditiveGaussian, 1.0, 42);
  CHECK(a.grad(q, x, 2, 9) == b.grad(q, x, 2, 9));
  CHECK(a.grad(q, x, 2, 9) != a.grad(q, x, 2, 10));
  CHECK(a.grad(q, x, 3, 9) != a.grad(q, x, 2, 9));
  const StochasticOracle c(NoiseKind::AdditiveGaussian, 1.0, 43);
  CHECK(a.grad(q, x, 2, 9) != c.grad(q, x, 2, 9));
}

TEST_CASE("oracle: gaussian noise has the advertised variance and mean") {
  QuadraticProblem q(1.0, 2.0);
  const Vec x{0.7, -0.3};
  const Vec g = q.grad(x);
  const double sigma = 1.5;
  const StochasticOracle oracle(NoiseKind::AdditiveGaussian, sigma, 7);
  const int N = 10000;
  double sq = 0.0;
  Vec mean(2, 0.0);
  for (int i = 0; i < N; ++i) {
    const Vec d = oracle.grad(q, x, 0, static_cast<std::uint64_t>(i));
    sq += norm_sq(sub(d, g));
    axpy(1.0, d, mean);
  }
  sq /= N;
  CHECK(sq >= 0.9 * sigma * sigma);
  CHECK(sq <= 1.1 * sigma * sigma);
  for (std::size_t j = 0; j < 2; ++j)
    CHECK(std::abs(mean[j] / N - g[j]) <= 4.0 * sigma / std::sqrt(double(N)));
}

TEST_CASE("oracle: single-sample mode is unbiased over the dataset") {
  const auto p = make_synthetic_logistic(25, 3);
  const StochasticOracle oracle(NoiseKind::SingleSample, 1.0, 5);
  std::mt19937 gen(23);
  const Vec x = random_point(gen, p->dim());
  Vec mean(p->dim(), 0.0);
  const int N = 20000;
  for (int i = 0; i < N; ++i)
    axpy(1.0 / N, oracle.grad(*p, x, 1, static_cast<std::uint64_t>(i)), mean);
  CHECK(norm(sub(mean, p->grad(x))) <= 0.05 * (1.0 + norm(p->grad(x))));

  QuadraticProblem q(1.0, 2.0);  // no finite-sum structure
  CHECK_THROWS_AS(oracle.grad(q, {0.0, 0.0}, 0, 0), ProblemError);
}

TEST_CASE("guarantee step size") {
  CHECK(theorem1_step_size(1.0, 0.0, 0.0, 0.1) == 0.5);
  CHECK(theorem1_step_size(2.0, 3.0, 4.0, 1.0) == doctest::Approx(1.0 / 32.0));
  // With the variance term dominant, gamma is linear in eps.
  CHECK(theorem1_step_size(1.0, 0.0, 100.0, 0.2) ==
        doctest::Approx(2.0 * theorem1_step_size(1.0, 0.0, 100.0, 0.1)));
  CHECK_THROWS_AS(theorem1_step_size(0.0, 0.0, 0.0, 0.1), ProblemError);
  CHECK_THROWS_AS(theorem1_step_size(1.0, 0.0, 0.0, 0.0), ProblemError);
}

TEST_CASE("guarantee iteration budget") {
  CHECK(theorem1_iteration_budget(1.0, 1.0, 1.0, 0.1, 0.0) == 840);
  CHECK(theorem1_iteration_budget(2.0, 3.0, 0.0, 0.5, 0.0) ==
        static_cast<std::int64_t>(std::ceil(4.0 * 2.0 * 3.0 / 0.5)));
  // Affine in R: only the first term grows.
  const auto k1 = theorem1_iteration_budget(1.0, 1.0, 1.0, 0.1, 1.0);
  const auto k3 = theorem1_iteration_budget(1.0, 1.0, 1.0, 0.1, 3.0);
  CHECK(k3 - k1 == 2 * 40);
  CHECK_THROWS_AS(theorem1_iteration_budget(1.0, 0.0, 1.0, 0.1, 0.0),
                  ProblemError);
}

TEST_CASE("synthetic logistic is reproducible and well-posed") {
  const auto a = make_synthetic_logistic();
  const auto b = make_synthetic_logistic();
  CHECK(a->dim() == 10);
  CHECK(a->sample_count() == 200);
  std::mt19937 gen(29);
  const Vec x = random_point(gen, a->dim());
  CHECK(a->value(x) == b->value(x));
  CHECK(a->grad(x) == b->grad(x));
  CHECK(a->smoothness() > 0.0);
  CHECK(a->min_value() < a->value(Vec(a->dim(), 0.0)));
}
