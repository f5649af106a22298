#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "linalg.hpp"
#include "rng.hpp"

namespace birch {

struct ProblemError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class Problem {
 public:
  virtual ~Problem() = default;
  virtual std::size_t dim() const = 0;
  virtual double smoothness() const = 0;  // gradient Lipschitz constant
  virtual double min_value() const = 0;
  virtual double value(const Vec& x) const = 0;
  virtual Vec grad(const Vec& x) const = 0;

  // Finite-sum structure, when present.
  virtual std::size_t sample_count() const { return 0; }
  virtual Vec grad_sample(const Vec&, std::size_t) const {
    throw ProblemError("problem has no per-sample gradients");
  }
};

// f(x, y) = mu x^2 / 2 + L y^2 / 2 on R^2.
class QuadraticProblem : public Problem {
 public:
  QuadraticProblem(double mu, double L) : mu_(mu), L_(L) {
    if (mu <= 0 || L < mu) throw ProblemError("quadratic: need 0 < mu <= L");
  }
  std::size_t dim() const override { return 2; }
  double smoothness() const override { return L_; }
  double min_value() const override { return 0.0; }
  double value(const Vec& x) const override {
    return 0.5 * mu_ * x[0] * x[0] + 0.5 * L_ * x[1] * x[1];
  }
  Vec grad(const Vec& x) const override { return {mu_ * x[0], L_ * x[1]}; }
  double mu() const { return mu_; }

 private:
  double mu_, L_;
};

// l2-regularized logistic regression over rows (a_i, b_i), b_i in {-1, +1}:
//   f(x) = (1/n) sum log(1 + exp(-b_i <a_i, x>)) + (reg/2) |x|^2
// Smoothness: lambda_max(A^T A) / (4 n) + reg.
class LogisticProblem : public Problem {
 public:
  LogisticProblem(std::vector<Vec> rows, std::vector<double> labels, double reg)
      : rows_(std::move(rows)), labels_(std::move(labels)), reg_(reg) {
    if (rows_.empty() || rows_.size() != labels_.size())
      throw ProblemError("logistic: bad dataset shape");
    dim_ = rows_[0].size();
    for (const Vec& r : rows_)
      if (r.size() != dim_) throw ProblemError("logistic: ragged rows");
    for (double b : labels_)
      if (b != 1.0 && b != -1.0) throw ProblemError("logistic: labels must be +-1");
    L_ = spectral_norm_sq() / (4.0 * static_cast<double>(rows_.size())) + reg_;
    min_value_ = estimate_min();
  }

  std::size_t dim() const override { return dim_; }
  double smoothness() const override { return L_; }
  double min_value() const override { return min_value_; }

  double value(const Vec& x) const override {
    double s = 0.0;
    for (std::size_t i = 0; i < rows_.size(); ++i) {
      const double m = -labels_[i] * dot(rows_[i], x);
      // log(1 + e^m) computed stably
      s += m > 0 ? m + std::log1p(std::exp(-m)) : std::log1p(std::exp(m));
    }
    return s / static_cast<double>(rows_.size()) + 0.5 * reg_ * norm_sq(x);
  }

  Vec grad(const Vec& x) const override {
    Vec g = scaled(x, reg_);
    const double inv_n = 1.0 / static_cast<double>(rows_.size());
    for (std::size_t i = 0; i < rows_.size(); ++i)
      axpy(inv_n * sigmoid_term(x, i), rows_[i], g);
    return g;
  }

  std::size_t sample_count() const override { return rows_.size(); }

  // Gradient of the i-th summand plus the regularizer.
  Vec grad_sample(const Vec& x, std::size_t i) const override {
    if (i >= rows_.size()) throw ProblemError("grad_sample: index out of range");
    Vec g = scaled(x, reg_);
    axpy(sigmoid_term(x, i), rows_[i], g);
    return g;
  }

 private:
  double sigmoid_term(const Vec& x, std::size_t i) const {
    const double m = labels_[i] * dot(rows_[i], x);
    return -labels_[i] / (1.0 + std::exp(m));
  }

  double spectral_norm_sq() const {
    // Power iteration on A^T A with a fixed deterministic start.
    Vec v(dim_);
    for (std::size_t j = 0; j < dim_; ++j)
      v[j] = rng_uniform(7, 7, j) - 0.5;
    double lambda = 0.0;
    for (int it = 0; it < 500; ++it) {
      Vec w(dim_, 0.0);
      for (const Vec& r : rows_) axpy(dot(r, v), r, w);
      const double nw = norm(w);
      if (nw == 0.0) return 0.0;
      lambda = nw;
      v = scaled(w, 1.0 / nw);
    }
    return lambda;
  }

  double estimate_min() const {
    // Plain gradient descent; the objective is smooth and strongly convex
    // (reg > 0), so this pins f* well enough for reporting loss gaps.
    if (reg_ <= 0) return 0.0;
    Vec x(dim_, 0.0);
    const double step = 1.0 / L_;
    for (int it = 0; it < 20000; ++it) {
      Vec g = grad(x);
      if (norm_sq(g) < 1e-24) break;
      axpy(-step, g, x);
    }
    return value(x);
  }

  std::vector<Vec> rows_;
  std::vector<double> labels_;
  double reg_;
  std::size_t dim_ = 0;
  double L_ = 0.0;
  double min_value_ = 0.0;
};

// Two Gaussian clusters with +-1 labels; fixed seed so every run sees the
// same dataset.
inline std::shared_ptr<LogisticProblem> make_synthetic_logistic(
    std::size_t n_samples = 200, std::size_t n_features = 10,
    double reg = 1e-3, std::uint64_t seed = 2024) {
  std::vector<Vec> rows(n_samples, Vec(n_features));
  std::vector<double> labels(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) {
    const double b = (i % 2 == 0) ? 1.0 : -1.0;
    for (std::size_t j = 0; j < n_features; ++j) {
      const double center = b * ((j % 3 == 0) ? 1.0 : 0.3);
      rows[i][j] = center + rng_normal(seed, i, j);
    }
    labels[i] = b;
  }
  return std::make_shared<LogisticProblem>(std::move(rows), std::move(labels), reg);
}

// CSV with a header row; the column named "y" holds +-1 labels, every other
// column is a feature.
inline std::shared_ptr<LogisticProblem> load_logistic_csv(const std::string& path,
                                                          double reg) {
  std::ifstream in(path);
  if (!in) throw ProblemError("cannot open dataset: " + path);
  std::string line;
  if (!std::getline(in, line)) throw ProblemError("empty dataset: " + path);
  std::vector<std::string> header;
  {
    std::istringstream hs(line);
    std::string col;
    while (std::getline(hs, col, ',')) header.push_back(col);
  }
  std::ptrdiff_t ycol = -1;
  for (std::size_t j = 0; j < header.size(); ++j)
    if (header[j] == "y") ycol = static_cast<std::ptrdiff_t>(j);
  if (ycol < 0) throw ProblemError("dataset needs a 'y' column: " + path);

  std::vector<Vec> rows;
  std::vector<double> labels;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    Vec row;
    double label = 0.0;
    std::size_t j = 0;
    while (std::getline(ls, cell, ',')) {
      const double v = std::stod(cell);
      if (static_cast<std::ptrdiff_t>(j) == ycol)
        label = v;
      else
        row.push_back(v);
      ++j;
    }
    if (j != header.size()) throw ProblemError("ragged row in " + path);
    rows.push_back(std::move(row));
    labels.push_back(label);
  }
  return std::make_shared<LogisticProblem>(std::move(rows), std::move(labels), reg);
}

// How a stochastic gradient is produced from a draw address.
enum class NoiseKind { Exact, AdditiveGaussian, SingleSample };

// Stateless stochastic gradient oracle: the value returned for a draw
// address (worker, index) depends only on that address, the seed, and the
// query point, never on scheduler interleaving.
class StochasticOracle {
 public:
  StochasticOracle(NoiseKind kind, double sigma, std::uint64_t seed)
      : kind_(kind), sigma_(sigma), seed_(seed) {
    if (sigma < 0) throw ProblemError("oracle: sigma must be non-negative");
  }

  NoiseKind kind() const { return kind_; }
  double sigma() const { return sigma_; }
  double variance_bound() const { return sigma_ * sigma_; }

  Vec grad(const Problem& p, const Vec& x, std::uint64_t worker,
           std::uint64_t draw) const {
    switch (kind_) {
      case NoiseKind::Exact:
        return p.grad(x);
      case NoiseKind::AdditiveGaussian: {
        Vec g = p.grad(x);
        // Per-coordinate variance sigma^2/d, total E|noise|^2 = sigma^2.
        const double scale = sigma_ / std::sqrt(static_cast<double>(p.dim()));
        for (std::size_t j = 0; j < g.size(); ++j)
          g[j] += scale * rng_normal(seed_, worker, draw, j);
        return g;
      }
      case NoiseKind::SingleSample: {
        if (p.sample_count() == 0)
          throw ProblemError("single-sample oracle needs a finite-sum problem");
        const std::uint64_t i =
            rng_below(seed_, worker, draw, p.sample_count());
        return p.grad_sample(x, static_cast<std::size_t>(i));
      }
    }
    throw ProblemError("oracle: unknown noise kind");
  }

 private:
  NoiseKind kind_;
  double sigma_;
  std::uint64_t seed_;
};

// Step size min{1/(2L), 1/(2RL), eps/(4 sigma^2 L)} with the R and sigma
// terms dropped when they are vacuous.
inline double theorem1_step_size(double L, double R, double sigma_sq, double eps) {
  if (L <= 0 || eps <= 0 || R < 0 || sigma_sq < 0)
    throw ProblemError("theorem1_step_size: bad inputs");
  double g = 1.0 / (2.0 * L);
  if (R > 0) g = std::min(g, 1.0 / (2.0 * R * L));
  if (sigma_sq > 0) g = std::min(g, eps / (4.0 * sigma_sq * L));
  return g;
}

// Iterations guaranteeing min_k E|grad f(x^k)|^2 <= eps:
//   K = ceil( 4 (R + 1) L Delta / eps + 8 sigma^2 L Delta / eps^2 ).
inline std::int64_t theorem1_iteration_budget(double L, double delta,
                                              double sigma_sq, double eps,
                                              double R) {
  if (L <= 0 || delta <= 0 || eps <= 0 || R < 0 || sigma_sq < 0)
    throw ProblemError("theorem1_iteration_budget: bad inputs");
  const double k = 4.0 * (R + 1.0) * L * delta / eps +
                   8.0 * sigma_sq * L * delta / (eps * eps);
  return static_cast<std::int64_t>(std::ceil(k));
}

}  // namespace birch
