#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

namespace birch {

using Vec = std::vector<double>;

inline void axpy(double a, const Vec& x, Vec& y) {
  if (x.size() != y.size()) throw std::invalid_argument("axpy: size mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

inline double dot(const Vec& x, const Vec& y) {
  if (x.size() != y.size()) throw std::invalid_argument("dot: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
  return s;
}

inline double norm_sq(const Vec& x) { return dot(x, x); }

inline double norm(const Vec& x) { return std::sqrt(norm_sq(x)); }

inline Vec scaled(const Vec& x, double a) {
  Vec r(x);
  for (double& v : r) v *= a;
  return r;
}

inline Vec sub(const Vec& x, const Vec& y) {
  Vec r(x);
  axpy(-1.0, y, r);
  return r;
}

}  // namespace birch
