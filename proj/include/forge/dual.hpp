#pragma once

#include <array>
#include <cmath>

#include "forge/linalg.hpp"

namespace forge {

/// Forward-mode dual number carrying a gradient with respect to up to four inputs.
struct Dual {
  double v = 0;
  std::array<double, kMaxDim> g{};

  Dual() = default;
  Dual(double value) : v(value) {}  // NOLINT: implicit from constants is the point

  static Dual variable(double value, int slot) {
    Dual d(value);
    d.g[slot] = 1.0;
    return d;
  }
};

inline Dual operator+(const Dual& a, const Dual& b) {
  Dual r(a.v + b.v);
  for (int i = 0; i < kMaxDim; ++i) r.g[i] = a.g[i] + b.g[i];
  return r;
}
inline Dual operator-(const Dual& a, const Dual& b) {
  Dual r(a.v - b.v);
  for (int i = 0; i < kMaxDim; ++i) r.g[i] = a.g[i] - b.g[i];
  return r;
}
inline Dual operator-(const Dual& a) {
  Dual r(-a.v);
  for (int i = 0; i < kMaxDim; ++i) r.g[i] = -a.g[i];
  return r;
}
inline Dual operator*(const Dual& a, const Dual& b) {
  Dual r(a.v * b.v);
  for (int i = 0; i < kMaxDim; ++i) r.g[i] = a.g[i] * b.v + a.v * b.g[i];
  return r;
}
inline Dual operator/(const Dual& a, const Dual& b) {
  Dual r(a.v / b.v);
  const double inv2 = 1.0 / (b.v * b.v);
  for (int i = 0; i < kMaxDim; ++i) r.g[i] = (a.g[i] * b.v - a.v * b.g[i]) * inv2;
  return r;
}
inline Dual& operator+=(Dual& a, const Dual& b) { return a = a + b; }
inline Dual& operator-=(Dual& a, const Dual& b) { return a = a - b; }
inline Dual& operator*=(Dual& a, const Dual& b) { return a = a * b; }

inline Dual sqrt(const Dual& a) {
  const double s = std::sqrt(a.v);
  Dual r(s);
  const double f = 0.5 / s;
  for (int i = 0; i < kMaxDim; ++i) r.g[i] = a.g[i] * f;
  return r;
}

inline double value_of(double x) { return x; }
inline double value_of(const Dual& x) { return x.v; }

}  // namespace forge
