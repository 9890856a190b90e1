#pragma once

#include <cmath>
#include <string>

#include "forge/dual.hpp"
#include "forge/error.hpp"
#include "forge/linalg.hpp"

namespace forge {

/// Radial bump: 1 on [0, inner], 0 on [outer, inf), quintic smoothstep in between (C^2).
struct CutoffFunction {
  double inner = 0.5;
  double outer = 1.0;

  template <class T>
  [[nodiscard]] T operator()(const T& r) const {
    const double rv = value_of(r);
    if (rv <= inner) return T(1.0);
    if (rv >= outer) return T(0.0);
    const T s = (r - T(inner)) * T(1.0 / (outer - inner));
    return T(1.0) - s * s * s * (T(10.0) - T(15.0) * s + T(6.0) * s * s);
  }

  template <class T>
  [[nodiscard]] T derivative(const T& r) const {
    const double rv = value_of(r);
    if (rv <= inner || rv >= outer) return T(0.0);
    const T s = (r - T(inner)) * T(1.0 / (outer - inner));
    const T one_minus = T(1.0) - s;
    return T(-30.0 / (outer - inner)) * s * s * one_minus * one_minus;
  }
};

enum class FieldKind { Saddle, Center, Homoclinic, Linear };

inline std::string field_kind_name(FieldKind k) {
  switch (k) {
    case FieldKind::Saddle: return "saddle";
    case FieldKind::Center: return "center";
    case FieldKind::Homoclinic: return "homoclinic";
    case FieldKind::Linear: return "linear";
  }
  return "unknown";
}

inline FieldKind field_kind_from(const std::string& s) {
  if (s == "saddle") return FieldKind::Saddle;
  if (s == "center") return FieldKind::Center;
  if (s == "homoclinic") return FieldKind::Homoclinic;
  if (s == "linear") return FieldKind::Linear;
  throw Error(Errc::InvalidConfig, "unknown field kind '" + s + "'");
}

/// Planar field on the unit-scale chart plane. Hamiltonian kinds are J grad(h * plane cutoff),
/// hence divergence free; Linear is diag(k1, k2) u times the cutoff and is not.
///   saddle:     h = -rate u1 u2             -> (-rate u1, rate u2) near 0
///   center:     h = rate/2 |u|^2            -> rotation at angular speed rate
///   homoclinic: h = rate (u2^2/2 - u1^2/2 + u1^3/(3 scale)), loop reaching u1 = 1.5 scale
struct PlanarField {
  FieldKind kind = FieldKind::Saddle;
  double rate = 1.0;
  double scale = 1.0;
  double k1 = 0.0, k2 = 0.0;

  [[nodiscard]] bool volume_preserving() const { return kind != FieldKind::Linear; }

  template <class T>
  void hamiltonian(const T& u1, const T& u2, T& h, T& h1, T& h2) const {
    switch (kind) {
      case FieldKind::Saddle:
        h = T(-rate) * u1 * u2;
        h1 = T(-rate) * u2;
        h2 = T(-rate) * u1;
        return;
      case FieldKind::Center:
        h = T(0.5 * rate) * (u1 * u1 + u2 * u2);
        h1 = T(rate) * u1;
        h2 = T(rate) * u2;
        return;
      case FieldKind::Homoclinic: {
        const T inv = T(1.0 / scale);
        h = T(rate) * (T(0.5) * u2 * u2 - T(0.5) * u1 * u1 + u1 * u1 * u1 * inv * T(1.0 / 3.0));
        h1 = T(rate) * (u1 * u1 * inv - u1);
        h2 = T(rate) * u2;
        return;
      }
      case FieldKind::Linear:
        h = h1 = h2 = T(0.0);
        return;
    }
  }
};

/// A flow stage written in chart coordinates z in R^d: the first two coordinates span the
/// deformation plane, the remaining ones are transverse. Field = chi(|w|) * (Psi(u), 0) with
/// u, w measured from `offset`.
struct ChartStage {
  PlanarField field;
  Vec offset;
  CutoffFunction plane;       // on |u|
  CutoffFunction transverse;  // on |w|
  double time = 0.0;
  int steps = 256;

  [[nodiscard]] int dim() const { return static_cast<int>(offset.size()); }

  [[nodiscard]] bool in_support(const Vec& z) const {
    const double du0 = z[0] - offset[0], du1 = z[1] - offset[1];
    if (du0 * du0 + du1 * du1 >= plane.outer * plane.outer) return false;
    double w2 = 0;
    for (int i = 2; i < dim(); ++i) w2 += (z[i] - offset[i]) * (z[i] - offset[i]);
    return w2 < transverse.outer * transverse.outer;
  }

  /// Radius of the smallest ball around the offset containing the support polydisk.
  [[nodiscard]] double support_radius() const {
    if (dim() <= 2) return plane.outer;
    return std::hypot(plane.outer, transverse.outer);
  }

  template <class T>
  void vector_field(const T* z, T* out) const {
    using std::sqrt;
    const int d = dim();
    for (int i = 0; i < d; ++i) out[i] = T(0.0);
    const T u1 = z[0] - T(offset[0]);
    const T u2 = z[1] - T(offset[1]);
    const T r2 = u1 * u1 + u2 * u2;
    if (value_of(r2) >= plane.outer * plane.outer) return;
    T chi(1.0);
    if (d > 2) {
      T w2(0.0);
      for (int i = 2; i < d; ++i) {
        const T wi = z[i] - T(offset[i]);
        w2 += wi * wi;
      }
      const double w2v = value_of(w2);
      if (w2v >= transverse.outer * transverse.outer) return;
      if (w2v > transverse.inner * transverse.inner) chi = transverse(sqrt(w2));
    }
    const double r2v = value_of(r2);
    T psi(1.0), dpsi_over_r(0.0);
    if (r2v > plane.inner * plane.inner) {
      const T r = sqrt(r2);
      psi = plane(r);
      dpsi_over_r = plane.derivative(r) / r;
    }
    if (field.kind == FieldKind::Linear) {
      out[0] = chi * T(field.k1) * u1 * psi;
      out[1] = chi * T(field.k2) * u2 * psi;
      return;
    }
    T h(0.0), h1(0.0), h2(0.0);
    field.hamiltonian(u1, u2, h, h1, h2);
    const T g1 = h1 * psi + h * dpsi_over_r * u1;
    const T g2 = h2 * psi + h * dpsi_over_r * u2;
    out[0] = chi * g2;
    out[1] = -(chi * g1);
  }

  [[nodiscard]] Vec eval(const Vec& z) const {
    double zz[kMaxDim], out[kMaxDim];
    for (int i = 0; i < dim(); ++i) zz[i] = z[i];
    vector_field(zz, out);
    Vec r(dim());
    for (int i = 0; i < dim(); ++i) r[i] = out[i];
    return r;
  }

  void eval_with_jacobian(const Vec& z, Vec& f, Mat& jac) const {
    const int d = dim();
    Dual zz[kMaxDim], out[kMaxDim];
    for (int i = 0; i < d; ++i) zz[i] = Dual::variable(z[i], i);
    vector_field(zz, out);
    f.resize(d);
    jac.resize(d, d);
    for (int i = 0; i < d; ++i) {
      f[i] = out[i].v;
      for (int j = 0; j < d; ++j) jac(i, j) = out[i].g[j];
    }
  }

  /// Time-(direction * time) map by classical RK4 with `steps` fixed steps. When `jac` is given,
  /// the variational equation is integrated alongside, giving the exact derivative of the
  /// discrete map.
  [[nodiscard]] Vec flow(const Vec& z0, double direction, Mat* jac = nullptr) const {
    const int d = dim();
    if (jac) *jac = Mat::Identity(d, d);
    if (time == 0.0 || !in_support(z0)) return z0;
    const double h = direction * time / steps;
    Vec z = z0;
    if (!jac) {
      for (int s = 0; s < steps; ++s) {
        const Vec k1 = eval(z);
        const Vec k2 = eval(z + 0.5 * h * k1);
        const Vec k3 = eval(z + 0.5 * h * k2);
        const Vec k4 = eval(z + h * k3);
        z += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      }
    } else {
      Mat m = Mat::Identity(d, d);
      Vec k1, k2, k3, k4;
      Mat a1, a2, a3, a4;
      for (int s = 0; s < steps; ++s) {
        eval_with_jacobian(z, k1, a1);
        const Mat m1 = a1 * m;
        eval_with_jacobian(z + 0.5 * h * k1, k2, a2);
        const Mat m2 = a2 * (m + 0.5 * h * m1);
        eval_with_jacobian(z + 0.5 * h * k2, k3, a3);
        const Mat m3 = a3 * (m + 0.5 * h * m2);
        eval_with_jacobian(z + h * k3, k4, a4);
        const Mat m4 = a4 * (m + h * m3);
        z += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        m += (h / 6.0) * (m1 + 2.0 * m2 + 2.0 * m3 + m4);
      }
      *jac = m;
    }
    if (!z.allFinite()) throw Error(Errc::IntegrationFailure, "non-finite state in flow");
    return z;
  }
};

}  // namespace forge
