#pragma once

#include <cmath>

namespace fml {

// Explicit 2D displacement in pixels per step. x runs along columns, y along
// rows.
struct TransformVec {
  double x = 0.0;
  double y = 0.0;

  constexpr TransformVec& operator+=(const TransformVec& o) {
    x += o.x;
    y += o.y;
    return *this;
  }
  constexpr TransformVec& operator-=(const TransformVec& o) {
    x -= o.x;
    y -= o.y;
    return *this;
  }
  friend constexpr TransformVec operator+(TransformVec a, const TransformVec& b) { return a += b; }
  friend constexpr TransformVec operator-(TransformVec a, const TransformVec& b) { return a -= b; }
  friend constexpr TransformVec operator-(const TransformVec& a) { return {-a.x, -a.y}; }
  friend constexpr TransformVec operator*(double s, const TransformVec& a) { return {s * a.x, s * a.y}; }
  friend constexpr bool operator==(const TransformVec&, const TransformVec&) = default;
};

constexpr double dot(const TransformVec& a, const TransformVec& b) { return a.x * b.x + a.y * b.y; }
constexpr double cross(const TransformVec& a, const TransformVec& b) { return a.x * b.y - a.y * b.x; }
inline double norm(const TransformVec& a) { return std::hypot(a.x, a.y); }

inline bool is_finite(const TransformVec& a) { return std::isfinite(a.x) && std::isfinite(a.y); }

// Wraps each component into [-n/2, n/2). Shifts on an n-periodic torus are
// unchanged by this.
inline TransformVec wrap_to_torus(TransformVec v, double n) {
  auto wrap = [n](double c) {
    double w = std::fmod(c + n / 2, n);
    if (w < 0) w += n;
    return w - n / 2;
  };
  return {wrap(v.x), wrap(v.y)};
}

}  // namespace fml
