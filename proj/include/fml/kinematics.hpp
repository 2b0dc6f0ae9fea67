#pragma once

// Algebra over phase transforms: composition, inversion, higher-order and
// relative transforms, and conversion of a transform to an explicit
// displacement vector.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <vector>

#include "fml/spectral.hpp"
#include "fml/transform_vec.hpp"

namespace fml {

// Tag for the virtual root every object can be attached to. Its transform is
// the identity.
struct World {};
inline constexpr World world{};

// Mean phase increment between neighbouring frequency bins, converted to
// pixels. Neighbours wrap cyclically; each pair is weighted by the geometric
// mean of its two bin energies so dead bins (zero energy) drop out together
// with every increment that touches them. With no energy at all every pair
// gets the same weight.
inline TransformVec extract_vec(const PhaseTransform& t) {
  const std::size_t n = t.size;
  require_grid_size(n, t.phase.size(), "extract_vec");
  Complex mx{0.0, 0.0};
  Complex my{0.0, 0.0};
  double wx_total = 0.0;
  double wy_total = 0.0;
  for (std::size_t ky = 0; ky < n; ++ky) {
    const std::size_t ky_next = (ky + 1) % n;
    for (std::size_t kx = 0; kx < n; ++kx) {
      const std::size_t k = ky * n + kx;
      const std::size_t kx_step = ky * n + (kx + 1) % n;
      const std::size_t ky_step = ky_next * n + kx;
      const double wx = std::sqrt(t.energy[k] * t.energy[kx_step]);
      const double wy = std::sqrt(t.energy[k] * t.energy[ky_step]);
      mx += wx * (t.phase[kx_step] * std::conj(t.phase[k]));
      my += wy * (t.phase[ky_step] * std::conj(t.phase[k]));
      wx_total += wx;
      wy_total += wy;
    }
  }
  // Degenerate weights: fall back to the unweighted mean.
  auto uniform_mean = [&](bool along_x) {
    Complex m{0.0, 0.0};
    for (std::size_t ky = 0; ky < n; ++ky) {
      for (std::size_t kx = 0; kx < n; ++kx) {
        const std::size_t k = ky * n + kx;
        const std::size_t step = along_x ? ky * n + (kx + 1) % n : ((ky + 1) % n) * n + kx;
        m += t.phase[step] * std::conj(t.phase[k]);
      }
    }
    return m;
  };
  if (!(wx_total > 0.0)) mx = uniform_mean(true);
  if (!(wy_total > 0.0)) my = uniform_mean(false);
  const double scale = static_cast<double>(n) / (2.0 * std::numbers::pi);
  return {scale * std::atan2(mx.imag(), mx.real()), scale * std::atan2(my.imag(), my.real())};
}

// Applies `a` and `b` in sequence. A frequency is only as reliable as its
// weaker operand.
inline PhaseTransform compose(const PhaseTransform& a, const PhaseTransform& b) {
  detail::require_same_size(a.size, b.size, "compose");
  std::vector<Complex> phase(a.phase.size());
  std::vector<double> energy(a.energy.size());
  for (std::size_t k = 0; k < phase.size(); ++k) {
    phase[k] = a.phase[k] * b.phase[k];
    energy[k] = std::min(a.energy[k], b.energy[k]);
  }
  return PhaseTransform(a.size, std::move(phase), std::move(energy));
}

inline PhaseTransform invert(const PhaseTransform& t) {
  PhaseTransform out = t;
  for (auto& p : out.phase) p = std::conj(p);
  return out;
}

// Transformation between two consecutive transformations, e.g. the
// acceleration relating two velocity transforms.
inline PhaseTransform higher_order(const PhaseTransform& v_prev, const PhaseTransform& v_next) {
  detail::require_same_size(v_prev.size, v_next.size, "higher_order");
  return compose(v_next, invert(v_prev));
}

// Motion of `child` with the motion of `parent` divided out.
inline PhaseTransform relative_transform(const PhaseTransform& child, const PhaseTransform& parent) {
  detail::require_same_size(child.size, parent.size, "relative_transform");
  return compose(child, invert(parent));
}

inline PhaseTransform relative_transform(const PhaseTransform& child, World) { return child; }

// Rollout with the highest order held constant: v_1 = v + a, v_{i+1} = v_i + a.
inline std::vector<TransformVec> const_order_rollout(TransformVec v, const TransformVec& a, std::size_t steps) {
  std::vector<TransformVec> out;
  out.reserve(steps);
  for (std::size_t i = 0; i < steps; ++i) {
    v += a;
    out.push_back(v);
  }
  return out;
}

}  // namespace fml
