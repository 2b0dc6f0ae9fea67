#pragma once

// Square 2D DFTs and the element-wise phase algebra used to estimate and
// replay translations in the frequency domain.
//
// Conventions: grids are N x N, row-major, index = row * N + col. The forward
// transform is unnormalized (bin 0 holds the pixel sum), the inverse is
// scaled by 1/N^2. Frequency bins use the standard DFT order; the signed
// frequency of bin k is k for k < N/2 and k - N otherwise.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fml/error.hpp"
#include "fml/transform_vec.hpp"

namespace fml {

using Complex = std::complex<double>;

inline constexpr double kPhaseEpsilon = 1e-12;

constexpr bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

inline void require_grid_size(std::size_t n, std::size_t count, const char* what) {
  if (!is_power_of_two(n)) {
    throw SizeError(std::string(what) + ": size " + std::to_string(n) + " is not a power of two");
  }
  if (count != n * n) {
    throw SizeError(std::string(what) + ": expected " + std::to_string(n * n) + " values for a square " +
                    std::to_string(n) + "x" + std::to_string(n) + " grid, got " + std::to_string(count));
  }
}

// Signed frequency of DFT bin k on an n-point axis.
constexpr long signed_frequency(std::size_t k, std::size_t n) {
  return k < n / 2 ? static_cast<long>(k) : static_cast<long>(k) - static_cast<long>(n);
}

// Real-valued N x N image.
struct Frame {
  std::size_t size = 0;
  std::vector<double> values;

  Frame() = default;
  explicit Frame(std::size_t n) : size(n), values(n * n, 0.0) { require_grid_size(n, n * n, "Frame"); }
  Frame(std::size_t n, std::vector<double> v) : size(n), values(std::move(v)) {
    require_grid_size(n, values.size(), "Frame");
  }

  double& at(std::size_t row, std::size_t col) { return values[row * size + col]; }
  double at(std::size_t row, std::size_t col) const { return values[row * size + col]; }

  friend bool operator==(const Frame&, const Frame&) = default;
};

struct SpectrumGrid {
  std::size_t size = 0;
  std::vector<Complex> values;

  SpectrumGrid() = default;
  explicit SpectrumGrid(std::size_t n) : size(n), values(n * n) { require_grid_size(n, n * n, "SpectrumGrid"); }
  SpectrumGrid(std::size_t n, std::vector<Complex> v) : size(n), values(std::move(v)) {
    require_grid_size(n, values.size(), "SpectrumGrid");
  }

  Complex& at(std::size_t ky, std::size_t kx) { return values[ky * size + kx]; }
  const Complex& at(std::size_t ky, std::size_t kx) const { return values[ky * size + kx]; }
};

// Per-frequency unit phase factors plus a non-negative reliability weight.
struct PhaseTransform {
  std::size_t size = 0;
  std::vector<Complex> phase;
  std::vector<double> energy;

  PhaseTransform() = default;
  PhaseTransform(std::size_t n, std::vector<Complex> p, std::vector<double> e)
      : size(n), phase(std::move(p)), energy(std::move(e)) {
    require_grid_size(n, phase.size(), "PhaseTransform");
    require_grid_size(n, energy.size(), "PhaseTransform energy");
  }

  static PhaseTransform identity(std::size_t n) {
    require_grid_size(n, n * n, "PhaseTransform");
    return PhaseTransform(n, std::vector<Complex>(n * n, Complex{1.0, 0.0}), std::vector<double>(n * n, 1.0));
  }
};

namespace detail {

inline void require_same_size(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw SizeError(std::string(what) + ": size mismatch (" + std::to_string(a) + " vs " + std::to_string(b) + ")");
  }
}

// Iterative radix-2 FFT over `n` elements spaced `stride` apart. `twiddles`
// holds exp(-2*pi*i*k/n) for k < n/2; the inverse uses their conjugates.
inline void fft_strided(Complex* data, std::size_t n, std::size_t stride, std::span<const Complex> twiddles,
                        bool inverse) {
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(data[i * stride], data[j * stride]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const std::size_t half = len / 2;
    const std::size_t step = n / len;
    for (std::size_t start = 0; start < n; start += len) {
      for (std::size_t k = 0; k < half; ++k) {
        Complex w = twiddles[k * step];
        if (inverse) w = std::conj(w);
        Complex& a = data[(start + k) * stride];
        Complex& b = data[(start + k + half) * stride];
        const Complex t = b * w;
        b = a - t;
        a += t;
      }
    }
  }
}

inline std::vector<Complex> make_twiddles(std::size_t n) {
  std::vector<Complex> tw(std::max<std::size_t>(n / 2, 1));
  for (std::size_t k = 0; k < n / 2; ++k) {
    tw[k] = std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n));
  }
  return tw;
}

inline void fft2_in_place(std::vector<Complex>& grid, std::size_t n, bool inverse) {
  const auto tw = make_twiddles(n);
  for (std::size_t row = 0; row < n; ++row) fft_strided(grid.data() + row * n, n, 1, tw, inverse);
  for (std::size_t col = 0; col < n; ++col) fft_strided(grid.data() + col, n, n, tw, inverse);
}

}  // namespace detail

// Unnormalized forward 2D DFT.
inline SpectrumGrid dft2(const Frame& frame) {
  require_grid_size(frame.size, frame.values.size(), "dft2");
  std::vector<Complex> grid(frame.values.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!std::isfinite(frame.values[i])) throw RangeError("dft2: non-finite pixel at index " + std::to_string(i));
    grid[i] = Complex{frame.values[i], 0.0};
  }
  detail::fft2_in_place(grid, frame.size, false);
  return SpectrumGrid(frame.size, std::move(grid));
}

struct InverseResult {
  Frame frame;
  // Largest |Im| discarded when taking the real part. Values above ~1e-6
  // mean the spectrum was not conjugate-symmetric.
  double max_imag = 0.0;
};

inline InverseResult idft2_checked(const SpectrumGrid& spectrum) {
  require_grid_size(spectrum.size, spectrum.values.size(), "idft2");
  std::vector<Complex> grid = spectrum.values;
  detail::fft2_in_place(grid, spectrum.size, true);
  const double scale = 1.0 / static_cast<double>(grid.size());
  InverseResult out{Frame(spectrum.size), 0.0};
  for (std::size_t i = 0; i < grid.size(); ++i) {
    out.frame.values[i] = grid[i].real() * scale;
    out.max_imag = std::max(out.max_imag, std::abs(grid[i].imag() * scale));
  }
  return out;
}

// Inverse 2D DFT scaled by 1/N^2, real part only, not clamped.
inline Frame idft2(const SpectrumGrid& spectrum) { return idft2_checked(spectrum).frame; }

// Normalized cross-power spectrum of two consecutive frames. For
// x_next(n) = x_prev(n - d) on the torus the phase is exp(+2*pi*i*k.d/N).
// Bins whose cross power is below kPhaseEpsilon carry no information and
// become identity phases with zero energy.
inline PhaseTransform phase_correlate(const SpectrumGrid& x_prev, const SpectrumGrid& x_next) {
  detail::require_same_size(x_prev.size, x_next.size, "phase_correlate");
  const std::size_t count = x_prev.values.size();
  std::vector<Complex> phase(count);
  std::vector<double> energy(count);
  for (std::size_t k = 0; k < count; ++k) {
    const Complex p = x_prev.values[k] * std::conj(x_next.values[k]);
    const double mag = std::abs(p);
    if (mag < kPhaseEpsilon || !std::isfinite(mag)) {
      phase[k] = Complex{1.0, 0.0};
      energy[k] = 0.0;
    } else {
      phase[k] = p / mag;
      energy[k] = mag;
    }
  }
  return PhaseTransform(x_prev.size, std::move(phase), std::move(energy));
}

// Advances the scene encoded by `spectrum` by the motion encoded in `t`.
inline SpectrumGrid apply_transform(const SpectrumGrid& spectrum, const PhaseTransform& t) {
  detail::require_same_size(spectrum.size, t.size, "apply_transform");
  SpectrumGrid out(spectrum.size);
  for (std::size_t k = 0; k < out.values.size(); ++k) out.values[k] = spectrum.values[k] * std::conj(t.phase[k]);
  return out;
}

// Phase ramp describing a translation by `v` pixels. The Nyquist row and
// column hold +-1 (the sign of cos(pi * v)) so that real frames stay real
// under fractional shifts; those bins get zero energy because their phase
// does not follow the ramp.
inline PhaseTransform ramp_from_vec(const TransformVec& v, std::size_t n) {
  require_grid_size(n, n * n, "ramp_from_vec");
  const double half = static_cast<double>(n) / 2.0;
  if (!is_finite(v) || std::abs(v.x) >= half || std::abs(v.y) >= half) {
    throw RangeError("ramp_from_vec: displacement (" + std::to_string(v.x) + ", " + std::to_string(v.y) +
                     ") outside the recoverable range |v| < " + std::to_string(half));
  }
  auto axis = [n](double shift) {
    std::vector<Complex> f(n);
    for (std::size_t k = 0; k < n; ++k) {
      if (n > 1 && k == n / 2) {
        f[k] = Complex{std::cos(std::numbers::pi * shift) >= 0.0 ? 1.0 : -1.0, 0.0};
      } else {
        const double s = static_cast<double>(signed_frequency(k, n));
        f[k] = std::polar(1.0, 2.0 * std::numbers::pi * s * shift / static_cast<double>(n));
      }
    }
    return f;
  };
  const auto fx = axis(v.x);
  const auto fy = axis(v.y);
  std::vector<Complex> phase(n * n);
  std::vector<double> energy(n * n, 1.0);
  for (std::size_t ky = 0; ky < n; ++ky) {
    for (std::size_t kx = 0; kx < n; ++kx) {
      phase[ky * n + kx] = fy[ky] * fx[kx];
      if (n > 1 && (kx == n / 2 || ky == n / 2)) energy[ky * n + kx] = 0.0;
    }
  }
  return PhaseTransform(n, std::move(phase), std::move(energy));
}

}  // namespace fml
