#pragma once

// Per-object motion model. A small GRU reads [v_prev, v, a] every step and
// a softmax head splits the residual on the acceleration between two motion
// primitives:
//
//   linear:   da = -a           (velocity stays constant)
//   circular: da = -omega^2 v   (uniform rotation, omega from the data)
//
// Only the mode weights are learned; v, a and omega enter as measurements.
// Gradients are computed by hand (BPTT through the recurrence).

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "fml/error.hpp"
#include "fml/rng.hpp"
#include "fml/transform_vec.hpp"

namespace fml {

inline constexpr std::size_t kGruInput = 6;
inline constexpr std::size_t kModes = 2;
inline constexpr std::size_t kDefaultHidden = 64;

enum class Gate : std::size_t { kUpdate = 0, kReset = 1, kCandidate = 2 };

template <typename T>
struct GateView {
  std::span<T> input;      // H x 6, row-major
  std::span<T> recurrent;  // H x H, row-major
  std::span<T> bias;       // H
};

// Flat parameter vector in checkpoint order: update, reset and candidate
// gate blocks (input weights, recurrent weights, bias), then the mode head
// (2 x H weights, 2 biases).
struct GruParams {
  std::size_t hidden = 0;
  std::vector<double> values;

  GruParams() = default;
  explicit GruParams(std::size_t h) : hidden(h), values(count_for(h), 0.0) {
    if (h == 0) throw RangeError("GruParams: hidden size must be positive");
  }

  static constexpr std::size_t gate_block(std::size_t h) { return kGruInput * h + h * h + h; }
  static constexpr std::size_t count_for(std::size_t h) { return 3 * gate_block(h) + kModes * h + kModes; }

  std::size_t count() const { return values.size(); }

  GateView<double> gate(Gate g) { return gate_at<double>(values, g); }
  GateView<const double> gate(Gate g) const { return gate_at<const double>(values, g); }
  std::span<double> head_weights() { return std::span(values).subspan(3 * gate_block(hidden), kModes * hidden); }
  std::span<const double> head_weights() const {
    return std::span(values).subspan(3 * gate_block(hidden), kModes * hidden);
  }
  std::span<double> head_bias() { return std::span(values).subspan(3 * gate_block(hidden) + kModes * hidden, kModes); }
  std::span<const double> head_bias() const {
    return std::span(values).subspan(3 * gate_block(hidden) + kModes * hidden, kModes);
  }

  friend bool operator==(const GruParams&, const GruParams&) = default;

 private:
  template <typename T, typename V>
  GateView<T> gate_at(V& v, Gate g) const {
    const std::size_t h = hidden;
    auto block = std::span<T>(v).subspan(static_cast<std::size_t>(g) * gate_block(h), gate_block(h));
    return {block.subspan(0, kGruInput * h), block.subspan(kGruInput * h, h * h), block.subspan(kGruInput * h + h * h, h)};
  }
};

// Uniform in [-1/sqrt(H), 1/sqrt(H)].
inline GruParams init_params(std::size_t hidden, std::uint64_t seed) {
  GruParams p(hidden);
  const double k = 1.0 / std::sqrt(static_cast<double>(hidden));
  Rng rng(seed);
  for (double& v : p.values) v = uniform(rng, -k, k);
  return p;
}

struct ModeWeights {
  double linear = 0.5;
  double circular = 0.5;
};

struct MotionState {
  TransformVec v_prev;
  TransformVec v;
  TransformVec a;
  std::vector<double> hidden;
};

using GruInput = std::array<double, kGruInput>;

inline GruInput gru_input(const TransformVec& v_prev, const TransformVec& v, const TransformVec& a) {
  return {v_prev.x, v_prev.y, v.x, v.y, a.x, a.y};
}

namespace detail {

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// out = W x (+ U y) + b for one gate.
inline void gate_preactivation(GateView<const double> g, std::span<const double> x, std::span<const double> y,
                               std::span<double> out) {
  const std::size_t h = g.bias.size();
  for (std::size_t i = 0; i < h; ++i) {
    double s = g.bias[i];
    const double* wi = g.input.data() + i * kGruInput;
    for (std::size_t j = 0; j < kGruInput; ++j) s += wi[j] * x[j];
    const double* ui = g.recurrent.data() + i * h;
    for (std::size_t j = 0; j < h; ++j) s += ui[j] * y[j];
    out[i] = s;
  }
}

inline void require_dims(const GruParams& params, std::size_t hidden_len) {
  if (params.values.size() != GruParams::count_for(params.hidden)) {
    throw SizeError("GRU: parameter vector has " + std::to_string(params.values.size()) + " entries, expected " +
                    std::to_string(GruParams::count_for(params.hidden)));
  }
  if (hidden_len != params.hidden) {
    throw SizeError("GRU: hidden vector has length " + std::to_string(hidden_len) + ", expected " +
                    std::to_string(params.hidden));
  }
}

// Everything the backward pass needs from one step.
struct StepCache {
  GruInput x{};
  std::vector<double> h_prev, z, r, n, h, rh;
  ModeWeights c;
};

inline void gru_forward(const GruParams& params, std::span<const double> x, std::span<const double> h_prev,
                        StepCache& cache) {
  const std::size_t h = params.hidden;
  std::copy(x.begin(), x.end(), cache.x.begin());
  cache.h_prev.assign(h_prev.begin(), h_prev.end());
  cache.z.resize(h);
  cache.r.resize(h);
  cache.n.resize(h);
  cache.h.resize(h);
  cache.rh.resize(h);
  gate_preactivation(params.gate(Gate::kUpdate), x, h_prev, cache.z);
  gate_preactivation(params.gate(Gate::kReset), x, h_prev, cache.r);
  for (std::size_t i = 0; i < h; ++i) {
    cache.z[i] = sigmoid(cache.z[i]);
    cache.r[i] = sigmoid(cache.r[i]);
    cache.rh[i] = cache.r[i] * h_prev[i];
  }
  gate_preactivation(params.gate(Gate::kCandidate), x, cache.rh, cache.n);
  for (std::size_t i = 0; i < h; ++i) {
    cache.n[i] = std::tanh(cache.n[i]);
    cache.h[i] = (1.0 - cache.z[i]) * h_prev[i] + cache.z[i] * cache.n[i];
  }
}

}  // namespace detail

// One GRU step: z = sig(Wz x + Uz h + bz), r = sig(Wr x + Ur h + br),
// n = tanh(Wn x + Un (r*h) + bn), h' = (1 - z) h + z n.
inline std::vector<double> gru_step(const GruParams& params, std::span<const double> input,
                                    std::span<const double> hidden) {
  if (input.size() != kGruInput) throw SizeError("gru_step: input must have 6 entries");
  detail::require_dims(params, hidden.size());
  detail::StepCache cache;
  detail::gru_forward(params, input, hidden, cache);
  return cache.h;
}

inline ModeWeights mode_weights(const GruParams& params, std::span<const double> hidden) {
  detail::require_dims(params, hidden.size());
  const auto w = params.head_weights();
  const auto b = params.head_bias();
  std::array<double, kModes> logit{};
  for (std::size_t m = 0; m < kModes; ++m) {
    double s = b[m];
    for (std::size_t j = 0; j < params.hidden; ++j) s += w[m * params.hidden + j] * hidden[j];
    logit[m] = s;
  }
  const double peak = std::max(logit[0], logit[1]);
  const double e0 = std::exp(logit[0] - peak);
  const double e1 = std::exp(logit[1] - peak);
  return {e0 / (e0 + e1), e1 / (e0 + e1)};
}

// Signed angle from v_prev to v; zero when either is (nearly) still.
inline double estimate_omega(const TransformVec& v_prev, const TransformVec& v) {
  if (norm(v_prev) < 1e-6 || norm(v) < 1e-6) return 0.0;
  return std::atan2(cross(v_prev, v), dot(v_prev, v));
}

inline TransformVec residual_delta_a(const ModeWeights& c, const TransformVec& v, const TransformVec& a, double omega) {
  return c.linear * (-a) + c.circular * (-(omega * omega) * v);
}

struct Prediction {
  TransformVec v_next;
  MotionState state;
  ModeWeights weights;
};

inline Prediction predict_next(const GruParams& params, const MotionState& state) {
  const double omega = estimate_omega(state.v_prev, state.v);
  const GruInput x = gru_input(state.v_prev, state.v, state.a);
  auto h = gru_step(params, x, state.hidden);
  const ModeWeights c = mode_weights(params, h);
  // a + da first: with c = (1, 0) it is exactly zero and v carries over unchanged.
  const TransformVec v_next = state.v + (state.a + residual_delta_a(c, state.v, state.a, omega));
  return {v_next, MotionState{state.v, v_next, v_next - state.v, std::move(h)}, c};
}

// Hidden state after feeding observed inputs, starting from zeros.
inline std::vector<double> warm_hidden(const GruParams& params, std::span<const GruInput> inputs) {
  std::vector<double> h(params.hidden, 0.0);
  for (const auto& x : inputs) h = gru_step(params, x, h);
  return h;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

// One teacher-forced step: observed inputs and the next observed velocity.
struct TrackStep {
  TransformVec v_prev;
  TransformVec v;
  TransformVec a;
  TransformVec target;
};

using Track = std::vector<TrackStep>;

struct LossGrad {
  double loss = 0.0;  // sum of squared errors / denominator
  std::vector<double> grad;
};

// Total number of steps in a batch; the default loss denominator.
inline std::size_t step_count(std::span<const Track> batch) {
  std::size_t n = 0;
  for (const Track& t : batch) n += t.size();
  return n;
}

namespace detail {

// Squared error of one track and its gradient, unnormalized. The gradient is
// accumulated into `grad` (sized to the parameter count).
inline double track_loss_grad(const GruParams& params, const Track& track, std::vector<double>* grad) {
  const std::size_t h = params.hidden;
  std::vector<StepCache> caches(track.size());
  std::vector<std::array<double, 2>> dc(track.size());
  std::vector<double> hidden(h, 0.0);
  double loss = 0.0;
  for (std::size_t s = 0; s < track.size(); ++s) {
    const TrackStep& st = track[s];
    const GruInput x = gru_input(st.v_prev, st.v, st.a);
    gru_forward(params, x, hidden, caches[s]);
    hidden = caches[s].h;
    const ModeWeights c = mode_weights(params, hidden);
    caches[s].c = c;
    const double omega = estimate_omega(st.v_prev, st.v);
    const TransformVec lin = -st.a;
    const TransformVec cir = -(omega * omega) * st.v;
    const TransformVec err = st.v + (st.a + (c.linear * lin + c.circular * cir)) - st.target;
    loss += dot(err, err);
    dc[s] = {2.0 * dot(err, lin), 2.0 * dot(err, cir)};
  }
  if (!grad) return loss;

  std::vector<double>& g = *grad;
  const std::size_t block = GruParams::gate_block(h);
  const std::size_t head_w = 3 * block;
  const std::size_t head_b = head_w + kModes * h;
  auto gate_offset = [&](Gate gt) { return static_cast<std::size_t>(gt) * block; };

  std::vector<double> dh_next(h, 0.0);
  std::vector<double> dh(h), dz_pre(h), dr_pre(h), dn_pre(h), drh(h), dh_prev(h);
  const auto head = params.head_weights();
  for (std::size_t s = track.size(); s-- > 0;) {
    const StepCache& cc = caches[s];
    // Softmax head.
    const double c0 = cc.c.linear;
    const double c1 = cc.c.circular;
    const double mean = c0 * dc[s][0] + c1 * dc[s][1];
    const std::array<double, 2> dlogit{c0 * (dc[s][0] - mean), c1 * (dc[s][1] - mean)};
    for (std::size_t m = 0; m < kModes; ++m) {
      g[head_b + m] += dlogit[m];
      for (std::size_t j = 0; j < h; ++j) g[head_w + m * h + j] += dlogit[m] * cc.h[j];
    }
    for (std::size_t j = 0; j < h; ++j) dh[j] = dh_next[j] + head[j] * dlogit[0] + head[h + j] * dlogit[1];

    // h = (1 - z) h_prev + z n
    for (std::size_t i = 0; i < h; ++i) {
      const double dz = dh[i] * (cc.n[i] - cc.h_prev[i]);
      const double dn = dh[i] * cc.z[i];
      dz_pre[i] = dz * cc.z[i] * (1.0 - cc.z[i]);
      dn_pre[i] = dn * (1.0 - cc.n[i] * cc.n[i]);
      dh_prev[i] = dh[i] * (1.0 - cc.z[i]);
    }
    // Candidate gate: n = tanh(Wn x + Un (r*h_prev) + bn)
    {
      const std::size_t off = gate_offset(Gate::kCandidate);
      const auto un = params.gate(Gate::kCandidate).recurrent;
      std::fill(drh.begin(), drh.end(), 0.0);
      for (std::size_t i = 0; i < h; ++i) {
        const double d = dn_pre[i];
        for (std::size_t j = 0; j < kGruInput; ++j) g[off + i * kGruInput + j] += d * cc.x[j];
        double* gu = g.data() + off + kGruInput * h + i * h;
        const double* ui = un.data() + i * h;
        for (std::size_t j = 0; j < h; ++j) {
          gu[j] += d * cc.rh[j];
          drh[j] += ui[j] * d;
        }
        g[off + kGruInput * h + h * h + i] += d;
      }
      for (std::size_t j = 0; j < h; ++j) {
        dr_pre[j] = drh[j] * cc.h_prev[j] * cc.r[j] * (1.0 - cc.r[j]);
        dh_prev[j] += drh[j] * cc.r[j];
      }
    }
    // Update and reset gates.
    for (auto [gt, dpre] : {std::pair{Gate::kUpdate, &dz_pre}, std::pair{Gate::kReset, &dr_pre}}) {
      const std::size_t off = gate_offset(gt);
      const auto u = params.gate(gt).recurrent;
      for (std::size_t i = 0; i < h; ++i) {
        const double d = (*dpre)[i];
        for (std::size_t j = 0; j < kGruInput; ++j) g[off + i * kGruInput + j] += d * cc.x[j];
        double* gu = g.data() + off + kGruInput * h + i * h;
        const double* ui = u.data() + i * h;
        for (std::size_t j = 0; j < h; ++j) {
          gu[j] += d * cc.h_prev[j];
          dh_prev[j] += ui[j] * d;
        }
        g[off + kGruInput * h + h * h + i] += d;
      }
    }
    dh_next = dh_prev;
  }
  return loss;
}

}  // namespace detail

// Teacher-forced loss (sum of squared next-velocity errors / denominator) and
// its gradient. The denominator defaults to the number of steps in the batch.
// Each track's gradient is accumulated separately before being added to the
// total, so the result does not depend on how many tracks share a batch.
inline LossGrad loss_and_grad(const GruParams& params, std::span<const Track> batch, double denominator = 0.0) {
  detail::require_dims(params, params.hidden);
  if (denominator <= 0.0) denominator = static_cast<double>(std::max<std::size_t>(step_count(batch), 1));
  LossGrad out{0.0, std::vector<double>(params.count(), 0.0)};
  std::vector<double> track_grad(params.count());
  for (const Track& track : batch) {
    std::fill(track_grad.begin(), track_grad.end(), 0.0);
    out.loss += detail::track_loss_grad(params, track, &track_grad);
    for (std::size_t i = 0; i < track_grad.size(); ++i) out.grad[i] += track_grad[i];
  }
  out.loss /= denominator;
  for (double& g : out.grad) g /= denominator;
  return out;
}

inline double batch_loss(const GruParams& params, std::span<const Track> batch, double denominator = 0.0) {
  detail::require_dims(params, params.hidden);
  if (denominator <= 0.0) denominator = static_cast<double>(std::max<std::size_t>(step_count(batch), 1));
  double loss = 0.0;
  for (const Track& track : batch) loss += detail::track_loss_grad(params, track, nullptr);
  return loss / denominator;
}

struct AdamConfig {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(std::size_t count, AdamConfig config) : config_(config), m_(count, 0.0), v_(count, 0.0) {}

  void step(std::vector<double>& params, const std::vector<double>& grad) {
    ++t_;
    const double b1t = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double b2t = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * grad[i];
      v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * grad[i] * grad[i];
      params[i] -= config_.lr * (m_[i] / b1t) / (std::sqrt(v_[i] / b2t) + config_.eps);
    }
  }

 private:
  AdamConfig config_;
  std::vector<double> m_;
  std::vector<double> v_;
  long t_ = 0;
};

struct TrainConfig {
  std::size_t hidden = kDefaultHidden;
  double lr = 0.01;
  std::size_t batch_size = 32;
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
};

struct TrainResult {
  GruParams params;
  std::vector<double> loss_curve;  // one entry per optimizer step
};

// Adam over shuffled mini-batches of whole tracks. Fully deterministic for a
// given seed.
inline TrainResult train(GruParams params, const std::vector<Track>& tracks, const TrainConfig& config) {
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < tracks.size(); ++i) {
    if (!tracks[i].empty()) usable.push_back(i);
  }
  if (usable.empty()) throw TrainingError("train: no training tracks");
  if (config.batch_size == 0 || config.epochs == 0 || !(config.lr > 0.0)) {
    throw RangeError("train: batch size, epochs and learning rate must be positive");
  }
  Adam adam(params.count(), AdamConfig{config.lr});
  Rng rng(derive_seed(config.seed, 0x7a11ULL));
  TrainResult result;
  std::vector<Track> batch;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = usable.size(); i > 1; --i) std::swap(usable[i - 1], usable[uniform_index(rng, i)]);
    for (std::size_t start = 0; start < usable.size(); start += config.batch_size) {
      batch.clear();
      for (std::size_t k = start; k < std::min(start + config.batch_size, usable.size()); ++k) {
        batch.push_back(tracks[usable[k]]);
      }
      LossGrad lg = loss_and_grad(params, batch);
      if (!std::isfinite(lg.loss)) {
        throw TrainingError("train: non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                            std::to_string(result.loss_curve.size()));
      }
      result.loss_curve.push_back(lg.loss);
      adam.step(params.values, lg.grad);
    }
  }
  result.params = std::move(params);
  return result;
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

// Compares analytic gradients against central differences on `samples`
// randomly chosen parameters.
inline GradCheckResult grad_check(const GruParams& params, std::span<const Track> batch, std::size_t samples = 200,
                                  double step = 1e-5, std::uint64_t seed = 1) {
  const LossGrad analytic = loss_and_grad(params, batch);
  Rng rng(seed);
  GruParams probe = params;
  GradCheckResult out;
  for (std::size_t s = 0; s < samples; ++s) {
    const std::size_t i = uniform_index(rng, params.count());
    const double orig = probe.values[i];
    probe.values[i] = orig + step;
    const double up = batch_loss(probe, batch);
    probe.values[i] = orig - step;
    const double down = batch_loss(probe, batch);
    probe.values[i] = orig;
    const double numeric = (up - down) / (2.0 * step);
    const double scale = std::max({std::abs(numeric), std::abs(analytic.grad[i]), 1e-10});
    out.max_rel_error = std::max(out.max_rel_error, std::abs(numeric - analytic.grad[i]) / scale);
    ++out.checked;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[] = "FMLGRU1\n";

inline void save_checkpoint(const GruParams& params, const std::filesystem::path& file) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint " + file.string() + " for writing");
  out << kCheckpointMagic << params.hidden << ' ' << kGruInput << ' ' << kModes << '\n';
  for (double v : params.values) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    char bytes[8];
    for (int b = 0; b < 8; ++b) bytes[b] = static_cast<char>((bits >> (8 * b)) & 0xffu);
    out.write(bytes, 8);
  }
  if (!out) throw IoError("write failed for checkpoint " + file.string());
}

inline GruParams load_checkpoint(const std::filesystem::path& file) {
  if (!std::filesystem::exists(file)) throw MissingFileError("missing checkpoint " + file.string());
  std::ifstream in(file, std::ios::binary);
  std::string magic(sizeof(kCheckpointMagic) - 1, '\0');
  in.read(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (!in || magic != kCheckpointMagic) throw CorruptHeaderError("bad checkpoint header in " + file.string());
  std::string dims;
  std::getline(in, dims);
  std::istringstream ds(dims);
  std::size_t h = 0, input = 0, modes = 0;
  if (!(ds >> h >> input >> modes) || h == 0 || input != kGruInput || modes != kModes) {
    throw CorruptHeaderError("bad checkpoint dimensions '" + dims + "' in " + file.string());
  }
  GruParams p(h);
  const std::uintmax_t header = magic.size() + dims.size() + 1;
  const std::uintmax_t expected = header + p.count() * 8;
  if (std::filesystem::file_size(file) != expected) {
    throw SizeMismatchError("size mismatch in checkpoint " + file.string() + ": expected " + std::to_string(expected) +
                            " bytes");
  }
  for (double& v : p.values) {
    unsigned char bytes[8];
    in.read(reinterpret_cast<char*>(bytes), 8);
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[b]) << (8 * b);
    v = std::bit_cast<double>(bits);
  }
  if (!in) throw SizeMismatchError("truncated checkpoint " + file.string());
  return p;
}

}  // namespace fml
