#pragma once

// End-to-end prediction: per-object phase correlation, online graph
// inference, motion-model rollout in relative space and synthesis of the
// future frames by phase accumulation. Also training-track extraction,
// the MSE protocol, evaluation reports and frame export.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "fml/error.hpp"
#include "fml/kinematics.hpp"
#include "fml/motion.hpp"
#include "fml/nodes.hpp"
#include "fml/relations.hpp"
#include "fml/scenegen.hpp"
#include "fml/spectral.hpp"

namespace fml {

// ---------------------------------------------------------------------------
// Threads
// ---------------------------------------------------------------------------

// FML_THREADS if set to a positive integer, else the number of cores.
inline std::size_t default_threads() {
  if (const char* env = std::getenv("FML_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// Runs fn(i) for i in [0, count). Results must go to per-index slots; the
// first exception by index is rethrown after all workers finish.
template <typename F>
void parallel_for(std::size_t count, std::size_t threads, F&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, count));
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::size_t failed_at = count;
  std::exception_ptr failure;
  auto worker = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (i < failed_at) {
          failed_at = i;
          failure = std::current_exception();
        }
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

// ---------------------------------------------------------------------------
// Observed kinematics
// ---------------------------------------------------------------------------

// V[t][o] = transform of object o from frame t-1 to t (V[0] is empty).
inline std::vector<std::vector<PhaseTransform>> velocity_transforms(const std::vector<std::vector<SpectrumGrid>>& spectra) {
  std::vector<std::vector<PhaseTransform>> v(spectra.size());
  for (std::size_t t = 1; t < spectra.size(); ++t) {
    if (spectra[t].size() != spectra[t - 1].size()) throw SizeError("velocity_transforms: object count changes");
    for (std::size_t o = 0; o < spectra[t].size(); ++o) v[t].push_back(phase_correlate(spectra[t - 1][o], spectra[t][o]));
  }
  return v;
}

inline std::vector<std::vector<SpectrumGrid>> channel_spectra(const std::vector<std::vector<Frame>>& channels,
                                                              std::size_t frames) {
  if (frames > channels.size()) throw SizeError("channel_spectra: not enough frames");
  std::vector<std::vector<SpectrumGrid>> out(frames);
  for (std::size_t t = 0; t < frames; ++t) {
    if (channels[t].size() != channels[0].size()) throw SizeError("channel_spectra: object count changes");
    for (const Frame& f : channels[t]) out[t].push_back(dft2(f));
  }
  return out;
}

// Motion of object o relative to candidate parent p, as vectors indexed by
// frame: v[t] (t >= 1), a[t] (t >= 2) and the change of acceleration da[t]
// (t >= 3). Undefined entries are zero.
struct PairKinematics {
  std::vector<TransformVec> v, a, da;
};

inline PairKinematics pair_kinematics(const std::vector<std::vector<PhaseTransform>>& vel, std::size_t o, Node p,
                                      std::size_t frames) {
  if (frames > vel.size()) throw SizeError("pair_kinematics: not enough frames");
  PairKinematics k{std::vector<TransformVec>(frames), std::vector<TransformVec>(frames), std::vector<TransformVec>(frames)};
  PhaseTransform rel_prev, acc_prev;
  for (std::size_t t = 1; t < frames; ++t) {
    PhaseTransform rel = p == kWorldNode ? relative_transform(vel[t][o], world)
                                         : relative_transform(vel[t][o], vel[t][object_of(p)]);
    k.v[t] = extract_vec(rel);
    if (t >= 2) {
      PhaseTransform acc = higher_order(rel_prev, rel);
      k.a[t] = extract_vec(acc);
      if (t >= 3) k.da[t] = extract_vec(higher_order(acc_prev, acc));
      acc_prev = std::move(acc);
    }
    rel_prev = std::move(rel);
  }
  return k;
}

// Everything the pipeline needs from the observed frames: relative
// kinematics against every candidate parent and the spectra of the last
// observed frame.
struct Observation {
  std::size_t num_objects = 0;
  std::size_t image_size = 0;
  std::size_t frames = 0;
  NodeMatrix<PairKinematics> pairs;
  std::vector<SpectrumGrid> last_spectra;
  std::vector<Frame> last_frames;
};

inline Observation observe(const std::vector<std::vector<Frame>>& channels, std::size_t frames) {
  if (frames < 4) throw RangeError("observe: at least 4 input frames are required");
  const auto spectra = channel_spectra(channels, frames);
  const auto vel = velocity_transforms(spectra);
  Observation obs;
  obs.num_objects = channels[0].size();
  obs.image_size = channels[0].empty() ? 0 : channels[0][0].size;
  obs.frames = frames;
  obs.pairs = NodeMatrix<PairKinematics>::for_objects(obs.num_objects);
  for (std::size_t o = 0; o < obs.num_objects; ++o) {
    for (Node p = 0; p <= obs.num_objects; ++p) {
      if (p != node_of(o)) obs.pairs(p, o) = pair_kinematics(vel, o, p, frames);
    }
  }
  obs.last_spectra = spectra[frames - 1];
  obs.last_frames = channels[frames - 1];
  return obs;
}

// ---------------------------------------------------------------------------
// Graph inference
// ---------------------------------------------------------------------------

// What each candidate parent is scored on.
//   residual: the predicted change of acceleration under that candidate's
//     motion primitive (linear for the world, circular for an object)
//     against the observed change.
//   constant-acceleration: v[t-1] + a[t-1] against the observed v[t].
//   motion-model: the motion model's next velocity against v[t].
enum class ScoringMode { kResidual, kConstantAcceleration, kMotionModel };

inline const char* to_string(ScoringMode m) {
  switch (m) {
    case ScoringMode::kResidual: return "residual";
    case ScoringMode::kConstantAcceleration: return "constant-acceleration";
    case ScoringMode::kMotionModel: return "motion-model";
  }
  return "?";
}

inline ScoringMode scoring_mode_from_string(const std::string& s) {
  if (s == "residual") return ScoringMode::kResidual;
  if (s == "constant-acceleration") return ScoringMode::kConstantAcceleration;
  if (s == "motion-model") return ScoringMode::kMotionModel;
  throw RangeError("unknown scoring mode '" + s + "'");
}

struct GraphEstimate {
  ObjectGraph graph;
  std::vector<ObjectGraph> trace;  // after every scoring step
  ParentAssignment parents;
};

// Scores every candidate at frames 3 .. frames-1 (the first frame with an
// observed change of acceleration onwards).
inline GraphEstimate infer_graph(const Observation& obs, double tau = kDefaultTemperature,
                                 ScoringMode mode = ScoringMode::kResidual, const GruParams* model = nullptr) {
  if (mode == ScoringMode::kMotionModel && model == nullptr) {
    throw ContractError("infer_graph: motion-model scoring needs a model");
  }
  const std::size_t n = obs.num_objects;
  GraphEstimate est{ObjectGraph(n, tau), {}, {}};
  NodeMatrix<std::vector<double>> hidden;
  if (model) hidden = NodeMatrix<std::vector<double>>::for_objects(n, std::vector<double>(model->hidden, 0.0));
  for (std::size_t t = 3; t < obs.frames; ++t) {
    auto pred = NodeMatrix<TransformVec>::for_objects(n);
    auto seen = NodeMatrix<TransformVec>::for_objects(n);
    for (std::size_t o = 0; o < n; ++o) {
      for (Node p = 0; p <= n; ++p) {
        if (p == node_of(o)) continue;
        const PairKinematics& k = obs.pairs(p, o);
        switch (mode) {
          case ScoringMode::kResidual:
            if (p == kWorldNode) {
              pred(p, o) = -k.a[t - 1];
            } else {
              const double w = estimate_omega(k.v[t - 2], k.v[t - 1]);
              pred(p, o) = -(w * w) * k.v[t - 1];
            }
            seen(p, o) = k.da[t];
            break;
          case ScoringMode::kConstantAcceleration:
            pred(p, o) = k.v[t - 1] + k.a[t - 1];
            seen(p, o) = k.v[t];
            break;
          case ScoringMode::kMotionModel: {
            auto& h = hidden(p, o);
            if (t >= 4) h = gru_step(*model, gru_input(k.v[t - 3], k.v[t - 2], k.a[t - 2]), h);
            const MotionState state{k.v[t - 2], k.v[t - 1], k.a[t - 1], h};
            pred(p, o) = predict_next(*model, state).v_next;
            seen(p, o) = k.v[t];
            break;
          }
        }
      }
    }
    est.graph = score_step(std::move(est.graph), pred, seen);
    est.trace.push_back(est.graph);
  }
  est.parents = hard_parents(est.graph);
  return est;
}

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

enum class GraphMode { kInferred, kOracle, kNone };

struct PredictOptions {
  std::size_t k_out = 10;
  GraphMode graph = GraphMode::kInferred;
  std::optional<ParentAssignment> oracle_parents;  // required for kOracle
  double tau = kDefaultTemperature;
  ScoringMode scoring = ScoringMode::kResidual;
};

struct PredictionRun {
  std::vector<std::vector<Frame>> inputs;    // [t][object]
  std::vector<Frame> composites;             // [step]
  std::vector<std::vector<Frame>> channels;  // [step][object]
  std::vector<ObjectGraph> graph_trace;
  ObjectGraph graph;
  ParentAssignment parents;
  std::vector<std::vector<ModeWeights>> mode_trace;  // [step][object]
};

// Motion state of object o under parent p at the end of the observation:
// hidden state warmed on the observed inputs, then the last observed
// velocities and acceleration.
inline MotionState initial_state(const GruParams& model, const PairKinematics& k, std::size_t frames) {
  std::vector<GruInput> warm;
  // Steps whose targets were observed; the next input is fed by predict_next.
  for (std::size_t t = 2; t + 2 <= frames; ++t) warm.push_back(gru_input(k.v[t - 1], k.v[t], k.a[t]));
  return {k.v[frames - 2], k.v[frames - 1], k.a[frames - 1], warm_hidden(model, warm)};
}

inline ParentAssignment choose_parents(const Observation& obs, const PredictOptions& opts, const GruParams& model,
                                       GraphEstimate* est) {
  if (opts.graph == GraphMode::kOracle) {
    if (!opts.oracle_parents || opts.oracle_parents->size() != obs.num_objects || !is_acyclic(*opts.oracle_parents)) {
      throw ContractError("oracle graph requested without a valid ground-truth parent assignment");
    }
  }
  if (opts.graph != GraphMode::kNone) *est = infer_graph(obs, opts.tau, opts.scoring, &model);
  if (opts.graph == GraphMode::kOracle) return *opts.oracle_parents;
  if (opts.graph == GraphMode::kNone) return ParentAssignment(obs.num_objects, kWorldNode);
  return est->parents;
}

// Rolls the motion model forward and synthesizes frames by applying global
// phase ramps to each object's last spectrum, step after step.
inline PredictionRun rollout(const Observation& obs, const ParentAssignment& parents, const GruParams& model,
                             std::size_t k_out) {
  const std::size_t n = obs.num_objects;
  const std::size_t size = obs.image_size;
  if (parents.size() != n || !is_acyclic(parents)) throw ContractError("rollout: parents must form a DAG over the objects");
  PredictionRun run;
  run.parents = parents;
  std::vector<MotionState> state;
  for (std::size_t o = 0; o < n; ++o) state.push_back(initial_state(model, obs.pairs(parents[o], o), obs.frames));
  std::vector<SpectrumGrid> spectra = obs.last_spectra;
  for (std::size_t step = 0; step < k_out; ++step) {
    std::vector<TransformVec> rel(n);
    std::vector<ModeWeights> modes(n);
    for (std::size_t o = 0; o < n; ++o) {
      Prediction p = predict_next(model, state[o]);
      rel[o] = p.v_next;
      modes[o] = p.weights;
      state[o] = std::move(p.state);
    }
    const auto global = relative_to_global(rel, parents);
    std::vector<Frame> frames;
    for (std::size_t o = 0; o < n; ++o) {
      const TransformVec g = wrap_to_torus(global[o], static_cast<double>(size));
      spectra[o] = apply_transform(spectra[o], ramp_from_vec(g, size));
      frames.push_back(idft2(spectra[o]));
    }
    run.composites.push_back(composite_of(frames, size));
    run.channels.push_back(std::move(frames));
    run.mode_trace.push_back(std::move(modes));
  }
  return run;
}

inline PredictionRun predict_observed(const Observation& obs, const GruParams& model, const PredictOptions& opts) {
  GraphEstimate est;
  const ParentAssignment parents = choose_parents(obs, opts, model, &est);
  PredictionRun run = rollout(obs, parents, model, opts.k_out);
  run.graph_trace = std::move(est.trace);
  run.graph = std::move(est.graph);
  return run;
}

// `inputs` holds the k_in observed frames, [t][object].
inline PredictionRun predict_sequence(const std::vector<std::vector<Frame>>& inputs, const GruParams& model,
                                      const PredictOptions& opts = {}) {
  if (inputs.size() < 4) throw RangeError("predict_sequence: at least 4 input frames are required");
  PredictionRun run = predict_observed(observe(inputs, inputs.size()), model, opts);
  run.inputs = inputs;
  return run;
}

// ---------------------------------------------------------------------------
// Training data
// ---------------------------------------------------------------------------

// Teacher-forced steps t = 2 .. frames-2 of one object under one parent.
inline Track make_track(const PairKinematics& k) {
  Track track;
  for (std::size_t t = 2; t + 1 < k.v.size(); ++t) track.push_back({k.v[t - 1], k.v[t], k.a[t], k.v[t + 1]});
  return track;
}

struct TrackOptions {
  GraphMode graph = GraphMode::kInferred;
  double tau = kDefaultTemperature;
  std::size_t threads = 1;
};

// One track per object of every listed sequence, relative to the parent the
// options select (inferred from the first k_in frames, ground truth, or the
// world). Tracks cover the full sequence.
inline std::vector<Track> extract_tracks(const SequenceSource& source, const std::vector<std::size_t>& indices,
                                         const TrackOptions& opts) {
  const std::size_t k_in = source.info().config.k_in;
  std::vector<std::vector<Track>> per_seq(indices.size());
  parallel_for(indices.size(), opts.threads, [&](std::size_t i) {
    const SequenceRecord rec = source.record(indices[i]);
    const std::size_t frames = rec.length();
    const std::size_t n = rec.scene.num_objects();
    const auto vel = velocity_transforms(channel_spectra(rec.frames, frames));
    ParentAssignment parents(n, kWorldNode);
    if (opts.graph == GraphMode::kOracle) {
      parents = rec.scene.parents;
    } else if (opts.graph == GraphMode::kInferred) {
      Observation obs;
      obs.num_objects = n;
      obs.frames = k_in;
      obs.pairs = NodeMatrix<PairKinematics>::for_objects(n);
      for (std::size_t o = 0; o < n; ++o) {
        for (Node p = 0; p <= n; ++p) {
          if (p != node_of(o)) obs.pairs(p, o) = pair_kinematics(vel, o, p, k_in);
        }
      }
      parents = infer_graph(obs, opts.tau).parents;
    }
    for (std::size_t o = 0; o < n; ++o) per_seq[i].push_back(make_track(pair_kinematics(vel, o, parents[o], frames)));
  });
  std::vector<Track> tracks;
  for (auto& seq : per_seq) {
    for (auto& t : seq) tracks.push_back(std::move(t));
  }
  return tracks;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

inline double mse(const Frame& pred, const Frame& gt) {
  if (pred.size != gt.size || pred.values.size() != gt.values.size()) {
    throw SizeError("mse: frame sizes differ (" + std::to_string(pred.size) + " vs " + std::to_string(gt.size) + ")");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < pred.values.size(); ++i) {
    const double d = pred.values[i] - gt.values[i];
    s += d * d;
  }
  return s / static_cast<double>(pred.values.size());
}

// Mean frame MSE over the first h predictions.
inline double horizon_mse(const std::vector<Frame>& pred, const std::vector<Frame>& gt, std::size_t h) {
  if (h == 0 || h > pred.size() || h > gt.size()) {
    throw RangeError("horizon_mse: horizon " + std::to_string(h) + " exceeds the available frames");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < h; ++i) s += mse(pred[i], gt[i]);
  return s / static_cast<double>(h);
}

// Share of spectral energy in bins with max(|kx|, |ky|) > N/4.
inline double high_band_ratio(const Frame& frame) {
  const SpectrumGrid s = dft2(frame);
  const std::size_t n = s.size;
  double high = 0.0;
  double total = 0.0;
  for (std::size_t ky = 0; ky < n; ++ky) {
    for (std::size_t kx = 0; kx < n; ++kx) {
      const double e = std::norm(s.at(ky, kx));
      total += e;
      const auto fy = static_cast<std::size_t>(std::abs(signed_frequency(ky, n)));
      const auto fx = static_cast<std::size_t>(std::abs(signed_frequency(kx, n)));
      if (std::max(fx, fy) > n / 4) high += e;
    }
  }
  return total > 0.0 ? high / total : 0.0;
}

inline double sample_mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Sample standard deviation; 0 for fewer than two values.
inline double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = sample_mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

inline std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

inline constexpr double kMseScale = 1e4;

struct HorizonStat {
  std::size_t horizon = 0;
  double mean = 0.0;  // MSE x 1e4
  double std = 0.0;
  std::vector<double> per_run;
};

struct DatasetEval {
  std::string id;
  std::size_t num_objects = 0;
  std::size_t test_size = 0;
  std::vector<HorizonStat> ours;
  std::vector<HorizonStat> nograph;
  double hard_parent_accuracy = 0.0;  // inferred graph vs ground truth
};

struct EvalReport {
  std::vector<DatasetEval> datasets;
  std::vector<std::size_t> horizons;
  std::size_t run_count = 0;
  std::size_t parameter_count = 0;
  std::string config_hash;
  std::string runs_vary;
};

struct EvalDataset {
  std::string id;
  SequenceSource source;
};

struct EvalOptions {
  std::vector<std::size_t> horizons{5, 10};
  std::size_t runs = 5;
  std::uint64_t seed = 0;
  TrainConfig train;
  double tau = kDefaultTemperature;
  ScoringMode scoring = ScoringMode::kResidual;
  bool oracle_graph = false;             // train on ground-truth graphs
  std::optional<GruParams> fixed_model;  // evaluate this instead of training
  std::size_t threads = 1;
  bool nograph = true;                   // also evaluate the ablation row
};

inline nlohmann::json eval_options_json(const EvalOptions& o) {
  return {{"horizons", o.horizons},
          {"runs", o.runs},
          {"seed", o.seed},
          {"hidden", o.train.hidden},
          {"lr", o.train.lr},
          {"batch", o.train.batch_size},
          {"epochs", o.train.epochs},
          {"tau", o.tau},
          {"scoring", to_string(o.scoring)},
          {"oracle_graph", o.oracle_graph},
          {"fixed_model", o.fixed_model ? fnv1a_hex(nlohmann::json(o.fixed_model->values).dump()) : std::string()},
          {"nograph", o.nograph}};
}

namespace detail {

struct CachedTest {
  Observation obs;
  std::vector<Frame> future;  // ground-truth composites after the input
  ParentAssignment truth;
  GraphEstimate graph;        // residual/constant-acceleration scoring only
};

inline HorizonStat summarize(std::size_t h, std::vector<double> per_run) {
  return {h, sample_mean(per_run), sample_std(per_run), std::move(per_run)};
}

}  // namespace detail

// Benchmark evaluation: for each run a model is trained (seed derived from
// the run index) on the training split, once with inferred graphs ("Ours")
// and once with every parent fixed to the world ("NoGraph"), then scored on
// the test split. With a fixed model every run evaluates that model.
inline EvalReport evaluate(const std::vector<EvalDataset>& datasets, const EvalOptions& opts) {
  if (datasets.empty()) throw ContractError("evaluate: no datasets");
  if (opts.runs == 0) throw RangeError("evaluate: run count must be positive");
  if (opts.horizons.empty()) throw RangeError("evaluate: no horizons");
  const std::size_t max_h = *std::max_element(opts.horizons.begin(), opts.horizons.end());

  EvalReport report;
  report.horizons = opts.horizons;
  report.run_count = opts.runs;
  report.parameter_count = opts.fixed_model ? opts.fixed_model->count() : GruParams::count_for(opts.train.hidden);
  report.runs_vary = opts.fixed_model ? "nothing (fixed checkpoint)" : "training seed (splits fixed)";

  nlohmann::json hash_doc = eval_options_json(opts);
  for (const auto& ds : datasets) {
    hash_doc["datasets"].push_back({{"config", config_to_json(ds.source.info().config)},
                                    {"seed", ds.source.info().seed},
                                    {"size", ds.source.size()}});
  }
  report.config_hash = fnv1a_hex(hash_doc.dump());

  for (const auto& ds : datasets) {
    const DatasetInfo& info = ds.source.info();
    const auto& test = info.splits.test;
    if (test.empty()) throw ContractError("evaluate: test split of '" + ds.id + "' is empty");
    for (std::size_t h : opts.horizons) {
      if (h == 0 || h > info.config.k_out) {
        throw RangeError("evaluate: horizon " + std::to_string(h) + " outside 1.." + std::to_string(info.config.k_out));
      }
    }
    if (info.splits.train.empty() && !opts.fixed_model) {
      throw ContractError("evaluate: training split of '" + ds.id + "' is empty");
    }

    const bool model_scoring = opts.scoring == ScoringMode::kMotionModel;
    std::vector<detail::CachedTest> cache(test.size());
    parallel_for(test.size(), opts.threads, [&](std::size_t i) {
      SequenceRecord rec = ds.source.record(test[i]);
      auto& c = cache[i];
      c.obs = observe(rec.frames, info.config.k_in);
      c.future.assign(rec.composite.begin() + static_cast<std::ptrdiff_t>(info.config.k_in), rec.composite.end());
      c.truth = rec.scene.parents;
      if (!model_scoring) c.graph = infer_graph(c.obs, opts.tau, opts.scoring);
    });

    std::vector<Track> ours_tracks, flat_tracks;
    if (!opts.fixed_model) {
      ours_tracks = extract_tracks(ds.source, info.splits.train,
                                   {opts.oracle_graph ? GraphMode::kOracle : GraphMode::kInferred, opts.tau, opts.threads});
      if (opts.nograph) flat_tracks = extract_tracks(ds.source, info.splits.train, {GraphMode::kNone, opts.tau, opts.threads});
    }

    DatasetEval out;
    out.id = ds.id;
    out.num_objects = info.config.num_objects;
    out.test_size = test.size();
    std::vector<std::vector<double>> ours_runs(opts.horizons.size()), flat_runs(opts.horizons.size());
    std::size_t correct = 0, total = 0;
    for (std::size_t run = 0; run < opts.runs; ++run) {
      TrainConfig tc = opts.train;
      tc.seed = derive_seed(opts.seed, run);
      const GruParams ours_model = opts.fixed_model ? *opts.fixed_model : train(init_params(tc.hidden, tc.seed), ours_tracks, tc).params;
      std::optional<GruParams> flat_model;
      if (opts.nograph) {
        flat_model = opts.fixed_model ? *opts.fixed_model : train(init_params(tc.hidden, tc.seed), flat_tracks, tc).params;
      }
      std::vector<std::vector<double>> ours_seq(test.size()), flat_seq(test.size());
      std::vector<ParentAssignment> inferred(test.size());
      parallel_for(test.size(), opts.threads, [&](std::size_t i) {
        const auto& c = cache[i];
        GraphEstimate est = model_scoring ? infer_graph(c.obs, opts.tau, opts.scoring, &ours_model) : c.graph;
        inferred[i] = est.parents;
        const PredictionRun pr = rollout(c.obs, est.parents, ours_model, max_h);
        for (std::size_t h : opts.horizons) ours_seq[i].push_back(horizon_mse(pr.composites, c.future, h));
        if (flat_model) {
          const PredictionRun fr = rollout(c.obs, ParentAssignment(c.obs.num_objects, kWorldNode), *flat_model, max_h);
          for (std::size_t h : opts.horizons) flat_seq[i].push_back(horizon_mse(fr.composites, c.future, h));
        }
      });
      for (std::size_t hi = 0; hi < opts.horizons.size(); ++hi) {
        double so = 0.0, sf = 0.0;
        for (std::size_t i = 0; i < test.size(); ++i) {
          so += ours_seq[i][hi];
          if (flat_model) sf += flat_seq[i][hi];
        }
        ours_runs[hi].push_back(kMseScale * so / static_cast<double>(test.size()));
        if (flat_model) flat_runs[hi].push_back(kMseScale * sf / static_cast<double>(test.size()));
      }
      for (std::size_t i = 0; i < test.size(); ++i) {
        for (std::size_t o = 0; o < inferred[i].size(); ++o) {
          correct += inferred[i][o] == cache[i].truth[o];
          ++total;
        }
      }
    }
    for (std::size_t hi = 0; hi < opts.horizons.size(); ++hi) {
      out.ours.push_back(detail::summarize(opts.horizons[hi], ours_runs[hi]));
      if (opts.nograph) out.nograph.push_back(detail::summarize(opts.horizons[hi], flat_runs[hi]));
    }
    out.hard_parent_accuracy = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
    report.datasets.push_back(std::move(out));
  }
  return report;
}

inline nlohmann::json report_to_json(const EvalReport& r) {
  auto stats = [](const std::vector<HorizonStat>& v) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& s : v) j.push_back({{"horizon", s.horizon}, {"mean", s.mean}, {"std", s.std}, {"per_run", s.per_run}});
    return j;
  };
  nlohmann::json ds = nlohmann::json::array();
  for (const auto& d : r.datasets) {
    ds.push_back({{"id", d.id},
                  {"num_objects", d.num_objects},
                  {"test_size", d.test_size},
                  {"hard_parent_accuracy", d.hard_parent_accuracy},
                  {"ours", stats(d.ours)},
                  {"nograph", stats(d.nograph)}});
  }
  return {{"format", "fml-eval"},
          {"version", 1},
          {"metric", "composite MSE x 1e4"},
          {"horizons", r.horizons},
          {"run_count", r.run_count},
          {"runs_vary", r.runs_vary},
          {"parameter_count", r.parameter_count},
          {"config_hash", r.config_hash},
          {"datasets", ds}};
}

// Rows Ours / Ours (NoGraph); one column per dataset and horizon, then the
// parameter count.
inline std::string report_to_table(const EvalReport& r) {
  std::vector<std::string> header{"Method"};
  for (const auto& d : r.datasets) {
    for (std::size_t h : r.horizons) header.push_back(std::to_string(d.num_objects) + " obj, " + std::to_string(h) + " steps");
  }
  header.push_back("# parameters");
  auto cell = [](const std::vector<HorizonStat>& v, std::size_t i) {
    if (i >= v.size()) return std::string("-");
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3f +- %.3f", v[i].mean, v[i].std);
    return std::string(buf);
  };
  char params[32];
  std::snprintf(params, sizeof params, "%.1fK (%zu)", static_cast<double>(r.parameter_count) / 1000.0, r.parameter_count);
  std::vector<std::vector<std::string>> rows{header};
  for (int which = 0; which < 2; ++which) {
    std::vector<std::string> row{which == 0 ? "Ours" : "Ours (NoGraph)"};
    for (const auto& d : r.datasets) {
      for (std::size_t i = 0; i < r.horizons.size(); ++i) row.push_back(cell(which == 0 ? d.ours : d.nograph, i));
    }
    row.push_back(params);
    rows.push_back(std::move(row));
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  std::ostringstream out;
  out << "MSE x 1e4 on composite frames, mean +- std over " << r.run_count << " run(s); runs vary "
      << r.runs_vary << "; config " << r.config_hash << "\n";
  for (std::size_t ri = 0; ri < rows.size(); ++ri) {
    for (std::size_t c = 0; c < rows[ri].size(); ++c) {
      out << (c ? "  " : "") << rows[ri][c] << std::string(width[c] - rows[ri][c].size(), ' ');
    }
    out << "\n";
    if (ri == 0) {
      std::size_t total = 0;
      for (std::size_t w : width) total += w + 2;
      out << std::string(total - 2, '-') << "\n";
    }
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

inline std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline void write_pgm(const Frame& frame, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + file.string());
  out << "P5\n" << frame.size << ' ' << frame.size << "\n255\n";
  std::vector<char> body(frame.values.size());
  for (std::size_t i = 0; i < body.size(); ++i) body[i] = static_cast<char>(quantize(frame.values[i]));
  out.write(body.data(), static_cast<std::streamsize>(body.size()));
  if (!out) throw IoError("write failed for " + file.string());
}

// Reads a square 8-bit P5 image back as values in [0, 1].
inline Frame read_pgm(const std::filesystem::path& file) {
  if (!std::filesystem::exists(file)) throw MissingFileError("missing image " + file.string());
  std::ifstream in(file, std::ios::binary);
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (!in || magic != "P5" || maxval != 255 || w != h) throw CorruptHeaderError("not a square 8-bit P5 image: " + file.string());
  in.get();
  std::vector<char> body(w * h);
  in.read(body.data(), static_cast<std::streamsize>(body.size()));
  if (in.gcount() != static_cast<std::streamsize>(body.size())) throw SizeMismatchError("truncated image " + file.string());
  std::vector<double> values(body.size());
  for (std::size_t i = 0; i < body.size(); ++i) values[i] = static_cast<unsigned char>(body[i]) / 255.0;
  return Frame(w, std::move(values));
}

// Writes input and predicted frames (composite and per channel), the graph
// trace and an index listing the images in temporal order.
inline void export_frames(const PredictionRun& run, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
  std::vector<std::string> index;
  auto name = [](const char* kind, std::size_t t, std::optional<std::size_t> obj) {
    char buf[64];
    if (obj) {
      std::snprintf(buf, sizeof buf, "%s_%03zu_obj%zu.pgm", kind, t, *obj);
    } else {
      std::snprintf(buf, sizeof buf, "%s_%03zu.pgm", kind, t);
    }
    return std::string(buf);
  };
  auto emit = [&](const char* kind, std::size_t t, const std::vector<Frame>& channels, const Frame* composite) {
    std::string line = kind;
    line += ' ' + std::to_string(t);
    if (composite) {
      const std::string f = name(kind, t, std::nullopt);
      write_pgm(*composite, dir / f);
      line += ' ' + f;
    }
    for (std::size_t o = 0; o < channels.size(); ++o) {
      const std::string f = name(kind, t, o);
      write_pgm(channels[o], dir / f);
      line += ' ' + f;
    }
    index.push_back(line);
  };
  for (std::size_t t = 0; t < run.inputs.size(); ++t) {
    const Frame composite = composite_of(run.inputs[t], run.inputs[t].empty() ? 0 : run.inputs[t][0].size);
    emit("input", t, run.inputs[t], &composite);
  }
  for (std::size_t t = 0; t < run.composites.size(); ++t) emit("pred", t, run.channels[t], &run.composites[t]);

  nlohmann::json graph;
  graph["parents"] = run.parents;
  graph["trace"] = nlohmann::json::array();
  for (const auto& g : run.graph_trace) graph["trace"].push_back(graph_to_json(g));
  if (!run.graph_trace.empty()) graph["final"] = graph_to_json(run.graph, run.parents);
  std::ofstream gout(dir / "graph.json");
  gout << graph.dump(2) << "\n";
  std::ofstream iout(dir / "montage.txt");
  iout << "# kind step composite channels...\n";
  for (const auto& line : index) iout << line << "\n";
  if (!gout || !iout) throw IoError("write failed in " + dir.string());
}

}  // namespace fml
