#pragma once

// Hierarchical "solar system" scenes: roots drift with constant velocity,
// children orbit their parent on exact circles. Every object is rendered to
// its own channel as a wrapped Gaussian blob on an N x N torus.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fml/error.hpp"
#include "fml/nodes.hpp"
#include "fml/rng.hpp"
#include "fml/spectral.hpp"
#include "fml/transform_vec.hpp"

namespace fml {

struct SceneConfig {
  std::size_t image_size = 64;
  std::size_t num_objects = 3;
  std::size_t k_in = 8;
  std::size_t k_out = 10;
  std::size_t max_depth = 2;
  double radius_min = 8.0;
  double radius_max = 16.0;
  double omega_min = 0.1;
  double omega_max = 0.4;
  double root_speed_min = 0.0;
  double root_speed_max = 1.0;
  double sigma_min = 1.5;
  double sigma_max = 2.5;
  double amplitude_min = 1.0;
  double amplitude_max = 1.0;

  std::size_t frames() const { return k_in + k_out; }

  // Largest per-step displacement any sampled object can reach.
  double displacement_bound() const {
    return root_speed_max + static_cast<double>(max_depth) * 2.0 * radius_max * std::sin(std::min(omega_max, std::numbers::pi) / 2.0);
  }

  void validate() const {
    auto range = [](double lo, double hi, const char* name, double floor) {
      if (!(lo <= hi) || !(lo >= floor) || !std::isfinite(hi)) {
        throw RangeError(std::string("scene config: invalid range for ") + name + " [" + std::to_string(lo) + ", " +
                         std::to_string(hi) + "]");
      }
    };
    if (!is_power_of_two(image_size)) throw RangeError("scene config: image size must be a power of two");
    if (num_objects == 0) throw RangeError("scene config: need at least one object");
    if (k_in < 4) throw RangeError("scene config: at least 4 input frames are required");
    if (k_out == 0) throw RangeError("scene config: k_out must be positive");
    range(radius_min, radius_max, "orbit radius", 0.0);
    range(omega_min, omega_max, "angular velocity", 0.0);
    range(root_speed_min, root_speed_max, "root speed", 0.0);
    range(sigma_min, sigma_max, "blob sigma", 1e-3);
    range(amplitude_min, amplitude_max, "amplitude", 0.0);
    if (displacement_bound() >= static_cast<double>(image_size) / 4.0) {
      throw RangeError("scene config: per-step displacement bound " + std::to_string(displacement_bound()) +
                       " px is not below N/4 = " + std::to_string(image_size / 4));
    }
  }
};

struct ObjectSpec {
  double px = 0.0;  // initial position, pixels (x = column)
  double py = 0.0;
  double radius = 0.0;  // orbit radius around the parent; 0 for roots
  double theta0 = 0.0;  // initial orbit angle, radians
  double omega = 0.0;   // orbit angular velocity, radians/step; 0 for roots
  TransformVec root_velocity;  // pixels/step; zero for children
  double sigma = 2.0;
  double amplitude = 1.0;
};

struct SceneSpec {
  std::size_t image_size = 64;
  ParentAssignment parents;
  std::vector<ObjectSpec> objects;

  std::size_t num_objects() const { return objects.size(); }
};

// T x n channels plus the clamped composite of each time step.
struct SequenceRecord {
  SceneSpec scene;
  std::vector<std::vector<Frame>> frames;  // [t][object]
  std::vector<Frame> composite;            // [t]

  std::size_t length() const { return frames.size(); }
};

// Roots are placed first, then each child picks a previously placed object
// whose depth allows one more level. Object indices are shuffled at the end
// so index order carries no information about the hierarchy.
inline SceneSpec sample_scene(std::uint64_t seed, const SceneConfig& config) {
  config.validate();
  Rng rng(seed);
  const std::size_t n = config.num_objects;
  const double size = static_cast<double>(config.image_size);
  const std::size_t num_roots = 1 + uniform_index(rng, n);

  ParentAssignment placed_parent(n, kWorldNode);  // in placement order
  std::vector<std::size_t> depth(n, 0);
  std::vector<ObjectSpec> placed(n);
  for (std::size_t i = 0; i < n; ++i) {
    ObjectSpec& obj = placed[i];
    if (i < num_roots) {
      obj.px = uniform(rng, 0.0, size);
      obj.py = uniform(rng, 0.0, size);
      const double speed = uniform(rng, config.root_speed_min, config.root_speed_max);
      const double heading = uniform(rng, 0.0, 2.0 * std::numbers::pi);
      obj.root_velocity = {speed * std::cos(heading), speed * std::sin(heading)};
    } else {
      std::vector<std::size_t> eligible;
      for (std::size_t j = 0; j < i; ++j) {
        if (depth[j] < config.max_depth) eligible.push_back(j);
      }
      // max_depth == 0 leaves nothing to attach to; fall back to a root.
      if (eligible.empty()) {
        obj.px = uniform(rng, 0.0, size);
        obj.py = uniform(rng, 0.0, size);
      } else {
        const std::size_t parent = eligible[uniform_index(rng, eligible.size())];
        placed_parent[i] = node_of(parent);
        depth[i] = depth[parent] + 1;
        obj.radius = uniform(rng, config.radius_min, config.radius_max);
        obj.theta0 = uniform(rng, 0.0, 2.0 * std::numbers::pi);
        const double speed = uniform(rng, config.omega_min, config.omega_max);
        obj.omega = uniform01(rng) < 0.5 ? -speed : speed;
        obj.px = std::fmod(placed[parent].px + obj.radius * std::cos(obj.theta0), size);
        obj.py = std::fmod(placed[parent].py + obj.radius * std::sin(obj.theta0), size);
        if (obj.px < 0) obj.px += size;
        if (obj.py < 0) obj.py += size;
      }
    }
    obj.sigma = uniform(rng, config.sigma_min, config.sigma_max);
    obj.amplitude = uniform(rng, config.amplitude_min, config.amplitude_max);
  }

  std::vector<std::size_t> slot(n);  // placement index -> stored index
  for (std::size_t i = 0; i < n; ++i) slot[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(slot[i - 1], slot[uniform_index(rng, i)]);

  SceneSpec spec;
  spec.image_size = config.image_size;
  spec.objects.resize(n);
  spec.parents.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    spec.objects[slot[i]] = placed[i];
    spec.parents[slot[i]] = placed_parent[i] == kWorldNode ? kWorldNode : node_of(slot[object_of(placed_parent[i])]);
  }
  return spec;
}

namespace detail {

inline double wrap_coordinate(double c, double size) {
  double w = std::fmod(c, size);
  if (w < 0) w += size;
  return w;
}

inline std::vector<std::size_t> checked_order(const SceneSpec& spec) {
  if (spec.parents.size() != spec.objects.size()) throw ContractError("scene: parents/objects length mismatch");
  auto order = topological_order(spec.parents);
  if (!order) throw ContractError("scene: parent assignment is not a DAG");
  return *order;
}

}  // namespace detail

// Positions before wrapping onto the torus, [t][object].
inline std::vector<std::vector<TransformVec>> simulate_unwrapped(const SceneSpec& spec, std::size_t frames) {
  const auto order = detail::checked_order(spec);
  std::vector<std::vector<TransformVec>> pos(frames, std::vector<TransformVec>(spec.num_objects()));
  for (std::size_t t = 0; t < frames; ++t) {
    const double time = static_cast<double>(t);
    for (std::size_t o : order) {
      const ObjectSpec& obj = spec.objects[o];
      if (spec.parents[o] == kWorldNode) {
        pos[t][o] = TransformVec{obj.px, obj.py} + time * obj.root_velocity;
      } else {
        // Anchor the orbit on the parent's unwrapped initial position so the
        // child stays on the same sheet of the torus as its parent.
        const double angle = obj.theta0 + obj.omega * time;
        pos[t][o] = pos[t][object_of(spec.parents[o])] + TransformVec{obj.radius * std::cos(angle), obj.radius * std::sin(angle)};
      }
    }
  }
  return pos;
}

inline std::vector<std::vector<TransformVec>> simulate_positions(const SceneSpec& spec, std::size_t frames) {
  auto pos = simulate_unwrapped(spec, frames);
  const double size = static_cast<double>(spec.image_size);
  for (auto& row : pos) {
    for (auto& p : row) p = {detail::wrap_coordinate(p.x, size), detail::wrap_coordinate(p.y, size)};
  }
  return pos;
}

inline double max_step_displacement(const SceneSpec& spec, std::size_t frames) {
  const auto pos = simulate_unwrapped(spec, frames);
  double worst = 0.0;
  for (std::size_t t = 1; t < frames; ++t) {
    for (std::size_t o = 0; o < spec.num_objects(); ++o) {
      const TransformVec d = pos[t][o] - pos[t - 1][o];
      worst = std::max({worst, std::abs(d.x), std::abs(d.y)});
    }
  }
  return worst;
}

// amplitude * exp(-d^2 / (2 sigma^2)) with d the toroidal distance. Values
// are rounded to float so records survive the 32-bit dataset format exactly.
inline Frame render_blob(std::size_t n, const TransformVec& center, double sigma, double amplitude) {
  const double size = static_cast<double>(n);
  auto profile = [&](double c) {
    std::vector<double> g(n);
    for (std::size_t i = 0; i < n; ++i) {
      double d = std::abs(static_cast<double>(i) - detail::wrap_coordinate(c, size));
      d = std::min(d, size - d);
      g[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    }
    return g;
  };
  const auto gx = profile(center.x);
  const auto gy = profile(center.y);
  Frame f(n);
  for (std::size_t row = 0; row < n; ++row) {
    for (std::size_t col = 0; col < n; ++col) {
      f.at(row, col) = static_cast<double>(static_cast<float>(amplitude * gy[row] * gx[col]));
    }
  }
  return f;
}

inline Frame composite_of(const std::vector<Frame>& channels, std::size_t n) {
  Frame out(n);
  for (const Frame& c : channels) {
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += c.values[i];
  }
  for (double& v : out.values) v = std::clamp(v, 0.0, 1.0);
  return out;
}

inline SequenceRecord render_sequence(const SceneSpec& spec, std::size_t frames) {
  const auto pos = simulate_positions(spec, frames);
  SequenceRecord rec;
  rec.scene = spec;
  rec.frames.resize(frames);
  rec.composite.reserve(frames);
  for (std::size_t t = 0; t < frames; ++t) {
    rec.frames[t].reserve(spec.num_objects());
    for (std::size_t o = 0; o < spec.num_objects(); ++o) {
      const ObjectSpec& obj = spec.objects[o];
      rec.frames[t].push_back(render_blob(spec.image_size, pos[t][o], obj.sigma, obj.amplitude));
    }
    rec.composite.push_back(composite_of(rec.frames[t], spec.image_size));
  }
  return rec;
}

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------

inline constexpr char kSequenceMagic[] = "FMLSEQ1\n";
inline constexpr std::size_t kSequenceMagicSize = sizeof(kSequenceMagic) - 1;
inline constexpr int kManifestVersion = 1;

struct DatasetSplits {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

struct DatasetInfo {
  SceneConfig config;
  std::uint64_t seed = 0;
  std::vector<SceneSpec> scenes;  // one per sequence, by sequence index
  DatasetSplits splits;

  std::size_t size() const { return scenes.size(); }
};

// Random 70/10/20 partition of [0, count), fixed by the dataset seed.
inline DatasetSplits make_splits(std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = i;
  Rng rng(derive_seed(seed, 0x5b1175ULL));
  for (std::size_t i = count; i > 1; --i) std::swap(idx[i - 1], idx[uniform_index(rng, i)]);
  const auto n_train = static_cast<std::size_t>(std::llround(0.7 * static_cast<double>(count)));
  const auto n_val = static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(count)));
  DatasetSplits s;
  s.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), idx.end());
  return s;
}

inline std::uint64_t sequence_seed(std::uint64_t dataset_seed, std::size_t index) {
  return derive_seed(dataset_seed, index);
}

// Scene specs and splits for a dataset, without rendering anything.
inline DatasetInfo plan_dataset(const SceneConfig& config, std::size_t count, std::uint64_t seed) {
  config.validate();
  DatasetInfo info;
  info.config = config;
  info.seed = seed;
  info.scenes.reserve(count);
  for (std::size_t i = 0; i < count; ++i) info.scenes.push_back(sample_scene(sequence_seed(seed, i), config));
  info.splits = make_splits(count, seed);
  return info;
}

inline std::string sequence_file_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "seq_%06zu.bin", index);
  return buf;
}

inline nlohmann::json scene_to_json(const SceneSpec& s) {
  nlohmann::json objects = nlohmann::json::array();
  for (const ObjectSpec& o : s.objects) {
    objects.push_back({{"px", o.px},
                       {"py", o.py},
                       {"radius", o.radius},
                       {"theta0", o.theta0},
                       {"omega", o.omega},
                       {"root_velocity", {o.root_velocity.x, o.root_velocity.y}},
                       {"sigma", o.sigma},
                       {"amplitude", o.amplitude}});
  }
  return {{"parents", s.parents}, {"objects", objects}};
}

inline SceneSpec scene_from_json(const nlohmann::json& j, std::size_t image_size) {
  SceneSpec s;
  s.image_size = image_size;
  s.parents = j.at("parents").get<ParentAssignment>();
  for (const auto& o : j.at("objects")) {
    ObjectSpec obj;
    obj.px = o.at("px").get<double>();
    obj.py = o.at("py").get<double>();
    obj.radius = o.at("radius").get<double>();
    obj.theta0 = o.at("theta0").get<double>();
    obj.omega = o.at("omega").get<double>();
    obj.root_velocity = {o.at("root_velocity").at(0).get<double>(), o.at("root_velocity").at(1).get<double>()};
    obj.sigma = o.at("sigma").get<double>();
    obj.amplitude = o.at("amplitude").get<double>();
    s.objects.push_back(obj);
  }
  if (s.parents.size() != s.objects.size() || !is_acyclic(s.parents)) {
    throw CorruptHeaderError("manifest: scene has an invalid parent assignment");
  }
  return s;
}

inline nlohmann::json config_to_json(const SceneConfig& c) {
  return {{"image_size", c.image_size},   {"num_objects", c.num_objects},
          {"k_in", c.k_in},               {"k_out", c.k_out},
          {"max_depth", c.max_depth},     {"radius", {c.radius_min, c.radius_max}},
          {"omega", {c.omega_min, c.omega_max}}, {"root_speed", {c.root_speed_min, c.root_speed_max}},
          {"sigma", {c.sigma_min, c.sigma_max}}, {"amplitude", {c.amplitude_min, c.amplitude_max}}};
}

inline SceneConfig config_from_json(const nlohmann::json& j) {
  SceneConfig c;
  c.image_size = j.at("image_size").get<std::size_t>();
  c.num_objects = j.at("num_objects").get<std::size_t>();
  c.k_in = j.at("k_in").get<std::size_t>();
  c.k_out = j.at("k_out").get<std::size_t>();
  c.max_depth = j.at("max_depth").get<std::size_t>();
  auto pair = [&](const char* key, double& lo, double& hi) {
    lo = j.at(key).at(0).get<double>();
    hi = j.at(key).at(1).get<double>();
  };
  pair("radius", c.radius_min, c.radius_max);
  pair("omega", c.omega_min, c.omega_max);
  pair("root_speed", c.root_speed_min, c.root_speed_max);
  pair("sigma", c.sigma_min, c.sigma_max);
  pair("amplitude", c.amplitude_min, c.amplitude_max);
  return c;
}

inline nlohmann::json manifest_to_json(const DatasetInfo& info) {
  nlohmann::json seqs = nlohmann::json::array();
  for (std::size_t i = 0; i < info.size(); ++i) {
    nlohmann::json s = scene_to_json(info.scenes[i]);
    s["index"] = i;
    s["file"] = sequence_file_name(i);
    seqs.push_back(std::move(s));
  }
  const std::size_t n_train = info.splits.train.size();
  const std::size_t n_val = info.splits.val.size();
  return {{"format", "fml-dataset"},
          {"version", kManifestVersion},
          {"image_size", info.config.image_size},
          {"frames", info.config.frames()},
          {"k_in", info.config.k_in},
          {"k_out", info.config.k_out},
          {"num_objects", info.config.num_objects},
          {"seed", info.seed},
          {"num_sequences", info.size()},
          {"config", config_to_json(info.config)},
          {"split_boundaries", {n_train, n_train + n_val, info.size()}},
          {"splits", {{"train", info.splits.train}, {"val", info.splits.val}, {"test", info.splits.test}}},
          {"sequences", seqs}};
}

inline DatasetInfo manifest_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "fml-dataset" || j.value("version", 0) != kManifestVersion) {
    throw CorruptHeaderError("manifest: unknown format or version");
  }
  DatasetInfo info;
  info.config = config_from_json(j.at("config"));
  info.seed = j.at("seed").get<std::uint64_t>();
  const auto count = j.at("num_sequences").get<std::size_t>();
  const auto& seqs = j.at("sequences");
  if (seqs.size() != count) throw CorruptHeaderError("manifest: sequence count does not match num_sequences");
  for (const auto& s : seqs) info.scenes.push_back(scene_from_json(s, info.config.image_size));
  const auto& splits = j.at("splits");
  info.splits.train = splits.at("train").get<std::vector<std::size_t>>();
  info.splits.val = splits.at("val").get<std::vector<std::size_t>>();
  info.splits.test = splits.at("test").get<std::vector<std::size_t>>();
  for (const auto* part : {&info.splits.train, &info.splits.val, &info.splits.test}) {
    for (std::size_t i : *part) {
      if (i >= count) throw CorruptHeaderError("manifest: split refers to sequence " + std::to_string(i));
    }
  }
  return info;
}

inline void write_sequence_file(const SequenceRecord& rec, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + file.string() + " for writing");
  out.write(kSequenceMagic, kSequenceMagicSize);
  std::vector<char> buf;
  for (const auto& step : rec.frames) {
    for (const Frame& f : step) {
      buf.resize(f.values.size() * 4);
      for (std::size_t i = 0; i < f.values.size(); ++i) {
        const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(f.values[i]));
        for (int b = 0; b < 4; ++b) buf[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xffu);
      }
      out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    }
  }
  if (!out) throw IoError("write failed for " + file.string());
}

inline SequenceRecord read_sequence_file(const std::filesystem::path& file, const SceneSpec& scene, std::size_t frames) {
  if (!std::filesystem::exists(file)) throw MissingFileError("missing sequence file " + file.string());
  std::ifstream in(file, std::ios::binary);
  if (!in) throw MissingFileError("cannot open sequence file " + file.string());
  char magic[kSequenceMagicSize];
  in.read(magic, kSequenceMagicSize);
  if (in.gcount() != static_cast<std::streamsize>(kSequenceMagicSize) ||
      !std::equal(magic, magic + kSequenceMagicSize, kSequenceMagic)) {
    throw CorruptHeaderError("bad header in " + file.string());
  }
  const std::size_t n = scene.image_size;
  const std::size_t pixels = n * n;
  const std::uintmax_t expected = kSequenceMagicSize + frames * scene.num_objects() * pixels * 4;
  const std::uintmax_t actual = std::filesystem::file_size(file);
  if (actual != expected) {
    throw SizeMismatchError("size mismatch in " + file.string() + ": expected " + std::to_string(expected) +
                            " bytes, found " + std::to_string(actual));
  }
  SequenceRecord rec;
  rec.scene = scene;
  rec.frames.resize(frames);
  std::vector<unsigned char> buf(pixels * 4);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t o = 0; o < scene.num_objects(); ++o) {
      in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
      if (!in) throw SizeMismatchError("size mismatch in " + file.string() + ": truncated frame data");
      std::vector<double> values(pixels);
      for (std::size_t i = 0; i < pixels; ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(buf[i * 4 + b]) << (8 * b);
        values[i] = static_cast<double>(std::bit_cast<float>(bits));
      }
      rec.frames[t].emplace_back(n, std::move(values));
    }
    rec.composite.push_back(composite_of(rec.frames[t], n));
  }
  return rec;
}

inline void write_manifest(const DatasetInfo& info, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / "manifest", std::ios::trunc);
  if (!out) throw IoError("cannot write manifest in " + dir.string());
  out << manifest_to_json(info).dump(2) << '\n';
}

inline DatasetInfo read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest";
  if (!std::filesystem::exists(path)) throw MissingFileError("missing dataset manifest " + path.string());
  std::ifstream in(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
    return manifest_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptHeaderError("corrupt manifest " + path.string() + ": " + e.what());
  }
}

// Writes the manifest and one file per record. `info.scenes` must line up
// with `records`.
inline void write_dataset(const DatasetInfo& info, const std::vector<SequenceRecord>& records,
                          const std::filesystem::path& dir) {
  if (records.size() != info.size()) throw ContractError("write_dataset: record count differs from manifest");
  write_manifest(info, dir);
  for (std::size_t i = 0; i < records.size(); ++i) write_sequence_file(records[i], dir / sequence_file_name(i));
}

struct Dataset {
  DatasetInfo info;
  std::vector<SequenceRecord> records;
};

inline Dataset read_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.info = read_manifest(dir);
  ds.records.reserve(ds.info.size());
  for (std::size_t i = 0; i < ds.info.size(); ++i) {
    ds.records.push_back(read_sequence_file(dir / sequence_file_name(i), ds.info.scenes[i], ds.info.config.frames()));
  }
  return ds;
}

// Per-sequence access without holding the whole dataset in memory. Backed by
// a dataset directory, or by re-rendering the planned scenes when no
// directory is given (the two agree exactly).
class SequenceSource {
 public:
  explicit SequenceSource(DatasetInfo info, std::optional<std::filesystem::path> dir = std::nullopt)
      : info_(std::move(info)), dir_(std::move(dir)) {}

  static SequenceSource open(const std::filesystem::path& dir) { return SequenceSource(read_manifest(dir), dir); }

  const DatasetInfo& info() const { return info_; }
  std::size_t size() const { return info_.size(); }

  SequenceRecord record(std::size_t index) const {
    if (index >= info_.size()) throw RangeError("sequence index " + std::to_string(index) + " out of range");
    if (dir_) return read_sequence_file(*dir_ / sequence_file_name(index), info_.scenes[index], info_.config.frames());
    return render_sequence(info_.scenes[index], info_.config.frames());
  }

 private:
  DatasetInfo info_;
  std::optional<std::filesystem::path> dir_;
};

}  // namespace fml
