#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "fml/harness.hpp"
#include "test_util.hpp"

using namespace fml;
using fml::testing::circular_centroid;
using fml::testing::circular_shift;
using fml::testing::forced_mode_params;
using fml::testing::torus_delta;

namespace fs = std::filesystem;

namespace {

SceneSpec roots_only(std::vector<TransformVec> starts, std::vector<TransformVec> velocities, std::size_t n = 64) {
  SceneSpec s;
  s.image_size = n;
  for (std::size_t i = 0; i < starts.size(); ++i) {
    ObjectSpec o;
    o.px = starts[i].x;
    o.py = starts[i].y;
    o.root_velocity = velocities[i];
    s.objects.push_back(o);
    s.parents.push_back(kWorldNode);
  }
  return s;
}

std::vector<std::vector<Frame>> first_frames(const SequenceRecord& rec, std::size_t k) {
  return {rec.frames.begin(), rec.frames.begin() + static_cast<std::ptrdiff_t>(k)};
}

PredictOptions options(GraphMode mode, std::size_t k_out = 10) {
  PredictOptions o;
  o.k_out = k_out;
  o.graph = mode;
  return o;
}

SceneConfig desk_config(std::size_t objects) {
  SceneConfig c;
  c.num_objects = objects;
  return c;
}

fs::path temp_dir(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / ("fml_harness_" + tag);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(PredictSequence, StaticObjectsRepeatLastFrame) {
  const SequenceRecord rec = render_sequence(roots_only({{12.3, 40.1}, {50, 20.6}}, {{0, 0}, {0, 0}}), 8);
  const PredictionRun run = predict_sequence(rec.frames, init_params(kDefaultHidden, 3), options(GraphMode::kInferred));
  ASSERT_EQ(run.composites.size(), 10u);
  for (const Frame& f : run.composites) EXPECT_LT(mse(f, rec.composite.back()), 1e-10);
}

TEST(PredictSequence, IntegerVelocityRootGivesCircularShifts) {
  const SequenceRecord rec = render_sequence(roots_only({{20.4, 33.3}}, {{2, 0}}), 8);
  const PredictionRun run = predict_sequence(rec.frames, init_params(kDefaultHidden, 4), options(GraphMode::kInferred));
  for (std::size_t s = 0; s < run.composites.size(); ++s) {
    const Frame want = circular_shift(rec.composite.back(), 2 * static_cast<long>(s + 1), 0);
    EXPECT_LT(mse(run.composites[s], want), 1e-8) << "step " << s;
  }
}

TEST(PredictSequence, StarPlanetOrbitTracked) {
  SceneSpec s = roots_only({{20, 30}}, {{0.6, -0.3}});
  ObjectSpec planet;
  planet.radius = 12.0;
  planet.theta0 = 0.7;
  planet.omega = 0.25;
  s.objects.push_back(planet);
  s.parents.push_back(node_of(0));
  const std::size_t k_in = 8, k_out = 10;
  const SequenceRecord rec = render_sequence(s, k_in + k_out);
  const auto truth = simulate_positions(s, k_in + k_out);

  const PredictionRun run =
      predict_sequence(first_frames(rec, k_in), forced_mode_params(kDefaultHidden, 1), options(GraphMode::kInferred, k_out));
  EXPECT_EQ(run.parents[1], node_of(0));
  EXPECT_EQ(run.parents[0], kWorldNode);
  for (std::size_t step = 0; step < k_out; ++step) {
    for (std::size_t o = 0; o < 2; ++o) {
      const TransformVec d = torus_delta(circular_centroid(run.channels[step][o]), truth[k_in + step][o], 64.0);
      EXPECT_LT(norm(d), 1.0) << "step " << step << " object " << o;
    }
  }
}

TEST(PredictSequence, OracleGraphNeedsParents) {
  const SequenceRecord rec = render_sequence(roots_only({{10, 10}}, {{1, 0}}), 6);
  EXPECT_THROW(predict_sequence(rec.frames, init_params(8, 1), options(GraphMode::kOracle)), ContractError);
  PredictOptions o = options(GraphMode::kOracle, 2);
  o.oracle_parents = ParentAssignment{kWorldNode};
  EXPECT_EQ(predict_sequence(rec.frames, init_params(8, 1), o).composites.size(), 2u);
}

TEST(PredictSequence, TooFewInputFrames) {
  const SequenceRecord rec = render_sequence(roots_only({{10, 10}}, {{1, 0}}), 3);
  EXPECT_THROW(predict_sequence(rec.frames, init_params(8, 1), options(GraphMode::kNone)), RangeError);
}

TEST(Mse, Examples) {
  const Frame zeros(8);
  const Frame ones(8, std::vector<double>(64, 1.0));
  Frame offset = fml::testing::random_frame(8, 1);
  Frame base = offset;
  for (double& v : offset.values) v += 0.01;
  EXPECT_EQ(mse(base, base), 0.0);
  EXPECT_EQ(mse(ones, zeros), 1.0);
  EXPECT_NEAR(mse(offset, base), 1e-4, 1e-15);
  EXPECT_NEAR(kMseScale * mse(offset, base), 1.0, 1e-10);
  EXPECT_THROW(mse(Frame(4), Frame(8)), SizeError);
}

TEST(Mse, HorizonAveragesFirstFrames) {
  const std::vector<Frame> gt(3, Frame(4));
  std::vector<Frame> pred{Frame(4, std::vector<double>(16, 1.0)), Frame(4), Frame(4, std::vector<double>(16, 0.5))};
  EXPECT_EQ(horizon_mse(pred, gt, 1), 1.0);
  EXPECT_EQ(horizon_mse(pred, gt, 2), 0.5);
  EXPECT_NEAR(horizon_mse(pred, gt, 3), 1.25 / 3.0, 1e-15);
}

TEST(Stats, SampleMeanAndStd) {
  EXPECT_EQ(sample_mean({1, 2, 3, 4}), 2.5);
  EXPECT_NEAR(sample_std({1, 2, 3, 4}), std::sqrt(5.0 / 3.0), 1e-15);
  EXPECT_EQ(sample_std({7}), 0.0);
  EXPECT_EQ(fnv1a_hex(""), "cbf29ce484222325");
  EXPECT_EQ(fnv1a_hex("a"), "af63dc4c8601ec8c");
}

TEST(Pgm, ZeroFrameBody) {
  const fs::path dir = temp_dir("pgm_zero");
  fs::create_directories(dir);
  write_pgm(Frame(16), dir / "z.pgm");
  std::ifstream in(dir / "z.pgm", std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(in)), {});
  const std::string header = "P5\n16 16\n255\n";
  ASSERT_EQ(bytes.size(), header.size() + 256);
  EXPECT_EQ(bytes.substr(0, header.size()), header);
  for (std::size_t i = header.size(); i < bytes.size(); ++i) ASSERT_EQ(bytes[i], '\0');
  fs::remove_all(dir);
}

TEST(Pgm, QuantizeAndRoundtrip) {
  EXPECT_EQ(quantize(1.0), 255);
  EXPECT_EQ(quantize(0.0), 0);
  EXPECT_EQ(quantize(1.7), 255);
  EXPECT_EQ(quantize(-0.2), 0);
  EXPECT_EQ(quantize(0.5), 128);

  const fs::path dir = temp_dir("pgm_roundtrip");
  fs::create_directories(dir);
  Frame f = fml::testing::random_frame(8, 9);
  f.values[0] = 1.0;
  f.values[1] = -3.0;
  write_pgm(f, dir / "r.pgm");
  const Frame back = read_pgm(dir / "r.pgm");
  for (std::size_t i = 0; i < f.values.size(); ++i) EXPECT_EQ(back.values[i], quantize(f.values[i]) / 255.0);
  EXPECT_EQ(back.values[0], 1.0);
  fs::remove_all(dir);
}

TEST(Export, WritesFramesGraphAndIndex) {
  const SceneSpec s = sample_scene(5, desk_config(3));
  const SequenceRecord rec = render_sequence(s, 8);
  const PredictionRun run = predict_sequence(rec.frames, init_params(16, 2), options(GraphMode::kInferred, 3));
  const fs::path dir = temp_dir("export");
  export_frames(run, dir);
  EXPECT_TRUE(fs::exists(dir / "input_000.pgm"));
  EXPECT_TRUE(fs::exists(dir / "input_007_obj2.pgm"));
  EXPECT_TRUE(fs::exists(dir / "pred_002.pgm"));
  EXPECT_TRUE(fs::exists(dir / "pred_002_obj0.pgm"));
  EXPECT_FALSE(fs::exists(dir / "pred_003.pgm"));

  std::ifstream g(dir / "graph.json");
  const auto doc = nlohmann::json::parse(g);
  EXPECT_EQ(doc.at("trace").size(), run.graph_trace.size());
  EXPECT_EQ(doc.at("parents").get<ParentAssignment>(), run.parents);

  std::ifstream idx(dir / "montage.txt");
  std::vector<std::string> lines;
  for (std::string line; std::getline(idx, line);) {
    if (!line.empty() && line[0] != '#') lines.push_back(line);
  }
  ASSERT_EQ(lines.size(), 11u);
  EXPECT_EQ(lines.front().rfind("input 0 ", 0), 0u);
  EXPECT_EQ(lines.back().rfind("pred 2 ", 0), 0u);

  const Frame back = read_pgm(dir / "pred_001.pgm");
  for (std::size_t i = 0; i < back.values.size(); ++i) ASSERT_EQ(back.values[i], quantize(run.composites[1].values[i]) / 255.0);
  fs::remove_all(dir);
}

TEST(Export, UnwritableDirectory) {
  const fs::path base = temp_dir("blocked");
  fs::create_directories(base);
  std::ofstream(base / "file") << "x";
  PredictionRun run;
  EXPECT_THROW(export_frames(run, base / "file" / "sub"), IoError);
  fs::remove_all(base);
}

TEST(ParallelFor, RunsEveryIndexAndRethrows) {
  std::vector<int> hit(100, 0);
  parallel_for(100, 4, [&](std::size_t i) { hit[i] += 1; });
  for (int h : hit) EXPECT_EQ(h, 1);
  EXPECT_THROW(parallel_for(10, 3, [](std::size_t i) { if (i == 7) throw RangeError("boom"); }), RangeError);
}

TEST(Evaluate, DeterministicWithParameterCount) {
  SceneConfig c = desk_config(2);
  const SequenceSource src(plan_dataset(c, 30, 13));
  EvalOptions o;
  o.runs = 2;
  o.seed = 5;
  o.train.hidden = kDefaultHidden;
  const EvalReport a = evaluate({{"two", src}}, o);
  o.threads = 3;
  const EvalReport b = evaluate({{"two", src}}, o);
  EXPECT_EQ(report_to_json(a).dump(), report_to_json(b).dump());
  EXPECT_EQ(a.parameter_count, 13762u);
  EXPECT_EQ(a.run_count, 2u);
  ASSERT_EQ(a.datasets.size(), 1u);
  ASSERT_EQ(a.datasets[0].ours.size(), 2u);
  EXPECT_EQ(a.datasets[0].ours[0].per_run.size(), 2u);
  EXPECT_EQ(a.datasets[0].test_size, 6u);
  const std::string table = report_to_table(a);
  EXPECT_NE(table.find("Ours (NoGraph)"), std::string::npos);
  EXPECT_NE(table.find("13.8K (13762)"), std::string::npos);
}

TEST(Evaluate, FixedModelRunsAgree) {
  const SequenceSource src(plan_dataset(desk_config(3), 20, 21));
  EvalOptions o;
  o.runs = 3;
  o.fixed_model = init_params(kDefaultHidden, 8);
  const EvalReport r = evaluate({{"three", src}}, o);
  for (const auto& h : r.datasets[0].ours) EXPECT_EQ(h.std, 0.0);
  EXPECT_EQ(r.runs_vary, "nothing (fixed checkpoint)");
}

TEST(Evaluate, RejectsBadInputs) {
  const SequenceSource src(plan_dataset(desk_config(2), 10, 1));
  EvalOptions o;
  o.horizons = {11};
  EXPECT_THROW(evaluate({{"x", src}}, o), RangeError);
  o.horizons = {5};
  o.runs = 0;
  EXPECT_THROW(evaluate({{"x", src}}, o), RangeError);
  EXPECT_THROW(evaluate({}, EvalOptions{}), ContractError);
}

// Properties.

TEST(HarnessProperties, NoGraphObjectsAreIndependent) {
  const SequenceRecord rec = render_sequence(sample_scene(31, desk_config(3)), 8);
  std::vector<std::vector<Frame>> alone;
  for (const auto& step : rec.frames) alone.push_back({step[1]});
  const GruParams model = init_params(kDefaultHidden, 6);
  const PredictionRun a = predict_sequence(rec.frames, model, options(GraphMode::kNone));
  const PredictionRun b = predict_sequence(alone, model, options(GraphMode::kNone));
  for (std::size_t s = 0; s < a.channels.size(); ++s) EXPECT_EQ(a.channels[s][1].values, b.channels[s][0].values);
}

TEST(HarnessProperties, TranslationEquivariance) {
  const GruParams model = init_params(kDefaultHidden, 7);
  for (std::uint64_t seed : {40u, 41u, 42u}) {
    const SequenceRecord rec = render_sequence(sample_scene(seed, desk_config(3)), 8);
    auto shifted = rec.frames;
    for (auto& step : shifted) {
      for (Frame& f : step) f = circular_shift(f, 5, -9);
    }
    const PredictionRun a = predict_sequence(rec.frames, model, options(GraphMode::kInferred));
    const PredictionRun b = predict_sequence(shifted, model, options(GraphMode::kInferred));
    EXPECT_EQ(a.parents, b.parents);
    for (std::size_t s = 0; s < a.composites.size(); ++s) {
      EXPECT_LT(mse(circular_shift(a.composites[s], 5, -9), b.composites[s]), 1e-6) << "seed " << seed << " step " << s;
    }
  }
}

TEST(HarnessProperties, TraceColumnsAreDistributions) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const SequenceRecord rec = render_sequence(sample_scene(seed, desk_config(3)), 8);
    const PredictionRun run = predict_sequence(rec.frames, init_params(16, seed), options(GraphMode::kInferred, 1));
    ASSERT_EQ(run.graph_trace.size(), 5u);
    for (const ObjectGraph& g : run.graph_trace) {
      for (std::size_t o = 0; o < 3; ++o) {
        double total = 0.0;
        for (Node p = 0; p < 4; ++p) {
          EXPECT_GE(g.soft(p, o), 0.0);
          total += g.soft(p, o);
        }
        EXPECT_EQ(g.soft(node_of(o), o), 0.0);
        EXPECT_NEAR(total, 1.0, 1e-12);
      }
    }
  }
}

TEST(HarnessProperties, ShortHorizonErrorIsLower) {
  const SceneConfig c = desk_config(3);
  const DatasetInfo info = plan_dataset(c, 200, 77);
  const GruParams model = init_params(kDefaultHidden, 5);
  std::vector<double> h5(200), h10(200);
  parallel_for(200, default_threads(), [&](std::size_t i) {
    const SequenceRecord rec = render_sequence(info.scenes[i], c.frames());
    const PredictionRun run = predict_sequence(first_frames(rec, c.k_in), model, options(GraphMode::kInferred, c.k_out));
    const std::vector<Frame> future(rec.composite.begin() + static_cast<std::ptrdiff_t>(c.k_in), rec.composite.end());
    h5[i] = horizon_mse(run.composites, future, 5);
    h10[i] = horizon_mse(run.composites, future, 10);
  });
  EXPECT_LE(sample_mean(h5), sample_mean(h10));
}

TEST(HarnessProperties, CorrectLinkProbabilityRises) {
  const SceneConfig c = desk_config(3);
  double first = 0.0, last = 0.0;
  std::size_t links = 0;
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    const SequenceRecord rec = render_sequence(sample_scene(seed, c), c.k_in);
    const Observation obs = observe(rec.frames, c.k_in);
    const GraphEstimate est = infer_graph(obs);
    for (std::size_t o = 0; o < 3; ++o) {
      const Node p = rec.scene.parents[o];
      if (p == kWorldNode) continue;
      first += est.trace.front().soft(p, o);
      last += est.trace.back().soft(p, o);
      ++links;
    }
  }
  ASSERT_GT(links, 10u);
  EXPECT_GT(last / static_cast<double>(links), first / static_cast<double>(links));
}

TEST(HarnessProperties, PredictionsKeepSpectralSharpness) {
  const GruParams model = init_params(kDefaultHidden, 9);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const SequenceRecord rec = render_sequence(sample_scene(seed, desk_config(3)), 8);
    const PredictionRun run = predict_sequence(rec.frames, model, options(GraphMode::kInferred));
    for (std::size_t o = 0; o < 3; ++o) {
      const double ref = high_band_ratio(rec.frames.back()[o]);
      for (const auto& step : run.channels) EXPECT_LT(std::abs(high_band_ratio(step[o]) - ref), 0.01 * ref + 1e-15);
    }
  }
}
