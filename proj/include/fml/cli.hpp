#pragma once

// Command-line front end: gen | train | predict | eval | export.
// Exit status 0 on success, 1 on usage errors, 2 on runtime errors.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fml/error.hpp"
#include "fml/harness.hpp"
#include "fml/motion.hpp"
#include "fml/scenegen.hpp"

namespace fml::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

struct RunConfig {
  std::string command;
  std::vector<std::string> data;
  std::string out;
  std::string model;
  std::uint64_t seed = 0;
  std::size_t objects = 3;
  std::size_t sequences = 0;  // 0: command default
  std::size_t image_size = 64;
  std::size_t k_in = 8;
  std::size_t k_out = 10;
  std::size_t hidden = kDefaultHidden;
  double lr = 0.01;
  std::size_t batch = 32;
  std::size_t epochs = 1;
  double tau = kDefaultTemperature;
  std::size_t runs = 5;
  std::vector<std::size_t> horizons{5, 10};
  std::string scoring = "residual";
  bool no_graph = false;
  bool oracle_graph = false;
  bool deterministic = false;
  std::size_t threads = 0;  // 0: FML_THREADS or all cores
};

namespace detail {

inline void write_json(const nlohmann::json& j, const std::filesystem::path& file) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw IoError("cannot write " + file.string());
  out << j.dump(2) << "\n";
  if (!out) throw IoError("write failed for " + file.string());
}

inline std::size_t threads_of(const RunConfig& c) { return c.threads ? c.threads : default_threads(); }

inline std::string model_path(const RunConfig& c) {
  if (!c.model.empty()) return c.model;
  return (std::filesystem::path(c.data.at(0)) / "model.ckpt").string();
}

inline GraphMode graph_mode(const RunConfig& c) {
  if (c.no_graph) return GraphMode::kNone;
  if (c.oracle_graph) return GraphMode::kOracle;
  return GraphMode::kInferred;
}

inline void require_one_dataset(const RunConfig& c) {
  if (c.data.size() != 1) throw CLI::ValidationError("--data", "exactly one dataset directory is required");
}

inline int cmd_gen(const RunConfig& c, std::ostream& log) {
  SceneConfig sc;
  sc.image_size = c.image_size;
  sc.num_objects = c.objects;
  sc.k_in = c.k_in;
  sc.k_out = c.k_out;
  const std::size_t count = c.sequences ? c.sequences : 10000;
  const DatasetInfo info = plan_dataset(sc, count, c.seed);
  const std::filesystem::path dir(c.out);
  write_manifest(info, dir);
  parallel_for(count, threads_of(c), [&](std::size_t i) {
    write_sequence_file(render_sequence(info.scenes[i], sc.frames()), dir / sequence_file_name(i));
  });
  log << "gen: wrote " << count << " sequences to " << dir.string() << " (train " << info.splits.train.size()
      << ", val " << info.splits.val.size() << ", test " << info.splits.test.size() << ")\n";
  return kExitOk;
}

inline int cmd_train(const RunConfig& c, std::ostream& log) {
  require_one_dataset(c);
  const SequenceSource source = SequenceSource::open(c.data[0]);
  const auto& train_idx = source.info().splits.train;
  const auto tracks = extract_tracks(source, train_idx, {graph_mode(c), c.tau, threads_of(c)});
  TrainConfig tc;
  tc.hidden = c.hidden;
  tc.lr = c.lr;
  tc.batch_size = c.batch;
  tc.epochs = c.epochs;
  tc.seed = c.seed;
  const TrainResult result = train(init_params(tc.hidden, tc.seed), tracks, tc);
  const std::string path = model_path(c);
  save_checkpoint(result.params, path);
  if (!c.out.empty()) {
    write_json({{"checkpoint", path},
                {"parameter_count", result.params.count()},
                {"tracks", tracks.size()},
                {"loss_curve", result.loss_curve}},
               std::filesystem::path(c.out) / "train_log.json");
  }
  log << "train: " << tracks.size() << " tracks, " << result.loss_curve.size() << " steps, final loss "
      << (result.loss_curve.empty() ? 0.0 : result.loss_curve.back()) << ", " << result.params.count()
      << " parameters -> " << path << "\n";
  return kExitOk;
}

inline PredictOptions predict_options(const RunConfig& c, std::size_t k_out) {
  PredictOptions po;
  po.k_out = k_out;
  po.graph = graph_mode(c);
  po.tau = c.tau;
  po.scoring = scoring_mode_from_string(c.scoring);
  return po;
}

// First `--sequences` test sequences (default 1).
inline std::vector<std::size_t> chosen_tests(const RunConfig& c, const SequenceSource& source) {
  const auto& test = source.info().splits.test;
  if (test.empty()) throw ContractError("dataset has an empty test split");
  const std::size_t count = std::min(c.sequences ? c.sequences : 1, test.size());
  return {test.begin(), test.begin() + static_cast<std::ptrdiff_t>(count)};
}

inline int cmd_predict(const RunConfig& c, bool export_images, std::ostream& log) {
  require_one_dataset(c);
  if (c.out.empty()) throw CLI::ValidationError("--out", "an output directory is required");
  const SequenceSource source = SequenceSource::open(c.data[0]);
  const GruParams model = load_checkpoint(model_path(c));
  const auto& cfg = source.info().config;
  const auto picked = chosen_tests(c, source);
  const std::filesystem::path dir(c.out);
  std::vector<nlohmann::json> docs(picked.size());
  parallel_for(picked.size(), threads_of(c), [&](std::size_t i) {
    const SequenceRecord rec = source.record(picked[i]);
    PredictOptions po = predict_options(c, cfg.k_out);
    po.oracle_parents = rec.scene.parents;
    const std::vector<std::vector<Frame>> inputs(rec.frames.begin(), rec.frames.begin() + static_cast<std::ptrdiff_t>(cfg.k_in));
    const PredictionRun run = predict_sequence(inputs, model, po);
    nlohmann::json d;
    d["sequence"] = picked[i];
    d["parents"] = run.parents;
    d["true_parents"] = rec.scene.parents;
    std::vector<double> step_mse;
    for (std::size_t s = 0; s < run.composites.size(); ++s) step_mse.push_back(mse(run.composites[s], rec.composite[cfg.k_in + s]));
    d["mse_per_step"] = step_mse;
    nlohmann::json modes = nlohmann::json::array();
    for (const auto& step : run.mode_trace) {
      nlohmann::json row = nlohmann::json::array();
      for (const auto& m : step) row.push_back({m.linear, m.circular});
      modes.push_back(row);
    }
    d["mode_weights"] = modes;
    if (!run.graph_trace.empty()) d["graph"] = graph_to_json(run.graph, run.parents);
    if (export_images) export_frames(run, dir / ("seq_" + std::to_string(picked[i])));
    docs[i] = std::move(d);
  });
  write_json({{"predictions", docs}}, dir / "predictions.json");
  log << (export_images ? "export: " : "predict: ") << picked.size() << " sequence(s) -> " << dir.string() << "\n";
  return kExitOk;
}

inline int cmd_eval(const RunConfig& c, std::ostream& out, std::ostream& log) {
  if (c.data.empty()) throw CLI::ValidationError("--data", "at least one dataset directory is required");
  std::vector<EvalDataset> datasets;
  for (const auto& d : c.data) datasets.push_back({std::filesystem::path(d).filename().string(), SequenceSource::open(d)});
  EvalOptions eo;
  eo.horizons = c.horizons;
  eo.runs = c.runs;
  eo.seed = c.seed;
  eo.train.hidden = c.hidden;
  eo.train.lr = c.lr;
  eo.train.batch_size = c.batch;
  eo.train.epochs = c.epochs;
  eo.tau = c.tau;
  eo.scoring = scoring_mode_from_string(c.scoring);
  eo.oracle_graph = c.oracle_graph;
  eo.threads = threads_of(c);
  if (!c.model.empty()) eo.fixed_model = load_checkpoint(c.model);
  const EvalReport report = evaluate(datasets, eo);
  const std::filesystem::path dir(c.out.empty() ? "." : c.out);
  write_json(report_to_json(report), dir / "report.json");
  const std::string table = report_to_table(report);
  std::ofstream tout(dir / "report.txt", std::ios::trunc);
  tout << table;
  if (!tout) throw IoError("write failed for " + (dir / "report.txt").string());
  out << table;
  log << "eval: report written to " << (dir / "report.json").string() << "\n";
  return kExitOk;
}

}  // namespace detail

// Parses argv and runs the chosen command. Results go to files; the eval
// table is echoed to `out`; diagnostics go to `err`.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  RunConfig c;
  CLI::App app{"Fourier-domain video prediction with relational object motion"};
  app.set_config("--config", "", "Config file (TOML/INI); command-line flags take precedence");
  app.require_subcommand(1);

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--seed", c.seed, "Random seed")->capture_default_str();
    sub->add_option("--threads", c.threads, "Worker threads (default: FML_THREADS, else all cores)");
    sub->add_flag("--deterministic", c.deterministic, "Ordered reductions (always on; accepted for scripts)");
  };
  auto add_model_shape = [&](CLI::App* sub) {
    sub->add_option("--hidden", c.hidden, "GRU hidden size")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("--lr", c.lr, "Adam learning rate")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("--batch", c.batch, "Tracks per batch")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("--epochs", c.epochs, "Training epochs")->capture_default_str()->check(CLI::PositiveNumber);
  };
  auto add_graph = [&](CLI::App* sub) {
    sub->add_option("--tau", c.tau, "Graph softmax temperature")->capture_default_str()->check(CLI::PositiveNumber);
    auto* ng = sub->add_flag("--no-graph", c.no_graph, "Fix every parent to the world");
    auto* og = sub->add_flag("--oracle-graph", c.oracle_graph, "Use ground-truth parents instead of inferred ones");
    ng->excludes(og);
    sub->add_option("--scoring", c.scoring, "Graph scoring: residual | constant-acceleration | motion-model")
        ->capture_default_str()
        ->check(CLI::IsMember({"residual", "constant-acceleration", "motion-model"}));
  };

  auto* gen = app.add_subcommand("gen", "Generate a dataset");
  gen->add_option("--out", c.out, "Dataset directory")->required();
  gen->add_option("--objects", c.objects, "Objects per scene")->capture_default_str()->check(CLI::IsMember({2, 3}));
  gen->add_option("--sequences", c.sequences, "Number of sequences (default 10000)")->check(CLI::PositiveNumber);
  gen->add_option("--image-size", c.image_size, "Frame size N (power of two)")->capture_default_str()->check(CLI::PositiveNumber);
  gen->add_option("--k-in", c.k_in, "Observed frames")->capture_default_str()->check(CLI::Range(4, 1 << 20));
  gen->add_option("--k-out", c.k_out, "Predicted frames")->capture_default_str()->check(CLI::PositiveNumber);
  add_common(gen);

  auto* tr = app.add_subcommand("train", "Train the motion model on the training split");
  tr->add_option("--data", c.data, "Dataset directory")->required();
  tr->add_option("--model", c.model, "Checkpoint to write (default <data>/model.ckpt)");
  tr->add_option("--out", c.out, "Directory for the training log");
  add_model_shape(tr);
  add_graph(tr);
  add_common(tr);

  auto* pr = app.add_subcommand("predict", "Predict test sequences and write per-step errors");
  auto* ex = app.add_subcommand("export", "Predict test sequences and export frames as PGM");
  for (auto* sub : {pr, ex}) {
    sub->add_option("--data", c.data, "Dataset directory")->required();
    sub->add_option("--model", c.model, "Checkpoint (default <data>/model.ckpt)");
    sub->add_option("--out", c.out, "Output directory")->required();
    sub->add_option("--sequences", c.sequences, "Number of test sequences (default 1)")->check(CLI::PositiveNumber);
    add_graph(sub);
    add_common(sub);
  }

  auto* ev = app.add_subcommand("eval", "Ours vs NoGraph MSE report over several runs");
  ev->add_option("--data", c.data, "Dataset directory (repeat for several)")->required();
  ev->add_option("--model", c.model, "Evaluate this checkpoint instead of training per run");
  ev->add_option("--out", c.out, "Report directory (default .)");
  ev->add_option("--runs", c.runs, "Number of runs")->capture_default_str()->check(CLI::PositiveNumber);
  ev->add_option("--horizons", c.horizons, "Prediction horizons")->delimiter(',')->capture_default_str();
  add_model_shape(ev);
  add_graph(ev);
  add_common(ev);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    const CLI::App* target = &app;
    for (const auto* sub : app.get_subcommands()) target = sub;
    out << target->help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    const CLI::App* target = &app;
    for (const auto* sub : app.get_subcommands()) target = sub;
    err << "error: " << e.what() << "\n\n" << target->help();
    return kExitUsage;
  }

  try {
    if (gen->parsed()) return detail::cmd_gen(c, err);
    if (tr->parsed()) return detail::cmd_train(c, err);
    if (pr->parsed()) return detail::cmd_predict(c, false, err);
    if (ex->parsed()) return detail::cmd_predict(c, true, err);
    if (ev->parsed()) {
      if (c.no_graph) err << "eval: --no-graph ignored; the report always contains the NoGraph row\n";
      return detail::cmd_eval(c, out, err);
    }
  } catch (const CLI::ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace fml::cli
