// calibformer: synth / render / train / eval / ablate / latency.
//
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <atomic>
#include <chrono>
#include <csignal>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "calibformer/dataset.hpp"
#include "calibformer/overlay.hpp"
#include "calibformer/trainer.hpp"

#ifndef CALIBFORMER_VERSION
#define CALIBFORMER_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace calibformer;

namespace {

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop.store(true); }

struct Globals {
  std::uint64_t seed = 0;
  std::string config;
  bool verbose = false;
  std::vector<std::string> argv;
};

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Written once, before the command does its work.
void write_run_manifest(const fs::path& dir, const std::string& command, const Globals& g, const json& config,
                        const json& outputs) {
  fs::create_directories(dir);
  const fs::path file = dir / "run_manifest.json";
  const json m = {{"command", command},
                  {"argv", g.argv},
                  {"config", config},
                  {"config_hash", config_hash(config)},
                  {"seed", g.seed},
                  {"started_at", utc_now()},
                  {"version", CALIBFORMER_VERSION},
                  {"outputs", outputs}};
  std::ofstream out(file);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + file.string());
  out << m.dump(2) << '\n';
}

json read_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open config " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kMalformedFile, path + ": " + e.what());
  }
}

// Training options shared by train and ablate. Unset flags leave the config
// file (or built-in default) value in place.
struct TrainFlags {
  std::string dataset, val_dataset, out, network;
  std::optional<double> lr, deviation_t, deviation_r;
  std::optional<int> epochs, batch_size, max_samples;
  std::optional<long> max_steps;
  bool fixed_deviation = false;

  void add(CLI::App* app) {
    app->add_option("--dataset", dataset, "training dataset directory or manifest");
    app->add_option("--val-dataset", val_dataset, "validation dataset (defaults to the training set)");
    app->add_option("--out", out, "output directory for checkpoints and logs")->required();
    app->add_option("--network", network, "network preset: desk or full");
    app->add_option("--lr", lr, "learning rate");
    app->add_option("--epochs", epochs, "epoch count");
    app->add_option("--batch-size", batch_size, "samples per optimizer step");
    app->add_option("--max-steps", max_steps, "stop after this many optimizer steps (0: no cap)");
    app->add_option("--max-samples", max_samples, "use only the first N frames");
    app->add_option("--deviation-t", deviation_t, "max translation deviation per axis (m)");
    app->add_option("--deviation-r", deviation_r, "max rotation deviation per axis (deg)");
    app->add_flag("--fixed-deviation", fixed_deviation, "draw one deviation per frame instead of one per epoch");
  }

  TrainConfig resolve(const Globals& g, bool seed_given) const {
    TrainConfig c;
    c.network = NetworkConfig::desk();
    from_json(read_config_file(g.config), c);
    if (!network.empty()) c.network = network_preset(network);
    if (!dataset.empty()) c.train_manifest = dataset;
    if (!val_dataset.empty()) c.val_manifest = val_dataset;
    c.checkpoint_dir = out;
    if (lr) c.lr = *lr;
    if (epochs) c.epochs = *epochs;
    if (batch_size) c.batch_size = *batch_size;
    if (max_steps) c.max_steps = *max_steps;
    if (max_samples) c.max_samples = *max_samples;
    if (deviation_t) c.deviation.max_translation = *deviation_t;
    if (deviation_r) c.deviation.max_rotation_deg = *deviation_r;
    if (fixed_deviation) c.fresh_deviation = false;
    if (seed_given) c.seed = g.seed;
    if (c.train_manifest.empty()) throw Error(ErrorCode::kUsage, "--dataset is required (or train_manifest in --config)");
    c.validate();
    return c;
  }
};

TrainHooks progress_hooks(const Globals& g) {
  TrainHooks h;
  h.stop = &g_stop;
  if (g.verbose) {
    h.on_step = [](const StepRecord& r) {
      std::cerr << "step " << r.step << " epoch " << r.epoch << " loss " << r.loss.total << " (t "
                << r.loss.translation << ", r " << r.loss.rotation << ", p " << r.loss.pointcloud << ")\n";
    };
  }
  return h;
}

std::size_t resolve_frame(const DatasetManifest& m, const std::string& frame) {
  for (std::size_t i = 0; i < m.frames.size(); ++i) {
    if (m.frames[i].id == frame) return i;
  }
  std::size_t pos = 0;
  long idx = -1;
  try {
    idx = std::stol(frame, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != frame.size() || idx < 0 || static_cast<std::size_t>(idx) >= m.frames.size()) {
    throw Error(ErrorCode::kUsage, "frame '" + frame + "' not found (dataset has " + std::to_string(m.frames.size()) +
                                       " frames)");
  }
  return static_cast<std::size_t>(idx);
}

int run(int argc, char** argv) {
  CLI::App app{"LiDAR-camera extrinsic calibration network"};
  app.require_subcommand(1);
  Globals g;
  g.argv.assign(argv, argv + argc);
  auto* seed_opt = app.add_option("--seed", g.seed, "random seed")->default_val(0);
  app.add_option("--config", g.config, "JSON config file (training schema)");
  app.add_flag("-v,--verbose", g.verbose, "progress output on stderr");
  app.set_version_flag("--version", CALIBFORMER_VERSION);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  std::string synth_out;
  int n_scenes = 8, n_points = 20000;
  double synth_dt = 0.5, synth_dr = 5.0;
  std::array<int, 2> synth_res{512, 256};
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--n-scenes", n_scenes, "scene count")->check(CLI::NonNegativeNumber);
  synth->add_option("--n-points", n_points, "points per scene")->check(CLI::PositiveNumber);
  synth->add_option("--deviation-t", synth_dt, "recorded max translation deviation (m)");
  synth->add_option("--deviation-r", synth_dr, "recorded max rotation deviation (deg)");
  synth->add_option("--resolution", synth_res, "recorded target resolution W H");

  // render
  auto* render = app.add_subcommand("render", "write point-cloud overlays for one frame");
  std::string render_dataset, render_frame = "0", render_out, render_ckpt;
  double render_dt = 0.5, render_dr = 5.0;
  render->add_option("--dataset", render_dataset, "dataset directory or manifest")->required();
  render->add_option("--frame", render_frame, "frame id or index");
  render->add_option("--deviation-t", render_dt, "max translation deviation per axis (m)");
  render->add_option("--deviation-r", render_dr, "max rotation deviation per axis (deg)");
  render->add_option("--checkpoint", render_ckpt, "also render the network's correction");
  render->add_option("--out", render_out, "output directory")->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "train a model");
  TrainFlags train_flags;
  train_flags.add(train_cmd);

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string eval_ckpt, eval_dataset, eval_log, eval_predictor = "network", eval_out;
  std::optional<double> eval_dt, eval_dr;
  int eval_max = 0;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file");
  eval->add_option("--dataset", eval_dataset, "dataset directory or manifest")->required();
  eval->add_option("--predictor", eval_predictor, "network, oracle or identity")
      ->check(CLI::IsMember({"network", "oracle", "identity"}));
  eval->add_option("--deviation-t", eval_dt, "override the manifest translation range (m)");
  eval->add_option("--deviation-r", eval_dr, "override the manifest rotation range (deg)");
  eval->add_option("--max-samples", eval_max, "evaluate only the first N frames");
  eval->add_option("--log", eval_log, "append a metrics record to this JSONL file");
  eval->add_option("--out", eval_out, "directory for the run manifest");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "train and evaluate an ablation variant");
  TrainFlags ablate_flags;
  std::string variant;
  ablate_flags.add(ablate);
  ablate->add_option("--variant", variant, "variant name or 'all'")->required();

  // latency
  auto* latency = app.add_subcommand("latency", "measure forward-pass latency");
  std::string lat_ckpt, lat_network;
  int warmup = 3, runs = 20;
  latency->add_option("--checkpoint", lat_ckpt, "checkpoint file (default: untrained network)");
  latency->add_option("--network", lat_network, "preset when no checkpoint is given")->default_val("desk");
  latency->add_option("--warmup", warmup, "untimed warm-up runs")->check(CLI::NonNegativeNumber);
  latency->add_option("--runs", runs, "timed runs")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  const bool seed_given = seed_opt->count() > 0;

  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);

  if (*synth) {
    const fs::path out(synth_out);
    const DeviationRange range{synth_dt, synth_dr};
    if (!range.is_valid()) throw Error(ErrorCode::kUsage, "deviation bounds must be nonnegative");
    SynthConfig sc;
    const json file = read_config_file(g.config);
    if (file.contains("synth")) from_json(file.at("synth"), sc);
    PreprocessConfig pp;
    pp.target = {synth_res[0], synth_res[1]};
    write_run_manifest(out, "synth", g,
                       {{"n_scenes", n_scenes}, {"n_points", n_points}, {"synth", sc},
                        {"deviation", {synth_dt, synth_dr}}, {"resolution", synth_res}},
                       {{"manifest", (out / kManifestName).string()}});
    const auto m = write_synthetic_dataset(out, n_scenes, n_points, g.seed, range, pp, sc);
    std::cout << "wrote " << m.frames.size() << " scenes to " << out.string() << '\n';
    return 0;
  }

  if (*render) {
    if (!render_ckpt.empty() && !fs::exists(render_ckpt)) {
      throw Error(ErrorCode::kUsage, "checkpoint not found: " + render_ckpt);
    }
    const DatasetManifest m = load_manifest(render_dataset);
    const std::size_t idx = resolve_frame(m, render_frame);
    const fs::path out(render_out);
    json outputs = {(out / "miscalibrated.png").string(), (out / "ground_truth.png").string()};
    if (!render_ckpt.empty()) outputs.push_back((out / "predicted.png").string());
    write_run_manifest(out, "render", g,
                       {{"dataset", render_dataset}, {"frame", m.frames[idx].id}, {"deviation", {render_dt, render_dr}},
                        {"checkpoint", render_ckpt}},
                       outputs);
    const Frame frame = m.load_frame(idx);
    const DeviationRange range{render_dt, render_dr};
    const SE3Transform dev = sample_deviation(range, g.seed);
    const SE3Transform t_init = dev * frame.lidar_to_camera;
    write_png(out / "miscalibrated.png", render_overlay(frame.image, frame.cloud, frame.intrinsics, t_init));
    write_png(out / "ground_truth.png",
              render_overlay(frame.image, frame.cloud, frame.intrinsics, frame.lidar_to_camera));
    if (!render_ckpt.empty()) {
      const Checkpoint ck = load_checkpoint(render_ckpt);
      const auto net = load_network(ck);
      PreprocessConfig pp = m.preprocess;
      pp.target = {ck.config.input_width, ck.config.input_height};
      const PreparedFrame prepared = prepare_frame(frame, pp);
      CalibrationSample s;
      s.t_gt = dev;
      s.t_init = t_init;
      s.camera = prepared.camera;
      s.cloud = prepared.cloud;
      s.intrinsics = prepared.intrinsics;
      s.lidar = render_lidar_image(s.cloud, s.intrinsics, t_init, s.camera.width, s.camera.height);
      const PosePrediction pred = network_predictor(*net)(s);
      const SE3Transform corrected = compose_calibration(pred.transform(), t_init);
      write_png(out / "predicted.png", render_overlay(frame.image, frame.cloud, frame.intrinsics, corrected));
    }
    std::cout << "wrote overlays for frame " << m.frames[idx].id << " to " << out.string() << '\n';
    return 0;
  }

  if (*train_cmd) {
    const TrainConfig cfg = train_flags.resolve(g, seed_given);
    const fs::path out(cfg.checkpoint_dir);
    write_run_manifest(out, "train", g, cfg,
                       {{"checkpoint", (out / "last.ckpt").string()},
                        {"train_log", (out / "train_log.jsonl").string()},
                        {"metrics_log", (out / "metrics.jsonl").string()}});
    const TrainResult tr = train(cfg, progress_hooks(g));
    if (tr.interrupted) {
      std::cerr << "interrupted; latest checkpoint at " << tr.checkpoint.string() << '\n';
      return 2;
    }
    const std::string val = cfg.val_manifest.empty() ? cfg.train_manifest : cfg.val_manifest;
    const EvalResult er = evaluate(tr.checkpoint, val, cfg.seed, cfg.deviation, cfg.weights, cfg.max_samples);
    append_metrics_record(out / "metrics.jsonl", "train-" + config_hash(cfg), cfg, er.metrics, device_tag(),
                          {{"val_loss", er.mean_loss}, {"steps", tr.steps.size()}});
    std::cout << format_metrics_table({{"trained", er.metrics}});
    std::cout << "checkpoint: " << tr.checkpoint.string() << '\n';
    return 0;
  }

  if (*eval) {
    const DatasetManifest m = load_manifest(eval_dataset);
    if (m.frames.empty()) throw Error(ErrorCode::kEmptyInput, "evaluation manifest has no frames");
    DeviationRange range = m.deviation;
    if (eval_dt) range.max_translation = *eval_dt;
    if (eval_dr) range.max_rotation_deg = *eval_dr;
    const json config = {{"checkpoint", eval_ckpt}, {"dataset", eval_dataset}, {"predictor", eval_predictor},
                         {"deviation", {range.max_translation, range.max_rotation_deg}}, {"max_samples", eval_max}};
    if (!eval_out.empty()) write_run_manifest(eval_out, "eval", g, config, {{"metrics_log", eval_log}});
    CalibMetrics metrics;
    if (eval_predictor == "network") {
      if (eval_ckpt.empty()) throw Error(ErrorCode::kUsage, "--checkpoint is required for the network predictor");
      metrics = evaluate(eval_ckpt, eval_dataset, g.seed, range, LossWeights{}, eval_max).metrics;
    } else {
      Dataset data(m, m.preprocess);
      const auto samples = evaluation_samples(data, range, g.seed, eval_max);
      const Predictor oracle = [](const CalibrationSample& s) {
        return PosePrediction{s.t_gt.translation, rotmat_to_quat(s.t_gt.rotation)};
      };
      const Predictor identity = [](const CalibrationSample&) {
        return PosePrediction{Vec3::Zero(), Quaternion{1, 0, 0, 0}};
      };
      metrics = evaluate_predictor(eval_predictor == "oracle" ? oracle : identity, samples).metrics;
    }
    if (!eval_log.empty()) append_metrics_record(eval_log, "eval-" + config_hash(config), config, metrics, device_tag());
    std::cout << format_metrics_table({{eval_predictor, metrics}});
    return 0;
  }

  if (*ablate) {
    std::vector<std::string> variants;
    if (variant == "all") {
      variants = ablation_variants();
    } else {
      ablation_config(variant, NetworkConfig::desk());  // validates the name
      variants = {variant};
    }
    const TrainConfig cfg = ablate_flags.resolve(g, seed_given);
    const fs::path out(cfg.checkpoint_dir);
    write_run_manifest(out, "ablate", g, {{"variants", variants}, {"train", cfg}},
                       {{"metrics_log", (out / "metrics.jsonl").string()}});
    std::vector<std::pair<std::string, CalibMetrics>> rows;
    for (const auto& v : variants) {
      const AblationResult r = run_ablation(v, cfg, progress_hooks(g));
      TrainConfig vc = cfg;
      vc.network = ablation_config(v, cfg.network);
      append_metrics_record(out / "metrics.jsonl", "ablate-" + v + "-" + config_hash(vc), vc, r.metrics,
                            r.latency.device, {{"variant", v}, {"val_loss", r.val_loss}, {"p95_ms", r.latency.p95_ms}});
      rows.emplace_back(v, r.metrics);
      if (g_stop.load()) break;
    }
    std::cout << format_metrics_table(rows);
    return g_stop.load() ? 2 : 0;
  }

  if (*latency) {
    std::unique_ptr<CalibNet<float>> net;
    if (!lat_ckpt.empty()) {
      net = load_network(load_checkpoint(lat_ckpt));
    } else {
      net = std::make_unique<CalibNet<float>>(network_preset(lat_network), g.seed);
    }
    const NetworkConfig& nc = net->config();
    PreprocessConfig pp;
    pp.target = {nc.input_width, nc.input_height};
    const CalibrationSample s = make_sample(synth_scene(g.seed, 20000), pp, DeviationRange{0.5, 5.0}, g.seed);
    const LatencyStats st = measure_latency(*net, s, warmup, runs);
    std::cout << "device: " << st.device << '\n'
              << "runs: " << st.runs << "  mean " << st.mean_ms << " ms  p95 " << st.p95_ms << " ms  min "
              << st.min_ms << " ms  max " << st.max_ms << " ms\n";
    return 0;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.code() == ErrorCode::kUsage ? 1 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
