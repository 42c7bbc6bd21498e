// Training, evaluation, latency measurement and ablation runs.
#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "calibformer/dataset.hpp"
#include "calibformer/losses.hpp"
#include "calibformer/network.hpp"

namespace calibformer {

struct TrainConfig {
  double lr = 5e-4;
  int epochs = 500;
  int batch_size = 1;
  long max_steps = 0;  // 0: no cap
  DeviationRange deviation{0.5, 5.0};
  std::uint64_t seed = 0;
  LossWeights weights;
  NetworkConfig network = NetworkConfig::desk();
  std::string train_manifest;
  std::string val_manifest;
  std::string checkpoint_dir = "checkpoints";
  int max_samples = 0;         // 0: whole manifest
  bool fresh_deviation = true; // new deviation per sample per epoch
  bool shuffle = true;
  int point_cap = kPointLossCap;
  double clip_norm = 10.0;     // global-norm clip; 0 disables
  int log_every = 1;

  void validate() const {
    if (batch_size < 1) throw Error(ErrorCode::kConfig, "batch_size must be >= 1");
    if (!(lr >= 0)) throw Error(ErrorCode::kConfig, "lr must be >= 0");
    if (epochs < 1) throw Error(ErrorCode::kConfig, "epochs must be >= 1");
    if (!deviation.is_valid()) throw Error(ErrorCode::kConfig, "deviation range must be nonnegative");
    if (!weights.is_valid()) throw Error(ErrorCode::kConfig, "invalid loss weights");
    network.validate();
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"max_steps", c.max_steps},
       {"deviation", {{"max_translation_m", c.deviation.max_translation}, {"max_rotation_deg", c.deviation.max_rotation_deg}}},
       {"seed", c.seed},
       {"loss_weights", {{"lambda_t", c.weights.lambda_t}, {"lambda_r", c.weights.lambda_r}, {"lambda_p", c.weights.lambda_p}}},
       {"network", c.network},
       {"train_manifest", c.train_manifest},
       {"val_manifest", c.val_manifest},
       {"checkpoint_dir", c.checkpoint_dir},
       {"max_samples", c.max_samples},
       {"fresh_deviation", c.fresh_deviation},
       {"shuffle", c.shuffle},
       {"point_cap", c.point_cap},
       {"clip_norm", c.clip_norm},
       {"log_every", c.log_every}};
}

/// Overlays the keys present in `j` onto `c`. "network" may be a preset name
/// or an object (overlaid on the current network config).
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("lr", c.lr);
  get("epochs", c.epochs);
  get("batch_size", c.batch_size);
  get("max_steps", c.max_steps);
  if (j.contains("deviation")) {
    const auto& d = j.at("deviation");
    if (d.contains("max_translation_m")) d.at("max_translation_m").get_to(c.deviation.max_translation);
    if (d.contains("max_rotation_deg")) d.at("max_rotation_deg").get_to(c.deviation.max_rotation_deg);
  }
  get("seed", c.seed);
  if (j.contains("loss_weights")) {
    const auto& w = j.at("loss_weights");
    if (w.contains("lambda_t")) w.at("lambda_t").get_to(c.weights.lambda_t);
    if (w.contains("lambda_r")) w.at("lambda_r").get_to(c.weights.lambda_r);
    if (w.contains("lambda_p")) w.at("lambda_p").get_to(c.weights.lambda_p);
  }
  if (j.contains("network")) {
    const auto& n = j.at("network");
    if (n.is_string()) {
      c.network = network_preset(n.get<std::string>());
    } else {
      if (n.contains("preset")) c.network = network_preset(n.at("preset").get<std::string>());
      from_json(n, c.network);
    }
  }
  get("train_manifest", c.train_manifest);
  get("val_manifest", c.val_manifest);
  get("checkpoint_dir", c.checkpoint_dir);
  get("max_samples", c.max_samples);
  get("fresh_deviation", c.fresh_deviation);
  get("shuffle", c.shuffle);
  get("point_cap", c.point_cap);
  get("clip_norm", c.clip_norm);
  get("log_every", c.log_every);
}

/// FNV-1a over the compact JSON of a config; stable run identifier.
inline std::string config_hash(const nlohmann::json& j) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adam over a ParamStore; moments are kept in float alongside the parameters.
template <class S>
class Adam {
 public:
  explicit Adam(const ParamStore<S>& ps, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : state_{0, lr, beta1, beta2, eps, {}, {}} {
    for (const auto& e : ps.entries()) {
      state_.m.emplace_back(e.second.size(), 0.0f);
      state_.v.emplace_back(e.second.size(), 0.0f);
    }
  }

  const AdamState& state() const { return state_; }
  void load_state(const AdamState& s) {
    if (s.m.size() != state_.m.size()) throw Error(ErrorCode::kConfig, "optimizer state does not match model");
    state_ = s;
  }

  /// Global L2 norm of all gradients (missing gradients count as zero).
  static double grad_norm(const ParamStore<S>& ps) {
    double sq = 0;
    for (const auto& e : ps.entries()) {
      for (S g : e.second.grad()) sq += static_cast<double>(g) * g;
    }
    return std::sqrt(sq);
  }

  /// One update with gradients multiplied by `grad_scale` and then clipped to
  /// `clip_norm` (<= 0 disables clipping). Returns the pre-clip norm.
  double step(ParamStore<S>& ps, double grad_scale, double clip_norm) {
    const double norm = grad_norm(ps) * grad_scale;
    double factor = grad_scale;
    if (clip_norm > 0 && norm > clip_norm) factor *= clip_norm / norm;
    ++state_.t;
    const double bc1 = 1.0 - std::pow(state_.beta1, static_cast<double>(state_.t));
    const double bc2 = 1.0 - std::pow(state_.beta2, static_cast<double>(state_.t));
    const float b1 = static_cast<float>(state_.beta1), b2 = static_cast<float>(state_.beta2);
    const float c1 = static_cast<float>(1 - state_.beta1), c2 = static_cast<float>(1 - state_.beta2);
    const float f = static_cast<float>(factor), eps = static_cast<float>(state_.eps);
    const float step_size = static_cast<float>(state_.lr / bc1);
    const float inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
    const auto& entries = ps.entries();
    for (std::size_t k = 0; k < entries.size(); ++k) {
      ag::Var<S> p = entries[k].second;
      const auto& grad = p.grad();
      if (grad.empty()) continue;
      S* value = p.mutable_value().data();
      const S* gp = grad.data();
      float* m = state_.m[k].data();
      float* v = state_.v[k].data();
      const std::size_t n = grad.size();
      for (std::size_t i = 0; i < n; ++i) {
        const float g = static_cast<float>(gp[i]) * f;
        m[i] = b1 * m[i] + c1 * g;
        v[i] = b2 * v[i] + c2 * g * g;
        value[i] -= static_cast<S>(step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_bc2 + eps));
      }
    }
    return norm;
  }

 private:
  AdamState state_;
};

// ---------------------------------------------------------------------------
// Metrics

struct CalibMetrics {
  double mean_translation_cm = 0, x_cm = 0, y_cm = 0, z_cm = 0;
  double mean_rotation_deg = 0, roll_deg = 0, pitch_deg = 0, yaw_deg = 0;
  double latency_ms = 0;
  std::size_t samples = 0;
};

inline void to_json(nlohmann::json& j, const CalibMetrics& m) {
  j = {{"mean_translation_cm", m.mean_translation_cm},
       {"x_cm", m.x_cm},
       {"y_cm", m.y_cm},
       {"z_cm", m.z_cm},
       {"mean_rotation_deg", m.mean_rotation_deg},
       {"roll_deg", m.roll_deg},
       {"pitch_deg", m.pitch_deg},
       {"yaw_deg", m.yaw_deg},
       {"latency_ms", m.latency_ms},
       {"samples", m.samples}};
}

/// Per-sample absolute errors: translation per axis (cm) and Euler angles of
/// the error rotation q_gt * q_pred^-1 (deg).
struct SampleError {
  std::array<double, 3> translation_cm;
  std::array<double, 3> rotation_deg;
};

inline SampleError sample_error(const PosePrediction& pred, const SE3Transform& t_gt) {
  SampleError e;
  for (int a = 0; a < 3; ++a) e.translation_cm[a] = std::abs(pred.translation[a] - t_gt.translation[a]) * 100.0;
  const Quaternion q_gt = rotmat_to_quat(t_gt.rotation);
  const EulerAngles eu = quat_to_euler(canonicalize(q_gt * pred.rotation.inverse()));
  e.rotation_deg = {std::abs(eu.roll), std::abs(eu.pitch), std::abs(eu.yaw)};
  return e;
}

inline CalibMetrics aggregate_errors(const std::vector<SampleError>& errors) {
  if (errors.empty()) throw Error(ErrorCode::kEmptyInput, "no samples to evaluate");
  CalibMetrics m;
  m.samples = errors.size();
  const double n = static_cast<double>(errors.size());
  for (const auto& e : errors) {
    m.x_cm += e.translation_cm[0] / n;
    m.y_cm += e.translation_cm[1] / n;
    m.z_cm += e.translation_cm[2] / n;
    m.mean_translation_cm += (e.translation_cm[0] + e.translation_cm[1] + e.translation_cm[2]) / 3.0 / n;
    m.roll_deg += e.rotation_deg[0] / n;
    m.pitch_deg += e.rotation_deg[1] / n;
    m.yaw_deg += e.rotation_deg[2] / n;
    m.mean_rotation_deg += (e.rotation_deg[0] + e.rotation_deg[1] + e.rotation_deg[2]) / 3.0 / n;
  }
  return m;
}

using Predictor = std::function<PosePrediction(const CalibrationSample&)>;

struct EvalResult {
  CalibMetrics metrics;
  double mean_loss = 0;
  std::vector<SampleError> per_sample;
};

/// Deterministic evaluation samples: frame i gets deviation seed
/// derive_seed(seed, kEvalStream, i).
inline constexpr std::uint64_t kEvalStream = 0xE7A1ull;

inline std::vector<CalibrationSample> evaluation_samples(Dataset& ds, const DeviationRange& range, std::uint64_t seed,
                                                         int max_samples = 0) {
  std::size_t n = ds.size();
  if (max_samples > 0) n = std::min<std::size_t>(n, static_cast<std::size_t>(max_samples));
  std::vector<CalibrationSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(ds.sample(i, range, derive_seed(seed, kEvalStream, i)));
  return out;
}

inline EvalResult evaluate_predictor(const Predictor& predict, const std::vector<CalibrationSample>& samples,
                                     const LossWeights& weights = {}, int point_cap = kPointLossCap) {
  if (samples.empty()) throw Error(ErrorCode::kEmptyInput, "no samples to evaluate");
  EvalResult r;
  double loss = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const PosePrediction pred = predict(samples[i]);
    r.per_sample.push_back(sample_error(pred, samples[i].t_gt));
    loss += total_loss(pred, make_loss_target(samples[i], derive_seed(0, i), point_cap), weights).total;
  }
  r.metrics = aggregate_errors(r.per_sample);
  r.mean_loss = loss / static_cast<double>(samples.size());
  return r;
}

template <class S>
Predictor network_predictor(const CalibNet<S>& net) {
  return [&net](const CalibrationSample& s) {
    ag::NoGradGuard guard;
    return net.forward(s).prediction();
  };
}

/// Raw-output loss (and optionally gradient) for evaluating the loss exactly
/// as training sees it, from head outputs.
template <class S>
double network_loss(const CalibNet<S>& net, const CalibrationSample& s, const LossWeights& w, std::uint64_t seed,
                    int point_cap = kPointLossCap) {
  ag::NoGradGuard guard;
  return loss_with_gradient(net.forward(s).raw(), make_loss_target(s, seed, point_cap), w).loss.total;
}

// ---------------------------------------------------------------------------
// Latency

struct LatencyStats {
  double mean_ms = 0, p95_ms = 0, min_ms = 0, max_ms = 0;
  int runs = 0;
  std::string device;
  std::vector<double> samples_ms;
};

inline std::string device_tag() {
  std::ifstream in("/proc/cpuinfo");
  std::string line, model = "unknown-cpu";
  int cores = 0;
  while (std::getline(in, line)) {
    if (line.rfind("model name", 0) == 0) {
      ++cores;
      if (model == "unknown-cpu") model = line.substr(line.find(':') + 2);
    }
  }
  return "cpu:" + model + " x" + std::to_string(std::max(cores, 1));
}

inline LatencyStats latency_stats(std::vector<double> ms) {
  if (ms.empty()) throw Error(ErrorCode::kUsage, "n_runs must be >= 1");
  LatencyStats s;
  s.samples_ms = ms;
  s.runs = static_cast<int>(ms.size());
  s.mean_ms = std::accumulate(ms.begin(), ms.end(), 0.0) / static_cast<double>(ms.size());
  std::sort(ms.begin(), ms.end());
  s.min_ms = ms.front();
  s.max_ms = ms.back();
  // Nearest-rank percentile.
  const std::size_t rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(ms.size())));
  s.p95_ms = ms[std::max<std::size_t>(rank, 1) - 1];
  s.device = device_tag();
  return s;
}

template <class S>
LatencyStats measure_latency(const CalibNet<S>& net, const CalibrationSample& sample, int n_warmup, int n_runs) {
  if (n_runs < 1) throw Error(ErrorCode::kUsage, "n_runs must be >= 1");
  ag::NoGradGuard guard;
  for (int i = 0; i < n_warmup; ++i) net.forward(sample);
  std::vector<double> ms;
  for (int i = 0; i < n_runs; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    net.forward(sample);
    ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  return latency_stats(std::move(ms));
}

// ---------------------------------------------------------------------------
// Training

struct StepRecord {
  long step = 0;
  int epoch = 0;
  LossBreakdown loss;
  double grad_norm = 0;
};

struct TrainResult {
  std::filesystem::path checkpoint;
  std::vector<StepRecord> steps;
  std::vector<double> epoch_loss;  // mean total loss per epoch
  bool interrupted = false;
};

inline PreprocessConfig network_preprocess(const NetworkConfig& n, const PreprocessConfig& base) {
  return {{n.input_width, n.input_height}, base.padded};
}

inline Checkpoint make_checkpoint(const CalibNet<float>& net, const Adam<float>* opt, int epoch, long step,
                                  const nlohmann::json& meta) {
  Checkpoint ck;
  ck.config = net.config();
  ck.params = snapshot_params(net.params());
  ck.epoch = epoch;
  ck.step = step;
  if (opt) ck.optimizer = opt->state();
  ck.meta = meta;
  return ck;
}

/// Model rebuilt from a checkpoint (strict parameter match).
inline std::unique_ptr<CalibNet<float>> load_network(const Checkpoint& ck) {
  auto net = std::make_unique<CalibNet<float>>(ck.config, 0);
  restore_params(net->params(), ck.params, true);
  return net;
}

/// Deviation seed of frame `idx` in `epoch` (epoch-independent when
/// fresh_deviation is off).
inline std::uint64_t training_sample_seed(const TrainConfig& cfg, int epoch, std::size_t idx) {
  return derive_seed(cfg.seed, cfg.fresh_deviation ? static_cast<std::uint64_t>(epoch) + 1 : 0, idx);
}

struct TrainHooks {
  std::function<void(const StepRecord&)> on_step;
  const std::atomic<bool>* stop = nullptr;  // checked between steps
};

/// Trains on `samples_source` (a Dataset over the train manifest). The network
/// input resolution decides the sample resolution, not the manifest.
inline TrainResult train(const TrainConfig& cfg, Dataset& data, const TrainHooks& hooks = {}) {
  cfg.validate();
  std::size_t n = data.size();
  if (cfg.max_samples > 0) n = std::min<std::size_t>(n, static_cast<std::size_t>(cfg.max_samples));
  if (n == 0) throw Error(ErrorCode::kEmptyInput, "training set is empty");

  CalibNet<float> net(cfg.network, derive_seed(cfg.seed, 0x11E7));
  if (!cfg.network.pretrained.empty()) {
    restore_params(net.params(), load_checkpoint(cfg.network.pretrained).params, false);
  }
  Adam<float> opt(net.params(), cfg.lr);
  const std::filesystem::path dir(cfg.checkpoint_dir);
  std::filesystem::create_directories(dir);
  std::ofstream log(dir / "train_log.jsonl", std::ios::app);
  const nlohmann::json meta = {{"train_config", cfg}, {"config_hash", config_hash(cfg)}};

  TrainResult result;
  long step = 0;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.shuffle) {
      std::mt19937_64 rng(derive_seed(cfg.seed, 0x5A0F, static_cast<std::uint64_t>(epoch)));
      std::shuffle(order.begin(), order.end(), rng);
    }
    double epoch_sum = 0;
    int epoch_count = 0;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
      if (cfg.max_steps > 0 && step >= cfg.max_steps) break;
      if (hooks.stop && hooks.stop->load()) {
        result.interrupted = true;
        break;
      }
      const std::size_t end = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
      net.params().zero_grad();
      StepRecord rec;
      rec.step = step;
      rec.epoch = epoch;
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t idx = order[b];
        const std::uint64_t dev_seed = training_sample_seed(cfg, epoch, idx);
        const CalibrationSample s = data.sample(idx, cfg.deviation, dev_seed);
        const auto out = net.forward(s);
        const auto lg = loss_with_gradient(out.raw(), make_loss_target(s, dev_seed, cfg.point_cap), cfg.weights);
        if (!std::isfinite(lg.loss.total)) {
          throw Error(ErrorCode::kNanLoss, "non-finite loss at step " + std::to_string(step) + ", epoch " +
                                               std::to_string(epoch) + ", frame " +
                                               data.manifest().frames[idx].id + " (t=" +
                                               std::to_string(lg.loss.translation) + " r=" +
                                               std::to_string(lg.loss.rotation) + " p=" +
                                               std::to_string(lg.loss.pointcloud) + ")");
        }
        out.backward(lg.grad);
        const double inv = 1.0 / static_cast<double>(end - start);
        rec.loss.total += lg.loss.total * inv;
        rec.loss.translation += lg.loss.translation * inv;
        rec.loss.rotation += lg.loss.rotation * inv;
        rec.loss.pointcloud += lg.loss.pointcloud * inv;
      }
      rec.grad_norm = opt.step(net.params(), 1.0 / static_cast<double>(end - start), cfg.clip_norm);
      epoch_sum += rec.loss.total;
      ++epoch_count;
      result.steps.push_back(rec);
      if (cfg.log_every > 0 && step % cfg.log_every == 0) {
        log << nlohmann::json{{"step", step},
                              {"epoch", epoch},
                              {"loss", rec.loss.total},
                              {"translation", rec.loss.translation},
                              {"rotation", rec.loss.rotation},
                              {"pointcloud", rec.loss.pointcloud},
                              {"grad_norm", rec.grad_norm}}
                   .dump()
            << '\n';
      }
      if (hooks.on_step) hooks.on_step(rec);
      ++step;
    }
    if (epoch_count > 0) result.epoch_loss.push_back(epoch_sum / epoch_count);
    char name[32];
    std::snprintf(name, sizeof(name), "epoch_%04d.ckpt", epoch);
    const Checkpoint ck = make_checkpoint(net, &opt, epoch + 1, step, meta);
    save_checkpoint(dir / name, ck);
    save_checkpoint(dir / "last.ckpt", ck);
    result.checkpoint = dir / "last.ckpt";
    if (result.interrupted || (cfg.max_steps > 0 && step >= cfg.max_steps)) break;
  }
  return result;
}

inline TrainResult train(const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  if (cfg.train_manifest.empty()) throw Error(ErrorCode::kConfig, "train_manifest is not set");
  Dataset data(load_manifest(cfg.train_manifest), network_preprocess(cfg.network, PreprocessConfig{}));
  return train(cfg, data, hooks);
}

/// Evaluates a checkpoint on a manifest; deviations come from the manifest's
/// range unless `range` is given.
inline EvalResult evaluate(const std::filesystem::path& checkpoint, const std::filesystem::path& manifest,
                           std::uint64_t seed, const std::optional<DeviationRange>& range = std::nullopt,
                           const LossWeights& weights = {}, int max_samples = 0) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const auto net = load_network(ck);
  const DatasetManifest m = load_manifest(manifest);
  if (m.frames.empty()) throw Error(ErrorCode::kEmptyInput, "evaluation manifest has no frames");
  Dataset data(m, network_preprocess(ck.config, m.preprocess));
  const auto samples = evaluation_samples(data, range.value_or(m.deviation), seed, max_samples);
  EvalResult r = evaluate_predictor(network_predictor(*net), samples, weights);
  r.metrics.latency_ms = measure_latency(*net, samples.front(), 1, 3).mean_ms;
  return r;
}

// ---------------------------------------------------------------------------
// Ablation

inline const std::vector<std::string>& ablation_variants() {
  static const std::vector<std::string> v{"full",       "no_multihead", "no_encoder", "no_transformer",
                                          "upsample_1", "upsample_2",   "upsample_4", "upsample_8"};
  return v;
}

inline NetworkConfig ablation_config(const std::string& variant, NetworkConfig base) {
  if (variant == "full") return base;
  if (variant == "no_multihead") {
    base.use_multihead = false;
  } else if (variant == "no_encoder") {
    base.use_encoder = false;
  } else if (variant == "no_transformer") {
    base.use_transformer = false;
    base.use_encoder = false;
  } else if (variant.rfind("upsample_", 0) == 0 && variant.size() == 10 &&
             std::string("1248").find(variant[9]) != std::string::npos) {
    base.upsample = variant[9] - '0';
  } else {
    std::string list;
    for (const auto& v : ablation_variants()) list += (list.empty() ? "" : ", ") + v;
    throw Error(ErrorCode::kUsage, "unknown ablation variant '" + variant + "' (expected one of: " + list + ")");
  }
  return base;
}

struct AblationResult {
  std::string variant;
  CalibMetrics metrics;
  LatencyStats latency;
  double val_loss = 0;
  std::filesystem::path checkpoint;
};

/// Trains the variant under `cfg` (its network config is the base) and
/// evaluates on the validation manifest (the training manifest if none).
inline AblationResult run_ablation(const std::string& variant, TrainConfig cfg, const TrainHooks& hooks = {}) {
  cfg.network = ablation_config(variant, cfg.network);
  cfg.checkpoint_dir = (std::filesystem::path(cfg.checkpoint_dir) / variant).string();
  const TrainResult tr = train(cfg, hooks);
  const std::string val = cfg.val_manifest.empty() ? cfg.train_manifest : cfg.val_manifest;
  const Checkpoint ck = load_checkpoint(tr.checkpoint);
  const auto net = load_network(ck);
  const DatasetManifest m = load_manifest(val);
  Dataset data(m, network_preprocess(ck.config, m.preprocess));
  const auto samples = evaluation_samples(data, cfg.deviation, cfg.seed);
  const EvalResult er = evaluate_predictor(network_predictor(*net), samples, cfg.weights, cfg.point_cap);
  AblationResult r;
  r.variant = variant;
  r.metrics = er.metrics;
  r.val_loss = er.mean_loss;
  r.latency = measure_latency(*net, samples.front(), 2, 10);
  r.metrics.latency_ms = r.latency.mean_ms;
  r.checkpoint = tr.checkpoint;
  return r;
}

// ---------------------------------------------------------------------------
// Reporting

inline void append_metrics_record(const std::filesystem::path& log, const std::string& run_id,
                                  const nlohmann::json& config, const CalibMetrics& m, const std::string& device,
                                  const nlohmann::json& extra = nlohmann::json::object()) {
  if (log.has_parent_path()) std::filesystem::create_directories(log.parent_path());
  std::ofstream out(log, std::ios::app);
  if (!out) throw Error(ErrorCode::kIo, "cannot append to " + log.string());
  nlohmann::json rec = {{"run_id", run_id}, {"config_hash", config_hash(config)}, {"device", device}};
  rec["metrics"] = m;
  for (auto it = extra.begin(); it != extra.end(); ++it) rec[it.key()] = it.value();
  out << rec.dump() << '\n';
}

/// Aligned text table: one row per method, translation then rotation errors, then latency.
inline std::string format_metrics_table(const std::vector<std::pair<std::string, CalibMetrics>>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(16) << "Method" << std::right;
  for (const char* h : {"Mean(cm)", "X(cm)", "Y(cm)", "Z(cm)", "Mean(deg)", "Roll(deg)", "Pitch(deg)", "Yaw(deg)",
                        "Latency(ms)"}) {
    os << std::setw(12) << h;
  }
  os << '\n';
  os << std::fixed << std::setprecision(4);
  for (const auto& [name, m] : rows) {
    os << std::left << std::setw(16) << name << std::right;
    for (double v : {m.mean_translation_cm, m.x_cm, m.y_cm, m.z_cm, m.mean_rotation_deg, m.roll_deg, m.pitch_deg,
                     m.yaw_deg, m.latency_ms}) {
      os << std::setw(12) << v;
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace calibformer
