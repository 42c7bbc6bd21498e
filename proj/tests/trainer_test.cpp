#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "calibformer/trainer.hpp"

namespace calibformer {
namespace {

namespace fs = std::filesystem;

NetworkConfig tiny_network() {
  NetworkConfig c;
  c.input_width = 64;
  c.input_height = 32;
  c.width_mult = 0.125;
  c.window_radius = 1;
  c.heads = 2;
  c.d_k = 8;
  c.encoder_layers = 1;
  c.encoder_window = 2;
  c.encoder_heads = 2;
  c.decoder_layers = 1;
  c.decoder_heads = 2;
  c.mlp_ratio = 2;
  c.dense_layers = 1;
  c.dense_growth = 4;
  c.deformable = false;
  return c;
}

class TrainerTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "calibformer_trainer_test";
    fs::remove_all(dir_);
    PreprocessConfig pp;
    pp.target = {64, 32};
    write_synthetic_dataset(dir_ / "data", 2, 2000, 5, DeviationRange{0.2, 2.0}, pp);
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }

  TrainConfig config(const std::string& run) const {
    TrainConfig c;
    c.network = tiny_network();
    c.train_manifest = (dir_ / "data").string();
    c.checkpoint_dir = (dir_ / run).string();
    c.epochs = 1;
    c.deviation = {0.2, 2.0};
    c.seed = 9;
    return c;
  }

  static fs::path dir_;
};

fs::path TrainerTest::dir_;

TEST_F(TrainerTest, StepBookkeeping) {
  TrainConfig c = config("steps");
  const TrainResult r = train(c);
  EXPECT_EQ(r.steps.size(), 2u);
  EXPECT_EQ(r.steps[1].step, 1);
  EXPECT_TRUE(fs::exists(fs::path(c.checkpoint_dir) / "epoch_0000.ckpt"));
  EXPECT_TRUE(fs::exists(r.checkpoint));
  const Checkpoint ck = load_checkpoint(r.checkpoint);
  EXPECT_EQ(ck.step, 2);
  EXPECT_EQ(ck.epoch, 1);
  ASSERT_TRUE(ck.optimizer.has_value());
  EXPECT_EQ(ck.optimizer->t, 2);

  c.batch_size = 2;
  c.checkpoint_dir = (dir_ / "steps_b2").string();
  EXPECT_EQ(train(c).steps.size(), 1u);

  c.batch_size = 1;
  c.epochs = 3;
  c.max_steps = 5;
  c.checkpoint_dir = (dir_ / "steps_cap").string();
  EXPECT_EQ(train(c).steps.size(), 5u);
}

TEST_F(TrainerTest, ZeroLearningRateLeavesParameters) {
  TrainConfig c = config("lr0");
  c.lr = 0.0;
  const TrainResult r = train(c);
  const CalibNet<float> fresh(c.network, derive_seed(c.seed, 0x11E7));
  const auto before = snapshot_params(fresh.params());
  const auto after = load_checkpoint(r.checkpoint).params;
  ASSERT_EQ(before.size(), after.size());
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before[i].values, after[i].values) << before[i].name;
}

TEST_F(TrainerTest, DeterministicLossCurve) {
  TrainConfig c = config("det_a");
  c.epochs = 3;
  const TrainResult a = train(c);
  c.checkpoint_dir = (dir_ / "det_b").string();
  const TrainResult b = train(c);
  ASSERT_EQ(a.steps.size(), b.steps.size());
  for (std::size_t i = 0; i < a.steps.size(); ++i) EXPECT_EQ(a.steps[i].loss.total, b.steps[i].loss.total);
  c.seed = 10;
  c.checkpoint_dir = (dir_ / "det_c").string();
  EXPECT_NE(train(c).steps.back().loss.total, a.steps.back().loss.total);
}

TEST_F(TrainerTest, FreshDeviationChangesAcrossEpochs) {
  TrainConfig c = config("fresh");
  Dataset data(load_manifest(c.train_manifest), network_preprocess(c.network, PreprocessConfig{}));
  c.epochs = 2;
  c.shuffle = false;
  c.lr = 0.0;
  // With lr 0 the model is fixed, so equal losses across epochs mean equal inputs.
  const TrainResult fresh = train(c, data);
  EXPECT_NE(fresh.steps[0].loss.total, fresh.steps[2].loss.total);
  c.fresh_deviation = false;
  c.checkpoint_dir = (dir_ / "fixed").string();
  const TrainResult fixed = train(c, data);
  EXPECT_EQ(fixed.steps[0].loss.total, fixed.steps[2].loss.total);
}

TEST_F(TrainerTest, NanLossAborts) {
  const fs::path bad = dir_ / "bad";
  fs::create_directories(bad);
  fs::copy(dir_ / "data", bad, fs::copy_options::recursive | fs::copy_options::overwrite_existing);
  const DatasetManifest m = load_manifest(bad);
  const fs::path cloud_path = bad / m.frames[0].cloud;
  PointCloud pc = load_kitti_cloud(cloud_path);
  pc.points[0].x() = std::numeric_limits<double>::quiet_NaN();
  save_kitti_cloud(cloud_path, pc);
  TrainConfig c = config("nan");
  c.train_manifest = bad.string();
  c.shuffle = false;
  try {
    train(c);
    FAIL() << "expected a NaN abort";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNanLoss);
    EXPECT_NE(std::string(e.what()).find(m.frames[0].id), std::string::npos);
  }
}

TEST_F(TrainerTest, MissingDatasetFailsAtStartup) {
  TrainConfig c = config("missing");
  c.train_manifest = (dir_ / "nowhere").string();
  EXPECT_THROW(train(c), Error);
  EXPECT_FALSE(fs::exists(c.checkpoint_dir));
}

TEST_F(TrainerTest, CheckpointEvaluationIsReproducible) {
  TrainConfig c = config("eval");
  const TrainResult r = train(c);
  const EvalResult a = evaluate(r.checkpoint, dir_ / "data", 3);
  const EvalResult b = evaluate(r.checkpoint, dir_ / "data", 3);
  EXPECT_EQ(a.metrics.mean_translation_cm, b.metrics.mean_translation_cm);
  EXPECT_EQ(a.metrics.mean_rotation_deg, b.metrics.mean_rotation_deg);
  EXPECT_EQ(a.mean_loss, b.mean_loss);
  EXPECT_EQ(a.metrics.samples, 2u);

  // Re-saving the loaded checkpoint changes nothing.
  const fs::path copy = dir_ / "eval" / "copy.ckpt";
  save_checkpoint(copy, load_checkpoint(r.checkpoint));
  const EvalResult c2 = evaluate(copy, dir_ / "data", 3);
  EXPECT_EQ(a.metrics.x_cm, c2.metrics.x_cm);
  EXPECT_EQ(a.metrics.yaw_deg, c2.metrics.yaw_deg);
}

TEST(Metrics, OracleAndIdentityPredictors) {
  CalibrationSample s;
  s.cloud.push_back(Vec3(5, 0, 1), 0.5);
  s.cloud.push_back(Vec3(-2, 3, 10), 0.5);
  s.t_gt = {Mat3::Identity(), Vec3(0.1, 0, 0)};
  const Predictor oracle = [](const CalibrationSample& x) {
    return PosePrediction{x.t_gt.translation, rotmat_to_quat(x.t_gt.rotation)};
  };
  const Predictor identity = [](const CalibrationSample&) { return PosePrediction{Vec3::Zero(), {1, 0, 0, 0}}; };
  const CalibMetrics zero = evaluate_predictor(oracle, {s}).metrics;
  for (double v : {zero.mean_translation_cm, zero.x_cm, zero.y_cm, zero.z_cm, zero.mean_rotation_deg, zero.roll_deg,
                   zero.pitch_deg, zero.yaw_deg}) {
    EXPECT_EQ(v, 0.0);
  }
  const CalibMetrics id = evaluate_predictor(identity, {s}).metrics;
  EXPECT_NEAR(id.x_cm, 10.0, 1e-12);
  EXPECT_EQ(id.y_cm, 0.0);
  EXPECT_EQ(id.z_cm, 0.0);
  EXPECT_EQ(id.mean_rotation_deg, 0.0);
  EXPECT_THROW(evaluate_predictor(identity, {}), Error);
}

TEST(Metrics, HandComputedSamples) {
  // Each error rotation is about a single axis, so its Euler angles can be read off.
  struct Case {
    Vec3 t_gt, t_pred;
    Quaternion q_gt, q_pred;
  };
  const std::vector<Case> cases = {
      {Vec3(0.10, -0.20, 0.05), Vec3(0.07, -0.25, 0.05), euler_to_quat(0, 0, 3), euler_to_quat(0, 0, 1)},
      {Vec3(0.00, 0.30, -0.10), Vec3(0.02, 0.30, -0.16), euler_to_quat(2, 0, 0), euler_to_quat(0, 0, 0)},
      {Vec3(-0.40, 0.00, 0.00), Vec3(-0.40, 0.01, 0.00), euler_to_quat(0, -1.5, 0), euler_to_quat(0, 2.5, 0)},
  };
  std::vector<CalibrationSample> samples(3);
  for (int i = 0; i < 3; ++i) {
    samples[i].cloud.push_back(Vec3(1, 2, 3), 0);
    samples[i].t_gt = make_transform(cases[i].q_gt, cases[i].t_gt);
  }
  int call = 0;
  const Predictor p = [&](const CalibrationSample&) {
    const Case& c = cases[call++];
    return PosePrediction{c.t_pred, c.q_pred};
  };
  const CalibMetrics m = evaluate_predictor(p, samples).metrics;
  // X: 3, 2, 0 cm; Y: 5, 0, 1 cm; Z: 0, 6, 0 cm.
  EXPECT_NEAR(m.x_cm, 5.0 / 3, 1e-9);
  EXPECT_NEAR(m.y_cm, 6.0 / 3, 1e-9);
  EXPECT_NEAR(m.z_cm, 6.0 / 3, 1e-9);
  EXPECT_NEAR(m.mean_translation_cm, 17.0 / 9, 1e-9);
  // Roll: 0, 2, 0; pitch: 0, 0, 4; yaw: 2, 0, 0 deg.
  EXPECT_NEAR(m.roll_deg, 2.0 / 3, 1e-9);
  EXPECT_NEAR(m.pitch_deg, 4.0 / 3, 1e-9);
  EXPECT_NEAR(m.yaw_deg, 2.0 / 3, 1e-9);
  EXPECT_NEAR(m.mean_rotation_deg, 8.0 / 9, 1e-9);
  EXPECT_EQ(m.samples, 3u);
}

TEST(Metrics, MeanEqualsMeanOfAxes) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 50);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<SampleError> errors(1 + trial % 17);
    for (auto& e : errors) {
      e.translation_cm = {u(rng), u(rng), u(rng)};
      e.rotation_deg = {u(rng), u(rng), u(rng)};
    }
    const CalibMetrics m = aggregate_errors(errors);
    EXPECT_NEAR(m.mean_translation_cm, (m.x_cm + m.y_cm + m.z_cm) / 3, 1e-9);
    EXPECT_NEAR(m.mean_rotation_deg, (m.roll_deg + m.pitch_deg + m.yaw_deg) / 3, 1e-9);
  }
}

TEST(Latency, OrderStatistics) {
  const LatencyStats one = latency_stats({12.5});
  EXPECT_EQ(one.mean_ms, 12.5);
  EXPECT_EQ(one.p95_ms, 12.5);
  const LatencyStats s = latency_stats({5, 1, 3, 2, 4, 9, 7, 8, 6, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20});
  EXPECT_LE(s.mean_ms, s.max_ms);
  EXPECT_EQ(s.mean_ms, 10.5);
  EXPECT_EQ(s.p95_ms, 19);
  EXPECT_EQ(s.min_ms, 1);
  EXPECT_FALSE(s.device.empty());
  EXPECT_THROW(latency_stats({}), Error);

  CalibNet<float> net(tiny_network(), 1);
  PreprocessConfig pp;
  pp.target = {64, 32};
  const auto sample = make_sample(synth_scene(1, 1000), pp, DeviationRange{0.1, 1}, 1);
  const LatencyStats m = measure_latency(net, sample, 1, 3);
  EXPECT_EQ(m.runs, 3);
  EXPECT_LE(m.mean_ms, m.max_ms);
  EXPECT_GE(m.mean_ms, m.min_ms);
}

TEST(Ablation, VariantMapping) {
  const NetworkConfig base = NetworkConfig::desk();
  EXPECT_FALSE(ablation_config("no_multihead", base).use_multihead);
  EXPECT_FALSE(ablation_config("no_encoder", base).use_encoder);
  const NetworkConfig nt = ablation_config("no_transformer", base);
  EXPECT_FALSE(nt.use_transformer);
  nt.validate();
  CalibNet<float> fc(nt, 1);
  EXPECT_TRUE(fc.params().contains("fc.hidden.weight"));
  EXPECT_FALSE(fc.params().contains("decoder.0.cross.q.weight"));
  EXPECT_EQ(ablation_config("upsample_1", base).stride(), 32);
  EXPECT_EQ(ablation_config("upsample_8", base).stride(), 4);
  EXPECT_EQ(ablation_config("full", base).upsample, base.upsample);
  try {
    ablation_config("bogus", base);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUsage);
    EXPECT_NE(std::string(e.what()).find("no_multihead"), std::string::npos);
  }
  for (const auto& v : ablation_variants()) EXPECT_NO_THROW(ablation_config(v, base));
}

TEST(Adam, FirstStepAndClipping) {
  ParamStore<double> ps(1);
  auto w = ps.constant("w", {3}, 1.0);
  w.grad_buffer() = {0.5, -2.0, 0.0};
  Adam<double> opt(ps, 0.1);
  const double norm = opt.step(ps, 1.0, 0.0);
  EXPECT_NEAR(norm, std::sqrt(4.25), 1e-12);
  // Bias-corrected first step moves each coordinate by lr * g / (|g| + eps).
  EXPECT_NEAR(w.value()[0], 1.0 - 0.1 * 0.5 / (0.5 + 1e-8), 1e-7);
  EXPECT_NEAR(w.value()[1], 1.0 + 0.1 * 2.0 / (2.0 + 1e-8), 1e-7);
  EXPECT_EQ(w.value()[2], 1.0);

  // Clipping rescales the gradient before the moments see it.
  ParamStore<double> ps2(1);
  auto v = ps2.constant("v", {2}, 0.0);
  v.grad_buffer() = {30.0, 40.0};
  Adam<double> clipped(ps2, 0.1);
  EXPECT_NEAR(clipped.step(ps2, 1.0, 10.0), 50.0, 1e-12);
  EXPECT_NEAR(clipped.state().m[0][0], 0.1 * 6.0, 1e-6);
  EXPECT_NEAR(clipped.state().m[0][1], 0.1 * 8.0, 1e-6);
}

TEST(TrainConfigJson, RoundTripAndOverlay) {
  TrainConfig c;
  c.lr = 1e-3;
  c.batch_size = 4;
  c.network = NetworkConfig::desk();
  c.weights.lambda_p = 0.5;
  const nlohmann::json j = c;
  TrainConfig back;
  from_json(j, back);
  EXPECT_EQ(back.lr, 1e-3);
  EXPECT_EQ(back.batch_size, 4);
  EXPECT_EQ(back.network.d_k, 64);
  EXPECT_EQ(back.weights.lambda_p, 0.5);
  EXPECT_EQ(config_hash(j), config_hash(nlohmann::json(back)));

  TrainConfig partial;
  from_json(nlohmann::json{{"network", "desk"}, {"epochs", 7}}, partial);
  EXPECT_EQ(partial.epochs, 7);
  EXPECT_EQ(partial.lr, 5e-4);
  EXPECT_EQ(partial.network.input_width, 256);
  from_json(nlohmann::json{{"network", {{"preset", "full"}, {"d_k", 128}}}}, partial);
  EXPECT_EQ(partial.network.d_k, 128);
  EXPECT_EQ(partial.network.decoder_layers, 6);

  TrainConfig bad;
  bad.batch_size = 0;
  EXPECT_THROW(bad.validate(), Error);
  bad = TrainConfig{};
  bad.lr = -1;
  EXPECT_THROW(bad.validate(), Error);
}

TEST(Reporting, TableAndLog) {
  CalibMetrics m;
  m.mean_translation_cm = 2;
  m.x_cm = 1;
  m.y_cm = 2;
  m.z_cm = 3;
  m.samples = 4;
  const std::string table = format_metrics_table({{"model", m}});
  EXPECT_NE(table.find("Mean(cm)"), std::string::npos);
  EXPECT_NE(table.find("Yaw(deg)"), std::string::npos);
  EXPECT_NE(table.find("2.0000"), std::string::npos);

  const fs::path log = fs::temp_directory_path() / "calibformer_metrics_test.jsonl";
  fs::remove(log);
  append_metrics_record(log, "run-a", nlohmann::json{{"k", 1}}, m, "cpu:test");
  append_metrics_record(log, "run-b", nlohmann::json{{"k", 2}}, m, "cpu:test", {{"variant", "full"}});
  std::ifstream in(log);
  std::string line;
  std::vector<nlohmann::json> recs;
  while (std::getline(in, line)) recs.push_back(nlohmann::json::parse(line));
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_EQ(recs[0].at("run_id"), "run-a");
  EXPECT_EQ(recs[1].at("variant"), "full");
  EXPECT_NE(recs[0].at("config_hash"), recs[1].at("config_hash"));
  EXPECT_EQ(recs[0].at("metrics").at("z_cm"), 3.0);
  fs::remove(log);
}

}  // namespace
}  // namespace calibformer
