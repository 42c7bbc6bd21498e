// The full calibration network. Stages are exposed individually so tests and
// tools can probe them.
#pragma once

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "calibformer/autograd/conv.hpp"
#include "calibformer/autograd/ops.hpp"
#include "calibformer/dataio.hpp"
#include "calibformer/losses.hpp"
#include "calibformer/network/backbone.hpp"
#include "calibformer/network/config.hpp"
#include "calibformer/network/correlation.hpp"
#include "calibformer/network/params.hpp"
#include "calibformer/network/transformer.hpp"

namespace calibformer {

/// Quaternion head output -> unit, canonical (w >= 0) rotation.
inline Quaternion normalize_head_quaternion(double w, double x, double y, double z) {
  return canonicalize({w, x, y, z});
}

template <class S>
class CalibNet {
 public:
  using Var = ag::Var<S>;

  struct Output {
    Var t_raw;  // [3]
    Var q_raw;  // [4], unnormalized

    std::array<double, 7> raw() const {
      std::array<double, 7> r{};
      for (int i = 0; i < 3; ++i) r[i] = static_cast<double>(t_raw.value()[i]);
      for (int i = 0; i < 4; ++i) r[3 + i] = static_cast<double>(q_raw.value()[i]);
      return r;
    }

    PosePrediction prediction() const {
      const auto r = raw();
      return {Vec3(r[0], r[1], r[2]), normalize_head_quaternion(r[3], r[4], r[5], r[6])};
    }

    /// Backpropagates d(loss)/d(raw outputs) through the network.
    void backward(const std::array<double, 7>& grad) const {
      std::vector<S> seed(7);
      for (int i = 0; i < 7; ++i) seed[i] = static_cast<S>(grad[i]);
      ag::backward(ag::concat0<S>({t_raw, q_raw}), seed);
    }
  };

  CalibNet(const NetworkConfig& cfg, std::uint64_t seed) : cfg_(cfg), params_(seed) {
    cfg_.validate();
    build();
  }

  const NetworkConfig& config() const { return cfg_; }
  ParamStore<S>& params() { return params_; }
  const ParamStore<S>& params() const { return params_; }

  // --- inputs ---------------------------------------------------------------

  Var camera_input(const CameraImage& cam) const {
    check_resolution(cam.width, cam.height, "camera");
    std::vector<S> v(cam.data.begin(), cam.data.end());
    return Var::constant({3, cam.height, cam.width}, std::move(v));
  }

  Var lidar_input(const LidarImage& lidar) const {
    check_resolution(lidar.width, lidar.height, "lidar");
    const std::size_t n = static_cast<std::size_t>(lidar.width) * lidar.height;
    std::vector<S> v(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
      v[i] = static_cast<S>(lidar.depth[i]);
      v[n + i] = static_cast<S>(lidar.intensity[i]);
    }
    return Var::constant({2, lidar.height, lidar.width}, std::move(v));
  }

  // --- stages ---------------------------------------------------------------

  /// (F_cam, F_lidar), each [C, H/stride, W/stride].
  std::pair<Var, Var> extract_features(const Var& cam, const Var& lidar) const {
    return {cam_up_->operator()((*cam_trunk_)(cam)), lidar_up_->operator()((*lidar_trunk_)(lidar))};
  }

  /// Camera-guided pose query [1, d_k]: ResNet trunk, global average pool, linear.
  Var init_pose_query(const Var& cam) const {
    const Var pooled = ag::global_avg_pool((*query_trunk_)(cam).back());
    return query_proj_(ag::reshape(pooled, {1, pooled.dim(0)}));
  }

  /// Correlation volume [(2d+1)^2 n, h, w]. The LiDAR map supplies the
  /// queries unless lidar_is_query is off.
  Var multi_head_correlation(const Var& f_lidar, const Var& f_cam) const {
    ag::detail::require(f_lidar.shape() == f_cam.shape(), "correlation: feature maps differ in shape");
    const int h = f_lidar.dim(1), w = f_lidar.dim(2);
    const Var& query_map = cfg_.lidar_is_query ? f_lidar : f_cam;
    const Var& key_map = cfg_.lidar_is_query ? f_cam : f_lidar;
    Var q = ag::to_tokens(query_map), k = ag::to_tokens(key_map);
    if (cfg_.use_multihead) {
      q = ag::linear(q, wq_, nullptr);
      k = ag::linear(k, wk_, nullptr);
    }
    return windowed_correlation(q, k, h, w, cfg_.window_radius, cfg_.correlation_heads());
  }

  /// Dimension raise (dense conv block + 1x1 transition) and, when enabled,
  /// the windowed encoder. Returns tokens [h*w, d_k].
  Var encode_correlation(const Var& corr, AttentionTrace<S>* trace = nullptr) const {
    const int h = corr.dim(1), w = corr.dim(2);
    std::vector<Var> feats{corr};
    for (const auto& layer : dense_) feats.push_back(ag::relu(layer(ag::concat0(feats))));
    Var tokens = ag::to_tokens(dense_transition_(ag::concat0(feats)));
    if (!cfg_.use_encoder) return tokens;
    for (const auto& block : encoder_) {
      std::vector<S>* weights = nullptr;
      if (trace) weights = &trace->encoder.emplace_back();
      tokens = block(tokens, h, w, weights);
    }
    return tokens;
  }

  Output decode_pose(const Var& memory, const Var& query, int h, int w, AttentionTrace<S>* trace = nullptr) const {
    const Var pos = pos_fc2_(ag::relu(pos_fc1_(grid_coordinates<S>(h, w))));
    const Var keys = ag::add(memory, pos);
    Var tgt = query;
    for (const auto& layer : decoder_) {
      std::vector<S>* weights = nullptr;
      if (trace) weights = &trace->decoder.emplace_back();
      tgt = layer(tgt, memory, keys, weights);
    }
    return heads(tgt);
  }

  Output forward(const CameraImage& camera, const LidarImage& lidar, AttentionTrace<S>* trace = nullptr) const {
    return forward(camera_input(camera), lidar_input(lidar), trace);
  }

  Output forward(const CalibrationSample& s, AttentionTrace<S>* trace = nullptr) const {
    return forward(s.camera, s.lidar, trace);
  }

  Output forward(const Var& cam, const Var& lidar, AttentionTrace<S>* trace = nullptr) const {
    const auto [f_cam, f_lidar] = extract_features(cam, lidar);
    const Var corr = multi_head_correlation(f_lidar, f_cam);
    if (!cfg_.use_transformer) {
      const Var pooled = ag::avg_pool(corr, cfg_.fc_pool);
      const Var flat = ag::reshape(pooled, {1, static_cast<int>(pooled.size())});
      return heads(ag::relu(fc_hidden_(flat)));
    }
    const Var memory = encode_correlation(corr, trace);
    return decode_pose(memory, init_pose_query(cam), corr.dim(1), corr.dim(2), trace);
  }

  /// Parameter groups by top-level name component.
  static std::string group_of(const std::string& name) { return name.substr(0, name.find('.')); }

 private:
  void check_resolution(int w, int h, const char* what) const {
    if (w != cfg_.input_width || h != cfg_.input_height) {
      throw Error(ErrorCode::kResolutionMismatch, std::string(what) + " input " + std::to_string(w) + "x" +
                                                      std::to_string(h) + " does not match network input " +
                                                      std::to_string(cfg_.input_width) + "x" +
                                                      std::to_string(cfg_.input_height));
    }
  }

  Output heads(const Var& token) const {
    return {ag::reshape(t_fc2_(ag::relu(t_fc1_(token))), {3}), ag::reshape(q_fc2_(ag::relu(q_fc1_(token))), {4})};
  }

  void build() {
    auto& ps = params_;
    const int c = cfg_.feature_channels(), dk = cfg_.d_k;
    cam_trunk_.emplace(ps, "camera.backbone", 3, cfg_);
    cam_up_.emplace(ps, "camera.dla", cfg_);
    lidar_trunk_.emplace(ps, "lidar.backbone", 2, cfg_);
    lidar_up_.emplace(ps, "lidar.dla", cfg_);
    if (cfg_.use_multihead) {
      wq_ = ps.glorot("correlation.wq", dk, c);
      wk_ = ps.glorot("correlation.wk", dk, c);
    }
    int ch = cfg_.correlation_channels();
    const int hidden = cfg_.d_k;
    if (cfg_.use_transformer) {
      for (int i = 0; i < cfg_.dense_layers; ++i) {
        dense_.emplace_back(ps, "dense." + std::to_string(i), ch, cfg_.dense_growth, 3, 1);
        ch += cfg_.dense_growth;
      }
      dense_transition_ = ConvAffine<S>(ps, "dense.transition", ch, dk, 1, 1);
      if (cfg_.use_encoder) {
        for (int i = 0; i < cfg_.encoder_layers; ++i) {
          encoder_.emplace_back(ps, "encoder." + std::to_string(i), dk, cfg_.encoder_heads, cfg_.encoder_window,
                                i % 2 == 1, cfg_.mlp_ratio);
        }
      }
      query_trunk_.emplace(ps, "query.backbone", 3, cfg_);
      query_proj_ = Linear<S>(ps, "query.proj", cfg_.stage_channels(4), dk);
      pos_fc1_ = Linear<S>(ps, "decoder.pos.fc1", 2, dk);
      pos_fc2_ = Linear<S>(ps, "decoder.pos.fc2", dk, dk);
      for (int i = 0; i < cfg_.decoder_layers; ++i) {
        decoder_.emplace_back(ps, "decoder." + std::to_string(i), dk, cfg_.decoder_heads, cfg_.mlp_ratio);
      }
    } else {
      const int pooled = ch * (cfg_.feature_height() / cfg_.fc_pool) * (cfg_.feature_width() / cfg_.fc_pool);
      fc_hidden_ = Linear<S>(ps, "fc.hidden", pooled, hidden);
    }
    t_fc1_ = Linear<S>(ps, "head.t.fc1", hidden, hidden);
    t_fc2_ = Linear<S>(ps, "head.t.fc2", hidden, 3);
    q_fc1_ = Linear<S>(ps, "head.q.fc1", hidden, hidden);
    q_fc2_ = Linear<S>(ps, "head.q.fc2", hidden, 4);
    // Start near zero translation and the identity rotation.
    for (auto& v : t_fc2_.weight.mutable_value()) v *= S(0.1);
    for (auto& v : q_fc2_.weight.mutable_value()) v *= S(0.1);
    q_fc2_.bias.mutable_value()[0] = S(1);
  }

  NetworkConfig cfg_;
  ParamStore<S> params_;
  std::optional<ResNetTrunk<S>> cam_trunk_, lidar_trunk_, query_trunk_;
  std::optional<DlaUp<S>> cam_up_, lidar_up_;
  Var wq_, wk_;
  std::vector<ConvAffine<S>> dense_;
  ConvAffine<S> dense_transition_;
  std::vector<SwinBlock<S>> encoder_;
  std::vector<DecoderLayer<S>> decoder_;
  Linear<S> query_proj_, pos_fc1_, pos_fc2_, fc_hidden_;
  Linear<S> t_fc1_, t_fc2_, q_fc1_, q_fc2_;
};

}  // namespace calibformer
