// Network hyper-parameters and the two shipped presets.
#pragma once

#include <string>

#include "json.hpp"

#include "calibformer/error.hpp"

namespace calibformer {

struct NetworkConfig {
  int input_width = 512;
  int input_height = 256;
  double width_mult = 1.0;    // backbone channel multiplier (ResNet-18 = 1)
  int upsample = 4;           // feature stride = 32 / upsample
  int window_radius = 4;      // correlation window d
  int heads = 4;              // correlation heads n
  int d_k = 256;
  int encoder_layers = 2;
  int decoder_layers = 6;
  int encoder_window = 8;     // windowed-attention side length, in tokens
  int encoder_heads = 4;
  int decoder_heads = 4;
  int mlp_ratio = 4;
  int dense_layers = 3;
  int dense_growth = 64;
  int fc_pool = 4;            // average-pool factor before the FC regressor
  bool use_multihead = true;
  bool use_encoder = true;
  bool use_transformer = true;
  bool deformable = true;
  bool lidar_is_query = true;
  std::string pretrained;     // optional checkpoint to seed matching parameters

  static NetworkConfig full() { return {}; }

  static NetworkConfig desk() {
    NetworkConfig c;
    c.input_width = 256;
    c.input_height = 128;
    c.width_mult = 0.25;
    c.window_radius = 2;
    c.heads = 2;
    c.d_k = 64;
    c.encoder_layers = 1;
    c.decoder_layers = 2;
    c.encoder_window = 4;
    c.encoder_heads = 2;
    c.decoder_heads = 2;
    c.mlp_ratio = 2;
    c.dense_layers = 2;
    c.dense_growth = 32;
    c.deformable = false;
    return c;
  }

  int stride() const { return 32 / upsample; }
  int feature_width() const { return input_width / stride(); }
  int feature_height() const { return input_height / stride(); }
  int correlation_heads() const { return use_multihead ? heads : 1; }
  int correlation_channels() const {
    const int side = 2 * window_radius + 1;
    return side * side * correlation_heads();
  }

  /// Backbone stage widths (stem, layer1..layer4).
  int stage_channels(int stage) const {
    static constexpr int kBase[5] = {64, 64, 128, 256, 512};
    return std::max(4, static_cast<int>(kBase[stage] * width_mult + 0.5));
  }

  /// Channels of the aggregated feature map (the backbone stage at the output stride).
  int feature_channels() const {
    switch (upsample) {
      case 8: return stage_channels(1);
      case 4: return stage_channels(2);
      case 2: return stage_channels(3);
      default: return stage_channels(4);
    }
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw Error(ErrorCode::kConfig, "network config: " + m); };
    if (upsample != 1 && upsample != 2 && upsample != 4 && upsample != 8) fail("upsample must be 1, 2, 4 or 8");
    if (input_width <= 0 || input_height <= 0 || input_width % 32 || input_height % 32) {
      fail("input resolution must be a positive multiple of 32");
    }
    if (width_mult <= 0) fail("width_mult must be > 0");
    if (window_radius < 0) fail("window_radius must be >= 0");
    if (heads < 1 || d_k < 1 || d_k % heads) fail("d_k must be divisible by heads");
    if (use_encoder && !use_transformer) fail("use_encoder requires use_transformer");
    if (use_transformer) {
      if (decoder_layers < 1) fail("decoder_layers must be >= 1");
      if (decoder_heads < 1 || d_k % decoder_heads) fail("d_k must be divisible by decoder_heads");
    }
    if (use_encoder) {
      if (encoder_layers < 1) fail("encoder_layers must be >= 1");
      if (encoder_heads < 1 || d_k % encoder_heads) fail("d_k must be divisible by encoder_heads");
      if (encoder_window < 1 || feature_width() % encoder_window || feature_height() % encoder_window) {
        fail("feature map " + std::to_string(feature_width()) + "x" + std::to_string(feature_height()) +
             " not divisible by encoder_window " + std::to_string(encoder_window));
      }
    }
    if (dense_layers < 0 || dense_growth < 1 || mlp_ratio < 1) fail("dense/mlp sizes must be positive");
    if (!use_transformer && (fc_pool < 1 || feature_width() % fc_pool || feature_height() % fc_pool)) {
      fail("feature map not divisible by fc_pool");
    }
  }
};

inline void to_json(nlohmann::json& j, const NetworkConfig& c) {
  j = {{"input_width", c.input_width},       {"input_height", c.input_height},   {"width_mult", c.width_mult},
       {"upsample", c.upsample},             {"window_radius", c.window_radius}, {"heads", c.heads},
       {"d_k", c.d_k},                       {"encoder_layers", c.encoder_layers},
       {"decoder_layers", c.decoder_layers}, {"encoder_window", c.encoder_window},
       {"encoder_heads", c.encoder_heads},   {"decoder_heads", c.decoder_heads}, {"mlp_ratio", c.mlp_ratio},
       {"dense_layers", c.dense_layers},     {"dense_growth", c.dense_growth},   {"fc_pool", c.fc_pool},
       {"use_multihead", c.use_multihead},   {"use_encoder", c.use_encoder},
       {"use_transformer", c.use_transformer}, {"deformable", c.deformable},
       {"lidar_is_query", c.lidar_is_query}, {"pretrained", c.pretrained}};
}

/// Missing keys keep the values already in `c`, so a partial file overlays a preset.
inline void from_json(const nlohmann::json& j, NetworkConfig& c) {
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("input_width", c.input_width);
  get("input_height", c.input_height);
  get("width_mult", c.width_mult);
  get("upsample", c.upsample);
  get("window_radius", c.window_radius);
  get("heads", c.heads);
  get("d_k", c.d_k);
  get("encoder_layers", c.encoder_layers);
  get("decoder_layers", c.decoder_layers);
  get("encoder_window", c.encoder_window);
  get("encoder_heads", c.encoder_heads);
  get("decoder_heads", c.decoder_heads);
  get("mlp_ratio", c.mlp_ratio);
  get("dense_layers", c.dense_layers);
  get("dense_growth", c.dense_growth);
  get("fc_pool", c.fc_pool);
  get("use_multihead", c.use_multihead);
  get("use_encoder", c.use_encoder);
  get("use_transformer", c.use_transformer);
  get("deformable", c.deformable);
  get("lidar_is_query", c.lidar_is_query);
  get("pretrained", c.pretrained);
}

/// "full" or "desk", optionally overlaid with a JSON object.
inline NetworkConfig network_preset(const std::string& name) {
  if (name == "full") return NetworkConfig::full();
  if (name == "desk") return NetworkConfig::desk();
  throw Error(ErrorCode::kConfig, "unknown network preset '" + name + "' (expected full or desk)");
}

}  // namespace calibformer
