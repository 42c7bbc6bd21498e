// ResNet-18 trunk and the deep-layer-aggregation upsampler.
//
// No batch statistics: every convolution is followed by a learned per-channel
// affine, and the second affine of each residual branch starts small so the
// untrained trunk is close to identity blocks (Fixup/SkipInit style). This
// keeps training deterministic per sample and independent of batch size.
#pragma once

#include <string>
#include <vector>

#include "calibformer/autograd/conv.hpp"
#include "calibformer/autograd/ops.hpp"
#include "calibformer/network/config.hpp"
#include "calibformer/network/params.hpp"

namespace calibformer {

inline constexpr double kResidualInitScale = 0.2;

template <class S>
struct ConvAffine {
  ag::Var<S> weight, scale, shift;
  int stride = 1, padding = 0;

  ConvAffine() = default;
  ConvAffine(ParamStore<S>& ps, const std::string& name, int in, int out, int k, int stride_, double scale_init = 1.0)
      : stride(stride_), padding(k / 2) {
    weight = ps.he(name + ".weight", {out, in, k, k}, in * k * k);
    scale = ps.constant(name + ".scale", {out}, scale_init);
    shift = ps.constant(name + ".shift", {out}, 0.0);
  }

  ag::Var<S> operator()(const ag::Var<S>& x) const {
    return ag::channel_affine(ag::conv2d(x, weight, nullptr, {stride, padding}), scale, shift);
  }
};

template <class S>
struct BasicBlock {
  ConvAffine<S> conv1, conv2, down;
  bool has_down = false;

  BasicBlock(ParamStore<S>& ps, const std::string& name, int in, int out, int stride)
      : conv1(ps, name + ".conv1", in, out, 3, stride),
        conv2(ps, name + ".conv2", out, out, 3, 1, kResidualInitScale),
        has_down(stride != 1 || in != out) {
    if (has_down) down = ConvAffine<S>(ps, name + ".down", in, out, 1, stride);
  }

  ag::Var<S> operator()(const ag::Var<S>& x) const {
    const ag::Var<S> branch = conv2(ag::relu(conv1(x)));
    return ag::relu(ag::add(branch, has_down ? down(x) : x));
  }
};

/// Stem (stride 4) and four stages of two BasicBlocks (strides 4, 8, 16, 32).
template <class S>
struct ResNetTrunk {
  ConvAffine<S> stem;
  std::vector<std::vector<BasicBlock<S>>> stages;

  ResNetTrunk(ParamStore<S>& ps, const std::string& name, int in_channels, const NetworkConfig& cfg) {
    stem = ConvAffine<S>(ps, name + ".stem", in_channels, cfg.stage_channels(0), 7, 2);
    int in = cfg.stage_channels(0);
    for (int s = 1; s <= 4; ++s) {
      const int out = cfg.stage_channels(s);
      const std::string prefix = name + ".layer" + std::to_string(s);
      std::vector<BasicBlock<S>> blocks;
      blocks.emplace_back(ps, prefix + ".0", in, out, s == 1 ? 1 : 2);
      blocks.emplace_back(ps, prefix + ".1", out, out, 1);
      stages.push_back(std::move(blocks));
      in = out;
    }
  }

  /// Outputs of layer1..layer4 (strides 4, 8, 16, 32).
  std::vector<ag::Var<S>> operator()(const ag::Var<S>& x) const {
    ag::Var<S> h = ag::max_pool2d(ag::relu(stem(x)), 3, 2, 1);
    std::vector<ag::Var<S>> outs;
    for (const auto& stage : stages) {
      for (const auto& b : stage) h = b(h);
      outs.push_back(h);
    }
    return outs;
  }
};

/// 3x3 conv + affine + ReLU; deformable (modulated, offsets and mask predicted
/// from the input by a zero-initialized conv) when enabled.
template <class S>
struct AggregationConv {
  ag::Var<S> weight, scale, shift, offset_weight, offset_bias;
  bool deformable = false;

  AggregationConv() = default;
  AggregationConv(ParamStore<S>& ps, const std::string& name, int in, int out, bool deform) : deformable(deform) {
    weight = ps.he(name + ".weight", {out, in, 3, 3}, in * 9);
    scale = ps.constant(name + ".scale", {out}, 1.0);
    shift = ps.constant(name + ".shift", {out}, 0.0);
    if (deformable) {
      offset_weight = ps.constant(name + ".offset.weight", {27, in, 3, 3}, 0.0);
      offset_bias = ps.constant(name + ".offset.bias", {27}, 0.0);
    }
  }

  ag::Var<S> operator()(const ag::Var<S>& x) const {
    ag::Var<S> y;
    if (deformable) {
      const ag::Var<S> om = ag::conv2d(x, offset_weight, &offset_bias, {1, 1});
      const ag::Var<S> offset = ag::slice0(om, 0, 18);
      const ag::Var<S> mask = ag::sigmoid(ag::slice0(om, 18, 27));
      y = ag::deform_conv2d(x, offset, mask, weight, nullptr, {1, 1});
    } else {
      y = ag::conv2d(x, weight, nullptr, {1, 1});
    }
    return ag::relu(ag::channel_affine(y, scale, shift));
  }
};

/// Iterative upsampling aggregation from stride 32 down to the configured
/// output stride. Each step projects the coarser aggregate, upsamples it 2x,
/// adds the projected backbone skip at that scale and fuses with a node conv.
/// Every intermediate aggregate is additionally carried to the output scale
/// and summed there (the extra cross-scale skips).
template <class S>
struct DlaUp {
  std::vector<AggregationConv<S>> proj, skip, node;
  std::vector<AggregationConv<S>> carry;
  int steps = 0;

  DlaUp(ParamStore<S>& ps, const std::string& name, const NetworkConfig& cfg) {
    steps = 0;
    for (int u = cfg.upsample; u > 1; u /= 2) ++steps;
    const int out_ch = cfg.feature_channels();
    for (int i = 0; i < steps; ++i) {
      const int coarse = i == 0 ? cfg.stage_channels(4) : out_ch;
      const int fine = cfg.stage_channels(3 - i);
      const std::string p = name + "." + std::to_string(i);
      proj.emplace_back(ps, p + ".proj", coarse, out_ch, cfg.deformable);
      skip.emplace_back(ps, p + ".skip", fine, out_ch, cfg.deformable);
      node.emplace_back(ps, p + ".node", out_ch, out_ch, cfg.deformable);
    }
    for (int i = 0; i + 1 < steps; ++i) {
      carry.emplace_back(ps, name + ".carry" + std::to_string(i), out_ch, out_ch, false);
    }
  }

  /// `levels` are layer1..layer4 outputs. With no upsampling returns layer4.
  ag::Var<S> operator()(const std::vector<ag::Var<S>>& levels) const {
    ag::Var<S> x = levels[3];
    std::vector<ag::Var<S>> intermediates;
    for (int i = 0; i < steps; ++i) {
      x = node[i](ag::add(ag::upsample2x(proj[i](x)), skip[i](levels[2 - i])));
      intermediates.push_back(x);
    }
    for (int i = 0; i + 1 < steps; ++i) {
      ag::Var<S> c = carry[i](intermediates[i]);
      for (int k = i; k + 1 < steps; ++k) c = ag::upsample2x(c);
      x = ag::add(x, c);
    }
    return x;
  }
};

}  // namespace calibformer
