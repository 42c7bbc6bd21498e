// Windowed (Swin-style) self-attention encoder over a token grid and the
// single-token cross-attention pose decoder.
#pragma once

#include <string>
#include <vector>

#include "calibformer/autograd/attention.hpp"
#include "calibformer/autograd/ops.hpp"
#include "calibformer/network/params.hpp"

namespace calibformer {

inline constexpr double kShiftMaskValue = -100.0;

/// Token order for window attention. perm[t] is the grid index (y*w + x) of
/// the t-th token in window order after a cyclic shift by `shift`.
struct WindowLayout {
  int h = 0, w = 0, ws = 0, shift = 0;
  std::vector<int> perm, inverse;
  std::vector<int> region;  // shifted-grid region id per window-order token

  WindowLayout(int h_, int w_, int ws_, int shift_) : h(h_), w(w_), ws(ws_), shift(shift_) {
    const int n = h * w;
    perm.resize(n);
    inverse.resize(n);
    region.resize(n);
    auto band = [&](int v, int size) { return v < size - ws ? 0 : (v < size - shift ? 1 : 2); };
    int t = 0;
    for (int wy = 0; wy < h / ws; ++wy) {
      for (int wx = 0; wx < w / ws; ++wx) {
        for (int iy = 0; iy < ws; ++iy) {
          for (int ix = 0; ix < ws; ++ix, ++t) {
            const int y = wy * ws + iy, x = wx * ws + ix;
            perm[t] = ((y + shift) % h) * w + (x + shift) % w;
            inverse[perm[t]] = t;
            region[t] = shift ? band(y, h) * 3 + band(x, w) : 0;
          }
        }
      }
    }
  }

  int windows() const { return (h / ws) * (w / ws); }
  int tokens_per_window() const { return ws * ws; }

  /// [windows, L, L] additive mask separating regions that the cyclic shift
  /// brought together; empty when there is no shift.
  template <class S>
  std::vector<S> mask() const {
    if (!shift) return {};
    const int l = tokens_per_window();
    std::vector<S> m(static_cast<std::size_t>(windows()) * l * l, S(0));
    for (int g = 0; g < windows(); ++g) {
      for (int i = 0; i < l; ++i) {
        for (int j = 0; j < l; ++j) {
          if (region[g * l + i] != region[g * l + j]) {
            m[(static_cast<std::size_t>(g) * l + i) * l + j] = static_cast<S>(kShiftMaskValue);
          }
        }
      }
    }
    return m;
  }
};

/// Index into a [(2ws-1)^2, heads] relative-position table for every
/// (head, i, j) of one window, laid out [heads, L, L].
inline std::vector<int> relative_position_index(int ws, int heads) {
  const int l = ws * ws, side = 2 * ws - 1;
  std::vector<int> idx(static_cast<std::size_t>(heads) * l * l);
  for (int hd = 0; hd < heads; ++hd) {
    for (int i = 0; i < l; ++i) {
      for (int j = 0; j < l; ++j) {
        const int rel = (i / ws - j / ws + ws - 1) * side + (i % ws - j % ws + ws - 1);
        idx[(static_cast<std::size_t>(hd) * l + i) * l + j] = rel * heads + hd;
      }
    }
  }
  return idx;
}

template <class S>
struct Linear {
  ag::Var<S> weight, bias;

  Linear() = default;
  Linear(ParamStore<S>& ps, const std::string& name, int in, int out) {
    weight = ps.glorot(name + ".weight", out, in);
    bias = ps.constant(name + ".bias", {out}, 0.0);
  }
  ag::Var<S> operator()(const ag::Var<S>& x) const { return ag::linear(x, weight, &bias); }
};

template <class S>
struct LayerNorm {
  ag::Var<S> gamma, beta;

  LayerNorm() = default;
  LayerNorm(ParamStore<S>& ps, const std::string& name, int dim) {
    gamma = ps.constant(name + ".gamma", {dim}, 1.0);
    beta = ps.constant(name + ".beta", {dim}, 0.0);
  }
  ag::Var<S> operator()(const ag::Var<S>& x) const { return ag::layer_norm(x, gamma, beta); }
};

/// Optional capture of softmax weights for inspection.
template <class S>
struct AttentionTrace {
  std::vector<std::vector<S>> encoder;  // per layer: [windows, heads, L, L]
  std::vector<std::vector<S>> decoder;  // per layer: [1, heads, 1, N]
};

/// Pre-norm windowed attention block; odd layers use shifted windows.
template <class S>
struct SwinBlock {
  LayerNorm<S> norm1, norm2;
  Linear<S> wq, wk, wv, wo, fc1, fc2;
  ag::Var<S> bias_table;
  int heads = 1, ws = 1, shift = 0;

  SwinBlock(ParamStore<S>& ps, const std::string& name, int dim, int heads_, int ws_, bool shifted, int mlp_ratio)
      : heads(heads_), ws(ws_), shift(shifted ? ws_ / 2 : 0) {
    norm1 = LayerNorm<S>(ps, name + ".norm1", dim);
    wq = Linear<S>(ps, name + ".attn.q", dim, dim);
    wk = Linear<S>(ps, name + ".attn.k", dim, dim);
    wv = Linear<S>(ps, name + ".attn.v", dim, dim);
    wo = Linear<S>(ps, name + ".attn.proj", dim, dim);
    bias_table = ps.normal(name + ".attn.relative_bias", {(2 * ws - 1) * (2 * ws - 1), heads}, 0.02);
    norm2 = LayerNorm<S>(ps, name + ".norm2", dim);
    fc1 = Linear<S>(ps, name + ".mlp.fc1", dim, dim * mlp_ratio);
    fc2 = Linear<S>(ps, name + ".mlp.fc2", dim * mlp_ratio, dim);
  }

  /// x: tokens [h*w, C] in grid order.
  ag::Var<S> operator()(const ag::Var<S>& x, int h, int w, std::vector<S>* weights = nullptr) const {
    // A window as large as the map cannot be shifted meaningfully.
    const int s = (ws >= h && ws >= w) ? 0 : shift;
    const WindowLayout layout(h, w, ws, s);
    const int l = layout.tokens_per_window();
    const ag::Var<S> bias = ag::gather(bias_table, relative_position_index(ws, heads), {heads, l, l});
    const std::vector<S> mask = layout.template mask<S>();
    ag::AttentionOptions<S> opt;
    opt.heads = heads;
    opt.groups = layout.windows();
    opt.bias = &bias;
    opt.mask = mask.empty() ? nullptr : &mask;
    opt.weights_out = weights;

    ag::Var<S> t = ag::gather_rows(x, layout.perm);
    const ag::Var<S> n1 = norm1(t);
    t = ag::add(t, wo(ag::multi_head_attention(wq(n1), wk(n1), wv(n1), opt)));
    t = ag::add(t, fc2(ag::gelu(fc1(norm2(t)))));
    return ag::gather_rows(t, layout.inverse);
  }
};

/// Post-norm decoder layer: the pose token cross-attends to the memory, whose
/// keys carry the position encoding. With a single query token self-attention
/// would reduce to a fixed linear map, so it is omitted.
template <class S>
struct DecoderLayer {
  Linear<S> wq, wk, wv, wo, fc1, fc2;
  LayerNorm<S> norm1, norm2;
  int heads = 1;

  DecoderLayer(ParamStore<S>& ps, const std::string& name, int dim, int heads_, int mlp_ratio) : heads(heads_) {
    wq = Linear<S>(ps, name + ".cross.q", dim, dim);
    wk = Linear<S>(ps, name + ".cross.k", dim, dim);
    wv = Linear<S>(ps, name + ".cross.v", dim, dim);
    wo = Linear<S>(ps, name + ".cross.proj", dim, dim);
    norm1 = LayerNorm<S>(ps, name + ".norm1", dim);
    fc1 = Linear<S>(ps, name + ".ffn.fc1", dim, dim * mlp_ratio);
    fc2 = Linear<S>(ps, name + ".ffn.fc2", dim * mlp_ratio, dim);
    norm2 = LayerNorm<S>(ps, name + ".norm2", dim);
  }

  ag::Var<S> operator()(const ag::Var<S>& tgt, const ag::Var<S>& memory, const ag::Var<S>& keys,
                        std::vector<S>* weights = nullptr) const {
    ag::AttentionOptions<S> opt;
    opt.heads = heads;
    opt.weights_out = weights;
    ag::Var<S> t = norm1(ag::add(tgt, wo(ag::multi_head_attention(wq(tgt), wk(keys), wv(memory), opt))));
    return norm2(ag::add(t, fc2(ag::relu(fc1(t)))));
  }
};

/// Normalized token centers ((x+0.5)/w, (y+0.5)/h), [h*w, 2].
template <class S>
ag::Var<S> grid_coordinates(int h, int w) {
  std::vector<S> v(static_cast<std::size_t>(h) * w * 2);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      v[(static_cast<std::size_t>(y) * w + x) * 2] = static_cast<S>((x + 0.5) / w);
      v[(static_cast<std::size_t>(y) * w + x) * 2 + 1] = static_cast<S>((y + 0.5) / h);
    }
  }
  return ag::Var<S>::constant({h * w, 2}, std::move(v));
}

}  // namespace calibformer
