// Spatial ops on single [C, H, W] feature maps: convolution (regular and
// modulated deformable), max pooling and bilinear upsampling.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <vector>

#include "calibformer/autograd/blas.hpp"
#include "calibformer/autograd/ops.hpp"
#include "calibformer/autograd/tensor.hpp"

namespace calibformer::ag {

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
};

namespace detail {

inline int conv_out(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

// Output columns [lo, hi) read in-bounds input for kernel offset k.
inline void valid_range(int k, int stride, int pad, int in, int out, int& lo, int& hi) {
  // ix = o * stride - pad + k must lie in [0, in).
  lo = pad - k <= 0 ? 0 : (pad - k + stride - 1) / stride;
  hi = std::min(out, (in - 1 + pad - k) / stride + 1);
  if (in - 1 + pad - k < 0) hi = 0;
  hi = std::max(hi, lo);
}

template <class S>
void im2col(const S* x, int c, int h, int w, int kh, int kw, int stride, int pad, int ho, int wo, S* cols) {
  for (int ch = 0; ch < c; ++ch) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        S* row = cols + (static_cast<std::size_t>(ch * kh + ky) * kw + kx) * ho * wo;
        int lo, hi;
        valid_range(kx, stride, pad, w, wo, lo, hi);
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          S* dst = row + static_cast<std::size_t>(oy) * wo;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, S(0));
            continue;
          }
          const S* src = x + (static_cast<std::size_t>(ch) * h + iy) * w;
          const int shift = kx - pad;
          std::fill(dst, dst + lo, S(0));
          if (stride == 1) {
            std::copy(src + lo + shift, src + hi + shift, dst + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox * stride + shift];
          }
          std::fill(dst + hi, dst + wo, S(0));
        }
      }
    }
  }
}

template <class S>
void col2im(const S* cols, int c, int h, int w, int kh, int kw, int stride, int pad, int ho, int wo, S* x) {
  for (int ch = 0; ch < c; ++ch) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const S* row = cols + (static_cast<std::size_t>(ch * kh + ky) * kw + kx) * ho * wo;
        int lo, hi;
        valid_range(kx, stride, pad, w, wo, lo, hi);
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          S* dst = x + (static_cast<std::size_t>(ch) * h + iy) * w;
          const S* src = row + static_cast<std::size_t>(oy) * wo;
          const int shift = kx - pad;
          if (stride == 1) {
            for (int ox = lo; ox < hi; ++ox) dst[ox + shift] += src[ox];
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox * stride + shift] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// x [Ci, H, W], weight [Co, Ci, kh, kw], optional bias [Co] -> [Co, Ho, Wo].
template <class S>
Var<S> conv2d(const Var<S>& x, const Var<S>& weight, const std::type_identity_t<Var<S>>* bias, Conv2dOptions opt = {}) {
  detail::require(x.rank() == 3 && weight.rank() == 4 && weight.dim(1) == x.dim(0),
                  "conv2d: shape mismatch " + shape_str(x.shape()) + " * " + shape_str(weight.shape()));
  const int ci = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int co = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  const int ho = detail::conv_out(h, kh, opt.stride, opt.padding);
  const int wo = detail::conv_out(w, kw, opt.stride, opt.padding);
  detail::require(ho > 0 && wo > 0, "conv2d: empty output");
  const int k = ci * kh * kw;
  const int p = ho * wo;
  const bool pointwise = kh == 1 && kw == 1 && opt.stride == 1 && opt.padding == 0;

  std::vector<S> cols;
  if (!pointwise) {
    cols.resize(static_cast<std::size_t>(k) * p);
    detail::im2col(x.value().data(), ci, h, w, kh, kw, opt.stride, opt.padding, ho, wo, cols.data());
  }
  const S* colp = pointwise ? x.value().data() : cols.data();
  std::vector<S> out(static_cast<std::size_t>(co) * p, S(0));
  if (bias) {
    detail::require(static_cast<int>(bias->size()) == co, "conv2d: bias size mismatch");
    for (int o = 0; o < co; ++o) std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(o) * p, p, bias->value()[o]);
  }
  gemm(false, false, co, p, k, S(1), weight.value().data(), k, colp, p, S(bias ? 1 : 0), out.data(), p);

  std::vector<Var<S>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  const bool keep = grad_enabled();
  return make_result<S>({co, ho, wo}, std::move(out), std::move(inputs),
                        [=, cols = keep ? std::move(cols) : std::vector<S>{}](Node<S>& self) {
    const S* colv = pointwise ? self.parents[0]->value.data() : cols.data();
    if (S* gw = parent_grad(self, 1)) {
      gemm(false, true, co, k, p, S(1), self.grad.data(), p, colv, p, S(1), gw, k);
    }
    if (self.parents.size() > 2) {
      if (S* gb = parent_grad(self, 2)) {
        for (int o = 0; o < co; ++o) {
          S acc = 0;
          for (int i = 0; i < p; ++i) acc += self.grad[static_cast<std::size_t>(o) * p + i];
          gb[o] += acc;
        }
      }
    }
    if (S* gx = parent_grad(self, 0)) {
      const auto& wv = self.parents[1]->value;
      if (pointwise) {
        gemm(true, false, k, p, co, S(1), wv.data(), k, self.grad.data(), p, S(1), gx, p);
      } else {
        // beta = 0: gemm overwrites the buffer, so it is left uninitialized.
        std::unique_ptr<S[]> gcols(new S[static_cast<std::size_t>(k) * p]);
        gemm(true, false, k, p, co, S(1), wv.data(), k, self.grad.data(), p, S(0), gcols.get(), p);
        detail::col2im(gcols.get(), ci, h, w, kh, kw, opt.stride, opt.padding, ho, wo, gx);
      }
    }
  });
}

namespace detail {

// Zero-padded bilinear sample and its partials with respect to (y, x).
template <class S>
S bilinear_sample(const S* plane, int h, int w, S py, S px, S* dval_dy, S* dval_dx) {
  if (py <= S(-1) || py >= S(h) || px <= S(-1) || px >= S(w)) {
    if (dval_dy) *dval_dy = 0;
    if (dval_dx) *dval_dx = 0;
    return S(0);
  }
  const int y0 = static_cast<int>(std::floor(py));
  const int x0 = static_cast<int>(std::floor(px));
  const S ly = py - S(y0), lx = px - S(x0);
  auto at = [&](int y, int x) -> S {
    return (y >= 0 && y < h && x >= 0 && x < w) ? plane[static_cast<std::size_t>(y) * w + x] : S(0);
  };
  const S v00 = at(y0, x0), v01 = at(y0, x0 + 1), v10 = at(y0 + 1, x0), v11 = at(y0 + 1, x0 + 1);
  if (dval_dy) *dval_dy = -(S(1) - lx) * v00 - lx * v01 + (S(1) - lx) * v10 + lx * v11;
  if (dval_dx) *dval_dx = -(S(1) - ly) * v00 + (S(1) - ly) * v01 - ly * v10 + ly * v11;
  return (S(1) - ly) * (S(1) - lx) * v00 + (S(1) - ly) * lx * v01 + ly * (S(1) - lx) * v10 + ly * lx * v11;
}

template <class S>
void bilinear_scatter(S* plane, int h, int w, S py, S px, S g) {
  if (py <= S(-1) || py >= S(h) || px <= S(-1) || px >= S(w)) return;
  const int y0 = static_cast<int>(std::floor(py));
  const int x0 = static_cast<int>(std::floor(px));
  const S ly = py - S(y0), lx = px - S(x0);
  auto add = [&](int y, int x, S v) {
    if (y >= 0 && y < h && x >= 0 && x < w) plane[static_cast<std::size_t>(y) * w + x] += v;
  };
  add(y0, x0, g * (S(1) - ly) * (S(1) - lx));
  add(y0, x0 + 1, g * (S(1) - ly) * lx);
  add(y0 + 1, x0, g * ly * (S(1) - lx));
  add(y0 + 1, x0 + 1, g * ly * lx);
}

}  // namespace detail

/// Modulated deformable convolution with a single offset group.
/// offset [2*kh*kw, Ho, Wo] holds (dy, dx) pairs per kernel tap; mask
/// [kh*kw, Ho, Wo] scales each sampled tap.
template <class S>
Var<S> deform_conv2d(const Var<S>& x, const Var<S>& offset, const Var<S>& mask, const Var<S>& weight,
                     const std::type_identity_t<Var<S>>* bias, Conv2dOptions opt = {}) {
  detail::require(x.rank() == 3 && weight.rank() == 4 && weight.dim(1) == x.dim(0),
                  "deform_conv2d: weight/input mismatch");
  const int ci = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int co = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  const int taps = kh * kw;
  const int ho = detail::conv_out(h, kh, opt.stride, opt.padding);
  const int wo = detail::conv_out(w, kw, opt.stride, opt.padding);
  detail::require(offset.shape() == Shape{2 * taps, ho, wo} && mask.shape() == Shape{taps, ho, wo},
                  "deform_conv2d: offset/mask shape mismatch");
  const int k = ci * taps;
  const int p = ho * wo;
  const S* xv = x.value().data();
  const S* ov = offset.value().data();
  const S* mv = mask.value().data();

  std::vector<S> cols(static_cast<std::size_t>(k) * p);
  for (int ch = 0; ch < ci; ++ch) {
    const S* plane = xv + static_cast<std::size_t>(ch) * h * w;
    for (int t = 0; t < taps; ++t) {
      const int ky = t / kw, kx = t % kw;
      S* row = cols.data() + static_cast<std::size_t>(ch * taps + t) * p;
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          const int idx = oy * wo + ox;
          const S py = S(oy * opt.stride - opt.padding + ky) + ov[static_cast<std::size_t>(2 * t) * p + idx];
          const S px = S(ox * opt.stride - opt.padding + kx) + ov[static_cast<std::size_t>(2 * t + 1) * p + idx];
          row[idx] = mv[static_cast<std::size_t>(t) * p + idx] *
                     detail::bilinear_sample<S>(plane, h, w, py, px, nullptr, nullptr);
        }
      }
    }
  }
  std::vector<S> out(static_cast<std::size_t>(co) * p, S(0));
  if (bias) {
    for (int o = 0; o < co; ++o) std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(o) * p, p, bias->value()[o]);
  }
  gemm(false, false, co, p, k, S(1), weight.value().data(), k, cols.data(), p, S(bias ? 1 : 0), out.data(), p);

  std::vector<Var<S>> inputs{x, offset, mask, weight};
  if (bias) inputs.push_back(*bias);
  const bool keep = grad_enabled();
  return make_result<S>({co, ho, wo}, std::move(out), std::move(inputs),
                        [=, cols = keep ? std::move(cols) : std::vector<S>{}](Node<S>& self) {
    const auto& wv = self.parents[3]->value;
    if (S* gw = parent_grad(self, 3)) {
      gemm(false, true, co, k, p, S(1), self.grad.data(), p, cols.data(), p, S(1), gw, k);
    }
    if (self.parents.size() > 4) {
      if (S* gb = parent_grad(self, 4)) {
        for (int o = 0; o < co; ++o) {
          S acc = 0;
          for (int i = 0; i < p; ++i) acc += self.grad[static_cast<std::size_t>(o) * p + i];
          gb[o] += acc;
        }
      }
    }
    S* gx = parent_grad(self, 0);
    S* goff = parent_grad(self, 1);
    S* gmask = parent_grad(self, 2);
    if (!gx && !goff && !gmask) return;
    std::vector<S> gcols(static_cast<std::size_t>(k) * p, S(0));
    gemm(true, false, k, p, co, S(1), wv.data(), k, self.grad.data(), p, S(0), gcols.data(), p);
    const S* xin = self.parents[0]->value.data();
    const S* off = self.parents[1]->value.data();
    const S* msk = self.parents[2]->value.data();
    for (int ch = 0; ch < ci; ++ch) {
      const S* plane = xin + static_cast<std::size_t>(ch) * h * w;
      S* gplane = gx ? gx + static_cast<std::size_t>(ch) * h * w : nullptr;
      for (int t = 0; t < taps; ++t) {
        const int ky = t / kw, kx = t % kw;
        const S* grow = gcols.data() + static_cast<std::size_t>(ch * taps + t) * p;
        for (int oy = 0; oy < ho; ++oy) {
          for (int ox = 0; ox < wo; ++ox) {
            const int idx = oy * wo + ox;
            const S gc = grow[idx];
            if (gc == S(0)) continue;
            const std::size_t oy_i = static_cast<std::size_t>(2 * t) * p + idx;
            const std::size_t ox_i = static_cast<std::size_t>(2 * t + 1) * p + idx;
            const std::size_t m_i = static_cast<std::size_t>(t) * p + idx;
            const S py = S(oy * opt.stride - opt.padding + ky) + off[oy_i];
            const S px = S(ox * opt.stride - opt.padding + kx) + off[ox_i];
            S dy = 0, dx = 0;
            const S val = detail::bilinear_sample<S>(plane, h, w, py, px, &dy, &dx);
            const S m = msk[m_i];
            if (gmask) gmask[m_i] += gc * val;
            if (goff) {
              goff[oy_i] += gc * m * dy;
              goff[ox_i] += gc * m * dx;
            }
            if (gplane) detail::bilinear_scatter<S>(gplane, h, w, py, px, gc * m);
          }
        }
      }
    }
  });
}

/// k x k max pooling with the given stride and padding (padding acts as -inf).
template <class S>
Var<S> max_pool2d(const Var<S>& x, int k, int stride, int pad) {
  detail::require(x.rank() == 3, "max_pool2d: expects [C, H, W]");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int ho = detail::conv_out(h, k, stride, pad), wo = detail::conv_out(w, k, stride, pad);
  std::vector<S> out(static_cast<std::size_t>(c) * ho * wo);
  std::vector<int> arg(out.size());
  for (int ch = 0; ch < c; ++ch) {
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        S best = -std::numeric_limits<S>::infinity();
        int best_i = -1;
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= w) continue;
            const int i = (ch * h + iy) * w + ix;
            if (x.value()[i] > best) {
              best = x.value()[i];
              best_i = i;
            }
          }
        }
        const std::size_t o = (static_cast<std::size_t>(ch) * ho + oy) * wo + ox;
        out[o] = best;
        arg[o] = best_i;
      }
    }
  }
  return make_result<S>({c, ho, wo}, std::move(out), {x}, [arg = std::move(arg)](Node<S>& self) {
    if (S* g = parent_grad(self, 0)) {
      for (std::size_t o = 0; o < arg.size(); ++o) g[arg[o]] += self.grad[o];
    }
  });
}

/// 2x bilinear upsampling, half-pixel centers (align_corners = false).
template <class S>
Var<S> upsample2x(const Var<S>& x) {
  detail::require(x.rank() == 3, "upsample2x: expects [C, H, W]");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2), ho = 2 * h, wo = 2 * w;
  struct Tap {
    int i0, i1;
    S l;
  };
  auto taps = [](int out_n, int in_n) {
    std::vector<Tap> t(static_cast<std::size_t>(out_n));
    for (int o = 0; o < out_n; ++o) {
      S src = (S(o) + S(0.5)) / S(2) - S(0.5);
      if (src < S(0)) src = S(0);
      int i0 = static_cast<int>(std::floor(src));
      if (i0 > in_n - 1) i0 = in_n - 1;
      const int i1 = std::min(i0 + 1, in_n - 1);
      t[o] = {i0, i1, src - S(i0)};
    }
    return t;
  };
  auto ty = taps(ho, h), tx = taps(wo, w);
  std::vector<S> out(static_cast<std::size_t>(c) * ho * wo);
  const auto& xv = x.value();
  for (int ch = 0; ch < c; ++ch) {
    const S* plane = xv.data() + static_cast<std::size_t>(ch) * h * w;
    for (int oy = 0; oy < ho; ++oy) {
      const Tap& a = ty[oy];
      for (int ox = 0; ox < wo; ++ox) {
        const Tap& b = tx[ox];
        const S top = plane[a.i0 * w + b.i0] * (S(1) - b.l) + plane[a.i0 * w + b.i1] * b.l;
        const S bot = plane[a.i1 * w + b.i0] * (S(1) - b.l) + plane[a.i1 * w + b.i1] * b.l;
        out[(static_cast<std::size_t>(ch) * ho + oy) * wo + ox] = top * (S(1) - a.l) + bot * a.l;
      }
    }
  }
  return make_result<S>({c, ho, wo}, std::move(out), {x},
                        [c, h, w, ho, wo, ty = std::move(ty), tx = std::move(tx)](Node<S>& self) {
    S* g = parent_grad(self, 0);
    if (!g) return;
    for (int ch = 0; ch < c; ++ch) {
      S* plane = g + static_cast<std::size_t>(ch) * h * w;
      for (int oy = 0; oy < ho; ++oy) {
        const Tap& a = ty[oy];
        for (int ox = 0; ox < wo; ++ox) {
          const Tap& b = tx[ox];
          const S go = self.grad[(static_cast<std::size_t>(ch) * ho + oy) * wo + ox];
          plane[a.i0 * w + b.i0] += go * (S(1) - a.l) * (S(1) - b.l);
          plane[a.i0 * w + b.i1] += go * (S(1) - a.l) * b.l;
          plane[a.i1 * w + b.i0] += go * a.l * (S(1) - b.l);
          plane[a.i1 * w + b.i1] += go * a.l * b.l;
        }
      }
    }
  });
}

}  // namespace calibformer::ag
