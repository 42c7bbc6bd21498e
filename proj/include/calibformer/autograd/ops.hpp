// Elementwise, token and normalization ops.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <type_traits>
#include <vector>

#include "calibformer/autograd/blas.hpp"
#include "calibformer/autograd/tensor.hpp"

namespace calibformer::ag {

namespace detail {
inline void require(bool cond, const std::string& msg) {
  if (!cond) throw Error(ErrorCode::kDimension, msg);
}
}  // namespace detail

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  detail::require(a.shape() == b.shape(),
                  "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<S> out(a.value());
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return make_result<S>(a.shape(), std::move(out), {a, b}, [](Node<S>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (S* g = parent_grad(self, k)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

template <class S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  detail::require(a.shape() == b.shape(), "mul: shape mismatch");
  std::vector<S> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result<S>(a.shape(), std::move(out), {a, b}, [](Node<S>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (S* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (S* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

template <class S>
Var<S> scale(const Var<S>& a, S factor) {
  std::vector<S> out(a.value());
  for (auto& x : out) x *= factor;
  return make_result<S>(a.shape(), std::move(out), {a}, [factor](Node<S>& self) {
    if (S* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += factor * self.grad[i];
    }
  });
}

template <class S>
Var<S> relu(const Var<S>& a) {
  std::vector<S> out(a.value());
  for (auto& x : out) x = x > S(0) ? x : S(0);
  return make_result<S>(a.shape(), std::move(out), {a}, [](Node<S>& self) {
    if (S* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        if (self.value[i] > S(0)) g[i] += self.grad[i];
      }
    }
  });
}

/// Exact (erf) GELU.
template <class S>
Var<S> gelu(const Var<S>& a) {
  const S inv_sqrt2 = S(0.70710678118654752440);
  std::vector<S> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const S x = a.value()[i];
    out[i] = S(0.5) * x * (S(1) + std::erf(x * inv_sqrt2));
  }
  return make_result<S>(a.shape(), std::move(out), {a}, [inv_sqrt2](Node<S>& self) {
    if (S* g = parent_grad(self, 0)) {
      const auto& in = self.parents[0]->value;
      const S inv_sqrt_2pi = S(0.39894228040143267794);
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const S x = in[i];
        const S cdf = S(0.5) * (S(1) + std::erf(x * inv_sqrt2));
        const S pdf = inv_sqrt_2pi * std::exp(S(-0.5) * x * x);
        g[i] += self.grad[i] * (cdf + x * pdf);
      }
    }
  });
}

template <class S>
Var<S> sigmoid(const Var<S>& a) {
  std::vector<S> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = S(1) / (S(1) + std::exp(-a.value()[i]));
  return make_result<S>(a.shape(), std::move(out), {a}, [](Node<S>& self) {
    if (S* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const S y = self.value[i];
        g[i] += self.grad[i] * y * (S(1) - y);
      }
    }
  });
}

/// Same data, new shape.
template <class S>
Var<S> reshape(const Var<S>& a, Shape shape) {
  detail::require(numel(shape) == a.size(), "reshape: element count mismatch");
  return make_result<S>(std::move(shape), a.value(), {a}, [](Node<S>& self) {
    if (S* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

/// Per-channel y = x * scale[c] + shift[c] on a [C, ...] tensor.
template <class S>
Var<S> channel_affine(const Var<S>& x, const Var<S>& scale_c, const Var<S>& shift_c) {
  const int channels = x.dim(0);
  detail::require(static_cast<int>(scale_c.size()) == channels &&
                      static_cast<int>(shift_c.size()) == channels,
                  "channel_affine: parameter size mismatch");
  const std::size_t plane = x.size() / static_cast<std::size_t>(channels);
  std::vector<S> out(x.size());
  for (int c = 0; c < channels; ++c) {
    const S a = scale_c.value()[c], b = shift_c.value()[c];
    for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] = x.value()[c * plane + i] * a + b;
  }
  return make_result<S>(x.shape(), std::move(out), {x, scale_c, shift_c},
                        [channels, plane](Node<S>& self) {
    const auto& xv = self.parents[0]->value;
    const auto& sv = self.parents[1]->value;
    S* gx = parent_grad(self, 0);
    S* gs = parent_grad(self, 1);
    S* gb = parent_grad(self, 2);
    for (int c = 0; c < channels; ++c) {
      S acc_s = 0, acc_b = 0;
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t idx = c * plane + i;
        const S go = self.grad[idx];
        if (gx) gx[idx] += go * sv[c];
        acc_s += go * xv[idx];
        acc_b += go;
      }
      if (gs) gs[c] += acc_s;
      if (gb) gb[c] += acc_b;
    }
  });
}

/// [L, In] x [Out, In]^T + bias -> [L, Out].
template <class S>
Var<S> linear(const Var<S>& x, const Var<S>& weight, const std::type_identity_t<Var<S>>* bias = nullptr) {
  detail::require(x.rank() == 2 && weight.rank() == 2 && x.dim(1) == weight.dim(1),
                  "linear: shape mismatch " + shape_str(x.shape()) + " x " + shape_str(weight.shape()));
  const int rows = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  std::vector<S> out(static_cast<std::size_t>(rows) * out_dim, S(0));
  if (bias) {
    detail::require(static_cast<int>(bias->size()) == out_dim, "linear: bias size mismatch");
    for (int r = 0; r < rows; ++r) {
      std::copy(bias->value().begin(), bias->value().end(), out.begin() + static_cast<std::ptrdiff_t>(r) * out_dim);
    }
  }
  gemm(false, true, rows, out_dim, in, S(1), x.value().data(), in, weight.value().data(), in,
       S(bias ? 1 : 0), out.data(), out_dim);
  std::vector<Var<S>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return make_result<S>({rows, out_dim}, std::move(out), std::move(inputs),
                        [rows, in, out_dim](Node<S>& self) {
    const auto& xv = self.parents[0]->value;
    const auto& wv = self.parents[1]->value;
    if (S* gx = parent_grad(self, 0)) {
      gemm(false, false, rows, in, out_dim, S(1), self.grad.data(), out_dim, wv.data(), in, S(1), gx, in);
    }
    if (S* gw = parent_grad(self, 1)) {
      gemm(true, false, out_dim, in, rows, S(1), self.grad.data(), out_dim, xv.data(), in, S(1), gw, in);
    }
    if (self.parents.size() > 2) {
      if (S* gb = parent_grad(self, 2)) {
        for (int r = 0; r < rows; ++r) {
          for (int o = 0; o < out_dim; ++o) gb[o] += self.grad[static_cast<std::size_t>(r) * out_dim + o];
        }
      }
    }
  });
}

/// Row-wise layer normalization of an [L, C] tensor.
template <class S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, S eps = S(1e-5)) {
  detail::require(x.rank() == 2 && static_cast<int>(gamma.size()) == x.dim(1) &&
                      static_cast<int>(beta.size()) == x.dim(1),
                  "layer_norm: shape mismatch");
  const int rows = x.dim(0), cols = x.dim(1);
  std::vector<S> out(x.size());
  std::vector<S> xhat(x.size());
  std::vector<S> inv_std(static_cast<std::size_t>(rows));
  const auto& xv = x.value();
  for (int r = 0; r < rows; ++r) {
    const S* row = xv.data() + static_cast<std::size_t>(r) * cols;
    S mean = 0;
    for (int c = 0; c < cols; ++c) mean += row[c];
    mean /= S(cols);
    S var = 0;
    for (int c = 0; c < cols; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= S(cols);
    const S is = S(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (int c = 0; c < cols; ++c) {
      const std::size_t idx = static_cast<std::size_t>(r) * cols + c;
      xhat[idx] = (row[c] - mean) * is;
      out[idx] = xhat[idx] * gamma.value()[c] + beta.value()[c];
    }
  }
  return make_result<S>(x.shape(), std::move(out), {x, gamma, beta},
                        [rows, cols, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<S>& self) {
    const auto& gv = self.parents[1]->value;
    S* gx = parent_grad(self, 0);
    S* gg = parent_grad(self, 1);
    S* gb = parent_grad(self, 2);
    for (int r = 0; r < rows; ++r) {
      S sum_dy = 0, sum_dy_xhat = 0;
      for (int c = 0; c < cols; ++c) {
        const std::size_t idx = static_cast<std::size_t>(r) * cols + c;
        const S go = self.grad[idx];
        if (gg) gg[c] += go * xhat[idx];
        if (gb) gb[c] += go;
        const S dy = go * gv[c];
        sum_dy += dy;
        sum_dy_xhat += dy * xhat[idx];
      }
      if (!gx) continue;
      for (int c = 0; c < cols; ++c) {
        const std::size_t idx = static_cast<std::size_t>(r) * cols + c;
        const S dy = self.grad[idx] * gv[c];
        gx[idx] += inv_std[r] * (dy - (sum_dy + xhat[idx] * sum_dy_xhat) / S(cols));
      }
    }
  });
}

/// out[r, :] = x[index[r], :] for an [L, C] tensor.
template <class S>
Var<S> gather_rows(const Var<S>& x, std::vector<int> index) {
  detail::require(x.rank() == 2, "gather_rows: expects [L, C]");
  const int cols = x.dim(1), rows_in = x.dim(0);
  const int rows = static_cast<int>(index.size());
  std::vector<S> out(static_cast<std::size_t>(rows) * cols);
  for (int r = 0; r < rows; ++r) {
    detail::require(index[r] >= 0 && index[r] < rows_in, "gather_rows: index out of range");
    std::copy_n(x.value().begin() + static_cast<std::ptrdiff_t>(index[r]) * cols, cols,
                out.begin() + static_cast<std::ptrdiff_t>(r) * cols);
  }
  return make_result<S>({rows, cols}, std::move(out), {x}, [cols, index = std::move(index)](Node<S>& self) {
    if (S* g = parent_grad(self, 0)) {
      for (std::size_t r = 0; r < index.size(); ++r) {
        for (int c = 0; c < cols; ++c) {
          g[static_cast<std::size_t>(index[r]) * cols + c] += self.grad[r * cols + c];
        }
      }
    }
  });
}

/// out.flat[i] = x.flat[index[i]].
template <class S>
Var<S> gather(const Var<S>& x, std::vector<int> index, Shape shape) {
  detail::require(numel(shape) == index.size(), "gather: index count does not match shape");
  std::vector<S> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) out[i] = x.value().at(static_cast<std::size_t>(index[i]));
  return make_result<S>(std::move(shape), std::move(out), {x}, [index = std::move(index)](Node<S>& self) {
    if (S* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < index.size(); ++i) g[index[i]] += self.grad[i];
    }
  });
}

/// [C, H, W] -> [H*W, C] with row-major positions.
template <class S>
Var<S> to_tokens(const Var<S>& x) {
  detail::require(x.rank() == 3, "to_tokens: expects [C, H, W]");
  const int c = x.dim(0);
  const int hw = x.dim(1) * x.dim(2);
  std::vector<S> out(x.size());
  for (int ch = 0; ch < c; ++ch) {
    for (int p = 0; p < hw; ++p) out[static_cast<std::size_t>(p) * c + ch] = x.value()[static_cast<std::size_t>(ch) * hw + p];
  }
  return make_result<S>({hw, c}, std::move(out), {x}, [c, hw](Node<S>& self) {
    if (S* g = parent_grad(self, 0)) {
      for (int ch = 0; ch < c; ++ch) {
        for (int p = 0; p < hw; ++p) g[static_cast<std::size_t>(ch) * hw + p] += self.grad[static_cast<std::size_t>(p) * c + ch];
      }
    }
  });
}

/// [H*W, C] -> [C, H, W].
template <class S>
Var<S> from_tokens(const Var<S>& x, int height, int width) {
  detail::require(x.rank() == 2 && x.dim(0) == height * width, "from_tokens: token count mismatch");
  const int c = x.dim(1);
  const int hw = height * width;
  std::vector<S> out(x.size());
  for (int p = 0; p < hw; ++p) {
    for (int ch = 0; ch < c; ++ch) out[static_cast<std::size_t>(ch) * hw + p] = x.value()[static_cast<std::size_t>(p) * c + ch];
  }
  return make_result<S>({c, height, width}, std::move(out), {x}, [c, hw](Node<S>& self) {
    if (S* g = parent_grad(self, 0)) {
      for (int p = 0; p < hw; ++p) {
        for (int ch = 0; ch < c; ++ch) g[static_cast<std::size_t>(p) * c + ch] += self.grad[static_cast<std::size_t>(ch) * hw + p];
      }
    }
  });
}

/// Concatenation along axis 0; trailing dimensions must agree.
template <class S>
Var<S> concat0(const std::vector<Var<S>>& parts) {
  detail::require(!parts.empty(), "concat0: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  int lead = 0;
  std::vector<S> out;
  for (const auto& p : parts) {
    detail::require(Shape(p.shape().begin() + 1, p.shape().end()) == tail, "concat0: trailing shape mismatch");
    lead += p.dim(0);
    out.insert(out.end(), p.value().begin(), p.value().end());
  }
  Shape shape{lead};
  shape.insert(shape.end(), tail.begin(), tail.end());
  return make_result<S>(std::move(shape), std::move(out), parts, [](Node<S>& self) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      const std::size_t n = self.parents[k]->value.size();
      if (S* g = parent_grad(self, k)) {
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offset + i];
      }
      offset += n;
    }
  });
}

/// Rows [begin, end) of axis 0.
template <class S>
Var<S> slice0(const Var<S>& x, int begin, int end) {
  detail::require(0 <= begin && begin <= end && end <= x.dim(0), "slice0: bad range");
  const std::size_t inner = x.size() / static_cast<std::size_t>(x.dim(0));
  Shape shape = x.shape();
  shape[0] = end - begin;
  std::vector<S> out(x.value().begin() + static_cast<std::ptrdiff_t>(begin * inner),
                     x.value().begin() + static_cast<std::ptrdiff_t>(end * inner));
  return make_result<S>(std::move(shape), std::move(out), {x}, [begin, inner](Node<S>& self) {
    if (S* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * inner + i] += self.grad[i];
    }
  });
}

/// [C, H, W] -> [C] spatial mean.
template <class S>
Var<S> global_avg_pool(const Var<S>& x) {
  detail::require(x.rank() == 3, "global_avg_pool: expects [C, H, W]");
  const int c = x.dim(0);
  const std::size_t hw = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  std::vector<S> out(static_cast<std::size_t>(c), S(0));
  for (int ch = 0; ch < c; ++ch) {
    S acc = 0;
    for (std::size_t p = 0; p < hw; ++p) acc += x.value()[ch * hw + p];
    out[ch] = acc / S(hw);
  }
  return make_result<S>({c}, std::move(out), {x}, [c, hw](Node<S>& self) {
    if (S* g = parent_grad(self, 0)) {
      for (int ch = 0; ch < c; ++ch) {
        const S go = self.grad[ch] / S(hw);
        for (std::size_t p = 0; p < hw; ++p) g[ch * hw + p] += go;
      }
    }
  });
}

/// Non-overlapping k x k mean pooling; H and W must be divisible by k.
template <class S>
Var<S> avg_pool(const Var<S>& x, int k) {
  detail::require(x.rank() == 3 && x.dim(1) % k == 0 && x.dim(2) % k == 0, "avg_pool: size not divisible");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2), ho = h / k, wo = w / k;
  std::vector<S> out(static_cast<std::size_t>(c) * ho * wo, S(0));
  const S inv = S(1) / S(k * k);
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < h; ++y) {
      for (int xx = 0; xx < w; ++xx) {
        out[(static_cast<std::size_t>(ch) * ho + y / k) * wo + xx / k] += x.value()[(static_cast<std::size_t>(ch) * h + y) * w + xx] * inv;
      }
    }
  }
  return make_result<S>({c, ho, wo}, std::move(out), {x}, [c, h, w, k, ho, wo, inv](Node<S>& self) {
    if (S* g = parent_grad(self, 0)) {
      for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < h; ++y) {
          for (int xx = 0; xx < w; ++xx) {
            g[(static_cast<std::size_t>(ch) * h + y) * w + xx] += self.grad[(static_cast<std::size_t>(ch) * ho + y / k) * wo + xx / k] * inv;
          }
        }
      }
    }
  });
}

/// Scalar sum(x * c) for a constant c; seeds external gradients into a graph.
template <class S>
Var<S> inner_const(const Var<S>& x, std::vector<S> c) {
  detail::require(c.size() == x.size(), "inner_const: size mismatch");
  S acc = 0;
  for (std::size_t i = 0; i < c.size(); ++i) acc += x.value()[i] * c[i];
  return make_result<S>({1}, {acc}, {x}, [c = std::move(c)](Node<S>& self) {
    if (S* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < c.size(); ++i) g[i] += self.grad[0] * c[i];
    }
  });
}

template <class S>
Var<S> sum(const Var<S>& x) {
  S acc = 0;
  for (S v : x.value()) acc += v;
  return make_result<S>({1}, {acc}, {x}, [](Node<S>& self) {
    if (S* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.parents[0]->value.size(); ++i) g[i] += self.grad[0];
    }
  });
}

}  // namespace calibformer::ag
