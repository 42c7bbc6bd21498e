// Fused scaled dot-product multi-head attention over independent groups.
//
// Groups are contiguous row blocks (one per attention window, or a single
// group for global cross-attention). Heads split the channel axis evenly.
#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "calibformer/autograd/blas.hpp"
#include "calibformer/autograd/ops.hpp"
#include "calibformer/autograd/tensor.hpp"

namespace calibformer::ag {

template <class S>
struct AttentionOptions {
  int heads = 1;
  int groups = 1;
  /// Optional learned logit bias [heads, Lq, Lk], shared by all groups.
  const Var<S>* bias = nullptr;
  /// Optional constant additive mask [groups, Lq, Lk].
  const std::vector<S>* mask = nullptr;
  /// When set, receives the softmax weights [groups, heads, Lq, Lk].
  std::vector<S>* weights_out = nullptr;
};

/// q [G*Lq, C], k and v [G*Lk, C] -> [G*Lq, C].
template <class S>
Var<S> multi_head_attention(const Var<S>& q, const Var<S>& k, const Var<S>& v, const AttentionOptions<S>& opt) {
  detail::require(q.rank() == 2 && k.rank() == 2 && v.shape() == k.shape() && q.dim(1) == k.dim(1),
                  "attention: shape mismatch");
  const int c = q.dim(1), groups = opt.groups, heads = opt.heads;
  detail::require(c % heads == 0, "attention: channels not divisible by heads");
  detail::require(q.dim(0) % groups == 0 && k.dim(0) % groups == 0, "attention: rows not divisible by groups");
  const int lq = q.dim(0) / groups, lk = k.dim(0) / groups, dh = c / heads;
  const S scale = S(1) / std::sqrt(S(dh));
  const std::size_t block = static_cast<std::size_t>(lq) * lk;
  if (opt.bias) {
    detail::require(opt.bias->shape() == Shape{heads, lq, lk}, "attention: bias shape mismatch");
  }
  if (opt.mask) {
    detail::require(opt.mask->size() == static_cast<std::size_t>(groups) * block, "attention: mask size mismatch");
  }

  std::vector<S> probs(static_cast<std::size_t>(groups) * heads * block);
  std::vector<S> out(static_cast<std::size_t>(groups) * lq * c, S(0));
  const S* qv = q.value().data();
  const S* kv = k.value().data();
  const S* vv = v.value().data();
  for (int g = 0; g < groups; ++g) {
    for (int hd = 0; hd < heads; ++hd) {
      S* a = probs.data() + (static_cast<std::size_t>(g) * heads + hd) * block;
      const S* qp = qv + static_cast<std::size_t>(g) * lq * c + hd * dh;
      const S* kp = kv + static_cast<std::size_t>(g) * lk * c + hd * dh;
      gemm(false, true, lq, lk, dh, scale, qp, c, kp, c, S(0), a, lk);
      if (opt.bias) {
        const S* b = opt.bias->value().data() + static_cast<std::size_t>(hd) * block;
        for (std::size_t i = 0; i < block; ++i) a[i] += b[i];
      }
      if (opt.mask) {
        const S* m = opt.mask->data() + static_cast<std::size_t>(g) * block;
        for (std::size_t i = 0; i < block; ++i) a[i] += m[i];
      }
      for (int r = 0; r < lq; ++r) {
        S* row = a + static_cast<std::size_t>(r) * lk;
        S mx = -std::numeric_limits<S>::infinity();
        for (int j = 0; j < lk; ++j) mx = std::max(mx, row[j]);
        S total = 0;
        for (int j = 0; j < lk; ++j) {
          row[j] = std::exp(row[j] - mx);
          total += row[j];
        }
        for (int j = 0; j < lk; ++j) row[j] /= total;
      }
      gemm(false, false, lq, dh, lk, S(1), a, lk, vv + static_cast<std::size_t>(g) * lk * c + hd * dh, c, S(0),
           out.data() + static_cast<std::size_t>(g) * lq * c + hd * dh, c);
    }
  }
  if (opt.weights_out) *opt.weights_out = probs;

  std::vector<Var<S>> inputs{q, k, v};
  if (opt.bias) inputs.push_back(*opt.bias);
  return make_result<S>({groups * lq, c}, std::move(out), std::move(inputs),
                        [=, probs = std::move(probs)](Node<S>& self) {
    const S* qv = self.parents[0]->value.data();
    const S* kv = self.parents[1]->value.data();
    const S* vv = self.parents[2]->value.data();
    S* gq = parent_grad(self, 0);
    S* gk = parent_grad(self, 1);
    S* gv = parent_grad(self, 2);
    S* gb = self.parents.size() > 3 ? parent_grad(self, 3) : nullptr;
    std::vector<S> da(block);
    for (int g = 0; g < groups; ++g) {
      for (int hd = 0; hd < heads; ++hd) {
        const S* a = probs.data() + (static_cast<std::size_t>(g) * heads + hd) * block;
        const S* go = self.grad.data() + static_cast<std::size_t>(g) * lq * c + hd * dh;
        const std::size_t koff = static_cast<std::size_t>(g) * lk * c + hd * dh;
        const std::size_t qoff = static_cast<std::size_t>(g) * lq * c + hd * dh;
        if (gv) gemm(true, false, lk, dh, lq, S(1), a, lk, go, c, S(1), gv + koff, c);
        gemm(false, true, lq, lk, dh, S(1), go, c, vv + koff, c, S(0), da.data(), lk);
        for (int r = 0; r < lq; ++r) {
          S* drow = da.data() + static_cast<std::size_t>(r) * lk;
          const S* arow = a + static_cast<std::size_t>(r) * lk;
          S dot = 0;
          for (int j = 0; j < lk; ++j) dot += drow[j] * arow[j];
          for (int j = 0; j < lk; ++j) drow[j] = arow[j] * (drow[j] - dot);
        }
        if (gb) {
          S* b = gb + static_cast<std::size_t>(hd) * block;
          for (std::size_t i = 0; i < block; ++i) b[i] += da[i];
        }
        if (gq) gemm(false, false, lq, dh, lk, scale, da.data(), lk, kv + koff, c, S(1), gq + qoff, c);
        if (gk) gemm(true, false, lk, dh, lq, scale, da.data(), lk, qv + qoff, c, S(1), gk + koff, c);
      }
    }
  });
}

}  // namespace calibformer::ag
