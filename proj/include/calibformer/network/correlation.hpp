// Windowed multi-head correlation between two token grids.
//
// Channel layout of the output [(2d+1)^2 * n, h, w]: head-major, then window
// offsets row-major, i.e. channel = head*(2d+1)^2 + (dy+d)*(2d+1) + (dx+d).
// Entry (c, y, x) = <q_head(y, x), k_head(y+dy, x+dx)> / sqrt(d_k/n), and 0
// where (y+dy, x+dx) falls outside the map.
#pragma once

#include <cmath>
#include <vector>

#include "calibformer/autograd/ops.hpp"

namespace calibformer {

inline int correlation_channel(int head, int dy, int dx, int d) {
  const int side = 2 * d + 1;
  return head * side * side + (dy + d) * side + (dx + d);
}

/// q, k: tokens [h*w, C] (row-major grid). Returns [(2d+1)^2*heads, h, w].
template <class S>
ag::Var<S> windowed_correlation(const ag::Var<S>& q, const ag::Var<S>& k, int h, int w, int d, int heads) {
  ag::detail::require(q.rank() == 2 && q.shape() == k.shape() && q.dim(0) == h * w,
                      "correlation: q/k must both be [h*w, C]");
  ag::detail::require(heads >= 1 && q.dim(1) % heads == 0, "correlation: channels not divisible by heads");
  ag::detail::require(d >= 0, "correlation: negative window radius");
  const int c = q.dim(1), dh = c / heads, side = 2 * d + 1, offsets = side * side;
  const int channels = offsets * heads;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const S scale = S(1) / std::sqrt(S(dh));
  std::vector<S> out(channels * plane, S(0));
  const S* qv = q.value().data();
  const S* kv = k.value().data();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const S* qp = qv + (static_cast<std::size_t>(y) * w + x) * c;
      for (int dy = -d; dy <= d; ++dy) {
        const int yy = y + dy;
        if (yy < 0 || yy >= h) continue;
        for (int dx = -d; dx <= d; ++dx) {
          const int xx = x + dx;
          if (xx < 0 || xx >= w) continue;
          const S* kp = kv + (static_cast<std::size_t>(yy) * w + xx) * c;
          for (int hd = 0; hd < heads; ++hd) {
            S acc = 0;
            for (int j = hd * dh; j < (hd + 1) * dh; ++j) acc += qp[j] * kp[j];
            out[correlation_channel(hd, dy, dx, d) * plane + static_cast<std::size_t>(y) * w + x] = acc * scale;
          }
        }
      }
    }
  }
  return ag::make_result<S>(
      {channels, h, w}, std::move(out), {q, k}, [h, w, c, dh, d, heads, plane, scale](ag::Node<S>& self) {
        S* gq = ag::parent_grad(self, 0);
        S* gk = ag::parent_grad(self, 1);
        const S* qv = self.parents[0]->value.data();
        const S* kv = self.parents[1]->value.data();
        const S* g = self.grad.data();
        for (int y = 0; y < h; ++y) {
          for (int x = 0; x < w; ++x) {
            const std::size_t qi = (static_cast<std::size_t>(y) * w + x) * c;
            for (int dy = -d; dy <= d; ++dy) {
              const int yy = y + dy;
              if (yy < 0 || yy >= h) continue;
              for (int dx = -d; dx <= d; ++dx) {
                const int xx = x + dx;
                if (xx < 0 || xx >= w) continue;
                const std::size_t ki = (static_cast<std::size_t>(yy) * w + xx) * c;
                for (int hd = 0; hd < heads; ++hd) {
                  const S go =
                      g[correlation_channel(hd, dy, dx, d) * plane + static_cast<std::size_t>(y) * w + x] * scale;
                  if (go == S(0)) continue;
                  for (int j = hd * dh; j < (hd + 1) * dh; ++j) {
                    if (gq) gq[qi + j] += go * kv[ki + j];
                    if (gk) gk[ki + j] += go * qv[qi + j];
                  }
                }
              }
            }
          }
        }
      });
}

}  // namespace calibformer
