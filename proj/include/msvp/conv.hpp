#pragma once

// Spatial ops: conv2d (im2col + GEMM), 2x2 max pooling, global average
// pooling, and bilinear resizing with half-pixel centers and edge clamping.

#include <Eigen/Core>

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <optional>
#include <vector>

#include "msvp/ops.hpp"

namespace msvp {

namespace detail {

// Gathers one sample into col[K x OH*OW], K = C*kh*kw, zero padding.
template <typename S>
void im2col(const S* x, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw,
            int64_t stride, int64_t pad, int64_t oh, int64_t ow, S* col) {
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t i = 0; i < kh; ++i)
      for (int64_t j = 0; j < kw; ++j) {
        S* row = col + ((ci * kh + i) * kw + j) * (oh * ow);
        for (int64_t oy = 0; oy < oh; ++oy) {
          const int64_t sy = oy * stride - pad + i;
          S* dst = row + oy * ow;
          if (sy < 0 || sy >= h) {
            std::fill(dst, dst + ow, S(0));
            continue;
          }
          const S* src = x + (ci * h + sy) * w;
          if (stride == 1) {
            const int64_t lo = std::max<int64_t>(0, pad - j);
            const int64_t hi = std::min(ow, w + pad - j);
            if (lo > 0) std::fill(dst, dst + lo, S(0));
            if (hi > lo) std::memcpy(dst + lo, src + lo - pad + j,
                                     static_cast<size_t>(hi - lo) * sizeof(S));
            if (hi < ow) std::fill(dst + std::max(lo, hi), dst + ow, S(0));
          } else {
            for (int64_t ox = 0; ox < ow; ++ox) {
              const int64_t sx = ox * stride - pad + j;
              dst[ox] = (sx >= 0 && sx < w) ? src[sx] : S(0);
            }
          }
        }
      }
}

// Scatter-add of col gradients back into the input gradient.
template <typename S>
void col2im_add(const S* col, int64_t c, int64_t h, int64_t w, int64_t kh,
                int64_t kw, int64_t stride, int64_t pad, int64_t oh, int64_t ow,
                S* dx) {
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t i = 0; i < kh; ++i)
      for (int64_t j = 0; j < kw; ++j) {
        const S* row = col + ((ci * kh + i) * kw + j) * (oh * ow);
        for (int64_t oy = 0; oy < oh; ++oy) {
          const int64_t sy = oy * stride - pad + i;
          if (sy < 0 || sy >= h) continue;
          S* dst = dx + (ci * h + sy) * w;
          const S* src = row + oy * ow;
          for (int64_t ox = 0; ox < ow; ++ox) {
            const int64_t sx = ox * stride - pad + j;
            if (sx >= 0 && sx < w) dst[sx] += src[ox];
          }
        }
      }
}

}  // namespace detail

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w,
                 const std::optional<Tensor<S>>& bias, int64_t stride,
                 int64_t pad) {
  MSVP_CHECK(x.rank() == 4, "conv2d: input must be [N,Cin,H,W], got ",
             shape_str(x.shape()));
  MSVP_CHECK(w.rank() == 4, "conv2d: weight must be [Cout,Cin,kh,kw], got ",
             shape_str(w.shape()));
  MSVP_CHECK(x.dim(1) == w.dim(1), "conv2d: input has ", x.dim(1),
             " channels but weight expects ", w.dim(1));
  MSVP_CHECK(stride >= 1, "conv2d: stride must be >= 1, got ", stride);
  MSVP_CHECK(pad >= 0, "conv2d: padding must be >= 0, got ", pad);
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), ww = x.dim(3);
  const int64_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  MSVP_CHECK(kh <= h + 2 * pad && kw <= ww + 2 * pad,
             "conv2d: kernel ", kh, "x", kw, " exceeds padded input ",
             h + 2 * pad, "x", ww + 2 * pad);
  if (bias)
    MSVP_CHECK(bias->rank() == 1 && bias->dim(0) == cout,
               "conv2d: bias shape ", shape_str(bias->shape()),
               " does not match ", cout, " output channels");
  const int64_t oh = (h + 2 * pad - kh) / stride + 1;
  const int64_t ow = (ww + 2 * pad - kw) / stride + 1;
  const int64_t k = c * kh * kw, ohw = oh * ow;

  Tensor<S> y({n, cout, oh, ow});
  std::vector<S> col(static_cast<size_t>(k * ohw));
  ECMap<S> W(w.data(), cout, k);
  for (int64_t b = 0; b < n; ++b) {
    detail::im2col(x.data() + b * c * h * ww, c, h, ww, kh, kw, stride, pad, oh,
                   ow, col.data());
    ECMap<S> C(col.data(), k, ohw);
    EMap<S> Y(y.data() + b * cout * ohw, cout, ohw);
    Y.noalias() = W * C;
    if (bias) {
      const S* pb = bias->data();
      S* py = y.data() + b * cout * ohw;
      for (int64_t co = 0; co < cout; ++co)
        for (int64_t i = 0; i < ohw; ++i) py[co * ohw + i] += pb[co];
    }
  }

  const Tensor<S>* bptr = bias ? &*bias : nullptr;
  const bool need =
      bptr ? detail::track<S>({&x, &w, bptr}) : detail::track<S>({&x, &w});
  if (need) {
    auto xi = x.impl(), wi = w.impl(), yi = y.impl();
    auto bi = bias ? bias->impl() : nullptr;
    detail::record(y, [xi, wi, bi, yi, n, c, h, ww, cout, kh, kw, stride, pad,
                       oh, ow, k, ohw] {
      std::vector<S> col(static_cast<size_t>(k * ohw));
      std::vector<S> dcol;
      const bool nx = xi->needs_grad, nw = wi->needs_grad;
      const bool nb = bi && bi->needs_grad;
      if (nx) {
        xi->grad.resize(xi->data.size(), S(0));
        dcol.resize(static_cast<size_t>(k * ohw));
      }
      if (nw && wi->grad.empty()) wi->grad.assign(wi->data.size(), S(0));
      if (nb && bi->grad.empty()) bi->grad.assign(bi->data.size(), S(0));
      ECMap<S> W(wi->data.data(), cout, k);
      for (int64_t b = 0; b < n; ++b) {
        ECMap<S> G(yi->grad.data() + b * cout * ohw, cout, ohw);
        if (nw) {
          detail::im2col(xi->data.data() + b * c * h * ww, c, h, ww, kh, kw,
                         stride, pad, oh, ow, col.data());
          ECMap<S> C(col.data(), k, ohw);
          EMap<S> dW(wi->grad.data(), cout, k);
          dW.noalias() += G * C.transpose();
        }
        if (nx) {
          EMap<S> dC(dcol.data(), k, ohw);
          dC.noalias() = W.transpose() * G;
          detail::col2im_add(dcol.data(), c, h, ww, kh, kw, stride, pad, oh, ow,
                             xi->grad.data() + b * c * h * ww);
        }
        if (nb) {
          const S* g = yi->grad.data() + b * cout * ohw;
          for (int64_t co = 0; co < cout; ++co) {
            S acc(0);
            for (int64_t i = 0; i < ohw; ++i) acc += g[co * ohw + i];
            bi->grad[static_cast<size_t>(co)] += acc;
          }
        }
      }
    });
  }
  return y;
}

// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
// Ties resolve to the first element in scan order.
template <typename S>
Tensor<S> maxpool2d_2x2(const Tensor<S>& x) {
  MSVP_CHECK(x.rank() == 4, "maxpool2d: expected [N,C,H,W], got ",
             shape_str(x.shape()));
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  MSVP_CHECK(h >= 2 && w >= 2, "maxpool2d: input ", h, "x", w, " too small");
  const int64_t oh = h / 2, ow = w / 2;
  Tensor<S> y({n, c, oh, ow});
  std::vector<int64_t> arg(static_cast<size_t>(y.numel()));
  const S* px = x.data();
  S* py = y.data();
  for (int64_t bc = 0; bc < n * c; ++bc) {
    const S* plane = px + bc * h * w;
    for (int64_t oy = 0; oy < oh; ++oy)
      for (int64_t ox = 0; ox < ow; ++ox) {
        int64_t best = (2 * oy) * w + 2 * ox;
        S bv = plane[best];
        const int64_t cands[3] = {(2 * oy) * w + 2 * ox + 1,
                                  (2 * oy + 1) * w + 2 * ox,
                                  (2 * oy + 1) * w + 2 * ox + 1};
        for (int64_t idx : cands)
          if (plane[idx] > bv) {
            bv = plane[idx];
            best = idx;
          }
        const int64_t o = (bc * oh + oy) * ow + ox;
        py[o] = bv;
        arg[static_cast<size_t>(o)] = bc * h * w + best;
      }
  }
  if (detail::track<S>({&x})) {
    auto xi = x.impl(), yi = y.impl();
    const int64_t total = y.numel();
    detail::record(y, [xi, yi, arg = std::move(arg), total] {
      if (xi->grad.empty()) xi->grad.assign(xi->data.size(), S(0));
      for (int64_t o = 0; o < total; ++o)
        xi->grad[static_cast<size_t>(arg[static_cast<size_t>(o)])] +=
            yi->grad[static_cast<size_t>(o)];
    });
  }
  return y;
}

// Adaptive average pooling to 1x1, returned as [N,C].
template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
  MSVP_CHECK(x.rank() == 4, "global_avg_pool: expected [N,C,H,W], got ",
             shape_str(x.shape()));
  const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<S> y({n, c});
  const S* px = x.data();
  S* py = y.data();
  for (int64_t bc = 0; bc < n * c; ++bc) {
    S acc(0);
    const S* p = px + bc * hw;
    for (int64_t i = 0; i < hw; ++i) acc += p[i];
    py[bc] = acc / static_cast<S>(hw);
  }
  if (detail::track<S>({&x})) {
    auto xi = x.impl(), yi = y.impl();
    detail::record(y, [xi, yi, n, c, hw] {
      if (xi->grad.empty()) xi->grad.assign(xi->data.size(), S(0));
      for (int64_t bc = 0; bc < n * c; ++bc) {
        const S g = yi->grad[static_cast<size_t>(bc)] / static_cast<S>(hw);
        S* dx = xi->grad.data() + bc * hw;
        for (int64_t i = 0; i < hw; ++i) dx[i] += g;
      }
    });
  }
  return y;
}

namespace detail {
// Half-pixel-center source coordinates with edge clamping: for output index
// i of extent `out` sampling extent `in`, source = (i+0.5)*in/out - 0.5,
// clamped to [0, in-1].
template <typename S>
struct ResizeAxis {
  std::vector<int64_t> lo, hi;
  std::vector<S> frac;
};

template <typename S>
ResizeAxis<S> resize_axis(int64_t in, int64_t out) {
  ResizeAxis<S> ax;
  ax.lo.resize(static_cast<size_t>(out));
  ax.hi.resize(static_cast<size_t>(out));
  ax.frac.resize(static_cast<size_t>(out));
  for (int64_t i = 0; i < out; ++i) {
    double s = (static_cast<double>(i) + 0.5) * static_cast<double>(in) /
                   static_cast<double>(out) -
               0.5;
    if (s < 0) s = 0;
    const double max_s = static_cast<double>(in - 1);
    if (s > max_s) s = max_s;
    const auto lo = static_cast<int64_t>(s);
    ax.lo[static_cast<size_t>(i)] = lo;
    ax.hi[static_cast<size_t>(i)] = std::min(lo + 1, in - 1);
    ax.frac[static_cast<size_t>(i)] = static_cast<S>(s - static_cast<double>(lo));
  }
  return ax;
}
}  // namespace detail

template <typename S>
Tensor<S> bilinear_resize(const Tensor<S>& x, int64_t out_h, int64_t out_w) {
  MSVP_CHECK(x.rank() == 3, "bilinear_resize: expected [C,h,w], got ",
             shape_str(x.shape()));
  MSVP_CHECK(out_h >= 1 && out_w >= 1, "bilinear_resize: target ", out_h, "x",
             out_w, " must be positive");
  const int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor<S> y({c, out_h, out_w});
  const auto ay = detail::resize_axis<S>(h, out_h);
  const auto ax = detail::resize_axis<S>(w, out_w);
  const S* px = x.data();
  S* py = y.data();
  for (int64_t ci = 0; ci < c; ++ci) {
    const S* plane = px + ci * h * w;
    for (int64_t oy = 0; oy < out_h; ++oy) {
      const int64_t y0 = ay.lo[static_cast<size_t>(oy)];
      const int64_t y1 = ay.hi[static_cast<size_t>(oy)];
      const S fy = ay.frac[static_cast<size_t>(oy)];
      for (int64_t ox = 0; ox < out_w; ++ox) {
        const int64_t x0 = ax.lo[static_cast<size_t>(ox)];
        const int64_t x1 = ax.hi[static_cast<size_t>(ox)];
        const S fx = ax.frac[static_cast<size_t>(ox)];
        const S v00 = plane[y0 * w + x0], v01 = plane[y0 * w + x1];
        const S v10 = plane[y1 * w + x0], v11 = plane[y1 * w + x1];
        py[(ci * out_h + oy) * out_w + ox] =
            (S(1) - fy) * ((S(1) - fx) * v00 + fx * v01) +
            fy * ((S(1) - fx) * v10 + fx * v11);
      }
    }
  }
  if (detail::track<S>({&x})) {
    auto xi = x.impl(), yi = y.impl();
    detail::record(y, [xi, yi, ay, ax, c, h, w, out_h, out_w] {
      if (xi->grad.empty()) xi->grad.assign(xi->data.size(), S(0));
      for (int64_t ci = 0; ci < c; ++ci) {
        S* dplane = xi->grad.data() + ci * h * w;
        for (int64_t oy = 0; oy < out_h; ++oy) {
          const int64_t y0 = ay.lo[static_cast<size_t>(oy)];
          const int64_t y1 = ay.hi[static_cast<size_t>(oy)];
          const S fy = ay.frac[static_cast<size_t>(oy)];
          for (int64_t ox = 0; ox < out_w; ++ox) {
            const int64_t x0 = ax.lo[static_cast<size_t>(ox)];
            const int64_t x1 = ax.hi[static_cast<size_t>(ox)];
            const S fx = ax.frac[static_cast<size_t>(ox)];
            const S g = yi->grad[(ci * out_h + oy) * out_w + ox];
            dplane[y0 * w + x0] += g * (S(1) - fy) * (S(1) - fx);
            dplane[y0 * w + x1] += g * (S(1) - fy) * fx;
            dplane[y1 * w + x0] += g * fy * (S(1) - fx);
            dplane[y1 * w + x1] += g * fy * fx;
          }
        }
      }
    });
  }
  return y;
}

}  // namespace msvp
