#pragma once

// Independent scalar reference implementations used as test oracles. These
// deliberately share no code with the library: plain nested loops, no Eigen,
// no tape. Keep them dumb.

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

namespace oracle {

// Direct six-nested-loop convolution, zero padding.
inline std::vector<double> conv2d(const std::vector<double>& x, int64_t n,
                                  int64_t cin, int64_t h, int64_t w,
                                  const std::vector<double>& wt, int64_t cout,
                                  int64_t kh, int64_t kw,
                                  const std::vector<double>* bias,
                                  int64_t stride, int64_t pad) {
  const int64_t oh = (h + 2 * pad - kh) / stride + 1;
  const int64_t ow = (w + 2 * pad - kw) / stride + 1;
  std::vector<double> y(static_cast<size_t>(n * cout * oh * ow), 0.0);
  for (int64_t b = 0; b < n; ++b)
    for (int64_t co = 0; co < cout; ++co)
      for (int64_t oy = 0; oy < oh; ++oy)
        for (int64_t ox = 0; ox < ow; ++ox) {
          double acc = bias ? (*bias)[static_cast<size_t>(co)] : 0.0;
          for (int64_t ci = 0; ci < cin; ++ci)
            for (int64_t i = 0; i < kh; ++i)
              for (int64_t j = 0; j < kw; ++j) {
                const int64_t sy = oy * stride - pad + i;
                const int64_t sx = ox * stride - pad + j;
                if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
                acc += x[static_cast<size_t>(((b * cin + ci) * h + sy) * w + sx)] *
                       wt[static_cast<size_t>(((co * cin + ci) * kh + i) * kw + j)];
              }
          y[static_cast<size_t>(((b * cout + co) * oh + oy) * ow + ox)] = acc;
        }
  return y;
}

// Scalar per-pixel bilinear resize with half-pixel centers and clamping:
// source coordinate = (i + 0.5) * in / out - 0.5, clamped to [0, in-1].
inline std::vector<double> bilinear_resize(const std::vector<double>& x,
                                           int64_t c, int64_t h, int64_t w,
                                           int64_t out_h, int64_t out_w) {
  std::vector<double> y(static_cast<size_t>(c * out_h * out_w));
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t oy = 0; oy < out_h; ++oy)
      for (int64_t ox = 0; ox < out_w; ++ox) {
        double sy = (static_cast<double>(oy) + 0.5) * static_cast<double>(h) /
                        static_cast<double>(out_h) -
                    0.5;
        double sx = (static_cast<double>(ox) + 0.5) * static_cast<double>(w) /
                        static_cast<double>(out_w) -
                    0.5;
        sy = std::min(std::max(sy, 0.0), static_cast<double>(h - 1));
        sx = std::min(std::max(sx, 0.0), static_cast<double>(w - 1));
        const auto y0 = static_cast<int64_t>(sy);
        const auto x0 = static_cast<int64_t>(sx);
        const int64_t y1 = std::min(y0 + 1, h - 1);
        const int64_t x1 = std::min(x0 + 1, w - 1);
        const double fy = sy - static_cast<double>(y0);
        const double fx = sx - static_cast<double>(x0);
        auto at = [&](int64_t yy, int64_t xx) {
          return x[static_cast<size_t>((ci * h + yy) * w + xx)];
        };
        y[static_cast<size_t>((ci * out_h + oy) * out_w + ox)] =
            (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) +
            fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
      }
  return y;
}

// Explicit-loop multi-head attention on one batch element:
// x[T,E] -> softmax(Q K^T / sqrt(dh)) V per head, heads concatenated, then
// the output projection. Weight layout matches a row-major [out,in] linear:
// qkv rows 0..E-1 produce Q, E..2E-1 produce K, 2E..3E-1 produce V.
inline std::vector<double> attention_single(
    const std::vector<double>& x, int64_t t, int64_t e,
    const std::vector<double>& wqkv, const std::vector<double>& bqkv,
    const std::vector<double>& wproj, const std::vector<double>& bproj,
    int64_t heads) {
  const int64_t dh = e / heads;
  std::vector<double> q(static_cast<size_t>(t * e)), k(q), v(q);
  for (int64_t i = 0; i < t; ++i)
    for (int64_t o = 0; o < 3 * e; ++o) {
      double acc = bqkv[static_cast<size_t>(o)];
      for (int64_t j = 0; j < e; ++j)
        acc += x[static_cast<size_t>(i * e + j)] *
               wqkv[static_cast<size_t>(o * e + j)];
      if (o < e)
        q[static_cast<size_t>(i * e + o)] = acc;
      else if (o < 2 * e)
        k[static_cast<size_t>(i * e + (o - e))] = acc;
      else
        v[static_cast<size_t>(i * e + (o - 2 * e))] = acc;
    }
  std::vector<double> ctx(static_cast<size_t>(t * e), 0.0);
  for (int64_t hd = 0; hd < heads; ++hd) {
    for (int64_t i = 0; i < t; ++i) {
      std::vector<double> scores(static_cast<size_t>(t));
      double mx = -1e300;
      for (int64_t j = 0; j < t; ++j) {
        double s = 0;
        for (int64_t d = 0; d < dh; ++d)
          s += q[static_cast<size_t>(i * e + hd * dh + d)] *
               k[static_cast<size_t>(j * e + hd * dh + d)];
        s /= std::sqrt(static_cast<double>(dh));
        scores[static_cast<size_t>(j)] = s;
        mx = std::max(mx, s);
      }
      double denom = 0;
      for (int64_t j = 0; j < t; ++j) {
        scores[static_cast<size_t>(j)] = std::exp(scores[static_cast<size_t>(j)] - mx);
        denom += scores[static_cast<size_t>(j)];
      }
      for (int64_t d = 0; d < dh; ++d) {
        double acc = 0;
        for (int64_t j = 0; j < t; ++j)
          acc += scores[static_cast<size_t>(j)] / denom *
                 v[static_cast<size_t>(j * e + hd * dh + d)];
        ctx[static_cast<size_t>(i * e + hd * dh + d)] = acc;
      }
    }
  }
  std::vector<double> out(static_cast<size_t>(t * e));
  for (int64_t i = 0; i < t; ++i)
    for (int64_t o = 0; o < e; ++o) {
      double acc = bproj[static_cast<size_t>(o)];
      for (int64_t j = 0; j < e; ++j)
        acc += ctx[static_cast<size_t>(i * e + j)] *
               wproj[static_cast<size_t>(o * e + j)];
      out[static_cast<size_t>(i * e + o)] = acc;
    }
  return out;
}

// Scalar cross entropy at 64-bit: mean over rows of log-sum-exp minus the
// label logit.
inline double cross_entropy(const std::vector<double>& logits, int64_t n,
                            int64_t k, const std::vector<int>& labels) {
  double total = 0;
  for (int64_t r = 0; r < n; ++r) {
    double mx = logits[static_cast<size_t>(r * k)];
    for (int64_t i = 1; i < k; ++i)
      mx = std::max(mx, logits[static_cast<size_t>(r * k + i)]);
    double denom = 0;
    for (int64_t i = 0; i < k; ++i)
      denom += std::exp(logits[static_cast<size_t>(r * k + i)] - mx);
    total += mx + std::log(denom) -
             logits[static_cast<size_t>(r * k + labels[static_cast<size_t>(r)])];
  }
  return total / static_cast<double>(n);
}

// Textbook Adam on a scalar parameter; returns the parameter trajectory.
// grad_fn supplies the gradient at the current parameter value.
template <typename GradFn>
std::vector<double> adam_trajectory(double theta0, double lr, double beta1,
                                    double beta2, double eps, int steps,
                                    GradFn grad_fn) {
  std::vector<double> traj;
  double theta = theta0, m = 0, v = 0;
  for (int t = 1; t <= steps; ++t) {
    const double g = grad_fn(theta);
    m = beta1 * m + (1 - beta1) * g;
    v = beta2 * v + (1 - beta2) * g * g;
    const double mhat = m / (1 - std::pow(beta1, t));
    const double vhat = v / (1 - std::pow(beta2, t));
    theta -= lr * (mhat / (std::sqrt(vhat) + eps));
    traj.push_back(theta);
  }
  return traj;
}

}  // namespace oracle
