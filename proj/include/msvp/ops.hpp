#pragma once

// The differentiable op surface shared by every backbone and by the
// prompting module. Each op computes its forward result and, when a tape
// is active and an input is on the differentiable path, records a backward
// closure that accumulates into the inputs' gradients. Matrix products are
// delegated to Eigen; everything else is explicit loops.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "msvp/tape.hpp"
#include "msvp/tensor.hpp"

namespace msvp {

template <typename S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using EMap = Eigen::Map<EMat<S>>;
template <typename S>
using ECMap = Eigen::Map<const EMat<S>>;

namespace detail {

template <typename S>
inline bool tape_active() {
  return GradTape<S>::current() != nullptr;
}

template <typename S>
inline bool track(std::initializer_list<const Tensor<S>*> inputs) {
  if (!tape_active<S>()) return false;
  for (const auto* t : inputs)
    if (t->needs_grad()) return true;
  return false;
}

template <typename S, typename Fn>
inline void record(Tensor<S>& out, Fn&& fn) {
  out.mark_needs_grad();
  GradTape<S>::current()->record(out.impl(), std::forward<Fn>(fn));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  MSVP_CHECK(same_shape(a, b), "add: shape mismatch ", shape_str(a.shape()),
             " vs ", shape_str(b.shape()));
  Tensor<S> y(a.shape());
  const S* pa = a.data();
  const S* pb = b.data();
  S* py = y.data();
  const int64_t n = y.numel();
  for (int64_t i = 0; i < n; ++i) py[i] = pa[i] + pb[i];
  if (detail::track<S>({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), yi = y.impl();
    detail::record(y, [ai, bi, yi, n] {
      const S* g = yi->grad.data();
      if (ai->needs_grad) {
        if (ai->grad.empty()) ai->grad.assign(ai->data.size(), S(0));
        for (int64_t i = 0; i < n; ++i) ai->grad[i] += g[i];
      }
      if (bi->needs_grad) {
        if (bi->grad.empty()) bi->grad.assign(bi->data.size(), S(0));
        for (int64_t i = 0; i < n; ++i) bi->grad[i] += g[i];
      }
    });
  }
  return y;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  MSVP_CHECK(same_shape(a, b), "sub: shape mismatch ", shape_str(a.shape()),
             " vs ", shape_str(b.shape()));
  Tensor<S> y(a.shape());
  const S* pa = a.data();
  const S* pb = b.data();
  S* py = y.data();
  const int64_t n = y.numel();
  for (int64_t i = 0; i < n; ++i) py[i] = pa[i] - pb[i];
  if (detail::track<S>({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), yi = y.impl();
    detail::record(y, [ai, bi, yi, n] {
      const S* g = yi->grad.data();
      if (ai->needs_grad) {
        if (ai->grad.empty()) ai->grad.assign(ai->data.size(), S(0));
        for (int64_t i = 0; i < n; ++i) ai->grad[i] += g[i];
      }
      if (bi->needs_grad) {
        if (bi->grad.empty()) bi->grad.assign(bi->data.size(), S(0));
        for (int64_t i = 0; i < n; ++i) bi->grad[i] -= g[i];
      }
    });
  }
  return y;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  MSVP_CHECK(same_shape(a, b), "mul: shape mismatch ", shape_str(a.shape()),
             " vs ", shape_str(b.shape()));
  Tensor<S> y(a.shape());
  const S* pa = a.data();
  const S* pb = b.data();
  S* py = y.data();
  const int64_t n = y.numel();
  for (int64_t i = 0; i < n; ++i) py[i] = pa[i] * pb[i];
  if (detail::track<S>({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), yi = y.impl();
    detail::record(y, [ai, bi, yi, n] {
      const S* g = yi->grad.data();
      if (ai->needs_grad) {
        if (ai->grad.empty()) ai->grad.assign(ai->data.size(), S(0));
        for (int64_t i = 0; i < n; ++i) ai->grad[i] += g[i] * bi->data[i];
      }
      if (bi->needs_grad) {
        if (bi->grad.empty()) bi->grad.assign(bi->data.size(), S(0));
        for (int64_t i = 0; i < n; ++i) bi->grad[i] += g[i] * ai->data[i];
      }
    });
  }
  return y;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S c) {
  Tensor<S> y(x.shape());
  const S* px = x.data();
  S* py = y.data();
  const int64_t n = y.numel();
  for (int64_t i = 0; i < n; ++i) py[i] = px[i] * c;
  if (detail::track<S>({&x})) {
    auto xi = x.impl(), yi = y.impl();
    detail::record(y, [xi, yi, c, n] {
      if (xi->grad.empty()) xi->grad.assign(xi->data.size(), S(0));
      const S* g = yi->grad.data();
      for (int64_t i = 0; i < n; ++i) xi->grad[i] += g[i] * c;
    });
  }
  return y;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  Tensor<S> y(x.shape());
  const S* px = x.data();
  S* py = y.data();
  const int64_t n = y.numel();
  for (int64_t i = 0; i < n; ++i) py[i] = px[i] > S(0) ? px[i] : S(0);
  if (detail::track<S>({&x})) {
    auto xi = x.impl(), yi = y.impl();
    detail::record(y, [xi, yi, n] {
      if (xi->grad.empty()) xi->grad.assign(xi->data.size(), S(0));
      const S* g = yi->grad.data();
      for (int64_t i = 0; i < n; ++i)
        if (xi->data[i] > S(0)) xi->grad[i] += g[i];
    });
  }
  return y;
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  Tensor<S> y(x.shape());
  const S* px = x.data();
  S* py = y.data();
  const int64_t n = y.numel();
  for (int64_t i = 0; i < n; ++i) {
    const S v = px[i];
    if (v >= S(0)) {
      py[i] = S(1) / (S(1) + std::exp(-v));
    } else {
      const S e = std::exp(v);
      py[i] = e / (S(1) + e);
    }
  }
  if (detail::track<S>({&x})) {
    auto xi = x.impl(), yi = y.impl();
    detail::record(y, [xi, yi, n] {
      if (xi->grad.empty()) xi->grad.assign(xi->data.size(), S(0));
      const S* g = yi->grad.data();
      for (int64_t i = 0; i < n; ++i) {
        const S s = yi->data[i];
        xi->grad[i] += g[i] * s * (S(1) - s);
      }
    });
  }
  return y;
}

template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
  // exact (erf) form
  static const S inv_sqrt2 = S(0.70710678118654752440);
  static const S inv_sqrt2pi = S(0.39894228040143267794);
  Tensor<S> y(x.shape());
  const S* px = x.data();
  S* py = y.data();
  const int64_t n = y.numel();
  for (int64_t i = 0; i < n; ++i)
    py[i] = S(0.5) * px[i] * (S(1) + std::erf(px[i] * inv_sqrt2));
  if (detail::track<S>({&x})) {
    auto xi = x.impl(), yi = y.impl();
    detail::record(y, [xi, yi, n] {
      if (xi->grad.empty()) xi->grad.assign(xi->data.size(), S(0));
      const S* g = yi->grad.data();
      for (int64_t i = 0; i < n; ++i) {
        const S v = xi->data[i];
        const S cdf = S(0.5) * (S(1) + std::erf(v * inv_sqrt2));
        const S pdf = inv_sqrt2pi * std::exp(S(-0.5) * v * v);
        xi->grad[i] += g[i] * (cdf + v * pdf);
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// reductions

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  const S* px = x.data();
  const int64_t n = x.numel();
  S acc(0);
  for (int64_t i = 0; i < n; ++i) acc += px[i];
  Tensor<S> y = Tensor<S>::scalar(acc);
  if (detail::track<S>({&x})) {
    auto xi = x.impl(), yi = y.impl();
    detail::record(y, [xi, yi, n] {
      if (xi->grad.empty()) xi->grad.assign(xi->data.size(), S(0));
      const S g = yi->grad[0];
      for (int64_t i = 0; i < n; ++i) xi->grad[i] += g;
    });
  }
  return y;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  const S* px = x.data();
  const int64_t n = x.numel();
  S acc(0);
  for (int64_t i = 0; i < n; ++i) acc += px[i];
  Tensor<S> y = Tensor<S>::scalar(acc / static_cast<S>(n));
  if (detail::track<S>({&x})) {
    auto xi = x.impl(), yi = y.impl();
    detail::record(y, [xi, yi, n] {
      if (xi->grad.empty()) xi->grad.assign(xi->data.size(), S(0));
      const S g = yi->grad[0] / static_cast<S>(n);
      for (int64_t i = 0; i < n; ++i) xi->grad[i] += g;
    });
  }
  return y;
}

template <typename S>
Tensor<S> select_item(const Tensor<S>& x, int64_t flat_index) {
  MSVP_CHECK(flat_index >= 0 && flat_index < x.numel(),
             "select_item: index ", flat_index, " out of range for ",
             x.numel(), " elements");
  Tensor<S> y = Tensor<S>::scalar(x.data()[flat_index]);
  if (detail::track<S>({&x})) {
    auto xi = x.impl(), yi = y.impl();
    detail::record(y, [xi, yi, flat_index] {
      if (xi->grad.empty()) xi->grad.assign(xi->data.size(), S(0));
      xi->grad[static_cast<size_t>(flat_index)] += yi->grad[0];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// shape manipulation (explicit copies; backward is the inverse movement)

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape new_shape) {
  MSVP_CHECK(numel_of(new_shape) == x.numel(), "reshape: cannot view ",
             shape_str(x.shape()), " as ", shape_str(new_shape));
  Tensor<S> y(std::move(new_shape), x.vec());
  if (detail::track<S>({&x})) {
    auto xi = x.impl(), yi = y.impl();
    const int64_t n = x.numel();
    detail::record(y, [xi, yi, n] {
      if (xi->grad.empty()) xi->grad.assign(xi->data.size(), S(0));
      for (int64_t i = 0; i < n; ++i) xi->grad[i] += yi->grad[i];
    });
  }
  return y;
}

namespace detail {
inline std::vector<int64_t> strides_of(const Shape& shape) {
  std::vector<int64_t> st(shape.size());
  int64_t acc = 1;
  for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
    st[static_cast<size_t>(i)] = acc;
    acc *= shape[static_cast<size_t>(i)];
  }
  return st;
}
}  // namespace detail

template <typename S>
Tensor<S> permute(const Tensor<S>& x, const std::vector<int>& perm) {
  const int r = x.rank();
  MSVP_CHECK(static_cast<int>(perm.size()) == r, "permute: rank mismatch");
  Shape out_shape(static_cast<size_t>(r));
  std::vector<bool> seen(static_cast<size_t>(r), false);
  for (int i = 0; i < r; ++i) {
    const int p = perm[static_cast<size_t>(i)];
    MSVP_CHECK(p >= 0 && p < r && !seen[static_cast<size_t>(p)],
               "permute: invalid permutation");
    seen[static_cast<size_t>(p)] = true;
    out_shape[static_cast<size_t>(i)] = x.dim(p);
  }
  Tensor<S> y(out_shape);
  const auto in_st = detail::strides_of(x.shape());
  const auto out_st = detail::strides_of(out_shape);
  const int64_t n = x.numel();
  // out index -> in index mapping; walk output linearly
  const S* px = x.data();
  S* py = y.data();
  std::vector<int64_t> in_stride_for_out(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i)
    in_stride_for_out[static_cast<size_t>(i)] =
        in_st[static_cast<size_t>(perm[static_cast<size_t>(i)])];
  std::vector<int64_t> map(static_cast<size_t>(n));
  for (int64_t o = 0; o < n; ++o) {
    int64_t rem = o, src = 0;
    for (int i = 0; i < r; ++i) {
      const int64_t q = rem / out_st[static_cast<size_t>(i)];
      rem -= q * out_st[static_cast<size_t>(i)];
      src += q * in_stride_for_out[static_cast<size_t>(i)];
    }
    map[static_cast<size_t>(o)] = src;
    py[o] = px[src];
  }
  if (detail::track<S>({&x})) {
    auto xi = x.impl(), yi = y.impl();
    detail::record(y, [xi, yi, map = std::move(map), n] {
      if (xi->grad.empty()) xi->grad.assign(xi->data.size(), S(0));
      for (int64_t o = 0; o < n; ++o)
        xi->grad[static_cast<size_t>(map[static_cast<size_t>(o)])] +=
            yi->grad[static_cast<size_t>(o)];
    });
  }
  return y;
}

template <typename S>
Tensor<S> concat_channels(const std::vector<Tensor<S>>& parts) {
  MSVP_CHECK(!parts.empty(), "concat_channels: no inputs");
  const auto& s0 = parts[0].shape();
  MSVP_CHECK(s0.size() == 4, "concat_channels: expected [N,C,H,W] inputs");
  int64_t total_c = 0;
  for (const auto& p : parts) {
    MSVP_CHECK(p.rank() == 4 && p.dim(0) == s0[0] && p.dim(2) == s0[2] &&
                   p.dim(3) == s0[3],
               "concat_channels: incompatible shape ", shape_str(p.shape()),
               " vs ", shape_str(s0));
    total_c += p.dim(1);
  }
  const int64_t n = s0[0], hw = s0[2] * s0[3];
  Tensor<S> y({n, total_c, s0[2], s0[3]});
  S* py = y.data();
  int64_t c_off = 0;
  for (const auto& p : parts) {
    const int64_t c = p.dim(1);
    const S* pp = p.data();
    for (int64_t b = 0; b < n; ++b)
      std::copy(pp + b * c * hw, pp + (b + 1) * c * hw,
                py + (b * total_c + c_off) * hw);
    c_off += c;
  }
  bool any = false;
  for (const auto& p : parts)
    if (p.needs_grad()) any = true;
  if (detail::tape_active<S>() && any) {
    std::vector<std::shared_ptr<typename Tensor<S>::Impl>> impls;
    impls.reserve(parts.size());
    for (const auto& p : parts) impls.push_back(p.impl());
    auto yi = y.impl();
    detail::record(y, [impls, yi, n, total_c, hw] {
      int64_t off = 0;
      for (const auto& pi : impls) {
        const int64_t c = static_cast<int64_t>(pi->data.size()) / (n * hw);
        if (pi->needs_grad) {
          if (pi->grad.empty()) pi->grad.assign(pi->data.size(), S(0));
          for (int64_t b = 0; b < n; ++b) {
            const S* g = yi->grad.data() + (b * total_c + off) * hw;
            S* dst = pi->grad.data() + b * c * hw;
            for (int64_t i = 0; i < c * hw; ++i) dst[i] += g[i];
          }
        }
        off += c;
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// broadcast helpers used by prompting and the transformer

// [C,H,W] replicated across a batch -> [N,C,H,W]
template <typename S>
Tensor<S> broadcast_to_batch(const Tensor<S>& m, int64_t batch) {
  MSVP_CHECK(m.rank() == 3, "broadcast_to_batch: expected [C,H,W], got ",
             shape_str(m.shape()));
  const int64_t chw = m.numel();
  Tensor<S> y({batch, m.dim(0), m.dim(1), m.dim(2)});
  S* py = y.data();
  for (int64_t b = 0; b < batch; ++b)
    std::copy(m.data(), m.data() + chw, py + b * chw);
  if (detail::track<S>({&m})) {
    auto mi = m.impl(), yi = y.impl();
    detail::record(y, [mi, yi, batch, chw] {
      if (mi->grad.empty()) mi->grad.assign(mi->data.size(), S(0));
      for (int64_t b = 0; b < batch; ++b) {
        const S* g = yi->grad.data() + b * chw;
        for (int64_t i = 0; i < chw; ++i) mi->grad[i] += g[i];
      }
    });
  }
  return y;
}

// x[N,C,H,W] + m[C,H,W] broadcast over the batch
template <typename S>
Tensor<S> add_channel_map(const Tensor<S>& x, const Tensor<S>& m) {
  MSVP_CHECK(x.rank() == 4 && m.rank() == 3 && x.dim(1) == m.dim(0) &&
                 x.dim(2) == m.dim(1) && x.dim(3) == m.dim(2),
             "add_channel_map: shape mismatch ", shape_str(x.shape()), " vs ",
             shape_str(m.shape()));
  const int64_t batch = x.dim(0), chw = m.numel();
  Tensor<S> y(x.shape());
  const S* px = x.data();
  const S* pm = m.data();
  S* py = y.data();
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t i = 0; i < chw; ++i) py[b * chw + i] = px[b * chw + i] + pm[i];
  if (detail::track<S>({&x, &m})) {
    auto xi = x.impl(), mi = m.impl(), yi = y.impl();
    detail::record(y, [xi, mi, yi, batch, chw] {
      const S* g = yi->grad.data();
      if (xi->needs_grad) {
        if (xi->grad.empty()) xi->grad.assign(xi->data.size(), S(0));
        for (int64_t i = 0; i < batch * chw; ++i) xi->grad[i] += g[i];
      }
      if (mi->needs_grad) {
        if (mi->grad.empty()) mi->grad.assign(mi->data.size(), S(0));
        for (int64_t b = 0; b < batch; ++b)
          for (int64_t i = 0; i < chw; ++i) mi->grad[i] += g[b * chw + i];
      }
    });
  }
  return y;
}

// m[C,H,W] scaled per channel by s[C]
template <typename S>
Tensor<S> scale_channels(const Tensor<S>& m, const Tensor<S>& s) {
  MSVP_CHECK(m.rank() == 3 && s.rank() == 1 && s.dim(0) == m.dim(0),
             "scale_channels: shape mismatch ", shape_str(m.shape()), " vs ",
             shape_str(s.shape()));
  const int64_t c = m.dim(0), hw = m.dim(1) * m.dim(2);
  Tensor<S> y(m.shape());
  const S* pm = m.data();
  const S* ps = s.data();
  S* py = y.data();
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t i = 0; i < hw; ++i) py[ci * hw + i] = pm[ci * hw + i] * ps[ci];
  if (detail::track<S>({&m, &s})) {
    auto mi = m.impl(), si = s.impl(), yi = y.impl();
    detail::record(y, [mi, si, yi, c, hw] {
      const S* g = yi->grad.data();
      if (mi->needs_grad) {
        if (mi->grad.empty()) mi->grad.assign(mi->data.size(), S(0));
        for (int64_t ci = 0; ci < c; ++ci)
          for (int64_t i = 0; i < hw; ++i)
            mi->grad[ci * hw + i] += g[ci * hw + i] * si->data[ci];
      }
      if (si->needs_grad) {
        if (si->grad.empty()) si->grad.assign(si->data.size(), S(0));
        for (int64_t ci = 0; ci < c; ++ci) {
          S acc(0);
          for (int64_t i = 0; i < hw; ++i)
            acc += g[ci * hw + i] * mi->data[ci * hw + i];
          si->grad[ci] += acc;
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// matrix products

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  MSVP_CHECK(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
             "matmul: incompatible shapes ", shape_str(a.shape()), " x ",
             shape_str(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<S> y({m, n});
  ECMap<S> A(a.data(), m, k);
  ECMap<S> B(b.data(), k, n);
  EMap<S> Y(y.data(), m, n);
  Y.noalias() = A * B;
  if (detail::track<S>({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), yi = y.impl();
    detail::record(y, [ai, bi, yi, m, k, n] {
      ECMap<S> G(yi->grad.data(), m, n);
      if (ai->needs_grad) {
        if (ai->grad.empty()) ai->grad.assign(ai->data.size(), S(0));
        EMap<S> dA(ai->grad.data(), m, k);
        ECMap<S> B(bi->data.data(), k, n);
        dA.noalias() += G * B.transpose();
      }
      if (bi->needs_grad) {
        if (bi->grad.empty()) bi->grad.assign(bi->data.size(), S(0));
        EMap<S> dB(bi->grad.data(), k, n);
        ECMap<S> A(ai->data.data(), m, k);
        dB.noalias() += A.transpose() * G;
      }
    });
  }
  return y;
}

// Batched matmul with optional transposes: y[i] = opA(a[i]) * opB(b[i]).
template <typename S>
Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b, bool trans_a = false,
              bool trans_b = false) {
  MSVP_CHECK(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0),
             "bmm: expected matching 3-d batches, got ", shape_str(a.shape()),
             " and ", shape_str(b.shape()));
  const int64_t batch = a.dim(0);
  const int64_t m = trans_a ? a.dim(2) : a.dim(1);
  const int64_t k = trans_a ? a.dim(1) : a.dim(2);
  const int64_t kb = trans_b ? b.dim(2) : b.dim(1);
  const int64_t n = trans_b ? b.dim(1) : b.dim(2);
  MSVP_CHECK(k == kb, "bmm: inner dimensions differ (", k, " vs ", kb, ")");
  Tensor<S> y({batch, m, n});
  const int64_t as = a.dim(1) * a.dim(2), bs = b.dim(1) * b.dim(2), ys = m * n;
  for (int64_t i = 0; i < batch; ++i) {
    ECMap<S> A(a.data() + i * as, a.dim(1), a.dim(2));
    ECMap<S> B(b.data() + i * bs, b.dim(1), b.dim(2));
    EMap<S> Y(y.data() + i * ys, m, n);
    if (!trans_a && !trans_b)
      Y.noalias() = A * B;
    else if (!trans_a && trans_b)
      Y.noalias() = A * B.transpose();
    else if (trans_a && !trans_b)
      Y.noalias() = A.transpose() * B;
    else
      Y.noalias() = A.transpose() * B.transpose();
  }
  if (detail::track<S>({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), yi = y.impl();
    const int64_t ar = a.dim(1), ac = a.dim(2), br = b.dim(1), bc = b.dim(2);
    detail::record(y, [=] {
      for (int64_t i = 0; i < batch; ++i) {
        ECMap<S> G(yi->grad.data() + i * ys, m, n);
        ECMap<S> A(ai->data.data() + i * as, ar, ac);
        ECMap<S> B(bi->data.data() + i * bs, br, bc);
        if (ai->needs_grad) {
          if (ai->grad.empty()) ai->grad.assign(ai->data.size(), S(0));
          EMap<S> dA(ai->grad.data() + i * as, ar, ac);
          if (!trans_a)
            dA.noalias() += trans_b ? (G * B).eval() : (G * B.transpose()).eval();
          else
            dA.noalias() += trans_b ? (B.transpose() * G.transpose()).eval()
                                    : (B * G.transpose()).eval();
        }
        if (bi->needs_grad) {
          if (bi->grad.empty()) bi->grad.assign(bi->data.size(), S(0));
          EMap<S> dB(bi->grad.data() + i * bs, br, bc);
          if (!trans_b)
            dB.noalias() += trans_a ? (A * G).eval() : (A.transpose() * G).eval();
          else
            dB.noalias() += trans_a ? (G.transpose() * A.transpose()).eval()
                                    : (G.transpose() * A).eval();
        }
      }
    });
  }
  return y;
}

// y = x * W^T + b, with x[N,in], W[out,in], b[out]
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w,
                 const std::optional<Tensor<S>>& bias) {
  MSVP_CHECK(x.rank() == 2 && w.rank() == 2 && x.dim(1) == w.dim(1),
             "linear: shapes ", shape_str(x.shape()), " and ",
             shape_str(w.shape()), " are incompatible");
  const int64_t n = x.dim(0), in = x.dim(1), out = w.dim(0);
  if (bias)
    MSVP_CHECK(bias->rank() == 1 && bias->dim(0) == out,
               "linear: bias shape ", shape_str(bias->shape()),
               " does not match out features ", out);
  Tensor<S> y({n, out});
  ECMap<S> X(x.data(), n, in);
  ECMap<S> W(w.data(), out, in);
  EMap<S> Y(y.data(), n, out);
  Y.noalias() = X * W.transpose();
  if (bias) {
    const S* pb = bias->data();
    S* py = y.data();
    for (int64_t r = 0; r < n; ++r)
      for (int64_t c = 0; c < out; ++c) py[r * out + c] += pb[c];
  }
  const Tensor<S>* bptr = bias ? &*bias : nullptr;
  const bool need =
      bptr ? detail::track<S>({&x, &w, bptr}) : detail::track<S>({&x, &w});
  if (need) {
    auto xi = x.impl(), wi = w.impl(), yi = y.impl();
    auto bi = bias ? bias->impl() : nullptr;
    detail::record(y, [xi, wi, bi, yi, n, in, out] {
      ECMap<S> G(yi->grad.data(), n, out);
      if (xi->needs_grad) {
        if (xi->grad.empty()) xi->grad.assign(xi->data.size(), S(0));
        EMap<S> dX(xi->grad.data(), n, in);
        ECMap<S> W(wi->data.data(), out, in);
        dX.noalias() += G * W;
      }
      if (wi->needs_grad) {
        if (wi->grad.empty()) wi->grad.assign(wi->data.size(), S(0));
        EMap<S> dW(wi->grad.data(), out, in);
        ECMap<S> X(xi->data.data(), n, in);
        dW.noalias() += G.transpose() * X;
      }
      if (bi && bi->needs_grad) {
        if (bi->grad.empty()) bi->grad.assign(bi->data.size(), S(0));
        for (int64_t r = 0; r < n; ++r)
          for (int64_t c = 0; c < out; ++c)
            bi->grad[static_cast<size_t>(c)] += yi->grad[r * out + c];
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// transformer plumbing

// x[N,T,E] -> [N,E], picking token t
template <typename S>
Tensor<S> select_token(const Tensor<S>& x, int64_t t) {
  MSVP_CHECK(x.rank() == 3, "select_token: expected [N,T,E]");
  MSVP_CHECK(t >= 0 && t < x.dim(1), "select_token: index out of range");
  const int64_t n = x.dim(0), tok = x.dim(1), e = x.dim(2);
  Tensor<S> y({n, e});
  for (int64_t b = 0; b < n; ++b)
    std::copy(x.data() + (b * tok + t) * e, x.data() + (b * tok + t + 1) * e,
              y.data() + b * e);
  if (detail::track<S>({&x})) {
    auto xi = x.impl(), yi = y.impl();
    detail::record(y, [xi, yi, n, tok, e, t] {
      if (xi->grad.empty()) xi->grad.assign(xi->data.size(), S(0));
      for (int64_t b = 0; b < n; ++b)
        for (int64_t i = 0; i < e; ++i)
          xi->grad[(b * tok + t) * e + i] += yi->grad[b * e + i];
    });
  }
  return y;
}

// prepend a learned token: x[N,T,E], tok[E] -> [N,T+1,E]
template <typename S>
Tensor<S> prepend_token(const Tensor<S>& x, const Tensor<S>& tok) {
  MSVP_CHECK(x.rank() == 3 && tok.rank() == 1 && tok.dim(0) == x.dim(2),
             "prepend_token: shape mismatch");
  const int64_t n = x.dim(0), t = x.dim(1), e = x.dim(2);
  Tensor<S> y({n, t + 1, e});
  for (int64_t b = 0; b < n; ++b) {
    std::copy(tok.data(), tok.data() + e, y.data() + b * (t + 1) * e);
    std::copy(x.data() + b * t * e, x.data() + (b + 1) * t * e,
              y.data() + (b * (t + 1) + 1) * e);
  }
  if (detail::track<S>({&x, &tok})) {
    auto xi = x.impl(), ti = tok.impl(), yi = y.impl();
    detail::record(y, [xi, ti, yi, n, t, e] {
      if (ti->needs_grad) {
        if (ti->grad.empty()) ti->grad.assign(ti->data.size(), S(0));
        for (int64_t b = 0; b < n; ++b)
          for (int64_t i = 0; i < e; ++i)
            ti->grad[static_cast<size_t>(i)] += yi->grad[b * (t + 1) * e + i];
      }
      if (xi->needs_grad) {
        if (xi->grad.empty()) xi->grad.assign(xi->data.size(), S(0));
        for (int64_t b = 0; b < n; ++b)
          for (int64_t i = 0; i < t * e; ++i)
            xi->grad[b * t * e + i] += yi->grad[(b * (t + 1) + 1) * e + i];
      }
    });
  }
  return y;
}

// x[N,T,E] + pos[T,E] broadcast over batch
template <typename S>
Tensor<S> add_pos_embed(const Tensor<S>& x, const Tensor<S>& pos) {
  MSVP_CHECK(x.rank() == 3 && pos.rank() == 2 && pos.dim(0) == x.dim(1) &&
                 pos.dim(1) == x.dim(2),
             "add_pos_embed: shape mismatch ", shape_str(x.shape()), " vs ",
             shape_str(pos.shape()));
  const int64_t n = x.dim(0), te = x.dim(1) * x.dim(2);
  Tensor<S> y(x.shape());
  for (int64_t b = 0; b < n; ++b)
    for (int64_t i = 0; i < te; ++i)
      y.data()[b * te + i] = x.data()[b * te + i] + pos.data()[i];
  if (detail::track<S>({&x, &pos})) {
    auto xi = x.impl(), pi = pos.impl(), yi = y.impl();
    detail::record(y, [xi, pi, yi, n, te] {
      if (xi->needs_grad) {
        if (xi->grad.empty()) xi->grad.assign(xi->data.size(), S(0));
        for (int64_t i = 0; i < n * te; ++i) xi->grad[i] += yi->grad[i];
      }
      if (pi->needs_grad) {
        if (pi->grad.empty()) pi->grad.assign(pi->data.size(), S(0));
        for (int64_t b = 0; b < n; ++b)
          for (int64_t i = 0; i < te; ++i) pi->grad[i] += yi->grad[b * te + i];
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// softmax / losses / normalization

// softmax along the last dimension, max-subtracted for stability
template <typename S>
Tensor<S> softmax_lastdim(const Tensor<S>& x) {
  MSVP_CHECK(x.rank() >= 1, "softmax: undefined tensor");
  const int64_t k = x.dim(x.rank() - 1);
  const int64_t rows = x.numel() / k;
  Tensor<S> y(x.shape());
  const S* px = x.data();
  S* py = y.data();
  for (int64_t r = 0; r < rows; ++r) {
    const S* xr = px + r * k;
    S* yr = py + r * k;
    S mx = xr[0];
    for (int64_t i = 1; i < k; ++i) mx = std::max(mx, xr[i]);
    S denom(0);
    for (int64_t i = 0; i < k; ++i) {
      yr[i] = std::exp(xr[i] - mx);
      denom += yr[i];
    }
    const S inv = S(1) / denom;
    for (int64_t i = 0; i < k; ++i) yr[i] *= inv;
  }
  if (detail::track<S>({&x})) {
    auto xi = x.impl(), yi = y.impl();
    detail::record(y, [xi, yi, rows, k] {
      if (xi->grad.empty()) xi->grad.assign(xi->data.size(), S(0));
      for (int64_t r = 0; r < rows; ++r) {
        const S* yr = yi->data.data() + r * k;
        const S* gr = yi->grad.data() + r * k;
        S dot(0);
        for (int64_t i = 0; i < k; ++i) dot += gr[i] * yr[i];
        S* dx = xi->grad.data() + r * k;
        for (int64_t i = 0; i < k; ++i) dx[i] += yr[i] * (gr[i] - dot);
      }
    });
  }
  return y;
}

// mean over the batch of -log softmax(logits)[label]
template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits,
                        const std::vector<int>& labels) {
  MSVP_CHECK(logits.rank() == 2, "cross_entropy: logits must be [N,K], got ",
             shape_str(logits.shape()));
  const int64_t n = logits.dim(0), k = logits.dim(1);
  MSVP_CHECK(static_cast<int64_t>(labels.size()) == n,
             "cross_entropy: ", labels.size(), " labels for ", n, " rows");
  for (int64_t i = 0; i < n; ++i)
    MSVP_CHECK(labels[static_cast<size_t>(i)] >= 0 &&
                   labels[static_cast<size_t>(i)] < k,
               "cross_entropy: label ", labels[static_cast<size_t>(i)],
               " out of range [0,", k, ") at row ", i);
  std::vector<S> probs(static_cast<size_t>(n * k));
  const S* px = logits.data();
  S loss(0);
  for (int64_t r = 0; r < n; ++r) {
    const S* xr = px + r * k;
    S mx = xr[0];
    for (int64_t i = 1; i < k; ++i) mx = std::max(mx, xr[i]);
    S denom(0);
    for (int64_t i = 0; i < k; ++i) {
      probs[static_cast<size_t>(r * k + i)] = std::exp(xr[i] - mx);
      denom += probs[static_cast<size_t>(r * k + i)];
    }
    const S inv = S(1) / denom;
    for (int64_t i = 0; i < k; ++i) probs[static_cast<size_t>(r * k + i)] *= inv;
    const S lse = mx + std::log(denom);
    loss += lse - xr[labels[static_cast<size_t>(r)]];
  }
  Tensor<S> y = Tensor<S>::scalar(loss / static_cast<S>(n));
  if (detail::track<S>({&logits})) {
    auto xi = logits.impl(), yi = y.impl();
    detail::record(y, [xi, yi, probs = std::move(probs), labels, n, k] {
      if (xi->grad.empty()) xi->grad.assign(xi->data.size(), S(0));
      const S g = yi->grad[0] / static_cast<S>(n);
      for (int64_t r = 0; r < n; ++r) {
        for (int64_t i = 0; i < k; ++i)
          xi->grad[r * k + i] += g * probs[static_cast<size_t>(r * k + i)];
        xi->grad[r * k + labels[static_cast<size_t>(r)]] -= g;
      }
    });
  }
  return y;
}

// layer norm over the last dimension
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma,
                     const Tensor<S>& beta, S eps) {
  const int64_t e = x.dim(x.rank() - 1);
  MSVP_CHECK(gamma.rank() == 1 && gamma.dim(0) == e && beta.rank() == 1 &&
                 beta.dim(0) == e,
             "layer_norm: affine shapes must be [", e, "]");
  const int64_t rows = x.numel() / e;
  Tensor<S> y(x.shape());
  std::vector<S> mu(static_cast<size_t>(rows)), inv(static_cast<size_t>(rows));
  const S* px = x.data();
  const S* pg = gamma.data();
  const S* pb = beta.data();
  S* py = y.data();
  for (int64_t r = 0; r < rows; ++r) {
    const S* xr = px + r * e;
    S m(0);
    for (int64_t i = 0; i < e; ++i) m += xr[i];
    m /= static_cast<S>(e);
    S v(0);
    for (int64_t i = 0; i < e; ++i) {
      const S d = xr[i] - m;
      v += d * d;
    }
    v /= static_cast<S>(e);
    const S is = S(1) / std::sqrt(v + eps);
    mu[static_cast<size_t>(r)] = m;
    inv[static_cast<size_t>(r)] = is;
    S* yr = py + r * e;
    for (int64_t i = 0; i < e; ++i) yr[i] = (xr[i] - m) * is * pg[i] + pb[i];
  }
  if (detail::track<S>({&x, &gamma, &beta})) {
    auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), yi = y.impl();
    detail::record(y, [xi, gi, bi, yi, mu = std::move(mu),
                       inv = std::move(inv), rows, e] {
      const bool nx = xi->needs_grad, ng = gi->needs_grad, nb = bi->needs_grad;
      if (nx && xi->grad.empty()) xi->grad.assign(xi->data.size(), S(0));
      if (ng && gi->grad.empty()) gi->grad.assign(gi->data.size(), S(0));
      if (nb && bi->grad.empty()) bi->grad.assign(bi->data.size(), S(0));
      for (int64_t r = 0; r < rows; ++r) {
        const S* xr = xi->data.data() + r * e;
        const S* gr = yi->grad.data() + r * e;
        const S m = mu[static_cast<size_t>(r)], is = inv[static_cast<size_t>(r)];
        if (ng || nb) {
          for (int64_t i = 0; i < e; ++i) {
            if (ng) gi->grad[i] += gr[i] * (xr[i] - m) * is;
            if (nb) bi->grad[i] += gr[i];
          }
        }
        if (nx) {
          // dxhat = g*gamma; dx = is*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
          S s1(0), s2(0);
          for (int64_t i = 0; i < e; ++i) {
            const S dxh = gr[i] * gi->data[i];
            const S xh = (xr[i] - m) * is;
            s1 += dxh;
            s2 += dxh * xh;
          }
          s1 /= static_cast<S>(e);
          s2 /= static_cast<S>(e);
          S* dx = xi->grad.data() + r * e;
          for (int64_t i = 0; i < e; ++i) {
            const S dxh = gr[i] * gi->data[i];
            const S xh = (xr[i] - m) * is;
            dx[i] += is * (dxh - s1 - xh * s2);
          }
        }
      }
    });
  }
  return y;
}

// Batch norm over [N,C,H,W]. Training mode normalizes with batch statistics
// and updates the running buffers in place (biased batch variance for
// normalization, unbiased for the running estimate); eval mode normalizes
// with the running statistics.
template <typename S>
Tensor<S> batch_norm2d(const Tensor<S>& x, const Tensor<S>& gamma,
                       const Tensor<S>& beta, Tensor<S>& running_mean,
                       Tensor<S>& running_var, bool training, S momentum,
                       S eps) {
  MSVP_CHECK(x.rank() == 4, "batch_norm2d: expected [N,C,H,W], got ",
             shape_str(x.shape()));
  const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  MSVP_CHECK(gamma.dim(0) == c && beta.dim(0) == c && running_mean.dim(0) == c &&
                 running_var.dim(0) == c,
             "batch_norm2d: channel mismatch, x has ", c, " channels");
  const int64_t m = n * hw;
  Tensor<S> y(x.shape());
  std::vector<S> mu(static_cast<size_t>(c)), inv(static_cast<size_t>(c));
  const S* px = x.data();
  S* py = y.data();
  const S* pg = gamma.data();
  const S* pb = beta.data();
  if (training) {
    MSVP_CHECK(m > 1, "batch_norm2d: training mode needs more than one value "
                      "per channel");
    for (int64_t ci = 0; ci < c; ++ci) {
      S s(0);
      for (int64_t b = 0; b < n; ++b) {
        const S* p = px + (b * c + ci) * hw;
        for (int64_t i = 0; i < hw; ++i) s += p[i];
      }
      const S mean_c = s / static_cast<S>(m);
      S v(0);
      for (int64_t b = 0; b < n; ++b) {
        const S* p = px + (b * c + ci) * hw;
        for (int64_t i = 0; i < hw; ++i) {
          const S d = p[i] - mean_c;
          v += d * d;
        }
      }
      const S var_c = v / static_cast<S>(m);
      mu[static_cast<size_t>(ci)] = mean_c;
      inv[static_cast<size_t>(ci)] = S(1) / std::sqrt(var_c + eps);
      running_mean.data()[ci] =
          (S(1) - momentum) * running_mean.data()[ci] + momentum * mean_c;
      const S var_unbiased = var_c * static_cast<S>(m) / static_cast<S>(m - 1);
      running_var.data()[ci] =
          (S(1) - momentum) * running_var.data()[ci] + momentum * var_unbiased;
    }
  } else {
    for (int64_t ci = 0; ci < c; ++ci) {
      mu[static_cast<size_t>(ci)] = running_mean.data()[ci];
      inv[static_cast<size_t>(ci)] =
          S(1) / std::sqrt(running_var.data()[ci] + eps);
    }
  }
  for (int64_t b = 0; b < n; ++b)
    for (int64_t ci = 0; ci < c; ++ci) {
      const S* p = px + (b * c + ci) * hw;
      S* q = py + (b * c + ci) * hw;
      const S mc = mu[static_cast<size_t>(ci)], ic = inv[static_cast<size_t>(ci)];
      const S gc = pg[ci], bc = pb[ci];
      for (int64_t i = 0; i < hw; ++i) q[i] = (p[i] - mc) * ic * gc + bc;
    }
  if (detail::track<S>({&x, &gamma, &beta})) {
    auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), yi = y.impl();
    detail::record(y, [xi, gi, bi, yi, mu = std::move(mu),
                       inv = std::move(inv), n, c, hw, m, training] {
      const bool nx = xi->needs_grad, ng = gi->needs_grad, nb = bi->needs_grad;
      if (nx && xi->grad.empty()) xi->grad.assign(xi->data.size(), S(0));
      if (ng && gi->grad.empty()) gi->grad.assign(gi->data.size(), S(0));
      if (nb && bi->grad.empty()) bi->grad.assign(bi->data.size(), S(0));
      for (int64_t ci = 0; ci < c; ++ci) {
        const S mc = mu[static_cast<size_t>(ci)];
        const S ic = inv[static_cast<size_t>(ci)];
        const S gc = gi->data[ci];
        S sum_g(0), sum_gx(0);
        for (int64_t b = 0; b < n; ++b) {
          const S* g = yi->grad.data() + (b * c + ci) * hw;
          const S* p = xi->data.data() + (b * c + ci) * hw;
          for (int64_t i = 0; i < hw; ++i) {
            sum_g += g[i];
            sum_gx += g[i] * (p[i] - mc) * ic;
          }
        }
        if (ng) gi->grad[ci] += sum_gx;
        if (nb) bi->grad[ci] += sum_g;
        if (nx) {
          if (training) {
            const S inv_m = S(1) / static_cast<S>(m);
            for (int64_t b = 0; b < n; ++b) {
              const S* g = yi->grad.data() + (b * c + ci) * hw;
              const S* p = xi->data.data() + (b * c + ci) * hw;
              S* dx = xi->grad.data() + (b * c + ci) * hw;
              for (int64_t i = 0; i < hw; ++i) {
                const S xh = (p[i] - mc) * ic;
                dx[i] += gc * ic * (g[i] - inv_m * sum_g - xh * inv_m * sum_gx);
              }
            }
          } else {
            for (int64_t b = 0; b < n; ++b) {
              const S* g = yi->grad.data() + (b * c + ci) * hw;
              S* dx = xi->grad.data() + (b * c + ci) * hw;
              for (int64_t i = 0; i < hw; ++i) dx[i] += g[i] * gc * ic;
            }
          }
        }
      }
    });
  }
  return y;
}

}  // namespace msvp
