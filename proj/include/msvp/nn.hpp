#pragma once

// Layer building blocks and the model/parameter-registry contracts shared by
// the backbones. Parameter names are unique and stable across runs; weight
// init streams are keyed by (seed, "init", name) so a parameter's initial
// values do not depend on construction order or on what wraps the model.

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "msvp/conv.hpp"
#include "msvp/ops.hpp"
#include "msvp/rng.hpp"

namespace msvp {

template <typename S>
class ParamRegistry {
 public:
  Tensor<S>& add_param(const std::string& name, Tensor<S> t) {
    MSVP_CHECK(names_.insert(name).second, "duplicate parameter name '", name,
               "'");
    t.set_requires_grad(true);
    params_.emplace_back(name, std::move(t));
    return params_.back().second;
  }

  Tensor<S>& add_buffer(const std::string& name, Tensor<S> t) {
    MSVP_CHECK(names_.insert(name).second, "duplicate buffer name '", name,
               "'");
    buffers_.emplace_back(name, std::move(t));
    return buffers_.back().second;
  }

  // Adopt another registry's entries (shared storage) under a prefix.
  void adopt(const ParamRegistry& other, const std::string& prefix = "") {
    for (const auto& [n, t] : other.params_) {
      MSVP_CHECK(names_.insert(prefix + n).second, "duplicate parameter '",
                 prefix + n, "'");
      params_.emplace_back(prefix + n, t);
    }
    for (const auto& [n, t] : other.buffers_) {
      MSVP_CHECK(names_.insert(prefix + n).second, "duplicate buffer '",
                 prefix + n, "'");
      buffers_.emplace_back(prefix + n, t);
    }
  }

  const std::vector<std::pair<std::string, Tensor<S>>>& params() const {
    return params_;
  }
  const std::vector<std::pair<std::string, Tensor<S>>>& buffers() const {
    return buffers_;
  }
  std::vector<std::pair<std::string, Tensor<S>>>& params() { return params_; }
  std::vector<std::pair<std::string, Tensor<S>>>& buffers() { return buffers_; }

  const Tensor<S>* find(const std::string& name) const {
    for (const auto& [n, t] : params_)
      if (n == name) return &t;
    for (const auto& [n, t] : buffers_)
      if (n == name) return &t;
    return nullptr;
  }

  int64_t trainable_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : params_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Tensor<S>>> params_;
  std::vector<std::pair<std::string, Tensor<S>>> buffers_;
  std::unordered_set<std::string> names_;
};

// ---------------------------------------------------------------------------
// weight init

namespace init {

template <typename S>
void kaiming_uniform(Tensor<S>& t, int64_t fan_in, uint64_t seed,
                     const std::string& name) {
  rng::Xoshiro256 g(seed, "init", 0, fnv1a64(name));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (int64_t i = 0; i < t.numel(); ++i)
    t.data()[i] = static_cast<S>(g.next_uniform(-bound, bound));
}

template <typename S>
void normal(Tensor<S>& t, double stddev, uint64_t seed,
            const std::string& name) {
  rng::Xoshiro256 g(seed, "init", 0, fnv1a64(name));
  for (int64_t i = 0; i < t.numel(); ++i)
    t.data()[i] = static_cast<S>(stddev * g.next_normal());
}

}  // namespace init

// ---------------------------------------------------------------------------
// layers

template <typename S>
struct Conv2dLayer {
  Tensor<S> w;
  std::optional<Tensor<S>> b;
  int64_t stride = 1, pad = 0;

  Conv2dLayer() = default;
  Conv2dLayer(ParamRegistry<S>& reg, const std::string& prefix, uint64_t seed,
              int64_t cin, int64_t cout, int64_t k, int64_t stride_,
              int64_t pad_, bool bias) {
    stride = stride_;
    pad = pad_;
    Tensor<S> weight({cout, cin, k, k});
    init::kaiming_uniform(weight, cin * k * k, seed, prefix + ".weight");
    w = reg.add_param(prefix + ".weight", std::move(weight));
    if (bias) b = reg.add_param(prefix + ".bias", Tensor<S>({cout}));
  }

  Tensor<S> forward(const Tensor<S>& x) const {
    return conv2d(x, w, b, stride, pad);
  }
};

template <typename S>
struct BatchNorm2dLayer {
  Tensor<S> gamma, beta, running_mean, running_var;
  S momentum = S(0.1), eps = S(1e-5);

  BatchNorm2dLayer() = default;
  BatchNorm2dLayer(ParamRegistry<S>& reg, const std::string& prefix,
                   int64_t channels) {
    gamma = reg.add_param(prefix + ".gamma", Tensor<S>::full({channels}, S(1)));
    beta = reg.add_param(prefix + ".beta", Tensor<S>({channels}));
    running_mean =
        reg.add_buffer(prefix + ".running_mean", Tensor<S>({channels}));
    running_var =
        reg.add_buffer(prefix + ".running_var", Tensor<S>::full({channels}, S(1)));
  }

  Tensor<S> forward(const Tensor<S>& x, bool training) {
    return batch_norm2d(x, gamma, beta, running_mean, running_var, training,
                        momentum, eps);
  }
};

template <typename S>
struct LinearLayer {
  Tensor<S> w;
  std::optional<Tensor<S>> b;

  LinearLayer() = default;
  LinearLayer(ParamRegistry<S>& reg, const std::string& prefix, uint64_t seed,
              int64_t in, int64_t out, bool bias = true) {
    Tensor<S> weight({out, in});
    init::kaiming_uniform(weight, in, seed, prefix + ".weight");
    w = reg.add_param(prefix + ".weight", std::move(weight));
    if (bias) b = reg.add_param(prefix + ".bias", Tensor<S>({out}));
  }

  Tensor<S> forward(const Tensor<S>& x) const { return linear(x, w, b); }
};

template <typename S>
struct LayerNormLayer {
  Tensor<S> gamma, beta;
  S eps = S(1e-6);

  LayerNormLayer() = default;
  LayerNormLayer(ParamRegistry<S>& reg, const std::string& prefix, int64_t e) {
    gamma = reg.add_param(prefix + ".gamma", Tensor<S>::full({e}, S(1)));
    beta = reg.add_param(prefix + ".beta", Tensor<S>({e}));
  }

  Tensor<S> forward(const Tensor<S>& x) const {
    return layer_norm(x, gamma, beta, eps);
  }
};

// Multi-head self-attention over [N,T,E].
template <typename S>
struct MhaLayer {
  LinearLayer<S> qkv, proj;
  int64_t heads = 1;

  MhaLayer() = default;
  MhaLayer(ParamRegistry<S>& reg, const std::string& prefix, uint64_t seed,
           int64_t e, int64_t heads_) {
    MSVP_CHECK(e % heads_ == 0, "attention: embed dim ", e,
               " not divisible by ", heads_, " heads");
    heads = heads_;
    qkv = LinearLayer<S>(reg, prefix + ".qkv", seed, e, 3 * e, true);
    proj = LinearLayer<S>(reg, prefix + ".proj", seed, e, e, true);
  }

  Tensor<S> forward(const Tensor<S>& x) const {
    MSVP_CHECK(x.rank() == 3, "attention: expected [N,T,E], got ",
               shape_str(x.shape()));
    const int64_t n = x.dim(0), t = x.dim(1), e = x.dim(2);
    const int64_t dh = e / heads;
    auto fused = qkv.forward(reshape(x, {n * t, e}));        // [N*T, 3E]
    auto sep = permute(reshape(fused, {n, t, 3, heads, dh}),
                       {2, 0, 3, 1, 4});                      // [3,N,H,T,dh]
    auto carve = [&](int64_t which) {
      auto row = select_token(reshape(sep, {1, 3, n * heads * t * dh}), which);
      return reshape(row, {n * heads, t, dh});
    };
    auto q = carve(0), k = carve(1), v = carve(2);
    auto scores = scale(bmm(q, k, false, true),
                        static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh))));
    auto ctx = bmm(softmax_lastdim(scores), v);               // [N*H, T, dh]
    auto merged =
        reshape(permute(reshape(ctx, {n, heads, t, dh}), {0, 2, 1, 3}),
                {n * t, e});
    return reshape(proj.forward(merged), {n, t, e});
  }
};

// ---------------------------------------------------------------------------
// model

enum class Mode { train, eval };

template <typename S>
class Model {
 public:
  virtual ~Model() = default;

  Tensor<S> forward(const Tensor<S>& x) {
    captured_.reset();
    return run(x);
  }

  virtual void set_mode(Mode m) { mode_ = m; }
  Mode mode() const { return mode_; }
  bool training() const { return mode_ == Mode::train; }

  virtual ParamRegistry<S>& registry() { return reg_; }
  virtual std::string family_name() const = 0;
  virtual std::vector<std::string> capture_points() const { return {}; }

  virtual void set_capture(const std::string& layer) {
    if (layer.empty()) {
      capture_name_.clear();
      captured_.reset();
      return;
    }
    const auto pts = capture_points();
    for (const auto& p : pts)
      if (p == layer) {
        capture_name_ = layer;
        return;
      }
    std::string avail;
    for (const auto& p : pts) avail += (avail.empty() ? "" : ", ") + p;
    fail("layer '", layer, "' not found; available: ", avail);
  }

  virtual const std::optional<Tensor<S>>& captured() const { return captured_; }

 protected:
  virtual Tensor<S> run(const Tensor<S>& x) = 0;

  void maybe_capture(const std::string& name, Tensor<S>& t) {
    if (!capture_name_.empty() && name == capture_name_) {
      t.set_retain_grad(true);
      captured_ = t;
    }
  }

  Mode mode_ = Mode::train;
  ParamRegistry<S> reg_;
  std::string capture_name_;
  std::optional<Tensor<S>> captured_;
};

template <typename S>
int64_t count_params(Model<S>& model) {
  return model.registry().trainable_count();
}

}  // namespace msvp
