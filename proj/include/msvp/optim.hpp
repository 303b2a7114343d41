#pragma once

// Adam with bias correction and coupled L2 weight decay (decoupled update
// available behind a flag), plus the per-epoch cosine annealing schedule.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "msvp/nn.hpp"

namespace msvp {

// eta_min + 0.5 * (lr0 - eta_min) * (1 + cos(pi * t / T)); t past T clamps
// to eta_min.
inline double cosine_lr(int64_t t, int64_t total, double lr0, double eta_min) {
  MSVP_CHECK(total >= 1, "cosine_lr: total steps must be >= 1");
  MSVP_CHECK(t >= 0, "cosine_lr: negative step");
  if (t > total) return eta_min;
  const double x = 3.14159265358979323846 * static_cast<double>(t) /
                   static_cast<double>(total);
  return eta_min + 0.5 * (lr0 - eta_min) * (1.0 + std::cos(x));
}

template <typename S>
struct AdamConfig {
  S beta1 = S(0.9);
  S beta2 = S(0.999);
  S eps = S(1e-8);
  S weight_decay = S(0);
  bool decoupled = false;  // classic coupled L2 by default
};

template <typename S>
class Adam {
 public:
  Adam(ParamRegistry<S>& registry, AdamConfig<S> cfg)
      : reg_(&registry), cfg_(cfg) {
    for (const auto& [name, t] : registry.params()) {
      slots_.push_back(Slot{std::vector<S>(static_cast<size_t>(t.numel()), S(0)),
                            std::vector<S>(static_cast<size_t>(t.numel()), S(0))});
      lr_scale_.push_back(S(1));
    }
  }

  // Scales the learning rate of every parameter whose name starts with
  // `prefix` (used to freeze or damp the prompt parameters).
  void set_lr_scale(const std::string& prefix, S scale) {
    const auto& params = reg_->params();
    for (size_t i = 0; i < params.size(); ++i)
      if (params[i].first.rfind(prefix, 0) == 0)
        lr_scale_[i] = scale;
  }

  int64_t step_count() const { return t_; }

  void step(S lr) {
    ++t_;
    const S bc1 = S(1) - static_cast<S>(std::pow(cfg_.beta1, t_));
    const S bc2 = S(1) - static_cast<S>(std::pow(cfg_.beta2, t_));
    auto& params = reg_->params();
    for (size_t pi = 0; pi < params.size(); ++pi) {
      auto& [name, p] = params[pi];
      MSVP_CHECK(p.has_grad(), "adam_step: parameter '", name,
                 "' has no gradient (missing backward path)");
      const S eff_lr = lr * lr_scale_[pi];
      S* theta = p.data();
      S* g = p.grad();
      S* m = slots_[pi].m.data();
      S* v = slots_[pi].v.data();
      const int64_t n = p.numel();
      for (int64_t i = 0; i < n; ++i) {
        S gi = g[i];
        if (cfg_.weight_decay != S(0) && !cfg_.decoupled)
          gi += cfg_.weight_decay * theta[i];
        m[i] = cfg_.beta1 * m[i] + (S(1) - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (S(1) - cfg_.beta2) * gi * gi;
        const S mhat = m[i] / bc1;
        const S vhat = v[i] / bc2;
        S update = mhat / (std::sqrt(vhat) + cfg_.eps);
        if (cfg_.weight_decay != S(0) && cfg_.decoupled)
          update += cfg_.weight_decay * theta[i];
        theta[i] -= eff_lr * update;
      }
    }
  }

  void zero_grad() { reg_->zero_grad(); }

 private:
  struct Slot {
    std::vector<S> m, v;
  };
  ParamRegistry<S>* reg_;
  AdamConfig<S> cfg_;
  std::vector<Slot> slots_;
  std::vector<S> lr_scale_;
  int64_t t_ = 0;
};

}  // namespace msvp
