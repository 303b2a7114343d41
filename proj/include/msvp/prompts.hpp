#pragma once

// Multi-scale visual prompting: three learnable pixel-space prompt maps
// (global 1x1, mid SxS, local SxS), bilinearly upsampled to the input
// resolution and fused with the image. Three fusion strategies:
//
//   addition       x' = x + (1/k) * sum of enabled upsampled prompts
//   concatenation  x' = conv1x1(concat(x, upsampled prompts))
//   gated          x' = x + sigmoid(g)[c] * mean prompt
//
// Everything is initialized so that fusion is an exact identity at step 0:
// prompts and gate start at zero, the concat projection starts as a
// pass-through of the image channels.

#include <filesystem>
#include <string>
#include <vector>

#include "msvp/conv.hpp"
#include "msvp/image_io.hpp"
#include "msvp/nn.hpp"
#include "msvp/ops.hpp"

namespace msvp {

enum class FusionKind { addition, concatenation, gated };

inline const char* fusion_name(FusionKind k) {
  switch (k) {
    case FusionKind::addition: return "addition";
    case FusionKind::concatenation: return "concatenation";
    case FusionKind::gated: return "gated";
  }
  return "?";
}

inline FusionKind fusion_from_name(const std::string& s) {
  if (s == "addition") return FusionKind::addition;
  if (s == "concatenation") return FusionKind::concatenation;
  if (s == "gated") return FusionKind::gated;
  fail<ConfigError>("unknown fusion kind '", s,
                    "' (expected addition|concatenation|gated)");
}

struct PromptScales {
  int64_t s_global = 1;
  int64_t s_mid = 4;
  int64_t s_local = 8;
};

struct EnabledScales {
  bool global = true, mid = true, local = true;

  int count() const { return (global ? 1 : 0) + (mid ? 1 : 0) + (local ? 1 : 0); }

  std::string str() const {
    std::string s;
    if (global) s += "g";
    if (mid) s += "m";
    if (local) s += "l";
    return s;
  }

  static EnabledScales parse(const std::string& spec) {
    EnabledScales e{false, false, false};
    for (char c : spec) {
      if (c == 'g') e.global = true;
      else if (c == 'm') e.mid = true;
      else if (c == 'l') e.local = true;
      else if (c == ',' || c == ' ') continue;
      else fail<ConfigError>("bad scales spec '", spec, "': unknown scale '",
                             std::string(1, c), "' (use subset of g,m,l)");
    }
    if (e.count() == 0)
      fail<ConfigError>("bad scales spec '", spec, "': no scales enabled");
    return e;
  }
};

// Learnable parameter count for a configuration; addition carries only the
// prompt maps, gated adds C gate values, concatenation adds the 1x1
// projection mapping (1+k)C channels back to C (weights + bias).
inline int64_t count_msvp_params(int64_t channels, const PromptScales& scales,
                                 const EnabledScales& enabled,
                                 FusionKind kind) {
  int64_t per_channel = 0;
  if (enabled.global) per_channel += scales.s_global * scales.s_global;
  if (enabled.mid) per_channel += scales.s_mid * scales.s_mid;
  if (enabled.local) per_channel += scales.s_local * scales.s_local;
  int64_t total = channels * per_channel;
  const int64_t k = enabled.count();
  if (kind == FusionKind::gated) total += channels;
  if (kind == FusionKind::concatenation)
    total += (1 + k) * channels * channels + channels;
  return total;
}

template <typename S>
class MsvpModule {
 public:
  MsvpModule() = default;

  static MsvpModule init(int64_t channels, int64_t resolution,
                         PromptScales scales, EnabledScales enabled,
                         FusionKind kind) {
    MSVP_CHECK(enabled.count() >= 1, "msvp: at least one scale must be enabled");
    MSVP_CHECK(scales.s_global == 1, "msvp: global scale must be 1, got ",
               scales.s_global);
    MSVP_CHECK(1 <= scales.s_mid && scales.s_mid <= scales.s_local,
               "msvp: scales must satisfy 1 <= s_mid <= s_local, got s_mid=",
               scales.s_mid, " s_local=", scales.s_local);
    MSVP_CHECK(scales.s_local <= resolution, "msvp: local scale ",
               scales.s_local, " exceeds input resolution ", resolution);
    MsvpModule m;
    m.channels_ = channels;
    m.scales_ = scales;
    m.enabled_ = enabled;
    m.kind_ = kind;
    if (enabled.global)
      m.p_global_ = m.reg_.add_param(
          "prompt_g", Tensor<S>({channels, scales.s_global, scales.s_global}));
    if (enabled.mid)
      m.p_mid_ = m.reg_.add_param(
          "prompt_m", Tensor<S>({channels, scales.s_mid, scales.s_mid}));
    if (enabled.local)
      m.p_local_ = m.reg_.add_param(
          "prompt_l", Tensor<S>({channels, scales.s_local, scales.s_local}));
    if (kind == FusionKind::gated)
      m.gate_ = m.reg_.add_param("gate", Tensor<S>({channels}));
    if (kind == FusionKind::concatenation) {
      const int64_t k = enabled.count();
      Tensor<S> w({channels, (1 + k) * channels, 1, 1});
      // pass-through init: image channel c maps to output channel c, prompt
      // channels start at zero
      for (int64_t c = 0; c < channels; ++c)
        w.data()[c * (1 + k) * channels + c] = S(1);
      m.proj_w_ = m.reg_.add_param("proj.weight", std::move(w));
      m.proj_b_ = m.reg_.add_param("proj.bias", Tensor<S>({channels}));
    }
    return m;
  }

  FusionKind kind() const { return kind_; }
  const PromptScales& scales() const { return scales_; }
  const EnabledScales& enabled() const { return enabled_; }
  int64_t channels() const { return channels_; }
  ParamRegistry<S>& registry() { return reg_; }

  int64_t param_count() const {
    return count_msvp_params(channels_, scales_, enabled_, kind_);
  }

  // Upsampled prompts, in (g, m, l) order, restricted to enabled scales.
  std::vector<Tensor<S>> upsampled(int64_t h, int64_t w) const {
    std::vector<Tensor<S>> out;
    if (enabled_.global) out.push_back(bilinear_resize(p_global_, h, w));
    if (enabled_.mid) out.push_back(bilinear_resize(p_mid_, h, w));
    if (enabled_.local) out.push_back(bilinear_resize(p_local_, h, w));
    return out;
  }

  // Mean of the enabled upsampled prompts; the additive/gated fusion field.
  Tensor<S> combined_prompt(int64_t h, int64_t w) const {
    auto ups = upsampled(h, w);
    Tensor<S> acc = ups[0];
    for (size_t i = 1; i < ups.size(); ++i) acc = add(acc, ups[i]);
    return scale(acc, S(1) / static_cast<S>(ups.size()));
  }

  Tensor<S> fuse(const Tensor<S>& x) const {
    MSVP_CHECK(x.rank() == 4, "msvp fuse: expected [N,C,H,W], got ",
               shape_str(x.shape()));
    MSVP_CHECK(x.dim(1) == channels_, "msvp fuse: input has ", x.dim(1),
               " channels, prompts have ", channels_);
    const int64_t h = x.dim(2), w = x.dim(3);
    switch (kind_) {
      case FusionKind::addition:
        return add_channel_map(x, combined_prompt(h, w));
      case FusionKind::gated:
        return add_channel_map(
            x, scale_channels(combined_prompt(h, w), sigmoid(gate_)));
      case FusionKind::concatenation: {
        std::vector<Tensor<S>> parts{x};
        for (auto& p : upsampled(h, w))
          parts.push_back(broadcast_to_batch(p, x.dim(0)));
        return conv2d<S>(concat_channels(parts), proj_w_, proj_b_, 1, 0);
      }
    }
    fail("msvp fuse: bad fusion kind");
  }

  // weight * mean((x' - x)^2)
  static Tensor<S> drift_penalty(const Tensor<S>& x, const Tensor<S>& fused,
                                 S weight) {
    MSVP_CHECK(weight >= S(0), "drift penalty weight must be >= 0");
    if (weight == S(0)) return Tensor<S>::scalar(S(0));
    auto d = sub(fused, x);
    return scale(mean(mul(d, d)), weight);
  }

  // weight * sum of squared prompt values over enabled scales
  Tensor<S> l2_penalty(S weight) const {
    MSVP_CHECK(weight >= S(0), "l2 penalty weight must be >= 0");
    if (weight == S(0)) return Tensor<S>::scalar(S(0));
    Tensor<S> acc = Tensor<S>::scalar(S(0));
    if (enabled_.global) acc = add(acc, sum(mul(p_global_, p_global_)));
    if (enabled_.mid) acc = add(acc, sum(mul(p_mid_, p_mid_)));
    if (enabled_.local) acc = add(acc, sum(mul(p_local_, p_local_)));
    return scale(acc, weight);
  }

  // Per-scale raw text grids and per-channel PGMs, plus the combined
  // upsampled prompt field at the given resolution.
  void export_prompts(const std::string& dir, int64_t h, int64_t w) const {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    MSVP_CHECK(fs::exists(dir), "cannot create export directory '", dir, "'");
    auto emit = [&](const char* tag, const Tensor<S>& p) {
      std::vector<float> vals(static_cast<size_t>(p.numel()));
      for (int64_t i = 0; i < p.numel(); ++i)
        vals[static_cast<size_t>(i)] = static_cast<float>(p.data()[i]);
      const int64_t c = p.dim(0), ph = p.dim(1), pw = p.dim(2);
      write_text_grid(dir + "/prompt_" + tag + ".txt", vals.data(), c, ph, pw);
      for (int64_t ci = 0; ci < c; ++ci)
        write_pgm(dir + "/prompt_" + std::string(tag) + "_c" +
                      std::to_string(ci) + ".pgm",
                  vals.data() + ci * ph * pw, ph, pw);
    };
    if (enabled_.global) emit("g", p_global_);
    if (enabled_.mid) emit("m", p_mid_);
    if (enabled_.local) emit("l", p_local_);
    emit("combined", combined_prompt(h, w));
  }

  const Tensor<S>& prompt_global() const { return p_global_; }
  const Tensor<S>& prompt_mid() const { return p_mid_; }
  const Tensor<S>& prompt_local() const { return p_local_; }
  const Tensor<S>& gate() const { return gate_; }

 private:
  int64_t channels_ = 0;
  PromptScales scales_;
  EnabledScales enabled_;
  FusionKind kind_ = FusionKind::addition;
  Tensor<S> p_global_, p_mid_, p_local_;
  Tensor<S> gate_;
  Tensor<S> proj_w_, proj_b_;
  ParamRegistry<S> reg_;
};

}  // namespace msvp
