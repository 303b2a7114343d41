#pragma once

// The three backbone families, adapted for small inputs:
//
//   cnn4            four [conv3x3 -> bn -> relu -> maxpool2x2] blocks with
//                   channels C->32->64->128->256, global average pooling,
//                   linear head
//   resnet18_small  ResNet-18 with a 3x3 stride-1 stem and no stem pooling;
//                   four stages of two BasicBlocks (64/128/256/512)
//   vit_tiny        embed dim 192, depth 12, 3 heads, pre-norm blocks,
//                   MLP ratio 4, gelu, class token + learned positional
//                   embeddings; patch 7 for 28x28 inputs, 4 for 32x32
//
// plus the MS-VP wrapper that fuses prompts into the input before the first
// feature extraction layer.

#include <memory>
#include <string>
#include <vector>

#include "msvp/nn.hpp"
#include "msvp/prompts.hpp"

namespace msvp {

enum class Family { cnn4, resnet18_small, vit_tiny };

inline const char* family_str(Family f) {
  switch (f) {
    case Family::cnn4: return "cnn4";
    case Family::resnet18_small: return "resnet18_small";
    case Family::vit_tiny: return "vit_tiny";
  }
  return "?";
}

inline Family family_from_name(const std::string& s) {
  if (s == "cnn4") return Family::cnn4;
  if (s == "resnet18_small") return Family::resnet18_small;
  if (s == "vit_tiny") return Family::vit_tiny;
  fail<ConfigError>("unknown backbone '", s,
                    "' (expected cnn4|resnet18_small|vit_tiny)");
}

struct VitConfig {
  int64_t embed_dim = 192;
  int64_t depth = 12;
  int64_t heads = 3;
  int64_t mlp_ratio = 4;
};

struct BackboneSpec {
  Family family = Family::cnn4;
  int64_t in_channels = 1;
  int64_t resolution = 28;
  int64_t num_classes = 10;
  VitConfig vit;

  // 7x7 patches tile 28x28 inputs, 4x4 patches tile 32x32 inputs
  int64_t vit_patch() const { return resolution % 7 == 0 ? 7 : 4; }

  void validate() const {
    MSVP_CHECK(in_channels == 1 || in_channels == 3,
               "backbone spec: in_channels must be 1 or 3, got ", in_channels);
    MSVP_CHECK(num_classes >= 2, "backbone spec: need at least 2 classes");
    if (family == Family::vit_tiny) {
      MSVP_CHECK(resolution % vit_patch() == 0, "vit: patch ", vit_patch(),
                 " does not divide resolution ", resolution);
      MSVP_CHECK(vit.embed_dim % vit.heads == 0, "vit: embed dim ",
                 vit.embed_dim, " not divisible by ", vit.heads, " heads");
    }
  }
};

// ---------------------------------------------------------------------------

template <typename S>
class Cnn4 : public Model<S> {
 public:
  Cnn4(const BackboneSpec& spec, uint64_t seed) {
    spec.validate();
    const int64_t widths[4] = {32, 64, 128, 256};
    int64_t cin = spec.in_channels;
    for (int i = 0; i < 4; ++i) {
      const std::string p = "block" + std::to_string(i + 1);
      conv_[i] = Conv2dLayer<S>(this->reg_, p + ".conv", seed, cin, widths[i],
                                3, 1, 1, /*bias=*/true);
      bn_[i] = BatchNorm2dLayer<S>(this->reg_, p + ".bn", widths[i]);
      cin = widths[i];
    }
    head_ = LinearLayer<S>(this->reg_, "head", seed, 256, spec.num_classes);
  }

  std::string family_name() const override { return "cnn4"; }

  std::vector<std::string> capture_points() const override {
    return {"block1.relu", "block2.relu", "block3.relu", "block4.relu"};
  }

 protected:
  Tensor<S> run(const Tensor<S>& x) override {
    Tensor<S> h = x;
    for (int i = 0; i < 4; ++i) {
      h = relu(bn_[i].forward(conv_[i].forward(h), this->training()));
      this->maybe_capture("block" + std::to_string(i + 1) + ".relu", h);
      h = maxpool2d_2x2(h);
    }
    return head_.forward(global_avg_pool(h));
  }

 private:
  Conv2dLayer<S> conv_[4];
  BatchNorm2dLayer<S> bn_[4];
  LinearLayer<S> head_;
};

// ---------------------------------------------------------------------------

template <typename S>
struct BasicBlock {
  Conv2dLayer<S> conv1, conv2;
  BatchNorm2dLayer<S> bn1, bn2;
  bool has_downsample = false;
  Conv2dLayer<S> down_conv;
  BatchNorm2dLayer<S> down_bn;

  BasicBlock() = default;
  BasicBlock(ParamRegistry<S>& reg, const std::string& prefix, uint64_t seed,
             int64_t cin, int64_t cout, int64_t stride) {
    conv1 = Conv2dLayer<S>(reg, prefix + ".conv1", seed, cin, cout, 3, stride,
                           1, /*bias=*/false);
    bn1 = BatchNorm2dLayer<S>(reg, prefix + ".bn1", cout);
    conv2 = Conv2dLayer<S>(reg, prefix + ".conv2", seed, cout, cout, 3, 1, 1,
                           /*bias=*/false);
    bn2 = BatchNorm2dLayer<S>(reg, prefix + ".bn2", cout);
    if (stride != 1 || cin != cout) {
      has_downsample = true;
      down_conv = Conv2dLayer<S>(reg, prefix + ".downsample.conv", seed, cin,
                                 cout, 1, stride, 0, /*bias=*/false);
      down_bn = BatchNorm2dLayer<S>(reg, prefix + ".downsample.bn", cout);
    }
  }

  Tensor<S> forward(const Tensor<S>& x, bool training) {
    auto out = relu(bn1.forward(conv1.forward(x), training));
    out = bn2.forward(conv2.forward(out), training);
    auto shortcut =
        has_downsample ? down_bn.forward(down_conv.forward(x), training) : x;
    return relu(add(out, shortcut));
  }
};

template <typename S>
class ResNet18Small : public Model<S> {
 public:
  ResNet18Small(const BackboneSpec& spec, uint64_t seed) {
    spec.validate();
    stem_conv_ = Conv2dLayer<S>(this->reg_, "stem.conv", seed,
                                spec.in_channels, 64, 3, 1, 1, /*bias=*/false);
    stem_bn_ = BatchNorm2dLayer<S>(this->reg_, "stem.bn", 64);
    const int64_t widths[4] = {64, 128, 256, 512};
    int64_t cin = 64;
    for (int s = 0; s < 4; ++s) {
      const int64_t stride = s == 0 ? 1 : 2;
      const std::string p = "layer" + std::to_string(s + 1);
      blocks_[s][0] =
          BasicBlock<S>(this->reg_, p + ".0", seed, cin, widths[s], stride);
      blocks_[s][1] =
          BasicBlock<S>(this->reg_, p + ".1", seed, widths[s], widths[s], 1);
      cin = widths[s];
    }
    fc_ = LinearLayer<S>(this->reg_, "fc", seed, 512, spec.num_classes);
  }

  std::string family_name() const override { return "resnet18_small"; }

  std::vector<std::string> capture_points() const override {
    return {"stem.relu", "layer1", "layer2", "layer3", "layer4"};
  }

 protected:
  Tensor<S> run(const Tensor<S>& x) override {
    // stride-1 3x3 stem, no pooling: feature maps keep the input resolution
    auto h = relu(stem_bn_.forward(stem_conv_.forward(x), this->training()));
    this->maybe_capture("stem.relu", h);
    for (int s = 0; s < 4; ++s) {
      h = blocks_[s][0].forward(h, this->training());
      h = blocks_[s][1].forward(h, this->training());
      this->maybe_capture("layer" + std::to_string(s + 1), h);
    }
    return fc_.forward(global_avg_pool(h));
  }

 private:
  Conv2dLayer<S> stem_conv_;
  BatchNorm2dLayer<S> stem_bn_;
  BasicBlock<S> blocks_[4][2];
  LinearLayer<S> fc_;
};

// ---------------------------------------------------------------------------

template <typename S>
struct VitBlock {
  LayerNormLayer<S> norm1, norm2;
  MhaLayer<S> attn;
  LinearLayer<S> fc1, fc2;

  VitBlock() = default;
  VitBlock(ParamRegistry<S>& reg, const std::string& prefix, uint64_t seed,
           int64_t e, int64_t heads, int64_t mlp_ratio) {
    norm1 = LayerNormLayer<S>(reg, prefix + ".norm1", e);
    attn = MhaLayer<S>(reg, prefix + ".attn", seed, e, heads);
    norm2 = LayerNormLayer<S>(reg, prefix + ".norm2", e);
    fc1 = LinearLayer<S>(reg, prefix + ".mlp.fc1", seed, e, e * mlp_ratio);
    fc2 = LinearLayer<S>(reg, prefix + ".mlp.fc2", seed, e * mlp_ratio, e);
  }

  Tensor<S> forward(const Tensor<S>& x) const {
    // pre-norm
    auto h = add(x, attn.forward(norm1.forward(x)));
    const int64_t n = h.dim(0), t = h.dim(1), e = h.dim(2);
    auto flat = reshape(norm2.forward(h), {n * t, e});
    auto mlp = fc2.forward(gelu(fc1.forward(flat)));
    return add(h, reshape(mlp, {n, t, e}));
  }
};

template <typename S>
class VitTiny : public Model<S> {
 public:
  VitTiny(const BackboneSpec& spec, uint64_t seed) : spec_(spec) {
    spec.validate();
    const int64_t e = spec.vit.embed_dim;
    const int64_t patch = spec.vit_patch();
    grid_ = spec.resolution / patch;
    tokens_ = grid_ * grid_ + 1;
    patch_embed_ = Conv2dLayer<S>(this->reg_, "patch_embed", seed,
                                  spec.in_channels, e, patch, patch, 0,
                                  /*bias=*/true);
    Tensor<S> cls({e});
    init::normal(cls, 0.02, seed, "cls_token");
    cls_ = this->reg_.add_param("cls_token", std::move(cls));
    Tensor<S> pos({tokens_, e});
    init::normal(pos, 0.02, seed, "pos_embed");
    pos_ = this->reg_.add_param("pos_embed", std::move(pos));
    blocks_.reserve(static_cast<size_t>(spec.vit.depth));
    for (int64_t i = 0; i < spec.vit.depth; ++i)
      blocks_.emplace_back(this->reg_, "blocks." + std::to_string(i), seed, e,
                           spec.vit.heads, spec.vit.mlp_ratio);
    norm_ = LayerNormLayer<S>(this->reg_, "norm", e);
    head_ = LinearLayer<S>(this->reg_, "head", seed, e, spec.num_classes);
  }

  std::string family_name() const override { return "vit_tiny"; }
  int64_t token_count() const { return tokens_; }

 protected:
  Tensor<S> run(const Tensor<S>& x) override {
    const int64_t n = x.dim(0), e = spec_.vit.embed_dim;
    auto patches = patch_embed_.forward(x);            // [N,E,g,g]
    auto seq = permute(reshape(patches, {n, e, grid_ * grid_}), {0, 2, 1});
    auto tok = add_pos_embed(prepend_token(seq, cls_), pos_);
    for (auto& b : blocks_) tok = b.forward(tok);
    auto cls_out = select_token(norm_.forward(tok), 0);
    return head_.forward(cls_out);
  }

 private:
  BackboneSpec spec_;
  int64_t grid_ = 0, tokens_ = 0;
  Conv2dLayer<S> patch_embed_;
  Tensor<S> cls_, pos_;
  std::vector<VitBlock<S>> blocks_;
  LayerNormLayer<S> norm_;
  LinearLayer<S> head_;
};

// ---------------------------------------------------------------------------

template <typename S>
std::unique_ptr<Model<S>> build_backbone(const BackboneSpec& spec,
                                         uint64_t seed) {
  switch (spec.family) {
    case Family::cnn4: return std::make_unique<Cnn4<S>>(spec, seed);
    case Family::resnet18_small:
      return std::make_unique<ResNet18Small<S>>(spec, seed);
    case Family::vit_tiny: return std::make_unique<VitTiny<S>>(spec, seed);
  }
  fail("build_backbone: bad family");
}

// Wraps a backbone with the MS-VP input transform. The registry exposes the
// backbone parameters under their own names plus the prompting parameters
// under the "msvp." prefix (all sharing storage with the originals).
template <typename S>
class MsvpModel : public Model<S> {
 public:
  MsvpModel(std::unique_ptr<Model<S>> inner, MsvpModule<S> msvp)
      : inner_(std::move(inner)), msvp_(std::move(msvp)) {
    this->reg_.adopt(inner_->registry());
    this->reg_.adopt(msvp_.registry(), "msvp.");
  }

  std::string family_name() const override { return inner_->family_name(); }

  void set_mode(Mode m) override {
    this->mode_ = m;
    inner_->set_mode(m);
  }

  std::vector<std::string> capture_points() const override {
    return inner_->capture_points();
  }
  void set_capture(const std::string& layer) override {
    inner_->set_capture(layer);
  }
  const std::optional<Tensor<S>>& captured() const override {
    return inner_->captured();
  }

  MsvpModule<S>& msvp() { return msvp_; }
  Model<S>& inner() { return *inner_; }

  // The most recent fusion result, for the drift penalty.
  const Tensor<S>& last_input() const { return last_input_; }
  const Tensor<S>& last_fused() const { return last_fused_; }

 protected:
  Tensor<S> run(const Tensor<S>& x) override {
    last_input_ = x;
    last_fused_ = msvp_.fuse(x);
    return inner_->forward(last_fused_);
  }

 private:
  std::unique_ptr<Model<S>> inner_;
  MsvpModule<S> msvp_;
  Tensor<S> last_input_, last_fused_;
};

template <typename S>
std::unique_ptr<Model<S>> wrap_with_msvp(std::unique_ptr<Model<S>> model,
                                         MsvpModule<S> msvp) {
  return std::make_unique<MsvpModel<S>>(std::move(model), std::move(msvp));
}

}  // namespace msvp
