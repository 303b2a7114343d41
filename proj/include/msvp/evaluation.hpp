#pragma once

// Metrics and qualitative analysis: batched top-1 accuracy, confusion
// matrices, parameter-overhead reporting, and GradCAM heatmaps for the
// convolutional families.

#include <array>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "msvp/backbones.hpp"
#include "msvp/datasets.hpp"
#include "msvp/image_io.hpp"
#include "msvp/tape.hpp"

namespace msvp {

// Normalized images ready for eval-mode forward passes.
template <typename S>
struct EvalSet {
  int64_t count = 0, channels = 0, resolution = 0;
  std::vector<S> images;  // [N,C,H,W]
  std::vector<int> labels;
};

// part: raw uint8 pixels [N,C,H,W]; indices empty = all samples in order.
template <typename S>
EvalSet<S> build_eval_set(const std::vector<uint8_t>& pixels,
                          const std::vector<uint8_t>& labels, int64_t channels,
                          int64_t resolution, const ChannelStats& stats,
                          const std::vector<int64_t>& indices = {}) {
  EvalSet<S> set;
  set.channels = channels;
  set.resolution = resolution;
  const int64_t chw = channels * resolution * resolution;
  const int64_t total = static_cast<int64_t>(labels.size());
  std::vector<int64_t> all;
  const std::vector<int64_t>* idx = &indices;
  if (indices.empty()) {
    all.resize(static_cast<size_t>(total));
    for (int64_t i = 0; i < total; ++i) all[static_cast<size_t>(i)] = i;
    idx = &all;
  }
  set.count = static_cast<int64_t>(idx->size());
  set.images.resize(static_cast<size_t>(set.count * chw));
  set.labels.resize(static_cast<size_t>(set.count));
  std::vector<float> buf(static_cast<size_t>(chw));
  for (int64_t i = 0; i < set.count; ++i) {
    const int64_t src = (*idx)[static_cast<size_t>(i)];
    MSVP_CHECK(src >= 0 && src < total, "eval set: index ", src,
               " out of range");
    for (int64_t j = 0; j < chw; ++j)
      buf[static_cast<size_t>(j)] =
          static_cast<float>(pixels[static_cast<size_t>(src * chw + j)]);
    normalize(buf.data(), channels, resolution * resolution, stats);
    for (int64_t j = 0; j < chw; ++j)
      set.images[static_cast<size_t>(i * chw + j)] =
          static_cast<S>(buf[static_cast<size_t>(j)]);
    set.labels[static_cast<size_t>(i)] =
        static_cast<int>(labels[static_cast<size_t>(src)]);
  }
  return set;
}

// Argmax predictions, ties broken by the lowest class index.
template <typename S>
std::vector<int> predict(Model<S>& model, const EvalSet<S>& set,
                         int64_t batch = 256) {
  MSVP_CHECK(set.count > 0, "predict: empty evaluation set");
  MSVP_CHECK(batch >= 1, "predict: batch must be >= 1");
  const Mode saved = model.mode();
  model.set_mode(Mode::eval);
  const int64_t chw = set.channels * set.resolution * set.resolution;
  std::vector<int> preds(static_cast<size_t>(set.count));
  for (int64_t start = 0; start < set.count; start += batch) {
    const int64_t b = std::min(batch, set.count - start);
    Tensor<S> x({b, set.channels, set.resolution, set.resolution});
    std::copy(set.images.begin() + start * chw,
              set.images.begin() + (start + b) * chw, x.data());
    auto logits = model.forward(x);
    const int64_t k = logits.dim(1);
    for (int64_t r = 0; r < b; ++r) {
      const S* row = logits.data() + r * k;
      int best = 0;
      for (int64_t i = 1; i < k; ++i)
        if (row[i] > row[best]) best = static_cast<int>(i);
      preds[static_cast<size_t>(start + r)] = best;
    }
  }
  model.set_mode(saved);
  return preds;
}

template <typename S>
double top1_accuracy(Model<S>& model, const EvalSet<S>& set,
                     int64_t batch = 256) {
  const auto preds = predict(model, set, batch);
  int64_t hits = 0;
  for (size_t i = 0; i < preds.size(); ++i)
    if (preds[i] == set.labels[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(set.count);
}

// ---------------------------------------------------------------------------

struct ConfusionMatrix {
  std::array<std::array<int64_t, 10>, 10> counts{};  // [true][predicted]

  int64_t total() const {
    int64_t n = 0;
    for (const auto& row : counts)
      for (int64_t v : row) n += v;
    return n;
  }
  int64_t trace() const {
    int64_t n = 0;
    for (int i = 0; i < 10; ++i) n += counts[static_cast<size_t>(i)][static_cast<size_t>(i)];
    return n;
  }
  double accuracy() const {
    return static_cast<double>(trace()) / static_cast<double>(total());
  }

  void to_csv(const std::string& path,
              const std::vector<std::string>& names) const {
    std::ofstream out(path);
    MSVP_CHECK(out.good(), "cannot write '", path, "'");
    for (size_t i = 0; i < names.size(); ++i)
      out << (i ? "," : "") << names[i];
    out << "\n";
    for (const auto& row : counts) {
      for (size_t j = 0; j < row.size(); ++j)
        out << (j ? "," : "") << row[j];
      out << "\n";
    }
  }
};

inline ConfusionMatrix confusion_from_predictions(
    const std::vector<int>& preds, const std::vector<int>& labels) {
  MSVP_CHECK(preds.size() == labels.size(),
             "confusion: prediction/label count mismatch");
  ConfusionMatrix m;
  for (size_t i = 0; i < preds.size(); ++i) {
    MSVP_CHECK(labels[i] >= 0 && labels[i] < 10 && preds[i] >= 0 && preds[i] < 10,
               "confusion: class out of range");
    m.counts[static_cast<size_t>(labels[i])][static_cast<size_t>(preds[i])]++;
  }
  return m;
}

template <typename S>
ConfusionMatrix confusion(Model<S>& model, const EvalSet<S>& set,
                          int64_t batch = 256) {
  return confusion_from_predictions(predict(model, set, batch), set.labels);
}

// ---------------------------------------------------------------------------

struct OverheadReport {
  int64_t params_base = 0, params_msvp = 0;
  double delta_pct = 0.0;  // (msvp - base) / base * 100
};

inline OverheadReport overhead_report(int64_t params_base,
                                      int64_t params_msvp) {
  MSVP_CHECK(params_base > 0, "overhead_report: baseline has no parameters");
  OverheadReport r;
  r.params_base = params_base;
  r.params_msvp = params_msvp;
  r.delta_pct = static_cast<double>(params_msvp - params_base) /
                static_cast<double>(params_base) * 100.0;
  return r;
}

// ---------------------------------------------------------------------------
// GradCAM

struct GradCamMap {
  int64_t h = 0, w = 0;
  std::vector<float> heat;  // min-max scaled to [0,1]; flat maps are zero
  std::string layer;
  int target_class = 0;
};

inline std::string gradcam_default_layer(const std::string& family) {
  if (family == "cnn4") return "block4.relu";
  if (family == "resnet18_small") return "layer4";
  fail<ConfigError>("gradcam: unsupported architecture '", family,
                    "' (convolutional families only)");
}

// image: normalized [C,H,W]. Channel weights are the spatial means of the
// target-logit gradient at the chosen activation; the heat is the
// ReLU-rectified weighted sum, upsampled to the input resolution.
template <typename S>
GradCamMap gradcam(Model<S>& model, const Tensor<S>& image, int target_class,
                   const std::string& layer_name = "") {
  MSVP_CHECK(image.rank() == 3, "gradcam: expected a [C,H,W] image, got ",
             shape_str(image.shape()));
  const std::string layer =
      layer_name.empty() ? gradcam_default_layer(model.family_name())
                         : layer_name;
  if (model.family_name() == "vit_tiny")
    fail<ConfigError>("gradcam: unsupported architecture 'vit_tiny' "
                      "(convolutional families only)");
  const int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const Mode saved = model.mode();
  model.set_mode(Mode::eval);
  model.set_capture(layer);
  GradCamMap out;
  out.layer = layer;
  out.target_class = target_class;
  out.h = h;
  out.w = w;
  {
    GradTape<S> tape;
    TapeScope<S> scope(tape);
    Tensor<S> x({1, c, h, w});
    std::copy(image.data(), image.data() + image.numel(), x.data());
    auto logits = model.forward(x);
    MSVP_CHECK(target_class >= 0 && target_class < logits.dim(1),
               "gradcam: target class ", target_class, " out of range [0,",
               logits.dim(1), ")");
    tape.backward(select_item(logits, target_class));
    auto& act = model.captured();
    MSVP_CHECK(act.has_value(), "gradcam: no activation captured for '", layer,
               "'");
    const Tensor<S>& a = *act;  // [1,K,ah,aw]
    const int64_t k = a.dim(1), ah = a.dim(2), aw = a.dim(3);
    const auto& grads = a.impl()->grad;
    MSVP_CHECK(!grads.empty(), "gradcam: captured activation has no gradient");
    Tensor<S> heat({1, ah, aw});
    for (int64_t ki = 0; ki < k; ++ki) {
      S alpha(0);
      const S* g = grads.data() + ki * ah * aw;
      for (int64_t i = 0; i < ah * aw; ++i) alpha += g[i];
      alpha /= static_cast<S>(ah * aw);
      const S* av = a.data() + ki * ah * aw;
      for (int64_t i = 0; i < ah * aw; ++i) heat.data()[i] += alpha * av[i];
    }
    for (int64_t i = 0; i < ah * aw; ++i)
      heat.data()[i] = heat.data()[i] > S(0) ? heat.data()[i] : S(0);
    auto up = bilinear_resize(heat, h, w);
    S lo = up.data()[0], hi = up.data()[0];
    for (int64_t i = 1; i < h * w; ++i) {
      lo = std::min(lo, up.data()[i]);
      hi = std::max(hi, up.data()[i]);
    }
    out.heat.assign(static_cast<size_t>(h * w), 0.f);
    if (hi > lo)
      for (int64_t i = 0; i < h * w; ++i)
        out.heat[static_cast<size_t>(i)] =
            static_cast<float>((up.data()[i] - lo) / (hi - lo));
  }
  model.set_capture("");
  model.set_mode(saved);
  return out;
}

// Already-normalized [0,1] maps are written at fixed scale (0 -> 0, 1 -> 255)
// so an all-zero map renders black.
inline void write_heatmap_pgm(const std::string& path, const GradCamMap& map) {
  std::ofstream out(path, std::ios::binary);
  MSVP_CHECK(out.good(), "cannot write '", path, "'");
  out << "P5\n" << map.w << " " << map.h << "\n255\n";
  for (float v : map.heat)
    out.put(static_cast<char>(static_cast<unsigned char>(
        std::lround(std::min(1.f, std::max(0.f, v)) * 255.f))));
}

}  // namespace msvp
