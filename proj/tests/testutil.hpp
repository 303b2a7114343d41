#pragma once

#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "msvp/datasets.hpp"
#include "msvp/rng.hpp"
#include "msvp/tensor.hpp"

namespace testutil {

template <typename S>
msvp::Tensor<S> random_tensor(msvp::Shape shape, msvp::rng::Xoshiro256& g,
                              double lo = -1.0, double hi = 1.0) {
  msvp::Tensor<S> t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i)
    t.data()[i] = static_cast<S>(g.next_uniform(lo, hi));
  return t;
}

// Random values nudged away from zero, for kinked ops (relu).
template <typename S>
msvp::Tensor<S> random_tensor_nonzero(msvp::Shape shape,
                                      msvp::rng::Xoshiro256& g,
                                      double margin = 0.05) {
  msvp::Tensor<S> t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) {
    double v = g.next_uniform(-1.0, 1.0);
    if (v >= 0 && v < margin) v += margin;
    if (v < 0 && v > -margin) v -= margin;
    t.data()[i] = static_cast<S>(v);
  }
  return t;
}

// Dataset directory for tests that need the real files: MSVP_DATA_DIR, or
// ./data relative to the working directory. Empty when unavailable.
inline std::string data_dir() {
  if (const char* env = std::getenv("MSVP_DATA_DIR")) {
    if (std::filesystem::exists(env)) return env;
  }
  if (std::filesystem::exists("data/mnist")) return "data";
  return {};
}

inline bool has_dataset(const std::string& name) {
  const std::string root = data_dir();
  return !root.empty() && std::filesystem::exists(root + "/" + name);
}

// In-memory dataset with a learnable class-dependent pattern: class c gets a
// bright 6x6 block at a class-specific position plus pixel noise.
inline msvp::Dataset synthetic_dataset(int64_t n_train, int64_t n_test,
                                       uint64_t seed = 5,
                                       int64_t channels = 1,
                                       int64_t res = 28) {
  msvp::Dataset d;
  d.name = channels == 3 ? msvp::DatasetName::cifar10 : msvp::DatasetName::mnist;
  d.channels = channels;
  d.resolution = res;
  d.n_train = n_train;
  d.n_test = n_test;
  msvp::rng::Xoshiro256 g(seed, "synthetic");
  auto gen = [&](int64_t n, std::vector<uint8_t>& images,
                 std::vector<uint8_t>& labels) {
    const int64_t chw = channels * res * res;
    images.resize(static_cast<size_t>(n * chw));
    labels.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
      const int cls = static_cast<int>(g.next_below(10));
      labels[static_cast<size_t>(i)] = static_cast<uint8_t>(cls);
      const int64_t by = 2 + (cls / 5) * (res / 2);
      const int64_t bx = 2 + (cls % 5) * ((res - 8) / 5);
      for (int64_t c = 0; c < channels; ++c)
        for (int64_t y = 0; y < res; ++y)
          for (int64_t x = 0; x < res; ++x) {
            const bool in_block =
                y >= by && y < by + 6 && x >= bx && x < bx + 6;
            const int noise = static_cast<int>(g.next_below(40));
            images[static_cast<size_t>((i * channels + c) * res * res +
                                       y * res + x)] =
                static_cast<uint8_t>(in_block ? 200 + noise : noise);
          }
    }
  };
  gen(n_train, d.train_images, d.train_labels);
  gen(n_test, d.test_images, d.test_labels);
  return d;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    base_ = std::filesystem::temp_directory_path() /
            ("msvp_test_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(base_);
    std::filesystem::create_directories(base_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(base_, ec);
  }
  std::string path() const { return base_.string(); }
  std::string file(const std::string& name) const {
    return (base_ / name).string();
  }

 private:
  std::filesystem::path base_;
};

}  // namespace testutil
