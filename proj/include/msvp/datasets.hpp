#pragma once

// Dataset ingestion and the input pipeline: IDX and CIFAR-10 binary parsing,
// seeded train/validation splits, per-channel normalization statistics
// (computed on the 90% train split at 64-bit, cached to disk), and the
// augmentation chain crop -> rotate -> flip applied in the raw 0..255 pixel
// domain before normalization.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "msvp/common.hpp"
#include "msvp/rng.hpp"
#include "msvp/tensor.hpp"

namespace msvp {

enum class DatasetName { mnist, fashion_mnist, cifar10 };

inline const char* dataset_str(DatasetName d) {
  switch (d) {
    case DatasetName::mnist: return "mnist";
    case DatasetName::fashion_mnist: return "fashion_mnist";
    case DatasetName::cifar10: return "cifar10";
  }
  return "?";
}

inline DatasetName dataset_from_name(const std::string& s) {
  if (s == "mnist") return DatasetName::mnist;
  if (s == "fashion_mnist") return DatasetName::fashion_mnist;
  if (s == "cifar10") return DatasetName::cifar10;
  fail<ConfigError>("unknown dataset '", s,
                    "' (expected mnist|fashion_mnist|cifar10)");
}

inline const std::vector<std::string>& class_names(DatasetName d) {
  static const std::vector<std::string> digits = {"0", "1", "2", "3", "4",
                                                  "5", "6", "7", "8", "9"};
  static const std::vector<std::string> fashion = {
      "T-shirt/top", "Trouser", "Pullover", "Dress",  "Coat",
      "Sandal",      "Shirt",   "Sneaker",  "Bag",    "Ankle boot"};
  static const std::vector<std::string> cifar = {
      "airplane", "automobile", "bird",  "cat",  "deer",
      "dog",      "frog",       "horse", "ship", "truck"};
  switch (d) {
    case DatasetName::mnist: return digits;
    case DatasetName::fashion_mnist: return fashion;
    case DatasetName::cifar10: return cifar;
  }
  return digits;
}

// ---------------------------------------------------------------------------
// IDX parsing (big-endian header: magic, then one u32 per dimension)

namespace detail {

inline std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in.good()) fail<DataError>("cannot open '", path, "'");
  const auto size = static_cast<size_t>(in.tellg());
  in.seekg(0);
  std::vector<uint8_t> bytes(size);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  MSVP_CHECK(in.good(), "short read on '", path, "'");
  return bytes;
}

inline uint32_t be32(const uint8_t* p) {
  return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
         (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

}  // namespace detail

struct IdxImages {
  int64_t count = 0, height = 0, width = 0;
  std::vector<uint8_t> pixels;  // [count, height, width]
};

inline IdxImages parse_idx_images(const std::string& path) {
  const auto bytes = detail::read_file(path);
  if (bytes.size() < 16)
    fail<DataError>("'", path, "': truncated IDX header (", bytes.size(),
                    " bytes)");
  const uint32_t magic = detail::be32(bytes.data());
  if (magic != 0x00000803)
    fail<DataError>("'", path, "': bad image magic 0x", std::hex, magic,
                    " (expected 0x00000803)");
  IdxImages out;
  out.count = detail::be32(bytes.data() + 4);
  out.height = detail::be32(bytes.data() + 8);
  out.width = detail::be32(bytes.data() + 12);
  if (!(out.count > 0 && out.height > 0 && out.width > 0 &&
        out.height < (1 << 16) && out.width < (1 << 16)))
    fail<DataError>("'", path, "': implausible IDX dimensions ", out.count,
                    "x", out.height, "x", out.width);
  const uint64_t expected =
      16 + static_cast<uint64_t>(out.count) * static_cast<uint64_t>(out.height) *
               static_cast<uint64_t>(out.width);
  if (bytes.size() != expected)
    fail<DataError>("'", path, "': payload truncated, expected ", expected,
                    " bytes but file has ", bytes.size());
  out.pixels.assign(bytes.begin() + 16, bytes.end());
  return out;
}

inline std::vector<uint8_t> parse_idx_labels(const std::string& path) {
  const auto bytes = detail::read_file(path);
  if (bytes.size() < 8)
    fail<DataError>("'", path, "': truncated IDX header (", bytes.size(),
                    " bytes)");
  const uint32_t magic = detail::be32(bytes.data());
  if (magic != 0x00000801)
    fail<DataError>("'", path, "': bad label magic 0x", std::hex, magic,
                    " (expected 0x00000801)");
  const uint64_t count = detail::be32(bytes.data() + 4);
  if (bytes.size() != 8 + count)
    fail<DataError>("'", path, "': payload truncated, expected ", 8 + count,
                    " bytes but file has ", bytes.size());
  return {bytes.begin() + 8, bytes.end()};
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary batches: records of 1 label byte + 3072 channel-planar
// pixels; an official batch holds 10000 records (30730000 bytes).

struct CifarData {
  int64_t count = 0;
  std::vector<uint8_t> pixels;  // [count, 3, 32, 32]
  std::vector<uint8_t> labels;
};

inline CifarData parse_cifar_binary(const std::vector<std::string>& paths) {
  CifarData out;
  for (const auto& path : paths) {
    const auto bytes = detail::read_file(path);
    if (bytes.size() % 3073 != 0)
      fail<DataError>("'", path, "': size ", bytes.size(),
                      " is not a whole number of 3073-byte records (an "
                      "official batch is 30730000 bytes)");
    const int64_t records = static_cast<int64_t>(bytes.size() / 3073);
    for (int64_t r = 0; r < records; ++r) {
      const uint8_t* rec = bytes.data() + r * 3073;
      if (rec[0] >= 10)
        fail<DataError>("'", path, "': record ", r, " has label ",
                        int(rec[0]), " outside [0,10)");
      out.labels.push_back(rec[0]);
      out.pixels.insert(out.pixels.end(), rec + 1, rec + 3073);
    }
    out.count += records;
  }
  return out;
}

// ---------------------------------------------------------------------------

struct Dataset {
  DatasetName name = DatasetName::mnist;
  int64_t channels = 1, resolution = 28;
  int64_t n_train = 0, n_test = 0;
  std::vector<uint8_t> train_images, test_images;  // [N,C,H,W] raw bytes
  std::vector<uint8_t> train_labels, test_labels;
};

// Loads the official files from <root>/<dataset>/ and enforces the published
// set sizes and label ranges.
inline Dataset load_dataset(DatasetName name, const std::string& root) {
  Dataset d;
  d.name = name;
  const std::string dir = root + "/" + dataset_str(name);
  if (!std::filesystem::exists(dir))
    fail<DataError>("dataset directory '", dir, "' does not exist");
  if (name == DatasetName::cifar10) {
    d.channels = 3;
    d.resolution = 32;
    std::vector<std::string> train_paths;
    for (int i = 1; i <= 5; ++i)
      train_paths.push_back(dir + "/data_batch_" + std::to_string(i) + ".bin");
    auto tr = parse_cifar_binary(train_paths);
    auto te = parse_cifar_binary({dir + "/test_batch.bin"});
    if (tr.count != 50000)
      fail<DataError>("cifar10: expected 50000 training records, found ",
                      tr.count);
    if (te.count != 10000)
      fail<DataError>("cifar10: expected 10000 test records, found ",
                      te.count);
    d.n_train = tr.count;
    d.n_test = te.count;
    d.train_images = std::move(tr.pixels);
    d.train_labels = std::move(tr.labels);
    d.test_images = std::move(te.pixels);
    d.test_labels = std::move(te.labels);
    return d;
  }
  d.channels = 1;
  d.resolution = 28;
  auto tri = parse_idx_images(dir + "/train-images-idx3-ubyte");
  auto trl = parse_idx_labels(dir + "/train-labels-idx1-ubyte");
  auto tei = parse_idx_images(dir + "/t10k-images-idx3-ubyte");
  auto tel = parse_idx_labels(dir + "/t10k-labels-idx1-ubyte");
  if (!(tri.count == 60000 && tri.height == 28 && tri.width == 28))
    fail<DataError>(dataset_str(name), ": expected 60000x28x28 training "
                    "images, found ", tri.count, "x", tri.height, "x",
                    tri.width);
  if (tei.count != 10000)
    fail<DataError>(dataset_str(name), ": expected 10000 test images, found ",
                    tei.count);
  if (static_cast<int64_t>(trl.size()) != tri.count ||
      static_cast<int64_t>(tel.size()) != tei.count)
    fail<DataError>(dataset_str(name), ": image/label count mismatch");
  for (uint8_t l : trl)
    if (l >= 10)
      fail<DataError>(dataset_str(name), ": label ", int(l), " outside [0,10)");
  d.n_train = tri.count;
  d.n_test = tei.count;
  d.train_images = std::move(tri.pixels);
  d.train_labels = std::move(trl);
  d.test_images = std::move(tei.pixels);
  d.test_labels = std::move(tel);
  return d;
}

// Keep the first `n` training samples and up to `n` test samples; used by
// the desk-scale --subset runs.
inline void subset_dataset(Dataset& d, int64_t n) {
  if (n <= 0) fail<ConfigError>("subset size must be positive");
  const int64_t chw = d.channels * d.resolution * d.resolution;
  if (n < d.n_train) {
    d.n_train = n;
    d.train_images.resize(static_cast<size_t>(n * chw));
    d.train_labels.resize(static_cast<size_t>(n));
  }
  if (n < d.n_test) {
    d.n_test = n;
    d.test_images.resize(static_cast<size_t>(n * chw));
    d.test_labels.resize(static_cast<size_t>(n));
  }
}

// ---------------------------------------------------------------------------
// split

struct SplitIndices {
  std::vector<int64_t> train_idx, val_idx;
  uint64_t seed = 0;
};

inline SplitIndices split(int64_t n, double ratio, uint64_t seed) {
  MSVP_CHECK(n > 1, "split: need at least 2 samples");
  MSVP_CHECK(ratio > 0.0 && ratio < 1.0, "split: ratio must be in (0,1), got ",
             ratio);
  std::vector<int64_t> perm(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) perm[static_cast<size_t>(i)] = i;
  rng::Xoshiro256 g(seed, "split");
  g.shuffle(perm);
  const auto n_val = static_cast<int64_t>(
      std::llround((1.0 - ratio) * static_cast<double>(n)));
  const int64_t n_train = n - n_val;
  SplitIndices s;
  s.seed = seed;
  s.train_idx.assign(perm.begin(), perm.begin() + n_train);
  s.val_idx.assign(perm.begin() + n_train, perm.end());
  return s;
}

// ---------------------------------------------------------------------------
// normalization statistics

struct ChannelStats {
  std::vector<double> mean, stddev;  // in the /255 domain
};

// 64-bit accumulation over the train-split pixels, rounded to 6 decimals.
inline ChannelStats compute_stats(const Dataset& d, const SplitIndices& s) {
  const int64_t c = d.channels, hw = d.resolution * d.resolution;
  std::vector<double> sum(static_cast<size_t>(c), 0.0);
  std::vector<double> sumsq(static_cast<size_t>(c), 0.0);
  for (int64_t idx : s.train_idx) {
    const uint8_t* img = d.train_images.data() + idx * c * hw;
    for (int64_t ci = 0; ci < c; ++ci)
      for (int64_t i = 0; i < hw; ++i) {
        const double v = static_cast<double>(img[ci * hw + i]) / 255.0;
        sum[static_cast<size_t>(ci)] += v;
        sumsq[static_cast<size_t>(ci)] += v * v;
      }
  }
  const double count =
      static_cast<double>(s.train_idx.size()) * static_cast<double>(hw);
  ChannelStats st;
  for (int64_t ci = 0; ci < c; ++ci) {
    const double m = sum[static_cast<size_t>(ci)] / count;
    const double var = sumsq[static_cast<size_t>(ci)] / count - m * m;
    MSVP_CHECK(var > 0, "compute_stats: channel ", ci, " has zero variance");
    st.mean.push_back(std::round(m * 1e6) / 1e6);
    st.stddev.push_back(std::round(std::sqrt(var) * 1e6) / 1e6);
  }
  return st;
}

inline std::string stats_cache_path(const std::string& root, DatasetName name,
                                    uint64_t seed) {
  return root + "/stats." + dataset_str(name) + "." + std::to_string(seed) +
         ".txt";
}

inline void save_stats(const std::string& path, const ChannelStats& st) {
  std::ofstream out(path);
  if (!out.good()) return;  // cache is best-effort
  out << std::fixed << std::setprecision(6);
  for (size_t i = 0; i < st.mean.size(); ++i)
    out << "mean" << i << " = " << st.mean[i] << "\n"
        << "std" << i << " = " << st.stddev[i] << "\n";
}

inline bool load_stats(const std::string& path, int64_t channels,
                       ChannelStats& st) {
  std::ifstream in(path);
  if (!in.good()) return false;
  st.mean.assign(static_cast<size_t>(channels), 0.0);
  st.stddev.assign(static_cast<size_t>(channels), 0.0);
  std::string key, eq;
  double value;
  int found = 0;
  while (in >> key >> eq >> value) {
    for (int64_t c = 0; c < channels; ++c) {
      if (key == "mean" + std::to_string(c)) {
        st.mean[static_cast<size_t>(c)] = value;
        ++found;
      } else if (key == "std" + std::to_string(c)) {
        st.stddev[static_cast<size_t>(c)] = value;
        ++found;
      }
    }
  }
  return found == 2 * channels;
}

// Stats for the split, going through the disk cache when possible.
inline ChannelStats cached_stats(const Dataset& d, const SplitIndices& s,
                                 const std::string& root) {
  const std::string path = stats_cache_path(root, d.name, s.seed);
  ChannelStats st;
  if (load_stats(path, d.channels, st)) return st;
  st = compute_stats(d, s);
  save_stats(path, st);
  return st;
}

// ---------------------------------------------------------------------------
// augmentation

struct AugmentPolicy {
  int64_t pad_crop = 0;        // zero-pad by this many pixels, then crop back
  double rotation_deg = 0.0;   // uniform in [-r, +r], bilinear, zero fill
  double hflip_prob = 0.0;

  void validate() const {
    if (pad_crop < 0) fail<ConfigError>("pad_crop must be >= 0");
    if (rotation_deg < 0) fail<ConfigError>("rotation_deg must be >= 0");
    if (hflip_prob < 0.0 || hflip_prob > 1.0)
      fail<ConfigError>("hflip_prob must be in [0,1]");
  }
};

// 28x28 sets: pad-crop 4 + rotation up to 10 degrees; CIFAR-10: pad-crop 4 +
// horizontal flips.
inline AugmentPolicy default_policy(DatasetName name) {
  if (name == DatasetName::cifar10) return {4, 0.0, 0.5};
  return {4, 10.0, 0.0};
}

namespace aug {

// Crop an HxW window out of the zero-padded image at offset (oy, ox),
// oy/ox in [0, 2*pad].
inline void pad_crop(const float* src, float* dst, int64_t c, int64_t h,
                     int64_t w, int64_t pad, int64_t oy, int64_t ox) {
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        const int64_t sy = y + oy - pad;
        const int64_t sx = x + ox - pad;
        dst[(ci * h + y) * w + x] =
            (sy >= 0 && sy < h && sx >= 0 && sx < w)
                ? src[(ci * h + sy) * w + sx]
                : 0.f;
      }
}

// Rotate about the image center by `deg`, bilinear resampling, zero fill.
// The inverse map is centered on (H-1)/2 so a zero angle is bit-exact.
inline void rotate(const float* src, float* dst, int64_t c, int64_t h,
                   int64_t w, double deg) {
  const double rad = deg * 3.14159265358979323846 / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double cy = static_cast<double>(h - 1) / 2.0;
  const double cx = static_cast<double>(w - 1) / 2.0;
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        const double dy = static_cast<double>(y) - cy;
        const double dx = static_cast<double>(x) - cx;
        const double sy = cs * dy - sn * dx + cy;
        const double sx = sn * dy + cs * dx + cx;
        float v = 0.f;
        const auto y0 = static_cast<int64_t>(std::floor(sy));
        const auto x0 = static_cast<int64_t>(std::floor(sx));
        if (y0 >= -1 && y0 < h && x0 >= -1 && x0 < w) {
          const double fy = sy - static_cast<double>(y0);
          const double fx = sx - static_cast<double>(x0);
          auto at = [&](int64_t yy, int64_t xx) -> double {
            if (yy < 0 || yy >= h || xx < 0 || xx >= w) return 0.0;
            return src[(ci * h + yy) * w + xx];
          };
          v = static_cast<float>(
              (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
              fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1)));
        }
        dst[(ci * h + y) * w + x] = v;
      }
}

inline void hflip(float* img, int64_t c, int64_t h, int64_t w) {
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t y = 0; y < h; ++y) {
      float* row = img + (ci * h + y) * w;
      for (int64_t x = 0; x < w / 2; ++x) std::swap(row[x], row[w - 1 - x]);
    }
}

}  // namespace aug

// Applies crop -> rotate -> flip in the raw pixel domain. Disabled stages
// consume no randomness, so a policy change does not silently shift other
// streams.
inline void augment(float* img, int64_t c, int64_t h, int64_t w,
                    const AugmentPolicy& policy, rng::Xoshiro256& g) {
  std::vector<float> tmp(static_cast<size_t>(c * h * w));
  if (policy.pad_crop > 0) {
    const auto oy = static_cast<int64_t>(g.next_below(
        static_cast<uint64_t>(2 * policy.pad_crop + 1)));
    const auto ox = static_cast<int64_t>(g.next_below(
        static_cast<uint64_t>(2 * policy.pad_crop + 1)));
    aug::pad_crop(img, tmp.data(), c, h, w, policy.pad_crop, oy, ox);
    std::copy(tmp.begin(), tmp.end(), img);
  }
  if (policy.rotation_deg > 0) {
    const double angle =
        g.next_uniform(-policy.rotation_deg, policy.rotation_deg);
    aug::rotate(img, tmp.data(), c, h, w, angle);
    std::copy(tmp.begin(), tmp.end(), img);
  }
  if (policy.hflip_prob > 0) {
    if (g.next_double() < policy.hflip_prob) aug::hflip(img, c, h, w);
  }
}

// (v/255 - mean) / std per channel, in place; input pixels are raw 0..255.
inline void normalize(float* img, int64_t c, int64_t hw,
                      const ChannelStats& st) {
  for (int64_t ci = 0; ci < c; ++ci) {
    const float m = static_cast<float>(st.mean[static_cast<size_t>(ci)]);
    const float sd = static_cast<float>(st.stddev[static_cast<size_t>(ci)]);
    MSVP_CHECK(sd > 0, "normalize: zero std for channel ", ci);
    float* p = img + ci * hw;
    for (int64_t i = 0; i < hw; ++i) p[i] = (p[i] / 255.f - m) / sd;
  }
}

}  // namespace msvp
