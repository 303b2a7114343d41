#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <fstream>

#include "msvp/datasets.hpp"
#include "msvp/trainer.hpp"
#include "testutil.hpp"

using msvp::DatasetName;

namespace {

void write_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

void push_be32(std::vector<uint8_t>& v, uint32_t x) {
  v.push_back(static_cast<uint8_t>(x >> 24));
  v.push_back(static_cast<uint8_t>(x >> 16));
  v.push_back(static_cast<uint8_t>(x >> 8));
  v.push_back(static_cast<uint8_t>(x));
}

}  // namespace

TEST_CASE("IDX fixture round trip and error paths") {
  testutil::TempDir tmp("idx");

  SECTION("hand-built 2-image 2x2 file round-trips exactly") {
    std::vector<uint8_t> file;
    push_be32(file, 0x00000803);
    push_be32(file, 2);
    push_be32(file, 2);
    push_be32(file, 2);
    const uint8_t pixels[8] = {0, 64, 128, 255, 7, 13, 21, 42};
    file.insert(file.end(), pixels, pixels + 8);
    write_bytes(tmp.file("img.idx"), file);
    auto parsed = msvp::parse_idx_images(tmp.file("img.idx"));
    REQUIRE(parsed.count == 2);
    REQUIRE(parsed.height == 2);
    REQUIRE(parsed.width == 2);
    REQUIRE(std::memcmp(parsed.pixels.data(), pixels, 8) == 0);
  }

  SECTION("truncation error names expected vs actual byte counts") {
    std::vector<uint8_t> file;
    push_be32(file, 0x00000803);
    push_be32(file, 2);
    push_be32(file, 2);
    push_be32(file, 2);
    file.push_back(1);  // 1 of 8 payload bytes
    write_bytes(tmp.file("trunc.idx"), file);
    try {
      msvp::parse_idx_images(tmp.file("trunc.idx"));
      FAIL("expected a DataError");
    } catch (const msvp::DataError& e) {
      const std::string msg = e.what();
      REQUIRE(msg.find("24") != std::string::npos);  // expected bytes
      REQUIRE(msg.find("17") != std::string::npos);  // actual bytes
    }
  }

  SECTION("wrong magic is a distinct diagnostic") {
    std::vector<uint8_t> file;
    push_be32(file, 0x00000801);  // label magic in an image file
    push_be32(file, 1);
    push_be32(file, 1);
    push_be32(file, 1);
    file.push_back(9);
    write_bytes(tmp.file("magic.idx"), file);
    REQUIRE_THROWS_WITH(msvp::parse_idx_images(tmp.file("magic.idx")),
                        Catch::Matchers::ContainsSubstring("magic"));
  }

  SECTION("label files parse and validate") {
    std::vector<uint8_t> file;
    push_be32(file, 0x00000801);
    push_be32(file, 3);
    file.insert(file.end(), {1, 2, 3});
    write_bytes(tmp.file("lab.idx"), file);
    auto labels = msvp::parse_idx_labels(tmp.file("lab.idx"));
    REQUIRE(labels == std::vector<uint8_t>{1, 2, 3});
  }

  SECTION("implausible dimensions are rejected") {
    std::vector<uint8_t> file;
    push_be32(file, 0x00000803);
    push_be32(file, 1);
    push_be32(file, 1u << 20);  // megapixel-tall image
    push_be32(file, 28);
    write_bytes(tmp.file("dims.idx"), file);
    REQUIRE_THROWS_AS(msvp::parse_idx_images(tmp.file("dims.idx")),
                      msvp::DataError);
  }
}

TEST_CASE("CIFAR binary fixture round trip and size validation") {
  testutil::TempDir tmp("cifar");

  SECTION("synthetic 1-record batch with ramp pixels") {
    std::vector<uint8_t> rec(3073);
    rec[0] = 7;
    for (int i = 0; i < 3072; ++i) rec[static_cast<size_t>(i + 1)] =
        static_cast<uint8_t>(i % 251);
    write_bytes(tmp.file("batch.bin"), rec);
    auto parsed = msvp::parse_cifar_binary({tmp.file("batch.bin")});
    REQUIRE(parsed.count == 1);
    REQUIRE(parsed.labels[0] == 7);
    for (int i = 0; i < 3072; ++i)
      REQUIRE(parsed.pixels[static_cast<size_t>(i)] ==
              static_cast<uint8_t>(i % 251));
  }

  SECTION("non-integral record count reports the expected size") {
    std::vector<uint8_t> bad(3072);  // one byte short of a record
    write_bytes(tmp.file("bad.bin"), bad);
    try {
      msvp::parse_cifar_binary({tmp.file("bad.bin")});
      FAIL("expected a DataError");
    } catch (const msvp::DataError& e) {
      const std::string msg = e.what();
      REQUIRE(msg.find("3073") != std::string::npos);
      REQUIRE(msg.find("30730000") != std::string::npos);
    }
  }
}

TEST_CASE("split is a seeded partition with the stated sizes") {
  auto a = msvp::split(60000, 0.9, 42);
  auto b = msvp::split(60000, 0.9, 42);
  REQUIRE(a.train_idx == b.train_idx);
  REQUIRE(a.val_idx == b.val_idx);
  REQUIRE(a.val_idx.size() == 6000);
  REQUIRE(a.train_idx.size() == 54000);

  auto c = msvp::split(60000, 0.9, 43);
  REQUIRE(a.train_idx != c.train_idx);

  // partition property over several seeds and sizes
  for (uint64_t seed : {1ull, 7ull, 42ull}) {
    for (int64_t n : {int64_t{10}, int64_t{997}, int64_t{5000}}) {
      auto s = msvp::split(n, 0.9, seed);
      std::vector<int64_t> joined = s.train_idx;
      joined.insert(joined.end(), s.val_idx.begin(), s.val_idx.end());
      std::sort(joined.begin(), joined.end());
      REQUIRE(static_cast<int64_t>(joined.size()) == n);
      for (int64_t i = 0; i < n; ++i)
        REQUIRE(joined[static_cast<size_t>(i)] == i);
    }
  }
}

TEST_CASE("normalization semantics and stats plumbing") {
  // constant image equal to the mean maps to zero
  std::vector<float> img(4, 255.f * 0.25f);
  msvp::ChannelStats st{{0.25}, {0.5}};
  msvp::normalize(img.data(), 1, 4, st);
  for (float v : img) REQUIRE(v == Catch::Approx(0.f).margin(1e-7));

  // mean 0, std 1 is a pure rescale by 1/255
  std::vector<float> ramp = {0.f, 51.f, 102.f, 255.f};
  msvp::ChannelStats id{{0.0}, {1.0}};
  msvp::normalize(ramp.data(), 1, 4, id);
  REQUIRE(ramp[0] == 0.f);
  REQUIRE(ramp[1] == Catch::Approx(0.2f));
  REQUIRE(ramp[3] == Catch::Approx(1.0f));

  // zero std rejected
  std::vector<float> v(4, 1.f);
  msvp::ChannelStats bad{{0.0}, {0.0}};
  REQUIRE_THROWS_AS(msvp::normalize(v.data(), 1, 4, bad), msvp::Error);

  // cache round trip
  testutil::TempDir tmp("stats");
  msvp::ChannelStats three{{0.1307, 0.25, 0.5}, {0.3081, 0.2, 0.33}};
  msvp::save_stats(tmp.file("stats.test.txt"), three);
  msvp::ChannelStats back;
  REQUIRE(msvp::load_stats(tmp.file("stats.test.txt"), 3, back));
  for (int i = 0; i < 3; ++i) {
    REQUIRE(back.mean[static_cast<size_t>(i)] ==
            Catch::Approx(three.mean[static_cast<size_t>(i)]).margin(1e-6));
    REQUIRE(back.stddev[static_cast<size_t>(i)] ==
            Catch::Approx(three.stddev[static_cast<size_t>(i)]).margin(1e-6));
  }
}

TEST_CASE("augmentation: disabled policy is the identity") {
  msvp::rng::Xoshiro256 g(3, "test");
  std::vector<float> img(784);
  for (auto& v : img) v = static_cast<float>(g.next_below(256));
  auto copy = img;
  msvp::AugmentPolicy off{0, 0.0, 0.0};
  msvp::rng::Xoshiro256 ag(42, "augment", 0, 0);
  msvp::augment(img.data(), 1, 28, 28, off, ag);
  REQUIRE(img == copy);
}

TEST_CASE("zero-angle rotation is bit exact") {
  msvp::rng::Xoshiro256 g(5, "test");
  std::vector<float> img(784), out(784);
  for (auto& v : img) v = static_cast<float>(g.next_below(256));
  msvp::aug::rotate(img.data(), out.data(), 1, 28, 28, 0.0);
  REQUIRE(out == img);
}

TEST_CASE("forced crop offset equals the hand-computed shift") {
  // ramp image, pad 4, offset (4,4) on the padded frame is the identity;
  // offset (0,0) shifts content down-right by 4 with zero fill
  std::vector<float> img(64);
  for (int i = 0; i < 64; ++i) img[static_cast<size_t>(i)] = static_cast<float>(i);
  std::vector<float> out(64);
  msvp::aug::pad_crop(img.data(), out.data(), 1, 8, 8, 4, 4, 4);
  REQUIRE(out == img);

  msvp::aug::pad_crop(img.data(), out.data(), 1, 8, 8, 4, 0, 0);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      const float expect =
          (y >= 4 && x >= 4) ? img[static_cast<size_t>((y - 4) * 8 + (x - 4))]
                             : 0.f;
      REQUIRE(out[static_cast<size_t>(y * 8 + x)] == expect);
    }
}

TEST_CASE("augmentation preserves shape and the padded-source value range") {
  msvp::rng::Xoshiro256 g(7, "test");
  msvp::AugmentPolicy policy{4, 10.0, 0.5};
  for (int it = 0; it < 20; ++it) {
    std::vector<float> img(3 * 64);
    float hi = 0;
    for (auto& v : img) {
      v = static_cast<float>(g.next_below(256));
      hi = std::max(hi, v);
    }
    msvp::rng::Xoshiro256 ag(42, "augment", 1, static_cast<uint64_t>(it));
    msvp::augment(img.data(), 3, 8, 8, policy, ag);
    REQUIRE(img.size() == 3 * 64);
    for (float v : img) {
      REQUIRE(v >= 0.f);
      REQUIRE(v <= hi + 1e-3f);
    }
  }
}

TEST_CASE("the augmented epoch stream is bit reproducible") {
  auto data = testutil::synthetic_dataset(64, 16);
  auto split = msvp::split(data.n_train, 0.9, 42);
  auto stats = msvp::compute_stats(data, split);
  std::vector<int64_t> samples(split.train_idx.begin(),
                               split.train_idx.begin() + 32);
  std::vector<int> l1, l2;
  auto a = msvp::make_train_batch<float>(data, stats, {4, 10.0, 0.0}, samples,
                                         42, 3, l1);
  auto b = msvp::make_train_batch<float>(data, stats, {4, 10.0, 0.0}, samples,
                                         42, 3, l2);
  REQUIRE(l1 == l2);
  for (int64_t i = 0; i < a.numel(); ++i)
    REQUIRE(a.data()[i] == b.data()[i]);
  // randomness is keyed by sample index, not batch position
  std::vector<int64_t> reordered(samples.rbegin(), samples.rend());
  std::vector<int> l3;
  auto c = msvp::make_train_batch<float>(data, stats, {4, 10.0, 0.0}, reordered,
                                         42, 3, l3);
  const int64_t chw = data.channels * data.resolution * data.resolution;
  for (int64_t i = 0; i < 32; ++i)
    for (int64_t j = 0; j < chw; ++j)
      REQUIRE(c.data()[i * chw + j] == a.data()[(31 - i) * chw + j]);
}

TEST_CASE("official datasets load with canonical histograms",
          "[requires-data]") {
  const std::string root = testutil::data_dir();
  if (root.empty()) {
    SKIP("MSVP_DATA_DIR not set and ./data missing");
  }

  SECTION("mnist") {
    if (!testutil::has_dataset("mnist")) SKIP("mnist files missing");
    auto d = msvp::load_dataset(DatasetName::mnist, root);
    REQUIRE(d.n_train == 60000);
    REQUIRE(d.n_test == 10000);
    // official header values via the raw parser
    auto hdr = msvp::parse_idx_images(root + "/mnist/train-images-idx3-ubyte");
    REQUIRE(hdr.count == 60000);
    REQUIRE(hdr.height == 28);
    REQUIRE(hdr.width == 28);
    // mnist's official test histogram is not uniform
    std::array<int, 10> hist{};
    for (uint8_t l : d.test_labels) hist[l]++;
    const std::array<int, 10> expected = {980, 1135, 1032, 1010, 982,
                                          892, 958,  1028, 974,  1009};
    for (int i = 0; i < 10; ++i) REQUIRE(hist[static_cast<size_t>(i)] == expected[static_cast<size_t>(i)]);
    // split-based stats land near the published constants
    auto split = msvp::split(d.n_train, 0.9, 42);
    auto st = msvp::compute_stats(d, split);
    REQUIRE(st.mean[0] == Catch::Approx(0.1307).margin(0.002));
    REQUIRE(st.stddev[0] == Catch::Approx(0.3081).margin(0.002));
  }

  SECTION("fashion_mnist test histogram is 1000 per class") {
    if (!testutil::has_dataset("fashion_mnist")) SKIP("fashion files missing");
    auto d = msvp::load_dataset(DatasetName::fashion_mnist, root);
    std::array<int, 10> hist{};
    for (uint8_t l : d.test_labels) hist[l]++;
    for (int c = 0; c < 10; ++c) REQUIRE(hist[static_cast<size_t>(c)] == 1000);
  }

  SECTION("cifar10 histograms: 5000 per class train, 1000 per class test") {
    if (!testutil::has_dataset("cifar10")) SKIP("cifar files missing");
    auto d = msvp::load_dataset(DatasetName::cifar10, root);
    REQUIRE(d.n_train == 50000);
    std::array<int, 10> train_hist{}, test_hist{};
    for (uint8_t l : d.train_labels) train_hist[l]++;
    for (uint8_t l : d.test_labels) test_hist[l]++;
    for (int c = 0; c < 10; ++c) {
      REQUIRE(train_hist[static_cast<size_t>(c)] == 5000);
      REQUIRE(test_hist[static_cast<size_t>(c)] == 1000);
    }
  }
}
