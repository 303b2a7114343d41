#pragma once

// Small image/grid file emitters: binary PGM (P5, maxval 255) with per-map
// min-max scaling, and plain text grids that round-trip float values exactly
// at 9 significant digits.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "msvp/common.hpp"

namespace msvp {

// Min-max scaled to [0,255]; a flat map (degenerate range) renders mid-gray.
inline void write_pgm(const std::string& path, const float* data, int64_t h,
                      int64_t w) {
  float lo = data[0], hi = data[0];
  for (int64_t i = 1; i < h * w; ++i) {
    lo = std::min(lo, data[i]);
    hi = std::max(hi, data[i]);
  }
  std::ofstream out(path, std::ios::binary);
  MSVP_CHECK(out.good(), "cannot write '", path, "'");
  out << "P5\n" << w << " " << h << "\n255\n";
  const float range = hi - lo;
  for (int64_t i = 0; i < h * w; ++i) {
    unsigned char v;
    if (range <= 0.f) {
      v = 128;
    } else {
      const float t = (data[i] - lo) / range * 255.f;
      v = static_cast<unsigned char>(std::lround(std::min(255.f, std::max(0.f, t))));
    }
    out.put(static_cast<char>(v));
  }
  MSVP_CHECK(out.good(), "write failed for '", path, "'");
}

// One grid row per line; channels separated by a blank line.
inline void write_text_grid(const std::string& path, const float* data,
                            int64_t c, int64_t h, int64_t w) {
  std::ofstream out(path);
  MSVP_CHECK(out.good(), "cannot write '", path, "'");
  out << std::setprecision(9);
  for (int64_t ci = 0; ci < c; ++ci) {
    if (ci) out << "\n";
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t x = 0; x < w; ++x) {
        if (x) out << " ";
        out << data[(ci * h + y) * w + x];
      }
      out << "\n";
    }
  }
  MSVP_CHECK(out.good(), "write failed for '", path, "'");
}

inline std::vector<float> read_text_grid(const std::string& path) {
  std::ifstream in(path);
  MSVP_CHECK(in.good(), "cannot read '", path, "'");
  std::vector<float> values;
  double v;
  while (in >> v) values.push_back(static_cast<float>(v));
  return values;
}

}  // namespace msvp
