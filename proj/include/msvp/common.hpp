#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace msvp {

// Error taxonomy maps onto CLI exit codes: ConfigError -> 1, DataError -> 2,
// NumericError -> 3. Everything else is a plain Error.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct DataError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};

namespace detail {
inline void format_into(std::ostringstream&) {}
template <typename T, typename... Rest>
void format_into(std::ostringstream& oss, T&& v, Rest&&... rest) {
  oss << std::forward<T>(v);
  format_into(oss, std::forward<Rest>(rest)...);
}
}  // namespace detail

template <typename... Args>
std::string cat(Args&&... args) {
  std::ostringstream oss;
  detail::format_into(oss, std::forward<Args>(args)...);
  return oss.str();
}

template <typename E = Error, typename... Args>
[[noreturn]] void fail(Args&&... args) {
  throw E(cat(std::forward<Args>(args)...));
}

#define MSVP_CHECK(cond, ...)                  \
  do {                                         \
    if (!(cond)) ::msvp::fail(__VA_ARGS__);    \
  } while (0)

// FNV-1a, used for purpose tags, parameter-name init streams and config hashes.
inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace msvp
