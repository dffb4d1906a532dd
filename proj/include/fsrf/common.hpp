#pragma once

#include <cstdint>
#include <cstdio>
#include <sstream>
#include <stdexcept>
#include <string>

namespace fsrf {

// Bad user input (CLI args, config files, manifests). Maps to exit code 2.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Numerical-domain violation or non-finite state. Maps to exit code 1.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
inline void append_msg(std::ostringstream&) {}
template <typename T, typename... Rest>
void append_msg(std::ostringstream& os, const T& v, const Rest&... rest) {
  os << v;
  append_msg(os, rest...);
}
template <typename E, typename... Parts>
[[noreturn]] void throw_error(const Parts&... parts) {
  std::ostringstream os;
  append_msg(os, parts...);
  throw E(os.str());
}
}  // namespace detail

#define FSRF_CHECK(cond, ...)                                              \
  do {                                                                     \
    if (!(cond)) ::fsrf::detail::throw_error<std::runtime_error>(__VA_ARGS__); \
  } while (0)

#define FSRF_CHECK_INPUT(cond, ...)                                     \
  do {                                                                  \
    if (!(cond)) ::fsrf::detail::throw_error<::fsrf::InputError>(__VA_ARGS__); \
  } while (0)

#define FSRF_CHECK_NUMERIC(cond, ...)                                     \
  do {                                                                    \
    if (!(cond)) ::fsrf::detail::throw_error<::fsrf::NumericError>(__VA_ARGS__); \
  } while (0)

// splitmix64; used to derive independent RNG streams from (seed, tags).
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a) { return splitmix64(a); }
template <typename... Rest>
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, Rest... rest) {
  return mix_seed(splitmix64(a) ^ (b + 0x9e3779b97f4a7c15ULL), rest...);
}

// Shortest round-trippable decimal form; all numeric text output uses this
// so that file round trips are bit exact.
inline std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// FNV-1a over a byte string; used for config hashes and checkpoint checksums.
inline std::uint64_t fnv1a(const void* data, std::size_t n,
                           std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace fsrf
