#pragma once

#include <cmath>
#include <cstdint>

namespace hdpl {

// Counter-based generator: the stream is a pure function of (seed, counter),
// so state serializes as two u64 words and sub-streams can be forked without
// consuming draws from the parent.
struct RngState {
  std::uint64_t seed = 42;
  std::uint64_t counter = 0;
};

inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::uint64_t next_u64(RngState& s) { return mix64(s.seed ^ mix64(s.counter++)); }

inline RngState fork(const RngState& s, std::uint64_t stream) {
  return RngState{mix64(s.seed ^ mix64(stream ^ mix64(s.counter))), 0};
}

inline std::uint64_t fnv1a(const char* s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (; *s; ++s) h = (h ^ static_cast<unsigned char>(*s)) * 0x100000001b3ull;
  return h;
}

// Uniform in (0, 1); never returns 0, safe inside log().
inline double next_uniform(RngState& s) {
  return (static_cast<double>(next_u64(s) >> 11) + 0.5) * (1.0 / 9007199254740992.0);
}

// Box-Muller; two uniforms per draw, second branch discarded so the stream
// position stays a simple function of the draw count.
inline double next_normal(RngState& s) {
  double u1 = next_uniform(s);
  double u2 = next_uniform(s);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

}  // namespace hdpl
