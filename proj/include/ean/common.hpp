#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace ean {

enum class DType { f32, f64 };

inline const char* dtype_name(DType t) { return t == DType::f32 ? "f32" : "f64"; }
inline std::size_t dtype_size(DType t) { return t == DType::f32 ? 4 : 8; }

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Row-major strides in elements.
inline std::vector<std::int64_t> strides_for(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

// Seeded generator used everywhere randomness is needed; callers own the state
// so identical seeds give identical streams regardless of call site.
using Rng = std::mt19937_64;

inline int env_threads() {
  if (const char* s = std::getenv("EAN_THREADS")) {
    int v = std::atoi(s);
    if (v >= 1) return v;
  }
  return 1;
}

}  // namespace ean
