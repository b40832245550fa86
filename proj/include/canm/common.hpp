#pragma once

#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace canm {

// ============================================================================
// Error types
// ============================================================================

/// Shape/dimension mismatch between operands.
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Invalid numeric value (non-finite result, division by zero in verify mode).
class ValueError : public std::runtime_error {
 public:
  explicit ValueError(const std::string& msg) : std::runtime_error(msg) {}
};

/// API misuse (backward on non-scalar, missing gradient, unknown variant).
class UsageError : public std::runtime_error {
 public:
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

/// File / serialization failures.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Network configuration violates an invariant.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

inline std::string shape_str(const std::vector<size_t>& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// ============================================================================
// Verification mode
// ============================================================================
//
// When enabled, every tensor op asserts finiteness of its outputs and exact
// division by zero is an error. Enabled by default; speed runs may turn it
// off.

inline std::atomic<bool>& verify_mode_flag() {
  static std::atomic<bool> flag{true};
  return flag;
}

inline bool verify_mode() { return verify_mode_flag().load(std::memory_order_relaxed); }
inline void set_verify_mode(bool on) { verify_mode_flag().store(on, std::memory_order_relaxed); }

class VerifyModeGuard {
 public:
  explicit VerifyModeGuard(bool on) : prev_(verify_mode()) { set_verify_mode(on); }
  ~VerifyModeGuard() { set_verify_mode(prev_); }

 private:
  bool prev_;
};

// ============================================================================
// Internal parallelism
// ============================================================================
//
// Work is split into contiguous chunks over disjoint output ranges, so the
// result is bit-identical for any thread count. CANM_THREADS caps the pool.

inline size_t max_threads() {
  static size_t n = [] {
    size_t hw = std::thread::hardware_concurrency();
    if (hw == 0) hw = 1;
    if (const char* env = std::getenv("CANM_THREADS")) {
      long v = std::strtol(env, nullptr, 10);
      if (v >= 1) hw = static_cast<size_t>(v);
    }
    return hw;
  }();
  return n;
}

/// Runs fn(begin, end) over [0, n) split across threads. fn must write only
/// to locations indexed by its own range.
template <typename Fn>
void parallel_for(size_t n, Fn&& fn, size_t grain = 1024) {
  size_t nt = max_threads();
  if (nt <= 1 || n <= grain) {
    fn(size_t{0}, n);
    return;
  }
  size_t chunks = std::min(nt, (n + grain - 1) / grain);
  size_t per = (n + chunks - 1) / chunks;
  std::vector<std::thread> pool;
  pool.reserve(chunks);
  for (size_t c = 0; c < chunks; ++c) {
    size_t b = c * per, e = std::min(n, b + per);
    if (b >= e) break;
    pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace canm
