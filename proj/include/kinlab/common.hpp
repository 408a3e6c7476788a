#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <exception>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace kinlab {

inline constexpr const char* version = "0.4.1";
inline constexpr double pi = std::numbers::pi;

// Error categories map onto CLI exit codes (schema 2, numerical 3, capacity 4).
enum class ErrorKind { Schema, Numerical, Capacity, Precondition, GridMismatch };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind k, const std::string& what) : std::runtime_error(what), kind_(k) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

struct SchemaError : Error {
  explicit SchemaError(const std::string& w) : Error(ErrorKind::Schema, w) {}
};
struct NumericalError : Error {
  explicit NumericalError(const std::string& w) : Error(ErrorKind::Numerical, w) {}
};
struct CapacityError : Error {
  explicit CapacityError(const std::string& w) : Error(ErrorKind::Capacity, w) {}
};
struct PreconditionError : Error {
  explicit PreconditionError(const std::string& w) : Error(ErrorKind::Precondition, w) {}
};
struct GridMismatch : Error {
  explicit GridMismatch(const std::string& w) : Error(ErrorKind::GridMismatch, w) {}
};

inline int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::Schema:
    case ErrorKind::Precondition:
    case ErrorKind::GridMismatch:
      return 2;
    case ErrorKind::Numerical:
      return 3;
    case ErrorKind::Capacity:
      return 4;
  }
  return 3;
}

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

inline Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
inline Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
inline Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
inline Vec2 operator-(Vec2 a) { return {-a.x, -a.y}; }
inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double norm(Vec2 a) { return std::hypot(a.x, a.y); }

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw PreconditionError(msg);
}

// Reflect v about the plane with unit normal n.
inline Vec2 reflect(Vec2 v, Vec2 n) { return v - (2.0 * dot(n, v)) * n; }

inline std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Independent stream for (seed, counter); same pair always gives the same stream.
inline std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t counter) {
  std::uint64_t a = splitmix64(seed ^ splitmix64(counter + 0x632be59bd9b4e019ULL));
  std::uint64_t b = splitmix64(a + counter);
  std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
  return std::mt19937_64(seq);
}

// Runs body(i) for i in [0, n) on up to `threads` workers; static partition, so
// results written by index are independent of the thread count.
template <class F>
void parallel_for(std::size_t n, int threads, F&& body) {
  std::size_t k = static_cast<std::size_t>(std::max(1, threads));
  k = std::min(k, std::max<std::size_t>(n, 1));
  if (k <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(k);
  for (std::size_t w = 0; w < k; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += k) body(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// FNV-1a, used for config hashes in provenance headers.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace kinlab
