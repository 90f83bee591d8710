#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace mitodet {

// Error hierarchy. The CLI maps ValidationError to exit code 2 and
// PrerequisiteError to exit code 3.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ValidationError : Error {
  using Error::Error;
};
struct LoadError : Error {
  using Error::Error;
};
struct EstimationError : Error {
  using Error::Error;
};
struct SamplingError : Error {
  using Error::Error;
};
struct TrainingError : Error {
  using Error::Error;
};
struct DimensionError : Error {
  using Error::Error;
};
struct PrerequisiteError : Error {
  using Error::Error;
};

inline constexpr std::string_view kToolVersion = "0.3.1";

// FNV-1a, 64 bit.
inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

using Rng = std::mt19937_64;

/// Independent RNG stream keyed by (seed, id, index). Streams do not depend
/// on the order in which they are created, so per-item work can be
/// scheduled on any number of workers.
inline Rng make_stream(std::uint64_t seed, std::string_view id = {}, std::uint64_t index = 0) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ fnv1a(id));
  h = splitmix64(h ^ index);
  std::seed_seq seq{static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
  return Rng(seq);
}

inline int uniform_int(Rng& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

inline double uniform_real(Rng& rng, double lo, double hi) {
  if (lo == hi) return lo;
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Results must be
/// written to per-index slots; the first exception thrown is rethrown.
template <typename Fn>
void parallel_for(std::size_t n, int workers, Fn&& fn) {
  const std::size_t threads = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, workers)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  {
    std::vector<std::jthread> pool;
    pool.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
            next = n;
          }
        }
      });
    }
  }
  if (failure) std::rethrow_exception(failure);
}

}  // namespace mitodet
