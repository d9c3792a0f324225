#pragma once

#include <cstdint>
#include <cstdlib>
#include <functional>
#include <string>
#include <thread>
#include <vector>

namespace maskform {

// Deterministic 64-bit RNG (splitmix64 core). All randomness in the project
// flows through this type so that results are reproducible bit-for-bit for a
// given seed, independent of the standard library's distribution internals.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Uniform integer in [0, n). n must be positive.
  uint64_t uniform_int(uint64_t n) {
    return static_cast<uint64_t>((static_cast<__uint128_t>(next()) * n) >> 64);
  }

  bool bernoulli(double p) { return uniform01() < p; }

  // Derive an independent stream, e.g. per sample index.
  static uint64_t mix(uint64_t seed, uint64_t index) {
    Rng r(seed ^ (0x632be59bd9b4e019ULL * (index + 1)));
    return r.next();
  }

 private:
  uint64_t state_;
};

// Number of worker threads: MASKFORM_THREADS env var caps it, default is the
// hardware concurrency.
inline int worker_threads() {
  unsigned hw = std::thread::hardware_concurrency();
  int threads = hw == 0 ? 1 : static_cast<int>(hw);
  if (const char* env = std::getenv("MASKFORM_THREADS")) {
    int cap = std::atoi(env);
    if (cap >= 1 && cap < threads) threads = cap;
    if (cap >= 1 && threads < 1) threads = cap;
  }
  return threads < 1 ? 1 : threads;
}

// Runs fn(i) for i in [0, n). Results must be stored per-index by the caller
// so the outcome is independent of scheduling.
inline void parallel_for(int n, const std::function<void(int)>& fn) {
  int threads = worker_threads();
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  if (threads > n) threads = n;
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      for (int i = t; i < n; i += threads) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace maskform
