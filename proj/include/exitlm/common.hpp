#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace exitlm {

// Dense types used across the library. Column = one token position / sample.
template <class Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <class Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

// Pipeline-wide scalar. Core functions stay templated; tools and the
// evaluation kit instantiate this one.
using Real = double;
using MatX = Mat<Real>;
using VecX = Vec<Real>;

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

#define EXITLM_CHECK(cond, msg)                      \
  do {                                               \
    if (!(cond)) throw ::exitlm::Error(msg);         \
  } while (0)

// Single RNG type everywhere so seeded runs reproduce bit-for-bit.
using Rng = std::mt19937_64;

inline double uniform_real(Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  return dist(rng);
}

inline double normal_real(Rng& rng, double mean, double stddev) {
  std::normal_distribution<double> dist(mean, stddev);
  return dist(rng);
}

// Index of the largest coefficient; ties resolve to the lowest index.
template <class Derived>
int argmax_lowest(const Eigen::MatrixBase<Derived>& v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

// Runs fn(i) for i in [0, n) on up to n_threads threads. Each index is
// processed exactly once; callers own any per-index output slots.
inline void parallel_for(int n, int n_threads, const std::function<void(int)>& fn) {
  if (n <= 0) return;
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw <= 0) hw = 1;
  int workers = std::max(1, std::min({n_threads, hw, n}));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::atomic<int> next{0};
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&]() {
      for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace exitlm
