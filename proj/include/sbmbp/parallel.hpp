#pragma once

// Deterministic trial-parallel reduction. Trials are cut into fixed-size
// chunks; each chunk fills its own accumulator and the accumulators are merged
// in chunk order, so results do not depend on the thread count.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace sbmbp {

/// Welford mean/variance with Chan's pairwise merge.
struct Moments {
  std::size_t n = 0;
  double mean = 0.0;
  double m2 = 0.0;

  void add(double x) {
    ++n;
    const double delta = x - mean;
    mean += delta / static_cast<double>(n);
    m2 += delta * (x - mean);
  }
  void merge(const Moments& o) {
    if (o.n == 0) return;
    if (n == 0) {
      *this = o;
      return;
    }
    const double total = static_cast<double>(n + o.n);
    const double delta = o.mean - mean;
    mean += delta * static_cast<double>(o.n) / total;
    m2 += o.m2 + delta * delta * static_cast<double>(n) * static_cast<double>(o.n) / total;
    n += o.n;
  }
  double variance() const { return n > 1 ? m2 / static_cast<double>(n - 1) : 0.0; }
  double se() const { return n > 1 ? std::sqrt(variance() / static_cast<double>(n)) : 0.0; }
};

/// Worker count: SBMBP_THREADS if set, else hardware concurrency.
inline unsigned worker_count() {
  if (const char* env = std::getenv("SBMBP_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

inline constexpr std::size_t kTrialChunk = 256;

/// Runs fn(acc, trial) for trial in [0, trials) and returns the ordered merge
/// of per-chunk accumulators. Acc needs a default constructor and merge().
template <class Acc, class Fn>
Acc parallel_reduce(std::size_t trials, const Acc& init, Fn&& fn) {
  const std::size_t chunks = (trials + kTrialChunk - 1) / kTrialChunk;
  std::vector<Acc> partial(chunks, init);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&] {
    for (;;) {
      const std::size_t c = next.fetch_add(1);
      if (c >= chunks) return;
      try {
        const std::size_t end = std::min(trials, (c + 1) * kTrialChunk);
        for (std::size_t t = c * kTrialChunk; t < end; ++t) fn(partial[c], t);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = chunks;
      }
    }
  };
  const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(worker_count(), std::max<std::size_t>(chunks, 1)));
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
  Acc out = init;
  for (auto& p : partial) out.merge(p);
  return out;
}

/// Runs fn(i) for i in [0, count) across workers; fn must write only to
/// slot-owned state.
template <class Fn>
void parallel_for(std::size_t count, Fn&& fn) {
  struct Unit {
    void merge(const Unit&) {}
  };
  parallel_reduce(count, Unit{}, [&](Unit&, std::size_t i) { fn(i); });
}

}  // namespace sbmbp
