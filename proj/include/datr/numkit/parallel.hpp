#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace datr::numkit {

// Persistent worker pool for data-parallel loops over disjoint index ranges.
// Each index is processed by exactly one thread and writes only its own
// outputs, so results do not depend on the thread count or the partition.
// Workers spin briefly before sleeping: dispatch latency has to stay in the
// microsecond range because model graphs issue thousands of small loops.
class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  int threads() const { return nthreads_; }

  // Runs fn(begin, end) over a static partition of [0, n).
  void parallel_for(long n, const std::function<void(long, long)>& fn) {
    if (n <= 0) return;
    if (nthreads_ == 1 || in_parallel_region()) {
      fn(0, n);
      return;
    }
    in_parallel_region() = true;
    const int nchunks = nthreads_;
    const long chunk = (n + nchunks - 1) / nchunks;
    task_ = &fn;
    task_n_ = n;
    task_chunk_ = chunk;
    next_chunk_.store(1, std::memory_order_relaxed);
    pending_.store(nchunks - 1, std::memory_order_relaxed);
    generation_.fetch_add(1, std::memory_order_release);
    {
      std::lock_guard<std::mutex> lk(mu_);
      cv_.notify_all();
    }
    fn(0, std::min(chunk, n));
    // steal remaining chunks, then wait for stragglers
    while (true) {
      const long c = next_chunk_.fetch_add(1, std::memory_order_relaxed);
      if (c * chunk >= n) break;
      fn(c * chunk, std::min((c + 1) * chunk, n));
    }
    while (pending_.load(std::memory_order_acquire) != 0) {
      // bounded spin; workers are at most one small chunk behind
    }
    task_ = nullptr;
    in_parallel_region() = false;
  }

  ~ThreadPool() {
    stop_.store(true, std::memory_order_release);
    {
      std::lock_guard<std::mutex> lk(mu_);
      cv_.notify_all();
    }
    for (auto& t : workers_) t.join();
  }

 private:
  ThreadPool() {
#ifdef __GLIBC__
    // activation buffers are multi-MB and reallocated every step; keep them
    // on the heap freelist instead of mmap/munmap churn
    mallopt(M_MMAP_THRESHOLD, 512 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
#endif
    nthreads_ = default_threads();
    for (int i = 1; i < nthreads_; ++i) {
      workers_.emplace_back([this] { worker_loop(); });
    }
  }

  static bool& in_parallel_region() {
    thread_local bool flag = false;
    return flag;
  }

  static int default_threads() {
    if (const char* env = std::getenv("DATR_THREADS")) {
      int v = std::atoi(env);
      if (v >= 1 && v <= 64) return v;
    }
    unsigned hw = std::thread::hardware_concurrency();
    if (hw == 0) hw = 1;
    return static_cast<int>(hw > 8 ? 8 : hw);
  }

  void worker_loop() {
    in_parallel_region() = true;  // nested parallel_for from a worker runs serial
    unsigned long long seen = 0;
    while (true) {
      // spin for new work before falling back to the condition variable
      unsigned long long gen = 0;
      for (int spin = 0; spin < 20000; ++spin) {
        if (stop_.load(std::memory_order_acquire)) return;
        gen = generation_.load(std::memory_order_acquire);
        if (gen != seen) break;
      }
      if (gen == seen) {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [&] {
          return stop_.load(std::memory_order_acquire) ||
                 generation_.load(std::memory_order_acquire) != seen;
        });
        if (stop_.load(std::memory_order_acquire)) return;
        gen = generation_.load(std::memory_order_acquire);
      }
      seen = gen;
      const auto* task = task_;
      const long n = task_n_, chunk = task_chunk_;
      if (task) {
        while (true) {
          const long c = next_chunk_.fetch_add(1, std::memory_order_relaxed);
          if (c * chunk >= n) break;
          (*task)(c * chunk, std::min((c + 1) * chunk, n));
        }
      }
      pending_.fetch_sub(1, std::memory_order_release);
    }
  }

  int nthreads_ = 1;
  std::vector<std::thread> workers_;
  std::mutex mu_;
  std::condition_variable cv_;
  const std::function<void(long, long)>* task_ = nullptr;
  long task_n_ = 0, task_chunk_ = 0;
  std::atomic<long> next_chunk_{0};
  std::atomic<int> pending_{0};
  std::atomic<unsigned long long> generation_{0};
  std::atomic<bool> stop_{false};
};

inline void parallel_for(long n, const std::function<void(long, long)>& fn) {
  ThreadPool::instance().parallel_for(n, fn);
}

}  // namespace datr::numkit
