#pragma once

// Process-wide counters used by the benchmark harness: a byte-counting
// allocator for tensor storage and an opt-in multiply-accumulate counter that
// the public matmul/layer_norm kernels report into.

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <new>

namespace lsattn {

class AllocationStats {
 public:
  static AllocationStats& instance() {
    static AllocationStats stats;
    return stats;
  }

  // Throws std::bad_alloc instead of exceeding the optional byte budget.
  void on_allocate(std::size_t bytes) {
    const std::size_t limit = limit_.load(std::memory_order_relaxed);
    if (limit && current() + bytes > limit) throw std::bad_alloc();
    const auto now = current_.fetch_add(bytes, std::memory_order_relaxed) + bytes;
    auto peak = peak_.load(std::memory_order_relaxed);
    while (now > peak && !peak_.compare_exchange_weak(peak, now, std::memory_order_relaxed)) {
    }
  }
  void on_deallocate(std::size_t bytes) { current_.fetch_sub(bytes, std::memory_order_relaxed); }

  std::size_t current() const { return current_.load(std::memory_order_relaxed); }
  std::size_t peak() const { return peak_.load(std::memory_order_relaxed); }

  // Restart peak tracking from the current live byte count.
  void reset_peak() { peak_.store(current(), std::memory_order_relaxed); }

  // Live-byte budget for tensor storage; 0 = unlimited.
  void set_limit(std::size_t bytes) { limit_.store(bytes, std::memory_order_relaxed); }
  std::size_t limit() const { return limit_.load(std::memory_order_relaxed); }

 private:
  std::atomic<std::size_t> limit_{0};
  std::atomic<std::size_t> current_{0};
  std::atomic<std::size_t> peak_{0};
};

template <class T>
struct CountingAllocator {
  using value_type = T;

  CountingAllocator() noexcept = default;
  template <class U>
  CountingAllocator(const CountingAllocator<U>&) noexcept {}

  T* allocate(std::size_t count) {
    AllocationStats::instance().on_allocate(count * sizeof(T));
    try {
      return std::allocator<T>{}.allocate(count);
    } catch (...) {
      AllocationStats::instance().on_deallocate(count * sizeof(T));
      throw;
    }
  }
  void deallocate(T* ptr, std::size_t count) noexcept {
    AllocationStats::instance().on_deallocate(count * sizeof(T));
    std::allocator<T>{}.deallocate(ptr, count);
  }

  template <class U>
  bool operator==(const CountingAllocator<U>&) const noexcept {
    return true;
  }
};

/// Multiply-accumulate tally. Only kernels invoked through the public tensor
/// API report here; gradient kernels inside the tape do not.
struct FlopCounter {
  std::atomic<std::uint64_t> matmul_macs{0};
  std::atomic<std::uint64_t> layer_norm_flops{0};

  std::uint64_t total() const { return matmul_macs.load() + layer_norm_flops.load(); }
};

namespace detail {
inline std::atomic<FlopCounter*>& active_counter() {
  static std::atomic<FlopCounter*> counter{nullptr};
  return counter;
}
}  // namespace detail

/// RAII scope that routes kernel counts into `counter`. Scopes nest.
class CountFlopsScope {
 public:
  explicit CountFlopsScope(FlopCounter& counter) : previous_(detail::active_counter().exchange(&counter)) {}
  ~CountFlopsScope() { detail::active_counter().store(previous_); }
  CountFlopsScope(const CountFlopsScope&) = delete;
  CountFlopsScope& operator=(const CountFlopsScope&) = delete;

 private:
  FlopCounter* previous_;
};

namespace detail {
inline void report_matmul(std::uint64_t macs) {
  if (auto* counter = active_counter().load(std::memory_order_relaxed)) {
    counter->matmul_macs.fetch_add(macs, std::memory_order_relaxed);
  }
}
inline void report_layer_norm(std::uint64_t flops) {
  if (auto* counter = active_counter().load(std::memory_order_relaxed)) {
    counter->layer_norm_flops.fetch_add(flops, std::memory_order_relaxed);
  }
}
}  // namespace detail

}  // namespace lsattn
