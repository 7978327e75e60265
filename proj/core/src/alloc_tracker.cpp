#include "packkv/alloc_tracker.hpp"

#include <atomic>

namespace packkv::alloc {

namespace {
std::atomic<std::int64_t> g_current{0};
std::atomic<std::int64_t> g_peak{0};
std::atomic<std::uint64_t> g_count{0};
std::atomic<bool> g_installed{false};
}  // namespace

void record_alloc(std::size_t bytes) noexcept {
  const std::int64_t now = g_current.fetch_add(static_cast<std::int64_t>(bytes), std::memory_order_relaxed) +
                           static_cast<std::int64_t>(bytes);
  g_count.fetch_add(1, std::memory_order_relaxed);
  std::int64_t peak = g_peak.load(std::memory_order_relaxed);
  while (now > peak && !g_peak.compare_exchange_weak(peak, now, std::memory_order_relaxed)) {
  }
}

void record_free(std::size_t bytes) noexcept {
  g_current.fetch_sub(static_cast<std::int64_t>(bytes), std::memory_order_relaxed);
}

void mark_hook_installed() noexcept { g_installed.store(true); }
bool hook_installed() noexcept { return g_installed.load(); }
std::int64_t current_bytes() noexcept { return g_current.load(std::memory_order_relaxed); }
std::uint64_t allocation_count() noexcept { return g_count.load(std::memory_order_relaxed); }

Scope::Scope() noexcept
    : baseline_(g_current.load(std::memory_order_relaxed)), count_baseline_(g_count.load(std::memory_order_relaxed)) {
  g_peak.store(baseline_, std::memory_order_relaxed);
}

std::size_t Scope::peak_bytes() const noexcept {
  const std::int64_t d = g_peak.load(std::memory_order_relaxed) - baseline_;
  return d > 0 ? static_cast<std::size_t>(d) : 0;
}

std::uint64_t Scope::allocations() const noexcept {
  return g_count.load(std::memory_order_relaxed) - count_baseline_;
}

}  // namespace packkv::alloc
