#pragma once

#include <cstddef>
#include <cstdint>

namespace packkv::alloc {

// Global heap accounting. The counters live in the core library; they only
// move when a binary links the packkv::alloc_hook object, which replaces the
// global operator new/delete.

void record_alloc(std::size_t bytes) noexcept;
void record_free(std::size_t bytes) noexcept;
void mark_hook_installed() noexcept;

bool hook_installed() noexcept;
std::int64_t current_bytes() noexcept;
std::uint64_t allocation_count() noexcept;

/// Measures the peak heap growth above the level at construction. Scopes do
/// not nest.
class Scope {
 public:
  Scope() noexcept;
  std::size_t peak_bytes() const noexcept;
  std::uint64_t allocations() const noexcept;

 private:
  std::int64_t baseline_;
  std::uint64_t count_baseline_;
};

}  // namespace packkv::alloc
