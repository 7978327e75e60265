// Replacement global allocation functions that feed packkv::alloc counters.
// Linked only into binaries that want heap accounting.

#include <cstddef>
#include <cstdlib>
#include <new>

#include "packkv/alloc_tracker.hpp"

namespace {

constexpr std::size_t kBaseAlign = alignof(std::max_align_t);

std::size_t header_for(std::size_t align) noexcept { return align > kBaseAlign ? align : kBaseAlign; }

void* counted_alloc(std::size_t n, std::size_t align) noexcept {
  const std::size_t header = header_for(align);
  void* raw;
  if (align > kBaseAlign) {
    const std::size_t total = (n + header + align - 1) / align * align;
    raw = std::aligned_alloc(align, total);
  } else {
    raw = std::malloc(n + header);
  }
  if (raw == nullptr) return nullptr;
  auto* user = static_cast<unsigned char*>(raw) + header;
  *reinterpret_cast<std::size_t*>(user - sizeof(std::size_t)) = n;
  packkv::alloc::record_alloc(n);
  return user;
}

void counted_free(void* p, std::size_t align) noexcept {
  if (p == nullptr) return;
  auto* user = static_cast<unsigned char*>(p);
  packkv::alloc::record_free(*reinterpret_cast<std::size_t*>(user - sizeof(std::size_t)));
  std::free(user - header_for(align));
}

void* must_alloc(std::size_t n, std::size_t align) {
  if (void* p = counted_alloc(n == 0 ? 1 : n, align)) return p;
  throw std::bad_alloc();
}

struct Installer {
  Installer() noexcept { packkv::alloc::mark_hook_installed(); }
} installer;

}  // namespace

void* operator new(std::size_t n) { return must_alloc(n, kBaseAlign); }
void* operator new[](std::size_t n) { return must_alloc(n, kBaseAlign); }
void* operator new(std::size_t n, const std::nothrow_t&) noexcept { return counted_alloc(n == 0 ? 1 : n, kBaseAlign); }
void* operator new[](std::size_t n, const std::nothrow_t&) noexcept {
  return counted_alloc(n == 0 ? 1 : n, kBaseAlign);
}
void* operator new(std::size_t n, std::align_val_t a) { return must_alloc(n, static_cast<std::size_t>(a)); }
void* operator new[](std::size_t n, std::align_val_t a) { return must_alloc(n, static_cast<std::size_t>(a)); }
void* operator new(std::size_t n, std::align_val_t a, const std::nothrow_t&) noexcept {
  return counted_alloc(n == 0 ? 1 : n, static_cast<std::size_t>(a));
}
void* operator new[](std::size_t n, std::align_val_t a, const std::nothrow_t&) noexcept {
  return counted_alloc(n == 0 ? 1 : n, static_cast<std::size_t>(a));
}

void operator delete(void* p) noexcept { counted_free(p, kBaseAlign); }
void operator delete[](void* p) noexcept { counted_free(p, kBaseAlign); }
void operator delete(void* p, std::size_t) noexcept { counted_free(p, kBaseAlign); }
void operator delete[](void* p, std::size_t) noexcept { counted_free(p, kBaseAlign); }
void operator delete(void* p, const std::nothrow_t&) noexcept { counted_free(p, kBaseAlign); }
void operator delete[](void* p, const std::nothrow_t&) noexcept { counted_free(p, kBaseAlign); }
void operator delete(void* p, std::align_val_t a) noexcept { counted_free(p, static_cast<std::size_t>(a)); }
void operator delete[](void* p, std::align_val_t a) noexcept { counted_free(p, static_cast<std::size_t>(a)); }
void operator delete(void* p, std::size_t, std::align_val_t a) noexcept {
  counted_free(p, static_cast<std::size_t>(a));
}
void operator delete[](void* p, std::size_t, std::align_val_t a) noexcept {
  counted_free(p, static_cast<std::size_t>(a));
}
