#pragma once

#include <cstdint>
#include <string_view>

namespace packkv {

enum class Kind : std::uint8_t { K = 0, V = 1 };

constexpr std::string_view to_string(Kind kind) noexcept { return kind == Kind::K ? "K" : "V"; }

}  // namespace packkv
