#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace packkv {

enum class ErrorCode {
  invalid_argument,
  dimension_mismatch,
  index_out_of_range,
  io_failure,
  bad_magic,
  unsupported_version,
  truncated,
  non_finite,
  shape_mismatch,
  malformed_header,
  payload_length_mismatch,
  width_overflow,
  instance_too_large,
};

std::string_view to_string(ErrorCode code) noexcept;

// Library exception carrying one of the codes above.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace packkv
