#include "packkv/error.hpp"

#include <fstream>
#include <iterator>

#include "byte_io.hpp"

namespace packkv {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::dimension_mismatch: return "dimension_mismatch";
    case ErrorCode::index_out_of_range: return "index_out_of_range";
    case ErrorCode::io_failure: return "io_failure";
    case ErrorCode::bad_magic: return "bad_magic";
    case ErrorCode::unsupported_version: return "unsupported_version";
    case ErrorCode::truncated: return "truncated";
    case ErrorCode::non_finite: return "non_finite";
    case ErrorCode::shape_mismatch: return "shape_mismatch";
    case ErrorCode::malformed_header: return "malformed_header";
    case ErrorCode::payload_length_mismatch: return "payload_length_mismatch";
    case ErrorCode::width_overflow: return "width_overflow";
    case ErrorCode::instance_too_large: return "instance_too_large";
  }
  return "unknown";
}

namespace detail {

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io_failure, "cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(ErrorCode::io_failure, "read failed: " + path);
  return bytes;
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io_failure, "cannot create " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::io_failure, "write failed: " + path);
}

}  // namespace detail
}  // namespace packkv
