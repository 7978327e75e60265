#include "packkv/tensor.hpp"

#include <algorithm>
#include <cstring>
#include <string>

#include "byte_io.hpp"
#include "packkv/error.hpp"
#include "packkv/rng.hpp"

namespace packkv {

HalfTensor::HalfTensor(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), bits_(rows * cols, 0) {}

HalfTensor::HalfTensor(std::size_t rows, std::size_t cols, std::vector<std::uint16_t> bits)
    : rows_(rows), cols_(cols), bits_(std::move(bits)) {
  if (bits_.size() != rows * cols) {
    throw Error(ErrorCode::shape_mismatch, "HalfTensor data length " + std::to_string(bits_.size()) +
                                               " != " + std::to_string(rows) + "x" + std::to_string(cols));
  }
}

HalfTensor HalfTensor::from_floats(std::size_t rows, std::size_t cols, std::span<const float> values) {
  if (values.size() != rows * cols) throw Error(ErrorCode::shape_mismatch, "from_floats: size mismatch");
  std::vector<std::uint16_t> bits(values.size());
  std::transform(values.begin(), values.end(), bits.begin(), float_to_half);
  return HalfTensor(rows, cols, std::move(bits));
}

std::vector<float> HalfTensor::to_floats() const {
  std::vector<float> out(bits_.size());
  std::transform(bits_.begin(), bits_.end(), out.begin(), half_to_float);
  return out;
}

bool HalfTensor::all_finite() const noexcept {
  return std::all_of(bits_.begin(), bits_.end(), half_is_finite);
}

HalfTensor HalfTensor::permute_rows(std::span<const std::size_t> perm) const {
  if (perm.size() != rows_) throw Error(ErrorCode::dimension_mismatch, "permutation length != rows");
  HalfTensor out(rows_, cols_);
  std::vector<bool> seen(rows_, false);
  for (std::size_t i = 0; i < rows_; ++i) {
    if (perm[i] >= rows_) throw Error(ErrorCode::index_out_of_range, "permutation entry out of range");
    if (seen[perm[i]]) throw Error(ErrorCode::invalid_argument, "permutation repeats a row");
    seen[perm[i]] = true;
    std::memcpy(out.bits_.data() + i * cols_, bits_.data() + perm[i] * cols_, cols_ * sizeof(std::uint16_t));
  }
  return out;
}

KvDump::KvDump(std::uint32_t layers_, std::uint32_t heads_, std::uint32_t head_dim_, std::uint32_t tokens_)
    : layers(layers_), heads(heads_), head_dim(head_dim_), tokens(tokens_) {
  const std::size_t n = static_cast<std::size_t>(layers) * heads;
  k.assign(n, HalfTensor(tokens, head_dim));
  v.assign(n, HalfTensor(tokens, head_dim));
}

void KvDump::validate() const {
  const std::size_t n = static_cast<std::size_t>(layers) * heads;
  if (k.size() != n || v.size() != n) throw Error(ErrorCode::shape_mismatch, "tensor count != layers x heads");
  for (const auto* set : {&k, &v}) {
    for (const auto& t : *set) {
      if (t.rows() != tokens || t.cols() != head_dim) {
        throw Error(ErrorCode::shape_mismatch, "tensor shape differs from dump header");
      }
      if (!t.all_finite()) throw Error(ErrorCode::non_finite, "NaN or Inf element in dump");
    }
  }
}

std::vector<std::uint8_t> serialize_dump(const KvDump& dump) {
  dump.validate();
  if (dump.layers > 0xffff || dump.heads > 0xffff || dump.head_dim > 0xffff) {
    throw Error(ErrorCode::invalid_argument, "dump dimensions exceed u16 header fields");
  }
  std::vector<std::uint8_t> out;
  out.reserve(16 + static_cast<std::size_t>(dump.layers) * dump.heads * dump.tokens * dump.head_dim * 4);
  detail::ByteWriter w(out);
  w.raw(kDumpMagic, 4);
  w.u16(kDumpVersion);
  w.u16(static_cast<std::uint16_t>(dump.layers));
  w.u16(static_cast<std::uint16_t>(dump.heads));
  w.u16(static_cast<std::uint16_t>(dump.head_dim));
  w.u32(dump.tokens);
  for (std::size_t i = 0; i < dump.k.size(); ++i) {
    for (const HalfTensor* t : {&dump.k[i], &dump.v[i]}) {
      for (std::uint16_t b : t->bits()) w.u16(b);
    }
  }
  return out;
}

KvDump parse_dump(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kDumpMagic, 4) != 0) {
    throw Error(ErrorCode::bad_magic, "not a PKKV dump");
  }
  detail::ByteReader r(bytes.subspan(4), ErrorCode::truncated);
  const std::uint16_t version = r.u16();
  if (version != kDumpVersion) {
    throw Error(ErrorCode::unsupported_version, "dump version " + std::to_string(version));
  }
  const std::uint32_t layers = r.u16();
  const std::uint32_t heads = r.u16();
  const std::uint32_t head_dim = r.u16();
  const std::uint32_t tokens = r.u32();

  const std::size_t per_tensor = static_cast<std::size_t>(tokens) * head_dim;
  const std::size_t expected = 2 * per_tensor * layers * heads * sizeof(std::uint16_t);
  if (r.remaining() < expected) {
    throw Error(ErrorCode::truncated, "payload has " + std::to_string(r.remaining()) + " bytes, expected " +
                                          std::to_string(expected));
  }
  if (r.remaining() > expected) {
    throw Error(ErrorCode::shape_mismatch, "payload longer than header dimensions imply");
  }

  KvDump dump;
  dump.layers = layers;
  dump.heads = heads;
  dump.head_dim = head_dim;
  dump.tokens = tokens;
  dump.k.reserve(static_cast<std::size_t>(layers) * heads);
  dump.v.reserve(static_cast<std::size_t>(layers) * heads);
  for (std::size_t i = 0; i < static_cast<std::size_t>(layers) * heads; ++i) {
    for (auto* set : {&dump.k, &dump.v}) {
      std::vector<std::uint16_t> bits(per_tensor);
      for (auto& b : bits) b = r.u16();
      set->emplace_back(tokens, head_dim, std::move(bits));
    }
  }
  dump.validate();
  return dump;
}

void write_dump(const KvDump& dump, const std::filesystem::path& path) {
  detail::write_file(path.string(), serialize_dump(dump));
}

KvDump read_dump(const std::filesystem::path& path) { return parse_dump(detail::read_file(path.string())); }

namespace {

// Stream tags keep every (layer, head, kind) independent of the others.
std::uint64_t stream_tag(std::uint32_t layer, std::uint32_t head, std::uint32_t kind) {
  return (static_cast<std::uint64_t>(layer) << 32) | (static_cast<std::uint64_t>(head) << 2) | kind;
}

void fill_uniform(HalfTensor& t, SplitMix64& g, float amplitude) {
  for (std::size_t r = 0; r < t.rows(); ++r) {
    for (std::size_t c = 0; c < t.cols(); ++c) {
      t.set(r, c, static_cast<float>(g.uniform(-amplitude, amplitude)));
    }
  }
}

void fill_token_scaled(HalfTensor& t, SplitMix64& g, float amplitude) {
  for (std::size_t r = 0; r < t.rows(); ++r) {
    // log-uniform per-token magnitude over two decades, as seen on outlier tokens
    const double scale = std::pow(10.0, g.uniform(-1.0, 1.0));
    for (std::size_t c = 0; c < t.cols(); ++c) {
      t.set(r, c, static_cast<float>(scale * g.uniform(-amplitude, amplitude)));
    }
  }
}

void fill_banded(HalfTensor& t, SplitMix64& g, const SynthProfile& p, std::span<const std::uint32_t> regime_of) {
  const std::size_t cols = t.cols();
  const std::uint32_t regimes = std::max<std::uint32_t>(p.regimes, 1);
  std::vector<double> offset(cols);
  for (auto& o : offset) o = p.amplitude * g.normal();
  std::vector<double> shift(static_cast<std::size_t>(regimes) * cols);
  for (auto& s : shift) s = p.regime_amplitude * g.normal();
  for (std::size_t r = 0; r < t.rows(); ++r) {
    const std::size_t z = regime_of[r];
    for (std::size_t c = 0; c < cols; ++c) {
      t.set(r, c, static_cast<float>(offset[c] + shift[z * cols + c] + p.noise * g.normal()));
    }
  }
}

}  // namespace

KvDump generate_synthetic(const SynthProfile& profile, std::uint32_t layers, std::uint32_t heads,
                          std::uint32_t head_dim, std::uint32_t tokens) {
  if (layers == 0 || heads == 0 || head_dim == 0) {
    throw Error(ErrorCode::invalid_argument, "layers, heads and head_dim must be >= 1");
  }
  KvDump dump(layers, heads, head_dim, tokens);
  for (std::uint32_t l = 0; l < layers; ++l) {
    // Token regimes are shared by K and V of every head in a layer.
    SplitMix64 regime_gen(SplitMix64::derive(profile.seed, stream_tag(l, 0xffff, 3)));
    std::vector<std::uint32_t> regime_of(tokens);
    for (auto& z : regime_of) z = static_cast<std::uint32_t>(regime_gen.below(std::max<std::uint32_t>(profile.regimes, 1)));

    for (std::uint32_t h = 0; h < heads; ++h) {
      for (std::uint32_t kind = 0; kind < 2; ++kind) {
        SplitMix64 g(SplitMix64::derive(profile.seed, stream_tag(l, h, kind)));
        HalfTensor& t = kind == 0 ? dump.k_at(l, h) : dump.v_at(l, h);
        switch (profile.mode) {
          case SynthMode::uniform: fill_uniform(t, g, profile.amplitude); break;
          case SynthMode::token_scaled: fill_token_scaled(t, g, profile.amplitude); break;
          case SynthMode::channel_banded: fill_banded(t, g, profile, regime_of); break;
        }
      }
    }
  }
  return dump;
}

}  // namespace packkv
