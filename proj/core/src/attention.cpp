#include "packkv/attention.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

#include "packkv/error.hpp"
#include "packkv/rng.hpp"

namespace packkv {

void softmax_inplace(std::span<double> x) {
  if (x.empty()) return;
  const double mx = *std::max_element(x.begin(), x.end());
  double sum = 0.0;
  for (double& v : x) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : x) v /= sum;
}

std::vector<float> attention_decode(const CompressedStore& store, std::uint32_t layer, std::uint32_t head,
                                    std::span<const float> q, const ExecOptions& opts) {
  const AttentionConfig cfg(store.shape().head_dim);
  const ScoreVector s = fused_k_scores(store, layer, head, q, opts);
  std::vector<double> alpha(s.scores.size());
  for (std::size_t i = 0; i < alpha.size(); ++i) alpha[i] = static_cast<double>(s.scores[i]) * cfg.scale;
  softmax_inplace(alpha);
  std::vector<float> w(alpha.begin(), alpha.end());
  if (w.empty()) return std::vector<float>(cfg.head_dim, 0.0f);
  return fused_v_output(store, layer, head, w, opts);
}

std::vector<double> attention_reference(const HalfTensor& k, const HalfTensor& v, std::span<const float> q) {
  if (k.rows() != v.rows()) throw Error(ErrorCode::dimension_mismatch, "K and V row counts differ");
  if (q.size() != k.cols()) throw Error(ErrorCode::dimension_mismatch, "query length != K columns");
  const AttentionConfig cfg(k.cols());
  std::vector<double> s(k.rows());
  for (std::size_t t = 0; t < k.rows(); ++t) {
    double acc = 0.0;
    for (std::size_t c = 0; c < k.cols(); ++c) acc += static_cast<double>(k.at(t, c)) * q[c];
    s[t] = acc * cfg.scale;
  }
  softmax_inplace(s);
  std::vector<double> out(v.cols(), 0.0);
  for (std::size_t t = 0; t < v.rows(); ++t) {
    for (std::size_t c = 0; c < v.cols(); ++c) out[c] += s[t] * static_cast<double>(v.at(t, c));
  }
  return out;
}

namespace {

template <typename A, typename B>
double rel_inf(std::span<const A> a, std::span<const B> b) {
  if (a.size() != b.size()) throw Error(ErrorCode::dimension_mismatch, "rel_inf_error length mismatch");
  double diff = 0.0;
  double ref = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::fabs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    ref = std::max(ref, std::fabs(static_cast<double>(b[i])));
  }
  return diff / std::max(ref, std::numeric_limits<double>::min());
}

}  // namespace

double rel_inf_error(std::span<const double> a, std::span<const double> b) { return rel_inf(a, b); }
double rel_inf_error(std::span<const float> a, std::span<const double> b) { return rel_inf(a, b); }
double rel_inf_error(std::span<const float> a, std::span<const float> b) { return rel_inf(a, b); }

std::vector<std::size_t> random_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  SplitMix64 g(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[g.below(i)]);
  return p;
}

InvarianceReport permutation_invariance_check(const HalfTensor& k, const HalfTensor& v, std::span<const float> q,
                                              std::size_t trials, std::uint64_t seed, StoreConfig config) {
  if (trials == 0) throw Error(ErrorCode::invalid_argument, "trials must be >= 1");
  InvarianceReport report;
  report.trials = trials;
  const std::vector<double> base = attention_reference(k, v, q);
  for (std::size_t t = 0; t < trials; ++t) {
    const auto perm = random_permutation(k.rows(), SplitMix64::derive(seed, t));
    const std::vector<double> moved = attention_reference(k.permute_rows(perm), v.permute_rows(perm), q);
    const double dev = rel_inf_error(moved, base);
    report.max_rel_deviation = std::max(report.max_rel_deviation, dev);
    if (!(dev <= kPermutationTolerance)) ++report.failures;
  }

  const StoreShape shape{1, 1, static_cast<std::uint32_t>(k.cols())};
  std::vector<float> outputs[2];
  for (int i = 0; i < 2; ++i) {
    config.repack = i == 0 ? RepackStrategy::none : RepackStrategy::greedy;
    CompressedStore store(shape, config);
    store.compress_batch(0, std::span(&k, 1), std::span(&v, 1));
    outputs[i] = attention_decode(store, 0, 0, q);
  }
  report.repack_rel_deviation = rel_inf_error(std::span<const float>(outputs[1]), std::span<const float>(outputs[0]));
  report.repack_neutral = report.repack_rel_deviation <= kRepackNeutralityTolerance;
  return report;
}

}  // namespace packkv
