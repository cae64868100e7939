// Copyright 2026 The midcot Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "midcot/dataset.hpp"
#include "midcot/error.hpp"

namespace midcot {

/// One token and its natural-log probability. The first token of a scored text
/// may carry no logprob (its conditional is undefined).
struct TokenLogprob {
  std::string token;
  std::optional<double> logprob;
  friend bool operator==(const TokenLogprob&, const TokenLogprob&) = default;
};

struct BenchmarkScore {
  std::string benchmark;
  std::uint64_t n_items = 0;
  std::uint64_t n_correct = 0;
  double accuracy = 0.0;  // n_correct / n_items
};

/// Fraction of graded records marked correct.
inline BenchmarkScore exact_match_accuracy(std::string benchmark, std::span<const CotRecord> graded) {
  if (graded.empty()) throw DataError("benchmark '" + benchmark + "': no records to score");
  BenchmarkScore s{std::move(benchmark), graded.size(), 0, 0.0};
  for (const auto& r : graded) {
    if (!r.correct) throw DataError("record '" + r.id + "' is not graded");
    if (*r.correct) ++s.n_correct;
  }
  s.accuracy = static_cast<double>(s.n_correct) / static_cast<double>(s.n_items);
  return s;
}

/// Unweighted mean over benchmarks.
inline double average_score(std::span<const double> values) {
  if (values.empty()) throw DataError("average_score: no scores");
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

inline double average_score(std::span<const BenchmarkScore> scores) {
  std::vector<double> acc;
  acc.reserve(scores.size());
  for (const auto& s : scores) acc.push_back(s.accuracy);
  return average_score(acc);
}

struct DeltaReport {
  double p_distilled = 0.0;
  double p_base = 0.0;
  double delta = 0.0;

  std::string_view direction() const { return delta > 0 ? "gain" : (delta < 0 ? "loss" : "none"); }
};

inline DeltaReport performance_delta(double p_distilled, double p_base) {
  if (!std::isfinite(p_distilled) || !std::isfinite(p_base)) {
    throw DataError("performance_delta: inputs must be finite");
  }
  return {p_distilled, p_base, p_distilled - p_base};
}

struct BpcResult {
  std::string text_id;
  double sum_neg_log2_prob = 0.0;
  std::uint64_t utf8_len = 0;
  double bpc = 0.0;
};

/// Bits per UTF-8 byte: -sum(logprob) / ln 2 / bytes(text). Entries without a
/// logprob are skipped; the denominator always covers the whole text.
inline BpcResult bpc(std::span<const TokenLogprob> entries, std::string_view text, std::string text_id = {}) {
  if (text.empty()) throw DataError("bpc: text '" + text_id + "' is empty");
  constexpr double kSlack = 1e-6;
  double neg_ln = 0.0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (!entries[i].logprob) continue;
    const double lp = *entries[i].logprob;
    if (std::isnan(lp) || std::isinf(lp) || lp > kSlack) {
      throw DataError("bpc: text '" + text_id + "' token " + std::to_string(i) +
                      " has malformed logprob " + std::to_string(lp));
    }
    neg_ln -= std::min(lp, 0.0);
  }
  BpcResult r;
  r.text_id = std::move(text_id);
  r.sum_neg_log2_prob = neg_ln / std::numbers::ln2;
  r.utf8_len = text.size();
  r.bpc = r.sum_neg_log2_prob / static_cast<double>(r.utf8_len);
  return r;
}

struct LengthReport {
  std::string group;
  std::uint64_t count = 0;
  double mean_tokens = 0.0;
  std::uint64_t median_tokens = 0;
  std::uint64_t p95_tokens = 0;
  std::optional<double> ratio_to_reference;
};

/// Nearest-rank percentile of sorted data: element ceil(q * n), 1-based.
inline std::uint64_t nearest_rank(const std::vector<std::uint64_t>& sorted, double q) {
  const auto n = static_cast<double>(sorted.size());
  auto rank = static_cast<std::size_t>(std::ceil(q * n));
  rank = std::clamp<std::size_t>(rank, 1, sorted.size());
  return sorted[rank - 1];
}

inline std::vector<LengthReport> length_report(const std::map<std::string, std::vector<std::uint64_t>>& groups,
                                               const std::optional<std::string>& reference_group = std::nullopt) {
  std::vector<LengthReport> out;
  for (const auto& [name, lengths] : groups) {
    if (lengths.empty()) throw DataError("length_report: group '" + name + "' is empty");
    std::vector<std::uint64_t> sorted = lengths;
    std::sort(sorted.begin(), sorted.end());
    LengthReport r;
    r.group = name;
    r.count = sorted.size();
    r.mean_tokens = static_cast<double>(std::accumulate(sorted.begin(), sorted.end(), std::uint64_t{0})) /
                    static_cast<double>(sorted.size());
    r.median_tokens = nearest_rank(sorted, 0.5);
    r.p95_tokens = nearest_rank(sorted, 0.95);
    out.push_back(std::move(r));
  }
  if (reference_group) {
    auto ref = std::find_if(out.begin(), out.end(), [&](const LengthReport& r) { return r.group == *reference_group; });
    if (ref == out.end()) throw ConfigError("length_report: unknown reference group '" + *reference_group + "'");
    const double ref_mean = ref->mean_tokens;
    for (auto& r : out) {
      if (ref_mean > 0) r.ratio_to_reference = r.mean_tokens / ref_mean;
    }
  }
  return out;
}

/// Token counts per group from records; every record must carry token_count.
inline std::vector<LengthReport> length_report(const std::map<std::string, std::vector<CotRecord>>& groups,
                                               const std::optional<std::string>& reference_group = std::nullopt) {
  std::map<std::string, std::vector<std::uint64_t>> counts;
  for (const auto& [name, records] : groups) {
    auto& c = counts[name];
    for (const auto& r : records) {
      if (!r.token_count) throw DataError("length_report: record '" + r.id + "' has no token_count");
      c.push_back(*r.token_count);
    }
  }
  return length_report(counts, reference_group);
}

namespace detail {

inline bool is_marker_word_byte(unsigned char c) {
  return std::isalnum(c) != 0 || c == '_' || c >= 0x80;
}

inline char ascii_lower(char c) {
  return (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c;
}

}  // namespace detail

/// Case-insensitive whole-word occurrences of each marker.
inline std::map<std::string, std::size_t> marker_count(std::string_view text,
                                                       const std::vector<std::string>& markers = {"wait"}) {
  if (markers.empty()) throw ConfigError("marker_count: marker list is empty");
  std::string lowered(text);
  std::transform(lowered.begin(), lowered.end(), lowered.begin(), detail::ascii_lower);
  std::map<std::string, std::size_t> counts;
  for (const auto& marker : markers) {
    if (marker.empty()) throw ConfigError("marker_count: empty marker");
    std::string m = marker;
    std::transform(m.begin(), m.end(), m.begin(), detail::ascii_lower);
    std::size_t n = 0;
    for (std::size_t pos = lowered.find(m); pos != std::string::npos; pos = lowered.find(m, pos + 1)) {
      const bool left = pos == 0 || !detail::is_marker_word_byte(static_cast<unsigned char>(lowered[pos - 1]));
      const std::size_t end = pos + m.size();
      const bool right = end == lowered.size() || !detail::is_marker_word_byte(static_cast<unsigned char>(lowered[end]));
      if (left && right) ++n;
    }
    counts[marker] = n;
  }
  return counts;
}

}  // namespace midcot
