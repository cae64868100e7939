// Copyright 2026 The midcot Authors
// SPDX-License-Identifier: Apache-2.0
//
// CoT records: grading, correctness/length filtering, SFT packaging and
// line-delimited JSON I/O.

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "midcot/answer.hpp"
#include "midcot/error.hpp"
#include "midcot/parallel.hpp"
#include "midcot/tokenizer.hpp"

namespace midcot {

/// One prompt with its reasoning trace and grading state.
struct CotRecord {
  std::string id;
  std::string prompt;
  std::string cot;
  std::string gold_answer;
  std::optional<std::string> extracted_answer;
  std::optional<bool> correct;
  std::optional<std::uint64_t> token_count;
  std::string source_model;
  std::optional<std::string> subject;
  /// "length" when the generation hit the token limit.
  std::optional<std::string> finish_reason;

  bool truncated() const { return finish_reason && *finish_reason == "length"; }

  friend bool operator==(const CotRecord&, const CotRecord&) = default;
};

struct FilterPolicy {
  std::uint64_t max_length = 16384;
  bool require_correct = true;
  std::string tokenizer_id = "whitespace";

  void validate() const {
    if (max_length == 0) throw ConfigError("l_max: must be positive");
  }

  nlohmann::ordered_json to_json() const {
    return {{"max_length", max_length}, {"require_correct", require_correct}, {"tokenizer_id", tokenizer_id}};
  }
};

struct SftPair {
  std::string instruction;
  std::string response;
  friend bool operator==(const SftPair&, const SftPair&) = default;
};

enum class RejectReason { WrongAnswer, OverLength, Both };

constexpr std::string_view to_string(RejectReason r) noexcept {
  switch (r) {
    case RejectReason::WrongAnswer: return "wrong_answer";
    case RejectReason::OverLength: return "over_length";
    case RejectReason::Both: return "both";
  }
  return "?";
}

struct Rejected {
  CotRecord record;
  RejectReason reason;
};

struct FilterResult {
  std::vector<CotRecord> retained;
  std::vector<Rejected> rejected;
};

// JSON mapping. Field order is fixed; absent optionals are omitted.

inline nlohmann::ordered_json to_json(const CotRecord& r) {
  nlohmann::ordered_json j;
  j["id"] = r.id;
  j["prompt"] = r.prompt;
  j["cot"] = r.cot;
  j["gold_answer"] = r.gold_answer;
  if (r.extracted_answer) j["extracted_answer"] = *r.extracted_answer;
  if (r.correct) j["correct"] = *r.correct;
  if (r.token_count) j["token_count"] = *r.token_count;
  j["source_model"] = r.source_model;
  if (r.subject) j["subject"] = *r.subject;
  if (r.finish_reason) j["finish_reason"] = *r.finish_reason;
  return j;
}

namespace detail {

inline std::string field_string(const nlohmann::json& j, const char* key, const std::string& where,
                                bool required) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) {
    if (required) throw DataError(where + ": missing required field '" + key + "'");
    return {};
  }
  if (!it->is_string()) throw DataError(where + ": field '" + key + "' must be a string");
  return it->get<std::string>();
}

inline std::optional<std::string> optional_string(const nlohmann::json& j, const char* key,
                                                  const std::string& where) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) throw DataError(where + ": field '" + key + "' must be a string");
  return it->get<std::string>();
}

}  // namespace detail

inline CotRecord record_from_json(const nlohmann::json& j, const std::string& where) {
  if (!j.is_object()) throw DataError(where + ": expected a JSON object");
  CotRecord r;
  r.id = detail::field_string(j, "id", where, true);
  r.prompt = detail::field_string(j, "prompt", where, true);
  r.cot = detail::field_string(j, "cot", where, true);
  r.gold_answer = detail::field_string(j, "gold_answer", where, true);
  r.extracted_answer = detail::optional_string(j, "extracted_answer", where);
  if (auto it = j.find("correct"); it != j.end() && !it->is_null()) {
    if (!it->is_boolean()) throw DataError(where + ": field 'correct' must be a boolean");
    r.correct = it->get<bool>();
  }
  if (auto it = j.find("token_count"); it != j.end() && !it->is_null()) {
    if (!it->is_number_unsigned()) throw DataError(where + ": field 'token_count' must be a non-negative integer");
    r.token_count = it->get<std::uint64_t>();
  }
  r.source_model = detail::field_string(j, "source_model", where, false);
  r.subject = detail::optional_string(j, "subject", where);
  r.finish_reason = detail::optional_string(j, "finish_reason", where);
  return r;
}

/// Reads one JSON value per non-blank line, tracking line numbers.
class JsonlReader {
 public:
  JsonlReader(std::istream& in, std::string source) : in_(in), source_(std::move(source)) {}

  std::optional<nlohmann::json> next() {
    std::string line;
    while (std::getline(in_, line)) {
      ++line_;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.find_first_not_of(" \t") == std::string::npos) continue;
      try {
        return nlohmann::json::parse(line);
      } catch (const nlohmann::json::parse_error& e) {
        throw DataError(where() + ": malformed JSON (" + e.what() + ")");
      }
    }
    return std::nullopt;
  }

  std::optional<CotRecord> next_record() {
    auto j = next();
    if (!j) return std::nullopt;
    return record_from_json(*j, where());
  }

  std::size_t line() const noexcept { return line_; }
  std::string where() const { return source_ + ":" + std::to_string(line_); }

 private:
  std::istream& in_;
  std::string source_;
  std::size_t line_ = 0;
};

template <typename Json>
void write_json_line(std::ostream& out, const Json& j) {
  out << j.dump(-1, ' ', false, nlohmann::json::error_handler_t::strict) << '\n';
}

inline std::vector<CotRecord> read_jsonl(std::istream& in, const std::string& source = "<input>") {
  JsonlReader reader(in, source);
  std::vector<CotRecord> out;
  while (auto r = reader.next_record()) out.push_back(std::move(*r));
  return out;
}

inline std::vector<CotRecord> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read '" + path.string() + "'");
  return read_jsonl(in, path.string());
}

inline void write_jsonl(std::ostream& out, const std::vector<CotRecord>& records) {
  for (const auto& r : records) write_json_line(out, to_json(r));
}

inline void write_jsonl(const std::filesystem::path& path, const std::vector<CotRecord>& records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  write_jsonl(out, records);
}

/// Extracts and compares the final answer. Requires a non-empty gold answer.
inline CotRecord grade(CotRecord record) {
  if (detail::trim(record.gold_answer).empty()) {
    throw DataError("record '" + record.id + "': empty gold answer");
  }
  record.extracted_answer = extract_answer(record.cot);
  record.correct = record.extracted_answer.has_value() &&
                   *record.extracted_answer == normalize_answer(record.gold_answer);
  return record;
}

/// Grades and counts lazily, then applies the correctness/length predicate.
/// Returns nullopt when the record is kept.
inline std::optional<RejectReason> classify(CotRecord& record, const FilterPolicy& policy) {
  if (!record.correct) record = grade(std::move(record));
  if (!record.token_count) record.token_count = count_tokens(record.cot, policy.tokenizer_id);
  const bool wrong = policy.require_correct && !*record.correct;
  const bool over = *record.token_count > policy.max_length || record.truncated();
  if (wrong && over) return RejectReason::Both;
  if (wrong) return RejectReason::WrongAnswer;
  if (over) return RejectReason::OverLength;
  return std::nullopt;
}

/// Partitions records into retained and rejected, both in input order.
/// Grading and counting run on up to `threads` workers.
inline FilterResult filter_dataset(std::vector<CotRecord> records, const FilterPolicy& policy,
                                   unsigned threads = 1) {
  policy.validate();
  std::vector<std::optional<RejectReason>> verdicts(records.size());
  parallel_for(records.size(), threads, [&](std::size_t i) { verdicts[i] = classify(records[i], policy); });
  FilterResult result;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (verdicts[i]) {
      result.rejected.push_back({std::move(records[i]), *verdicts[i]});
    } else {
      result.retained.push_back(std::move(records[i]));
    }
  }
  return result;
}

inline std::vector<SftPair> to_sft_pairs(const std::vector<CotRecord>& records) {
  std::vector<SftPair> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back({r.prompt, r.cot});
  return out;
}

inline nlohmann::ordered_json to_json(const SftPair& p) {
  nlohmann::ordered_json j;
  j["instruction"] = p.instruction;
  j["response"] = p.response;
  return j;
}

inline nlohmann::ordered_json to_json(const Rejected& r) {
  auto j = to_json(r.record);
  j["reject_reason"] = std::string(to_string(r.reason));
  return j;
}

struct CurateCounts {
  std::uint64_t input = 0;
  std::uint64_t retained = 0;
  std::uint64_t wrong_answer = 0;
  std::uint64_t over_length = 0;
  std::uint64_t both = 0;
  std::set<std::string> source_models;

  std::uint64_t rejected() const { return wrong_answer + over_length + both; }

  nlohmann::ordered_json to_json() const {
    return {{"input", input},         {"retained", retained},       {"rejected", rejected()},
            {"wrong_answer", wrong_answer}, {"over_length", over_length}, {"both", both}};
  }
};

/// Streaming filter: reads one record at a time from `in` and hands each to
/// the matching sink, so memory does not grow with corpus size.
inline CurateCounts curate_stream(std::istream& in, const std::string& source, const FilterPolicy& policy,
                                  const std::function<void(const CotRecord&)>& on_retained,
                                  const std::function<void(const Rejected&)>& on_rejected) {
  policy.validate();
  JsonlReader reader(in, source);
  CurateCounts counts;
  while (auto rec = reader.next_record()) {
    CotRecord r = std::move(*rec);
    std::optional<RejectReason> verdict;
    try {
      verdict = classify(r, policy);
    } catch (const DataError& e) {
      throw DataError(reader.where() + ": " + e.what());
    }
    ++counts.input;
    counts.source_models.insert(r.source_model);
    if (!verdict) {
      ++counts.retained;
      on_retained(r);
      continue;
    }
    switch (*verdict) {
      case RejectReason::WrongAnswer: ++counts.wrong_answer; break;
      case RejectReason::OverLength: ++counts.over_length; break;
      case RejectReason::Both: ++counts.both; break;
    }
    on_rejected(Rejected{std::move(r), *verdict});
  }
  return counts;
}

}  // namespace midcot
