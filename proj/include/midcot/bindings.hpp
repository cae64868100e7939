// Copyright 2026 The midcot Authors
// SPDX-License-Identifier: Apache-2.0
//
// Mapping-in, mapping-out entry points for foreign-language wrappers. They
// accept the same field names as the JSONL and recipe schemas and hold no
// logic of their own beyond conversion.

#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "midcot/dataset.hpp"
#include "midcot/error.hpp"
#include "midcot/merge.hpp"
#include "midcot/metrics.hpp"
#include "midcot/pipeline.hpp"

namespace midcot::bind {

inline std::string version() { return std::string(kVersion); }

/// Recipe keys plus "output" (required), "base_dir" and "threads".
/// Same bytes as `midcot merge` on the equivalent recipe file.
inline std::string bind_merge(const nlohmann::json& mapping) {
  if (!mapping.is_object()) throw ConfigError("merge mapping must be an object");
  nlohmann::json recipe = mapping;
  if (!recipe.contains("output") || !recipe["output"].is_string()) throw ConfigError("output: required string");
  const std::string output = recipe["output"].get<std::string>();
  std::filesystem::path base_dir;
  unsigned threads = 1;
  if (recipe.contains("base_dir")) base_dir = recipe["base_dir"].get<std::string>();
  if (recipe.contains("threads")) threads = recipe["threads"].get<unsigned>();
  recipe.erase("output");
  recipe.erase("base_dir");
  recipe.erase("threads");
  MergeArgs args;
  args.config = MergeConfig::from_json(recipe, base_dir);
  args.output = output;
  args.threads = threads;
  cmd_merge(args);
  return output;
}

inline FilterPolicy policy_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("policy must be an object");
  FilterPolicy p;
  for (const auto& [key, v] : j.items()) {
    if (key == "max_length") {
      if (!v.is_number_unsigned()) throw ConfigError("max_length: must be a positive integer");
      p.max_length = v.get<std::uint64_t>();
    } else if (key == "require_correct") {
      if (!v.is_boolean()) throw ConfigError("require_correct: must be a boolean");
      p.require_correct = v.get<bool>();
    } else if (key == "tokenizer_id") {
      if (!v.is_string()) throw ConfigError("tokenizer_id: must be a string");
      p.tokenizer_id = v.get<std::string>();
    } else {
      throw ConfigError(key + ": unknown policy key");
    }
  }
  p.validate();
  return p;
}

/// Returns {"retained": [...], "rejected": [...]} in the curate output schema.
inline nlohmann::ordered_json bind_filter(const nlohmann::json& records, const nlohmann::json& policy) {
  if (!records.is_array()) throw ConfigError("records must be a list");
  std::vector<CotRecord> rs;
  for (std::size_t i = 0; i < records.size(); ++i) rs.push_back(record_from_json(records[i], "records[" + std::to_string(i) + "]"));
  const FilterResult result = filter_dataset(std::move(rs), policy_from_json(policy));
  nlohmann::ordered_json out;
  out["retained"] = nlohmann::ordered_json::array();
  out["rejected"] = nlohmann::ordered_json::array();
  for (const auto& r : result.retained) out["retained"].push_back(to_json(r));
  for (const auto& r : result.rejected) out["rejected"].push_back(to_json(r));
  return out;
}

inline nlohmann::ordered_json bind_grade(const nlohmann::json& record) {
  return to_json(grade(record_from_json(record, "record")));
}

inline std::optional<std::string> bind_extract(const std::string& cot) { return extract_answer(cot); }

/// Entries are {"token", "logprob"} mappings (logprob may be null).
inline double bind_bpc(const nlohmann::json& entries, const std::string& text) {
  const auto parsed = logprobs_from_json(entries, "entries");
  return bpc(parsed, text).bpc;
}

}  // namespace midcot::bind
