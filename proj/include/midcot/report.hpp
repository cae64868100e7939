// Copyright 2026 The midcot Authors
// SPDX-License-Identifier: Apache-2.0
//
// Score reports: benchmark accuracies, deltas, a BPC table keyed by
// method x model, length statistics and marker counts. Rendered as JSON,
// markdown and CSV.

#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/core.h>
#include <nlohmann/json.hpp>

#include "midcot/dataset.hpp"
#include "midcot/error.hpp"
#include "midcot/metrics.hpp"

namespace midcot {

struct ScoreRow {
  std::string method;
  std::string model;
  std::vector<std::pair<std::string, double>> percents;  // benchmark -> accuracy in percent
  double average = 0.0;
};

struct DeltaRow {
  std::string label;
  DeltaReport delta;
};

/// Pooled BPC of one (method, model) cell: total bits over total bytes.
struct BpcCell {
  std::string method;
  std::string model;
  double sum_neg_log2_prob = 0.0;
  std::uint64_t utf8_len = 0;
  std::size_t n_texts = 0;
  double bpc = 0.0;
};

struct MarkerRow {
  std::string group;
  std::string marker;
  std::uint64_t total = 0;
  std::uint64_t records = 0;
};

struct ScoreReport {
  std::vector<std::string> benchmarks;
  std::vector<ScoreRow> scores;
  std::vector<DeltaRow> deltas;
  std::vector<BpcCell> bpc;
  std::vector<LengthReport> lengths;
  std::vector<MarkerRow> markers;
};

/// Row with averages recomputed from the given percentages.
inline ScoreRow make_score_row(std::string method, std::string model,
                               std::vector<std::pair<std::string, double>> percents) {
  std::vector<double> values;
  for (const auto& [_, v] : percents) values.push_back(v);
  ScoreRow row{std::move(method), std::move(model), std::move(percents), 0.0};
  row.average = average_score(values);
  return row;
}

/// Pools per-text results into one cell.
inline BpcCell pool_bpc(std::string method, std::string model, std::span<const BpcResult> texts) {
  if (texts.empty()) throw DataError("bpc cell " + method + "/" + model + ": no texts");
  BpcCell cell{std::move(method), std::move(model), 0.0, 0, texts.size(), 0.0};
  for (const auto& t : texts) {
    cell.sum_neg_log2_prob += t.sum_neg_log2_prob;
    cell.utf8_len += t.utf8_len;
  }
  cell.bpc = cell.sum_neg_log2_prob / static_cast<double>(cell.utf8_len);
  return cell;
}

inline nlohmann::ordered_json to_json(const BpcResult& r) {
  nlohmann::ordered_json j;
  j["text_id"] = r.text_id;
  j["sum_neg_log2_prob"] = r.sum_neg_log2_prob;
  j["utf8_len"] = r.utf8_len;
  j["bpc"] = r.bpc;
  return j;
}

inline nlohmann::ordered_json to_json(const LengthReport& r) {
  nlohmann::ordered_json j;
  j["group"] = r.group;
  j["count"] = r.count;
  j["mean_tokens"] = r.mean_tokens;
  j["median_tokens"] = r.median_tokens;
  j["p95_tokens"] = r.p95_tokens;
  j["ratio_to_reference"] = r.ratio_to_reference ? nlohmann::ordered_json(*r.ratio_to_reference)
                                                 : nlohmann::ordered_json(nullptr);
  return j;
}

inline nlohmann::ordered_json to_json(const ScoreReport& rep) {
  nlohmann::ordered_json j;
  j["benchmarks"] = rep.benchmarks;
  auto scores = nlohmann::ordered_json::array();
  for (const auto& s : rep.scores) {
    nlohmann::ordered_json row;
    row["method"] = s.method;
    row["model"] = s.model;
    nlohmann::ordered_json acc = nlohmann::ordered_json::object();
    for (const auto& [b, v] : s.percents) acc[b] = v;
    row["accuracy_percent"] = acc;
    row["average"] = s.average;
    scores.push_back(std::move(row));
  }
  j["scores"] = scores;
  auto deltas = nlohmann::ordered_json::array();
  for (const auto& d : rep.deltas) {
    nlohmann::ordered_json row;
    row["label"] = d.label;
    row["p_distilled"] = d.delta.p_distilled;
    row["p_base"] = d.delta.p_base;
    row["delta"] = d.delta.delta;
    row["direction"] = std::string(d.delta.direction());
    deltas.push_back(std::move(row));
  }
  j["deltas"] = deltas;
  auto bpc = nlohmann::ordered_json::array();
  for (const auto& c : rep.bpc) {
    nlohmann::ordered_json row;
    row["method"] = c.method;
    row["model"] = c.model;
    row["bpc"] = c.bpc;
    row["sum_neg_log2_prob"] = c.sum_neg_log2_prob;
    row["utf8_len"] = c.utf8_len;
    row["n_texts"] = c.n_texts;
    bpc.push_back(std::move(row));
  }
  j["bpc"] = bpc;
  auto lengths = nlohmann::ordered_json::array();
  for (const auto& l : rep.lengths) lengths.push_back(to_json(l));
  j["lengths"] = lengths;
  auto markers = nlohmann::ordered_json::array();
  for (const auto& m : rep.markers) {
    nlohmann::ordered_json row;
    row["group"] = m.group;
    row["marker"] = m.marker;
    row["total"] = m.total;
    row["records"] = m.records;
    markers.push_back(std::move(row));
  }
  j["markers"] = markers;
  return j;
}

namespace detail {

inline std::string pct(double v) { return fmt::format("{:.2f}", v); }

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

template <typename Rows>
std::string md_table(const std::vector<std::string>& header, const Rows& rows) {
  std::string out = "|";
  for (const auto& h : header) out += " " + h + " |";
  out += "\n|";
  for (std::size_t i = 0; i < header.size(); ++i) out += i == 0 ? " --- |" : " ---: |";
  out += "\n";
  for (const auto& row : rows) {
    out += "|";
    for (const auto& cell : row) out += " " + cell + " |";
    out += "\n";
  }
  return out;
}

template <typename Rows>
std::string csv_table(const std::vector<std::string>& header, const Rows& rows) {
  std::string out;
  for (std::size_t i = 0; i < header.size(); ++i) out += (i ? "," : "") + csv_field(header[i]);
  out += "\n";
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out += (i ? "," : "") + csv_field(row[i]);
    out += "\n";
  }
  return out;
}

using Table = std::pair<std::vector<std::string>, std::vector<std::vector<std::string>>>;

inline Table scores_table(const ScoreReport& rep, bool full_precision) {
  std::vector<std::string> header = {"Model", "Method"};
  for (const auto& b : rep.benchmarks) header.push_back(b);
  header.push_back("Avg");
  const auto num = [&](double v) { return full_precision ? nlohmann::json(v).dump() : pct(v); };
  std::vector<std::vector<std::string>> rows;
  for (const auto& s : rep.scores) {
    std::vector<std::string> row = {s.model, s.method};
    for (const auto& b : rep.benchmarks) {
      auto it = std::find_if(s.percents.begin(), s.percents.end(), [&](const auto& p) { return p.first == b; });
      row.push_back(it == s.percents.end() ? "-" : num(it->second));
    }
    row.push_back(num(s.average));
    rows.push_back(std::move(row));
  }
  return {header, rows};
}

inline Table deltas_table(const ScoreReport& rep, bool full_precision) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& d : rep.deltas) {
    if (full_precision) {
      rows.push_back({d.label, nlohmann::json(d.delta.p_distilled).dump(), nlohmann::json(d.delta.p_base).dump(),
                      nlohmann::json(d.delta.delta).dump(), std::string(d.delta.direction())});
    } else {
      rows.push_back({d.label, pct(d.delta.p_distilled), pct(d.delta.p_base), fmt::format("{:+.2f}", d.delta.delta),
                      std::string(d.delta.direction())});
    }
  }
  return {{"Comparison", "P_distilled", "P_base", "Delta", "Direction"}, rows};
}

inline Table bpc_table(const ScoreReport& rep, bool full_precision) {
  std::vector<std::string> methods;
  std::vector<std::string> models;
  for (const auto& c : rep.bpc) {
    if (std::find(methods.begin(), methods.end(), c.method) == methods.end()) methods.push_back(c.method);
    if (std::find(models.begin(), models.end(), c.model) == models.end()) models.push_back(c.model);
  }
  std::vector<std::string> header = {"Method"};
  header.insert(header.end(), models.begin(), models.end());
  std::vector<std::vector<std::string>> rows;
  for (const auto& m : methods) {
    std::vector<std::string> row = {m};
    for (const auto& model : models) {
      auto it = std::find_if(rep.bpc.begin(), rep.bpc.end(),
                             [&](const BpcCell& c) { return c.method == m && c.model == model; });
      if (it == rep.bpc.end()) row.push_back("-");
      else row.push_back(full_precision ? nlohmann::json(it->bpc).dump() : fmt::format("{:.4f}", it->bpc));
    }
    rows.push_back(std::move(row));
  }
  return {header, rows};
}

inline Table lengths_table(const ScoreReport& rep, bool full_precision) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& l : rep.lengths) {
    std::string ratio = "-";
    if (l.ratio_to_reference) {
      ratio = full_precision ? nlohmann::json(*l.ratio_to_reference).dump() : fmt::format("{:.2f}", *l.ratio_to_reference);
    }
    rows.push_back({l.group, std::to_string(l.count),
                    full_precision ? nlohmann::json(l.mean_tokens).dump() : fmt::format("{:.1f}", l.mean_tokens),
                    std::to_string(l.median_tokens), std::to_string(l.p95_tokens), ratio});
  }
  return {{"Group", "Count", "Mean tokens", "Median", "P95", "Ratio to reference"}, rows};
}

inline Table markers_table(const ScoreReport& rep) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& m : rep.markers) {
    rows.push_back({m.group, m.marker, std::to_string(m.total), std::to_string(m.records)});
  }
  return {{"Group", "Marker", "Occurrences", "Records"}, rows};
}

}  // namespace detail

inline std::string to_markdown(const ScoreReport& rep) {
  std::string out = "# Score report\n";
  const auto section = [&](const char* title, const detail::Table& t) {
    if (t.second.empty()) return;
    out += fmt::format("\n## {}\n\n", title);
    out += detail::md_table(t.first, t.second);
  };
  section("Accuracy (%)", detail::scores_table(rep, false));
  section("Performance delta", detail::deltas_table(rep, false));
  section("Bits per character", detail::bpc_table(rep, false));
  section("Response length (tokens)", detail::lengths_table(rep, false));
  section("Reflection markers", detail::markers_table(rep));
  return out;
}

/// One CSV document per non-empty table, keyed by table name.
inline std::map<std::string, std::string> to_csv(const ScoreReport& rep) {
  std::map<std::string, std::string> out;
  const auto add = [&](const char* name, const detail::Table& t) {
    if (!t.second.empty()) out[name] = detail::csv_table(t.first, t.second);
  };
  add("scores", detail::scores_table(rep, true));
  add("deltas", detail::deltas_table(rep, true));
  add("bpc", detail::bpc_table(rep, true));
  add("lengths", detail::lengths_table(rep, true));
  add("markers", detail::markers_table(rep));
  return out;
}

using PathResolver = std::function<std::filesystem::path(const std::string&)>;

/// Result file written by the bpc command.
inline BpcCell read_bpc_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read bpc result '" + path.string() + "'");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("bpc result '" + path.string() + "': " + e.what());
  }
  std::vector<BpcResult> texts;
  try {
    for (const auto& t : doc.at("texts")) {
      texts.push_back({t.at("text_id").get<std::string>(), t.at("sum_neg_log2_prob").get<double>(),
                       t.at("utf8_len").get<std::uint64_t>(), t.at("bpc").get<double>()});
    }
    return pool_bpc(doc.value("method", ""), doc.value("model", ""), texts);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bpc result '" + path.string() + "': " + e.what());
  }
}

namespace detail {

inline double score_value(const nlohmann::json& v, const PathResolver& resolve, const std::string& where) {
  if (v.is_number()) return v.get<double>();
  if (!v.is_string()) throw ConfigError(where + ": expected a percentage or a dataset path");
  std::vector<CotRecord> records = read_jsonl(resolve(v.get<std::string>()));
  for (auto& r : records) {
    if (!r.correct) r = grade(std::move(r));
  }
  return 100.0 * exact_match_accuracy(v.get<std::string>(), records).accuracy;
}

inline double row_reference(const nlohmann::json& v, const std::vector<ScoreRow>& rows, const std::string& where) {
  if (v.is_number()) return v.get<double>();
  if (v.is_object() && v.contains("method") && v.contains("model")) {
    const auto method = v["method"].get<std::string>();
    const auto model = v["model"].get<std::string>();
    for (const auto& r : rows) {
      if (r.method == method && r.model == model) return r.average;
    }
    throw ConfigError(where + ": no score row for method '" + method + "', model '" + model + "'");
  }
  throw ConfigError(where + ": expected a number or {method, model}");
}

inline std::vector<CotRecord> records_with_counts(const std::filesystem::path& path, const std::string& tokenizer) {
  std::vector<CotRecord> records = read_jsonl(path);
  for (auto& r : records) {
    if (!r.token_count) r.token_count = count_tokens(r.cot, tokenizer);
  }
  return records;
}

}  // namespace detail

/// Builds a report from a spec document:
///   benchmarks: [name...]                      column order (optional)
///   scores:  [{method, model, benchmarks: {name: percent | dataset path}}]
///   deltas:  [{label, distilled, base}]        numbers or {method, model} row refs
///   bpc:     [{method, model, path}]           bpc command outputs
///   lengths: {groups: {name: path}, reference, tokenizer}
///   markers: {groups: {name: path}, markers: [..]}
inline ScoreReport build_report(const nlohmann::json& spec, const PathResolver& resolve) {
  if (!spec.is_object()) throw ConfigError("report spec must be an object");
  ScoreReport rep;
  if (spec.contains("benchmarks")) rep.benchmarks = spec["benchmarks"].get<std::vector<std::string>>();

  if (spec.contains("scores")) {
    std::size_t i = 0;
    for (const auto& row : spec["scores"]) {
      const std::string where = "scores[" + std::to_string(i++) + "]";
      if (!row.contains("benchmarks") || !row["benchmarks"].is_object() || row["benchmarks"].empty()) {
        throw ConfigError(where + ".benchmarks: required non-empty object");
      }
      std::vector<std::pair<std::string, double>> percents;
      // Keep the spec's column order when given, then any extra benchmarks in key order.
      for (const auto& b : rep.benchmarks) {
        if (row["benchmarks"].contains(b)) {
          percents.emplace_back(b, detail::score_value(row["benchmarks"][b], resolve, where + "." + b));
        }
      }
      for (const auto& [b, v] : row["benchmarks"].items()) {
        if (std::find(rep.benchmarks.begin(), rep.benchmarks.end(), b) != rep.benchmarks.end()) continue;
        rep.benchmarks.push_back(b);
        percents.emplace_back(b, detail::score_value(v, resolve, where + "." + b));
      }
      rep.scores.push_back(make_score_row(row.value("method", ""), row.value("model", ""), std::move(percents)));
    }
  }

  if (spec.contains("deltas")) {
    std::size_t i = 0;
    for (const auto& d : spec["deltas"]) {
      const std::string where = "deltas[" + std::to_string(i++) + "]";
      if (!d.contains("distilled") || !d.contains("base")) throw ConfigError(where + ": needs distilled and base");
      rep.deltas.push_back({d.value("label", ""),
                            performance_delta(detail::row_reference(d["distilled"], rep.scores, where + ".distilled"),
                                              detail::row_reference(d["base"], rep.scores, where + ".base"))});
    }
  }

  if (spec.contains("bpc")) {
    for (const auto& c : spec["bpc"]) {
      BpcCell cell = read_bpc_file(resolve(c.at("path").get<std::string>()));
      if (c.contains("method")) cell.method = c["method"].get<std::string>();
      if (c.contains("model")) cell.model = c["model"].get<std::string>();
      rep.bpc.push_back(std::move(cell));
    }
  }

  if (spec.contains("lengths")) {
    const auto& l = spec["lengths"];
    const std::string tokenizer = l.value("tokenizer", "whitespace");
    std::map<std::string, std::vector<CotRecord>> groups;
    for (const auto& [name, path] : l.at("groups").items()) {
      groups[name] = detail::records_with_counts(resolve(path.get<std::string>()), tokenizer);
    }
    std::optional<std::string> reference;
    if (l.contains("reference")) reference = l["reference"].get<std::string>();
    rep.lengths = length_report(groups, reference);
  }

  if (spec.contains("markers")) {
    const auto& m = spec["markers"];
    const auto markers = m.value("markers", std::vector<std::string>{"wait"});
    for (const auto& [name, path] : m.at("groups").items()) {
      const auto records = read_jsonl(resolve(path.get<std::string>()));
      std::map<std::string, std::uint64_t> totals;
      for (const auto& marker : markers) totals[marker] = 0;
      for (const auto& r : records) {
        for (const auto& [marker, n] : marker_count(r.cot, markers)) totals[marker] += n;
      }
      for (const auto& marker : markers) rep.markers.push_back({name, marker, totals[marker], records.size()});
    }
  }
  return rep;
}

}  // namespace midcot
