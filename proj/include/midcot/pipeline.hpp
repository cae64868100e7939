// Copyright 2026 The midcot Authors
// SPDX-License-Identifier: Apache-2.0
//
// Stage commands (generate, curate, merge, score, bpc, report, train) and the
// pipeline runner. Every command writes a manifest next to its outputs that
// records the parameter hash, seed and input/output digests.
//
// Workspace layout used by `run`:
//   checkpoints/  merged checkpoints and external training stubs
//   datasets/     generations, curated splits, SFT pairs
//   reports/      scores, bpc results, reports
//   manifests/    one <stage>.json per stage; drives resume

#pragma once

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "midcot/dataset.hpp"
#include "midcot/error.hpp"
#include "midcot/hash.hpp"
#include "midcot/inference.hpp"
#include "midcot/log.hpp"
#include "midcot/merge.hpp"
#include "midcot/metrics.hpp"
#include "midcot/report.hpp"

#ifndef MIDCOT_VERSION
#define MIDCOT_VERSION "0.0.0"
#endif

namespace midcot {

inline constexpr std::string_view kVersion = MIDCOT_VERSION;

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Small I/O helpers

namespace detail {

/// Text file written to <path>.partial and renamed into place on commit.
class TextOutput {
 public:
  explicit TextOutput(fs::path path) : path_(std::move(path)), tmp_(path_.string() + ".partial") {
    if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
    out_.open(tmp_, std::ios::binary | std::ios::trunc);
    if (!out_) throw DataError("cannot write '" + path_.string() + "'");
  }
  TextOutput(const TextOutput&) = delete;
  TextOutput& operator=(const TextOutput&) = delete;
  ~TextOutput() {
    if (!committed_) {
      out_.close();
      std::error_code ec;
      fs::remove(tmp_, ec);
    }
  }

  std::ostream& stream() { return out_; }

  void commit() {
    out_.flush();
    if (!out_) throw DataError("write failed for '" + path_.string() + "'");
    out_.close();
    fs::rename(tmp_, path_);
    committed_ = true;
  }

 private:
  fs::path path_;
  fs::path tmp_;
  std::ofstream out_;
  bool committed_ = false;
};

inline void write_text_file(const fs::path& path, std::string_view text) {
  TextOutput out(path);
  out.stream() << text;
  out.commit();
}

inline nlohmann::json read_json_file(const fs::path& path, bool as_config) {
  std::ifstream in(path);
  if (!in) {
    const std::string msg = "cannot read '" + path.string() + "'";
    if (as_config) throw ConfigError(msg);
    throw DataError(msg);
  }
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    const std::string msg = "'" + path.string() + "': " + e.what();
    if (as_config) throw ConfigError(msg);
    throw DataError(msg);
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Prompts

struct PromptItem {
  std::string id;
  std::string prompt;
  std::string gold_answer;
  std::optional<std::string> subject;
};

/// Prompt sets are JSONL rows with id and prompt; gold_answer and subject are
/// carried through to the generated records.
inline std::vector<PromptItem> read_prompts(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read prompts '" + path.string() + "'");
  JsonlReader reader(in, path.string());
  std::vector<PromptItem> out;
  std::set<std::string> seen;
  while (auto j = reader.next()) {
    if (!j->is_object()) throw DataError(reader.where() + ": expected a JSON object");
    PromptItem p;
    p.id = detail::field_string(*j, "id", reader.where(), true);
    p.prompt = detail::field_string(*j, "prompt", reader.where(), true);
    p.gold_answer = detail::field_string(*j, "gold_answer", reader.where(), false);
    p.subject = detail::optional_string(*j, "subject", reader.where());
    if (!seen.insert(p.id).second) throw DataError(reader.where() + ": duplicate id '" + p.id + "'");
    out.push_back(std::move(p));
  }
  return out;
}

/// Replaces every "{prompt}" in the template. An empty template passes the
/// prompt through unchanged.
inline std::string render_prompt(const std::string& tmpl, const std::string& prompt) {
  if (tmpl.empty()) return prompt;
  static constexpr std::string_view kSlot = "{prompt}";
  std::string out;
  std::size_t pos = 0;
  bool found = false;
  for (std::size_t hit = tmpl.find(kSlot); hit != std::string::npos; hit = tmpl.find(kSlot, pos)) {
    out.append(tmpl, pos, hit - pos);
    out += prompt;
    pos = hit + kSlot.size();
    found = true;
  }
  out.append(tmpl, pos, std::string::npos);
  if (!found) throw ConfigError("prompt template has no {prompt} slot");
  return out;
}

inline std::string load_template(const std::optional<fs::path>& path) {
  if (!path) return {};
  std::ifstream in(*path, std::ios::binary);
  if (!in) throw ConfigError("cannot read prompt template '" + path->string() + "'");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  render_prompt(text, "");  // validates the slot
  return text;
}

// ---------------------------------------------------------------------------
// Manifests

/// Describes one produced artifact set. `params` must fully determine the
/// command together with the input bytes.
struct Manifest {
  std::string stage;
  std::string name;
  nlohmann::json params = nlohmann::json::object();
  std::optional<std::uint64_t> seed;
  std::vector<std::pair<std::string, fs::path>> inputs;
  std::vector<std::pair<std::string, fs::path>> outputs;
  nlohmann::ordered_json details = nlohmann::ordered_json::object();
  /// Paths in the written document are made relative to this directory.
  fs::path relative_to;

  std::string config_sha256() const { return sha256_hex(params.dump()); }

  std::string digest(const fs::path& p) const {
    auto it = digests_.find(p);
    if (it == digests_.end()) it = digests_.emplace(p, file_sha256(p)).first;
    return it->second;
  }

  /// Sorted input digests; labels do not take part.
  std::vector<std::string> input_digests() const {
    std::vector<std::string> out;
    for (const auto& [_, path] : inputs) out.push_back(digest(path));
    std::sort(out.begin(), out.end());
    return out;
  }

  /// Resume key: parameters, seed, tool version and input bytes.
  std::string stage_key() const {
    const nlohmann::json key = {{"stage", stage},
                                {"params", params},
                                {"seed", seed ? nlohmann::json(*seed) : nlohmann::json(nullptr)},
                                {"version", std::string(kVersion)},
                                {"inputs", input_digests()}};
    return sha256_hex(key.dump());
  }

  nlohmann::ordered_json to_json() const {
    const auto shown = [&](const fs::path& p) {
      if (relative_to.empty()) return p.generic_string();
      return fs::weakly_canonical(p).lexically_relative(fs::weakly_canonical(relative_to)).generic_string();
    };
    nlohmann::ordered_json j;
    j["tool"] = "midcot";
    j["version"] = std::string(kVersion);
    j["stage"] = stage;
    if (!name.empty()) j["name"] = name;
    j["config_sha256"] = config_sha256();
    j["seed"] = seed ? nlohmann::ordered_json(*seed) : nlohmann::ordered_json(nullptr);
    j["stage_key"] = stage_key();
    j["params"] = nlohmann::ordered_json::parse(params.dump());
    nlohmann::ordered_json ins = nlohmann::ordered_json::object();
    for (const auto& [label, path] : inputs) ins[label] = {{"path", shown(path)}, {"sha256", digest(path)}};
    j["inputs"] = ins;
    nlohmann::ordered_json outs = nlohmann::ordered_json::object();
    for (const auto& [label, path] : outputs) outs[label] = {{"path", shown(path)}, {"sha256", file_sha256(path)}};
    j["outputs"] = outs;
    if (!details.empty()) j["details"] = details;
    return j;
  }

  void write(const fs::path& path) const { detail::write_text_file(path, to_json().dump(2) + "\n"); }

 private:
  mutable std::map<fs::path, std::string> digests_;
};

inline fs::path default_manifest_path(const fs::path& primary_output) {
  return primary_output.string() + ".manifest.json";
}

/// True when `manifest_path` records `stage_key` and every listed output
/// still has its recorded digest.
inline bool manifest_is_current(const fs::path& manifest_path, const std::string& stage_key,
                                const fs::path& relative_to) {
  if (!fs::exists(manifest_path)) return false;
  nlohmann::json doc;
  try {
    doc = detail::read_json_file(manifest_path, false);
  } catch (const Error&) {
    return false;
  }
  if (doc.value("stage_key", "") != stage_key || !doc.contains("outputs")) return false;
  for (const auto& [_, out] : doc["outputs"].items()) {
    const fs::path p = relative_to / out.value("path", "");
    if (!fs::exists(p) || file_sha256(p) != out.value("sha256", "")) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Inference backends for commands

struct InferenceOptions {
  enum class Mode { Live, Replay, Record };
  Mode mode = Mode::Live;
  fs::path transcript;
  std::optional<ClientConfig> client;  // from the environment when unset

  static Mode parse_mode(const std::string& s) {
    if (s == "live") return Mode::Live;
    if (s == "replay") return Mode::Replay;
    if (s == "record") return Mode::Record;
    throw ConfigError("inference mode: expected live, replay or record, got '" + s + "'");
  }
};

/// Owns whatever backend chain the options call for.
class BackendHandle {
 public:
  explicit BackendHandle(const InferenceOptions& opts) {
    using Mode = InferenceOptions::Mode;
    if (opts.mode == Mode::Replay) {
      if (opts.transcript.empty()) throw ConfigError("replay mode needs a transcript path");
      replay_ = std::make_unique<ReplayBackend>(opts.transcript);
      return;
    }
    http_ = std::make_unique<HttpBackend>(opts.client ? *opts.client : ClientConfig::from_env());
    if (opts.mode == Mode::Record) {
      if (opts.transcript.empty()) throw ConfigError("record mode needs a transcript path");
      recording_ = std::make_unique<RecordingBackend>(*http_, opts.transcript);
    }
  }

  InferenceBackend& get() {
    if (replay_) return *replay_;
    if (recording_) return *recording_;
    return *http_;
  }

  void finish() {
    if (recording_) recording_->flush();
  }

 private:
  std::unique_ptr<HttpBackend> http_;
  std::unique_ptr<ReplayBackend> replay_;
  std::unique_ptr<RecordingBackend> recording_;
};

// ---------------------------------------------------------------------------
// generate

struct GenerateArgs {
  fs::path prompts;
  fs::path output;
  std::string model;
  std::string source_model;  // defaults to model
  std::optional<fs::path> template_path;
  std::uint64_t max_tokens = 16384;
  double temperature = 0.0;
  unsigned concurrency = 4;
  InferenceOptions inference;
  std::optional<fs::path> manifest;
  std::optional<std::uint64_t> seed;
  std::string stage_name;
  fs::path manifest_root;
  std::optional<nlohmann::json> params;  // pipeline-provided params block
};

inline nlohmann::json generate_params(const GenerateArgs& a) {
  return {{"model", a.model},
          {"source_model", a.source_model.empty() ? a.model : a.source_model},
          {"max_tokens", a.max_tokens},
          {"temperature", a.temperature}};
}

struct GenerateResult {
  std::uint64_t written = 0;
  std::uint64_t failed = 0;
};

/// Generates one trace per prompt. Failed requests are left out of the
/// output; the command then reports a network error after writing what it has.
inline GenerateResult cmd_generate(const GenerateArgs& a) {
  if (a.model.empty()) throw ConfigError("model: required");
  if (a.max_tokens == 0) throw ConfigError("max_tokens: must be positive");
  if (a.concurrency < 1) throw ConfigError("concurrency: must be at least 1");
  const std::string tmpl = load_template(a.template_path);
  const auto prompts = read_prompts(a.prompts);
  BackendHandle backend(a.inference);

  std::vector<GenRequest> requests;
  requests.reserve(prompts.size());
  for (const auto& p : prompts) {
    requests.push_back({a.model, render_prompt(tmpl, p.prompt), a.max_tokens, a.temperature, false});
  }
  const auto responses = generate_batch(backend.get(), requests, a.concurrency);
  backend.finish();

  GenerateResult result;
  detail::TextOutput out(a.output);
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto& r = responses[i];
    if (r.finish_reason == FinishReason::Error) {
      ++result.failed;
      log(LogLevel::kError, "prompt '{}' failed: {}", prompts[i].id, r.error);
      continue;
    }
    CotRecord rec;
    rec.id = prompts[i].id;
    rec.prompt = prompts[i].prompt;
    rec.cot = r.text;
    rec.gold_answer = prompts[i].gold_answer;
    rec.source_model = a.source_model.empty() ? a.model : a.source_model;
    rec.subject = prompts[i].subject;
    rec.finish_reason = std::string(to_string(r.finish_reason));
    write_json_line(out.stream(), to_json(rec));
    ++result.written;
  }
  out.commit();
  if (result.failed > 0) {
    throw NetworkError(std::to_string(result.failed) + " of " + std::to_string(prompts.size()) +
                       " generation requests failed; partial output written to '" + a.output.string() + "'");
  }

  Manifest m;
  m.stage = "generate";
  m.name = a.stage_name;
  m.params = a.params ? *a.params : generate_params(a);
  m.seed = a.seed;
  m.inputs.emplace_back("prompts", a.prompts);
  if (a.template_path) m.inputs.emplace_back("template", *a.template_path);
  if (a.inference.mode == InferenceOptions::Mode::Replay) m.inputs.emplace_back("transcript", a.inference.transcript);
  m.outputs.emplace_back("output", a.output);
  m.relative_to = a.manifest_root;
  m.details["records"] = result.written;
  m.details["inference_mode"] = a.inference.mode == InferenceOptions::Mode::Live     ? "live"
                                : a.inference.mode == InferenceOptions::Mode::Replay ? "replay"
                                                                                     : "record";
  m.write(a.manifest ? *a.manifest : default_manifest_path(a.output));
  return result;
}

// ---------------------------------------------------------------------------
// curate

struct CurateArgs {
  fs::path input;
  fs::path retained;
  fs::path rejected;
  std::optional<fs::path> sft;
  FilterPolicy policy;
  std::optional<fs::path> manifest;
  std::optional<std::uint64_t> seed;
  std::string stage_name;
  fs::path manifest_root;
  std::optional<nlohmann::json> params;
};

inline CurateCounts cmd_curate(const CurateArgs& a) {
  a.policy.validate();
  TokenizerRegistry::instance().resolve(a.policy.tokenizer_id);  // fail fast on unknown ids
  std::ifstream in(a.input);
  if (!in) throw DataError("cannot read '" + a.input.string() + "'");
  detail::TextOutput retained(a.retained);
  detail::TextOutput rejected(a.rejected);
  std::optional<detail::TextOutput> sft;
  if (a.sft) sft.emplace(*a.sft);

  const CurateCounts counts = curate_stream(
      in, a.input.string(), a.policy,
      [&](const CotRecord& r) {
        write_json_line(retained.stream(), to_json(r));
        if (sft) write_json_line(sft->stream(), to_json(SftPair{r.prompt, r.cot}));
      },
      [&](const Rejected& r) { write_json_line(rejected.stream(), to_json(r)); });
  retained.commit();
  rejected.commit();
  if (sft) sft->commit();

  Manifest m;
  m.stage = "curate";
  m.name = a.stage_name;
  m.params = a.params ? *a.params : nlohmann::json(a.policy.to_json());
  m.seed = a.seed;
  m.inputs.emplace_back("input", a.input);
  if (a.policy.tokenizer_id.rfind("vocab:", 0) == 0) m.inputs.emplace_back("vocab", a.policy.tokenizer_id.substr(6));
  m.outputs.emplace_back("retained", a.retained);
  m.outputs.emplace_back("rejected", a.rejected);
  if (a.sft) m.outputs.emplace_back("sft", *a.sft);
  m.relative_to = a.manifest_root;
  m.details["tokenizer_id"] = a.policy.tokenizer_id;
  m.details["policy"] = a.policy.to_json();
  m.details["source_models"] = counts.source_models;
  m.details["counts"] = counts.to_json();
  m.write(a.manifest ? *a.manifest : default_manifest_path(a.retained));
  return counts;
}

// ---------------------------------------------------------------------------
// merge

struct MergeArgs {
  MergeConfig config;
  /// Maps a recipe path as written to the file to open; defaults to config.resolve().
  std::function<fs::path(const fs::path&)> resolve;
  fs::path output;
  unsigned threads = 1;
  std::optional<fs::path> manifest;
  std::string stage_name;
  fs::path manifest_root;
  std::optional<nlohmann::json> params;
};

inline void cmd_merge(const MergeArgs& a) {
  a.config.validate();
  const auto resolve = a.resolve ? a.resolve : [&](const fs::path& p) { return a.config.resolve(p); };
  const fs::path base_path = resolve(a.config.base);
  Checkpoint base = open_any_checkpoint(base_path);
  std::vector<Checkpoint> contributors;
  std::vector<fs::path> contributor_paths;
  for (const auto& c : a.config.contributors) {
    contributor_paths.push_back(resolve(c.path));
    contributors.push_back(open_any_checkpoint(contributor_paths.back()));
  }
  if (a.output.has_parent_path()) fs::create_directories(a.output.parent_path());
  merge_to_file(a.config, base, contributors, a.output, a.threads);

  Manifest m;
  m.stage = "merge";
  m.name = a.stage_name;
  m.params = a.params ? *a.params : a.config.to_json();
  m.seed = a.config.seed;
  m.inputs.emplace_back("base", base_path);
  for (std::size_t k = 0; k < contributor_paths.size(); ++k) {
    m.inputs.emplace_back("contributors[" + std::to_string(k) + "]", contributor_paths[k]);
  }
  m.outputs.emplace_back("output", a.output);
  m.relative_to = a.manifest_root;
  m.details["merge.mode"] = std::string(to_string(a.config.mode));
  m.details["merge.config_sha256"] = a.config.sha256();
  m.details["tensors"] = base.size();
  m.write(a.manifest ? *a.manifest : default_manifest_path(a.output));
}

// ---------------------------------------------------------------------------
// score

struct ScoreArgs {
  fs::path benchmark;
  std::string benchmark_name;
  fs::path graded_output;
  fs::path score_output;
  std::string model;
  std::optional<fs::path> template_path;
  std::uint64_t max_tokens = 16384;
  double temperature = 0.0;
  unsigned concurrency = 4;
  InferenceOptions inference;
  std::optional<fs::path> manifest;
  std::optional<std::uint64_t> seed;
  std::string stage_name;
  fs::path manifest_root;
  std::optional<nlohmann::json> params;
};

inline nlohmann::ordered_json to_json(const BenchmarkScore& s) {
  nlohmann::ordered_json j;
  j["benchmark"] = s.benchmark;
  j["n_items"] = s.n_items;
  j["n_correct"] = s.n_correct;
  j["accuracy"] = s.accuracy;
  return j;
}

/// Zero-shot exact-match evaluation of one model on one benchmark.
inline BenchmarkScore cmd_score(const ScoreArgs& a) {
  if (a.model.empty()) throw ConfigError("model: required");
  const std::string tmpl = load_template(a.template_path);
  const auto items = read_prompts(a.benchmark);
  for (const auto& p : items) {
    if (detail::trim(p.gold_answer).empty()) {
      throw DataError(a.benchmark.string() + ": item '" + p.id + "' has no gold_answer");
    }
  }
  BackendHandle backend(a.inference);
  std::vector<GenRequest> requests;
  for (const auto& p : items) requests.push_back({a.model, render_prompt(tmpl, p.prompt), a.max_tokens, a.temperature, false});
  const auto responses = generate_batch(backend.get(), requests, a.concurrency);
  backend.finish();

  std::vector<CotRecord> graded;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (responses[i].finish_reason == FinishReason::Error) {
      throw NetworkError("benchmark item '" + items[i].id + "' failed: " + responses[i].error);
    }
    CotRecord r;
    r.id = items[i].id;
    r.prompt = items[i].prompt;
    r.cot = responses[i].text;
    r.gold_answer = items[i].gold_answer;
    r.source_model = a.model;
    r.subject = items[i].subject;
    r.finish_reason = std::string(to_string(responses[i].finish_reason));
    graded.push_back(grade(std::move(r)));
  }
  const std::string name = a.benchmark_name.empty() ? a.benchmark.stem().string() : a.benchmark_name;
  const BenchmarkScore score = exact_match_accuracy(name, graded);

  {
    detail::TextOutput out(a.graded_output);
    for (const auto& r : graded) write_json_line(out.stream(), to_json(r));
    out.commit();
  }
  auto sj = to_json(score);
  sj["model"] = a.model;
  detail::write_text_file(a.score_output, sj.dump(2) + "\n");

  Manifest m;
  m.stage = "score";
  m.name = a.stage_name;
  m.params = a.params ? *a.params
                      : nlohmann::json{{"model", a.model},
                                       {"benchmark", name},
                                       {"max_tokens", a.max_tokens},
                                       {"temperature", a.temperature}};
  m.seed = a.seed;
  m.inputs.emplace_back("benchmark", a.benchmark);
  if (a.template_path) m.inputs.emplace_back("template", *a.template_path);
  if (a.inference.mode == InferenceOptions::Mode::Replay) m.inputs.emplace_back("transcript", a.inference.transcript);
  m.outputs.emplace_back("graded", a.graded_output);
  m.outputs.emplace_back("score", a.score_output);
  m.relative_to = a.manifest_root;
  m.details["score"] = to_json(score);
  m.write(a.manifest ? *a.manifest : default_manifest_path(a.score_output));
  return score;
}

// ---------------------------------------------------------------------------
// bpc

struct BpcArgs {
  fs::path texts;
  fs::path output;
  std::string model;
  std::string method;
  InferenceOptions inference;
  std::optional<fs::path> manifest;
  std::optional<std::uint64_t> seed;
  std::string stage_name;
  fs::path manifest_root;
  std::optional<nlohmann::json> params;
};

/// One text to score. Rows either carry `text` (optional `context`, optional
/// recorded `token_logprobs`) or are dataset records, in which case the trace
/// is scored conditioned on its prompt.
struct BpcInput {
  std::string id;
  std::string text;
  std::string context;
  std::optional<std::vector<TokenLogprob>> entries;
};

inline std::vector<BpcInput> read_bpc_inputs(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read '" + path.string() + "'");
  JsonlReader reader(in, path.string());
  std::vector<BpcInput> out;
  while (auto j = reader.next()) {
    if (!j->is_object()) throw DataError(reader.where() + ": expected a JSON object");
    BpcInput b;
    b.id = detail::field_string(*j, "id", reader.where(), true);
    if (j->contains("text")) {
      b.text = detail::field_string(*j, "text", reader.where(), true);
      b.context = detail::field_string(*j, "context", reader.where(), false);
    } else {
      b.text = detail::field_string(*j, "cot", reader.where(), true);
      b.context = detail::field_string(*j, "prompt", reader.where(), false);
    }
    if (j->contains("token_logprobs") && !(*j)["token_logprobs"].is_null()) {
      b.entries = logprobs_from_json((*j)["token_logprobs"], reader.where());
    }
    out.push_back(std::move(b));
  }
  return out;
}

inline BpcCell cmd_bpc(const BpcArgs& a) {
  auto inputs = read_bpc_inputs(a.texts);
  const bool need_backend = std::any_of(inputs.begin(), inputs.end(), [](const BpcInput& b) { return !b.entries; });
  if (need_backend && a.model.empty()) throw ConfigError("model: required to score texts without recorded logprobs");
  std::optional<BackendHandle> backend;
  if (need_backend) backend.emplace(a.inference);

  std::vector<BpcResult> results;
  for (auto& b : inputs) {
    if (!b.entries) b.entries = score_logprobs(backend->get(), a.model, b.text, b.context);
    try {
      results.push_back(bpc(*b.entries, b.text, b.id));
    } catch (const DataError& e) {
      throw DataError(a.texts.string() + ": " + e.what());
    }
  }
  if (backend) backend->finish();
  const BpcCell cell = pool_bpc(a.method, a.model, results);

  nlohmann::ordered_json doc;
  doc["method"] = a.method;
  doc["model"] = a.model;
  doc["pooled_bpc"] = cell.bpc;
  doc["sum_neg_log2_prob"] = cell.sum_neg_log2_prob;
  doc["utf8_len"] = cell.utf8_len;
  auto texts = nlohmann::ordered_json::array();
  for (const auto& r : results) texts.push_back(to_json(r));
  doc["texts"] = texts;
  detail::write_text_file(a.output, doc.dump(2) + "\n");

  Manifest m;
  m.stage = "bpc";
  m.name = a.stage_name;
  m.params = a.params ? *a.params : nlohmann::json{{"model", a.model}, {"method", a.method}};
  m.seed = a.seed;
  m.inputs.emplace_back("texts", a.texts);
  if (a.inference.mode == InferenceOptions::Mode::Replay && !a.inference.transcript.empty()) {
    m.inputs.emplace_back("transcript", a.inference.transcript);
  }
  m.outputs.emplace_back("output", a.output);
  m.relative_to = a.manifest_root;
  m.details["pooled_bpc"] = cell.bpc;
  m.write(a.manifest ? *a.manifest : default_manifest_path(a.output));
  return cell;
}

// ---------------------------------------------------------------------------
// report

struct ReportArgs {
  nlohmann::json spec;
  PathResolver resolve;
  /// Writes <prefix>.json, <prefix>.md and <prefix>.<table>.csv.
  fs::path output_prefix;
  bool csv = true;
  std::optional<fs::path> manifest;
  std::optional<std::uint64_t> seed;
  std::string stage_name;
  fs::path manifest_root;
  std::optional<nlohmann::json> params;
  std::vector<std::pair<std::string, fs::path>> inputs;  // for the manifest
};

/// Paths a report spec reads, in spec order.
inline std::vector<std::string> report_spec_paths(const nlohmann::json& spec) {
  std::vector<std::string> out;
  if (spec.contains("scores")) {
    for (const auto& row : spec["scores"]) {
      if (!row.contains("benchmarks") || !row["benchmarks"].is_object()) continue;
      for (const auto& [_, v] : row["benchmarks"].items()) {
        if (v.is_string()) out.push_back(v.get<std::string>());
      }
    }
  }
  if (spec.contains("bpc")) {
    for (const auto& c : spec["bpc"]) {
      if (c.contains("path") && c["path"].is_string()) out.push_back(c["path"].get<std::string>());
    }
  }
  for (const char* key : {"lengths", "markers"}) {
    if (spec.contains(key) && spec[key].contains("groups") && spec[key]["groups"].is_object()) {
      for (const auto& [_, v] : spec[key]["groups"].items()) {
        if (v.is_string()) out.push_back(v.get<std::string>());
      }
    }
  }
  return out;
}

inline fs::path with_suffix(const fs::path& prefix, const std::string& suffix) {
  return prefix.string() + suffix;
}

inline ScoreReport cmd_report(const ReportArgs& a) {
  ScoreReport rep;
  try {
    rep = build_report(a.spec, a.resolve);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("report spec: ") + e.what());
  }
  const fs::path json_path = with_suffix(a.output_prefix, ".json");
  const fs::path md_path = with_suffix(a.output_prefix, ".md");
  detail::write_text_file(json_path, to_json(rep).dump(2) + "\n");
  detail::write_text_file(md_path, to_markdown(rep));

  Manifest m;
  m.stage = "report";
  m.name = a.stage_name;
  m.params = a.params ? *a.params : a.spec;
  m.seed = a.seed;
  m.inputs = a.inputs;
  if (m.inputs.empty()) {
    for (const auto& p : report_spec_paths(a.spec)) m.inputs.emplace_back(p, a.resolve(p));
  }
  m.outputs.emplace_back("json", json_path);
  m.outputs.emplace_back("markdown", md_path);
  if (a.csv) {
    for (const auto& [table, text] : to_csv(rep)) {
      const fs::path p = with_suffix(a.output_prefix, "." + table + ".csv");
      detail::write_text_file(p, text);
      m.outputs.emplace_back(table + "_csv", p);
    }
  }
  m.relative_to = a.manifest_root;
  m.write(a.manifest ? *a.manifest : with_suffix(a.output_prefix, ".manifest.json"));
  return rep;
}

// ---------------------------------------------------------------------------
// train (external stub)

struct TrainArgs {
  fs::path input;    // SFT pairs
  fs::path out_dir;  // receives train.jsonl and README.md
  std::string student;
  nlohmann::ordered_json hyperparameters;
  std::optional<fs::path> manifest;
  std::optional<std::uint64_t> seed;
  std::string stage_name;
  fs::path manifest_root;
  std::optional<nlohmann::json> params;
};

inline nlohmann::ordered_json default_train_hyperparameters() {
  nlohmann::ordered_json h;
  h["batch_size"] = 32;
  h["learning_rate"] = 1e-5;
  h["lr_schedule"] = "cosine";
  h["weight_decay"] = 0.01;
  h["epochs"] = 2;
  return h;
}

/// Emits the exact SFT file and a README describing the intended run. No
/// training happens here; an external trainer consumes the directory.
inline void cmd_train_stub(const TrainArgs& a) {
  std::ifstream in(a.input, std::ios::binary);
  if (!in) throw DataError("cannot read SFT data '" + a.input.string() + "'");
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t pairs = 0;
  {
    std::istringstream lines(data);
    JsonlReader reader(lines, a.input.string());
    while (auto j = reader.next()) {
      if (!j->is_object() || !j->contains("instruction") || !j->contains("response")) {
        throw DataError(reader.where() + ": SFT rows need instruction and response");
      }
      ++pairs;
    }
  }
  const fs::path data_path = a.out_dir / "train.jsonl";
  const fs::path readme_path = a.out_dir / "README.md";
  detail::write_text_file(data_path, data);

  nlohmann::ordered_json hp = default_train_hyperparameters();
  for (const auto& [k, v] : a.hyperparameters.items()) hp[k] = v;
  std::string readme = "# External training stage\n\n";
  readme += "This directory is input for an external supervised fine-tuning run. ";
  readme += "The toolkit does not train models.\n\n";
  readme += "- student: " + (a.student.empty() ? std::string("(unspecified)") : a.student) + "\n";
  readme += "- data: train.jsonl (" + std::to_string(pairs) + " instruction/response pairs)\n";
  readme += "- data sha256: " + sha256_hex(data) + "\n\n";
  readme += "| Setting | Value |\n| --- | --- |\n";
  for (const auto& [k, v] : hp.items()) readme += "| " + k + " | " + (v.is_string() ? v.get<std::string>() : v.dump()) + " |\n";
  detail::write_text_file(readme_path, readme);

  Manifest m;
  m.stage = "train";
  m.name = a.stage_name;
  m.params = a.params ? *a.params : nlohmann::json{{"student", a.student}, {"hyperparameters", hp}};
  m.seed = a.seed;
  m.inputs.emplace_back("input", a.input);
  m.outputs.emplace_back("data", data_path);
  m.outputs.emplace_back("readme", readme_path);
  m.relative_to = a.manifest_root;
  m.details["pairs"] = pairs;
  m.write(a.manifest ? *a.manifest : a.out_dir / "manifest.json");
}

// ---------------------------------------------------------------------------
// Pipeline

struct StageSpec {
  std::string name;
  std::string kind;
  nlohmann::json params;
};

struct PipelineConfig {
  fs::path config_dir;
  fs::path workspace;
  std::uint64_t seed = 0;
  nlohmann::json inference = nlohmann::json::object();
  std::vector<StageSpec> stages;
  std::string sha256;

  static PipelineConfig from_json(const nlohmann::json& doc, const fs::path& config_dir) {
    if (!doc.is_object()) throw ConfigError("pipeline config must be an object");
    for (const auto& [key, _] : doc.items()) {
      if (key != "workspace" && key != "seed" && key != "inference" && key != "stages") {
        throw ConfigError(key + ": unknown pipeline key");
      }
    }
    PipelineConfig c;
    c.config_dir = config_dir;
    if (!doc.contains("workspace") || !doc["workspace"].is_string()) throw ConfigError("workspace: required string");
    c.workspace = doc["workspace"].get<std::string>();
    if (c.workspace.is_relative()) c.workspace = config_dir / c.workspace;
    if (doc.contains("seed")) {
      if (!doc["seed"].is_number_unsigned()) throw ConfigError("seed: must be a non-negative integer");
      c.seed = doc["seed"].get<std::uint64_t>();
    }
    if (doc.contains("inference")) {
      if (!doc["inference"].is_object()) throw ConfigError("inference: must be an object");
      c.inference = doc["inference"];
    }
    if (!doc.contains("stages") || !doc["stages"].is_array() || doc["stages"].empty()) {
      throw ConfigError("stages: required non-empty list");
    }
    static const std::regex kName("[A-Za-z0-9_][A-Za-z0-9_.-]*");
    std::set<std::string> names;
    std::size_t i = 0;
    for (const auto& s : doc["stages"]) {
      const std::string where = "stages[" + std::to_string(i++) + "]";
      if (!s.is_object()) throw ConfigError(where + ": must be an object");
      StageSpec st;
      if (!s.contains("name") || !s["name"].is_string()) throw ConfigError(where + ".name: required string");
      if (!s.contains("kind") || !s["kind"].is_string()) throw ConfigError(where + ".kind: required string");
      st.name = s["name"].get<std::string>();
      st.kind = s["kind"].get<std::string>();
      if (!std::regex_match(st.name, kName)) throw ConfigError(where + ".name: invalid stage name '" + st.name + "'");
      if (!names.insert(st.name).second) throw ConfigError(where + ".name: duplicate stage name '" + st.name + "'");
      st.params = s;
      st.params.erase("name");
      st.params.erase("kind");
      c.stages.push_back(std::move(st));
    }
    c.sha256 = sha256_hex(doc.dump());
    return c;
  }
};

inline PipelineConfig load_pipeline_config(const fs::path& path) {
  return PipelineConfig::from_json(detail::read_json_file(path, true), path.parent_path());
}

namespace detail {

struct StageShape {
  std::vector<std::string> allowed;  // permitted parameter keys
  std::string primary;               // output used by a bare @name reference
};

inline const std::map<std::string, StageShape>& stage_shapes() {
  static const std::map<std::string, StageShape> kShapes = {
      {"generate",
       {{"prompts", "model", "source_model", "template", "max_tokens", "temperature", "concurrency"}, "output"}},
      {"curate", {{"input", "l_max", "require_correct", "tokenizer"}, "retained"}},
      {"merge", {{"recipe", "threads"}, "output"}},
      {"score",
       {{"benchmark", "benchmark_name", "model", "template", "max_tokens", "temperature", "concurrency"}, "graded"}},
      {"bpc", {{"texts", "model", "method"}, "output"}},
      {"report", {{"spec"}, "json"}},
      {"train", {{"input", "student", "hyperparameters"}, "data"}},
  };
  return kShapes;
}

/// Output files of a stage, keyed by output label.
inline std::map<std::string, fs::path> stage_outputs(const StageSpec& st, const fs::path& ws) {
  const std::string& n = st.name;
  if (st.kind == "generate") return {{"output", ws / "datasets" / (n + ".jsonl")}};
  if (st.kind == "curate") {
    return {{"retained", ws / "datasets" / (n + ".retained.jsonl")},
            {"rejected", ws / "datasets" / (n + ".rejected.jsonl")},
            {"sft", ws / "datasets" / (n + ".sft.jsonl")}};
  }
  if (st.kind == "merge") return {{"output", ws / "checkpoints" / (n + ".safetensors")}};
  if (st.kind == "score") {
    return {{"graded", ws / "reports" / (n + ".graded.jsonl")}, {"score", ws / "reports" / (n + ".score.json")}};
  }
  if (st.kind == "bpc") return {{"output", ws / "reports" / (n + ".bpc.json")}};
  if (st.kind == "report") return {{"json", ws / "reports" / (n + ".json")}, {"markdown", ws / "reports" / (n + ".md")}};
  if (st.kind == "train") {
    return {{"data", ws / "checkpoints" / n / "train.jsonl"}, {"readme", ws / "checkpoints" / n / "README.md"}};
  }
  return {};
}

}  // namespace detail

struct RunOptions {
  unsigned threads = 1;
  std::optional<InferenceOptions> inference;  // overrides the config block
};

struct RunSummary {
  std::vector<std::string> executed;
  std::vector<std::string> skipped;
};

/// Exclusive advisory lock on the workspace for the lifetime of the object.
class WorkspaceLock {
 public:
  explicit WorkspaceLock(const fs::path& workspace) {
    fs::create_directories(workspace);
    const fs::path path = workspace / ".midcot.lock";
    fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0) throw DataError("cannot open lock file '" + path.string() + "'");
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      fd_ = -1;
      throw ConfigError("workspace '" + workspace.string() + "' is in use by another run");
    }
  }
  WorkspaceLock(const WorkspaceLock&) = delete;
  WorkspaceLock& operator=(const WorkspaceLock&) = delete;
  ~WorkspaceLock() {
    if (fd_ >= 0) {
      ::flock(fd_, LOCK_UN);
      ::close(fd_);
    }
  }

 private:
  int fd_ = -1;
};

/// Resolves stage inputs. "@stage" names a stage's primary output and
/// "@stage:label" a specific one; anything else is a path relative to the
/// config file.
class PipelineResolver {
 public:
  PipelineResolver(const PipelineConfig& cfg) : cfg_(cfg) {}

  void declare(const StageSpec& st) {
    const auto outs = detail::stage_outputs(st, cfg_.workspace);
    for (const auto& [label, path] : outs) outputs_[st.name][label] = path;
    primary_[st.name] = detail::stage_shapes().at(st.kind).primary;
  }

  fs::path resolve(const std::string& ref, const std::string& where) const {
    if (ref.empty()) throw ConfigError(where + ": empty path");
    if (ref[0] == '@') {
      const auto colon = ref.find(':');
      const std::string stage = ref.substr(1, colon == std::string::npos ? std::string::npos : colon - 1);
      auto it = outputs_.find(stage);
      if (it == outputs_.end()) {
        throw ConfigError(where + ": '" + ref + "' does not name an earlier stage");
      }
      const std::string label = colon == std::string::npos ? primary_.at(stage) : ref.substr(colon + 1);
      auto out = it->second.find(label);
      if (out == it->second.end()) throw ConfigError(where + ": stage '" + stage + "' has no output '" + label + "'");
      return out->second;
    }
    fs::path p = ref;
    if (p.is_relative()) p = cfg_.config_dir / p;
    return p;
  }

  /// Like resolve(), and additionally requires plain paths to exist.
  fs::path check(const std::string& ref, const std::string& where) const {
    fs::path p = resolve(ref, where);
    if (ref[0] != '@' && !fs::exists(p)) throw ConfigError(where + ": input '" + ref + "' does not exist");
    return p;
  }

 private:
  const PipelineConfig& cfg_;
  std::map<std::string, std::map<std::string, fs::path>> outputs_;
  std::map<std::string, std::string> primary_;
};

namespace detail {

inline const nlohmann::json& require(const StageSpec& st, const char* key) {
  if (!st.params.contains(key)) throw ConfigError("stage '" + st.name + "': missing '" + key + "'");
  return st.params[key];
}

inline std::string require_string(const StageSpec& st, const char* key) {
  const auto& v = require(st, key);
  if (!v.is_string()) throw ConfigError("stage '" + st.name + "': '" + key + "' must be a string");
  return v.get<std::string>();
}

template <typename T>
T param_or(const StageSpec& st, const char* key, T fallback) {
  if (!st.params.contains(key)) return fallback;
  try {
    return st.params[key].get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("stage '" + st.name + "': '" + key + "' has the wrong type");
  }
}

/// Every input reference of a stage, as (where, ref) pairs.
inline std::vector<std::pair<std::string, std::string>> stage_inputs(const StageSpec& st) {
  std::vector<std::pair<std::string, std::string>> refs;
  const auto at = [&](const std::string& key) { return "stage '" + st.name + "'." + key; };
  const auto add_string = [&](const char* key, bool required) {
    if (!st.params.contains(key)) {
      if (required) throw ConfigError(at(key) + ": required");
      return;
    }
    if (!st.params[key].is_string()) throw ConfigError(at(key) + ": must be a string");
    refs.emplace_back(at(key), st.params[key].get<std::string>());
  };
  if (st.kind == "generate") {
    add_string("prompts", true);
    add_string("template", false);
  } else if (st.kind == "curate" || st.kind == "train") {
    add_string("input", true);
  } else if (st.kind == "score") {
    add_string("benchmark", true);
    add_string("template", false);
  } else if (st.kind == "bpc") {
    add_string("texts", true);
  } else if (st.kind == "merge") {
    const auto& r = require(st, "recipe");
    if (!r.is_object()) throw ConfigError(at("recipe") + ": must be an object");
    if (r.contains("base") && r["base"].is_string()) refs.emplace_back(at("recipe.base"), r["base"].get<std::string>());
    if (r.contains("contributors") && r["contributors"].is_array()) {
      for (std::size_t k = 0; k < r["contributors"].size(); ++k) {
        const auto& c = r["contributors"][k];
        if (c.is_object() && c.contains("path") && c["path"].is_string()) {
          refs.emplace_back(at("recipe.contributors[" + std::to_string(k) + "].path"), c["path"].get<std::string>());
        }
      }
    }
  } else if (st.kind == "report") {
    const auto& spec = require(st, "spec");
    if (!spec.is_object()) throw ConfigError(at("spec") + ": must be an object");
    for (const auto& p : report_spec_paths(spec)) refs.emplace_back(at("spec"), p);
  }
  return refs;
}

}  // namespace detail

/// Checks the whole config before anything runs: known stage kinds and keys,
/// inputs that name earlier stages or existing files, a usable inference block.
inline PipelineResolver validate_pipeline(const PipelineConfig& cfg, const RunOptions& opts) {
  PipelineResolver resolver(cfg);
  bool needs_inference = false;
  for (const auto& st : cfg.stages) {
    auto shape = detail::stage_shapes().find(st.kind);
    if (shape == detail::stage_shapes().end()) {
      throw ConfigError("stage '" + st.name + "': unknown kind '" + st.kind +
                        "' (expected generate, curate, merge, score, bpc, report or train)");
    }
    for (const auto& [key, _] : st.params.items()) {
      if (std::find(shape->second.allowed.begin(), shape->second.allowed.end(), key) == shape->second.allowed.end()) {
        throw ConfigError("stage '" + st.name + "': unknown key '" + key + "' for kind " + st.kind);
      }
    }
    for (const auto& [where, ref] : detail::stage_inputs(st)) resolver.check(ref, where);
    if (st.kind == "merge") {
      nlohmann::json recipe = st.params["recipe"];
      if (!recipe.contains("seed")) recipe["seed"] = cfg.seed;
      MergeConfig::from_json(recipe);  // field validation only
    }
    if (st.kind == "curate") {
      const auto tok = detail::param_or<std::string>(st, "tokenizer", "whitespace");
      TokenizerRegistry::instance().resolve(tok.rfind("vocab:", 0) == 0 ? "vocab:" + resolver.check(tok.substr(6), "stage '" + st.name + "'.tokenizer").string() : tok);
      if (detail::param_or<std::uint64_t>(st, "l_max", 16384) == 0) {
        throw ConfigError("stage '" + st.name + "'.l_max: must be positive");
      }
    }
    if (st.kind == "generate" || st.kind == "score") {
      detail::require_string(st, "model");
      needs_inference = true;
    }
    if (st.kind == "bpc") needs_inference = true;
    resolver.declare(st);
  }
  if (needs_inference && !opts.inference) {
    const std::string mode = cfg.inference.value("mode", "live");
    const auto m = InferenceOptions::parse_mode(mode);
    if (m != InferenceOptions::Mode::Live) {
      if (!cfg.inference.contains("transcript") || !cfg.inference["transcript"].is_string()) {
        throw ConfigError("inference.transcript: required for " + mode + " mode");
      }
      if (m == InferenceOptions::Mode::Replay) resolver.check(cfg.inference["transcript"].get<std::string>(), "inference.transcript");
    }
    if (m != InferenceOptions::Mode::Replay) ClientConfig::from_env().validate();
  }
  return resolver;
}

inline InferenceOptions pipeline_inference(const PipelineConfig& cfg, const PipelineResolver& resolver,
                                           const RunOptions& opts) {
  if (opts.inference) return *opts.inference;
  InferenceOptions io;
  io.mode = InferenceOptions::parse_mode(cfg.inference.value("mode", "live"));
  if (cfg.inference.contains("transcript")) {
    io.transcript = resolver.resolve(cfg.inference["transcript"].get<std::string>(), "inference.transcript");
  }
  return io;
}

/// Runs the stages in order, skipping any whose manifest already matches its
/// parameters and input bytes. The first failure aborts the run.
inline RunSummary cmd_run(const PipelineConfig& cfg, const RunOptions& opts = {}) {
  PipelineResolver resolver = validate_pipeline(cfg, opts);
  WorkspaceLock lock(cfg.workspace);
  for (const char* dir : {"checkpoints", "datasets", "reports", "manifests"}) fs::create_directories(cfg.workspace / dir);
  const InferenceOptions inference = pipeline_inference(cfg, resolver, opts);

  RunSummary summary;
  for (const auto& st : cfg.stages) {
    const auto outputs = detail::stage_outputs(st, cfg.workspace);
    const fs::path manifest_path = cfg.workspace / "manifests" / (st.name + ".json");
    const auto in = [&](const char* key) {
      return resolver.resolve(st.params[key].get<std::string>(), "stage '" + st.name + "'." + key);
    };

    // Assemble the manifest skeleton first so the resume check sees the same key.
    Manifest probe;
    probe.stage = st.kind;
    probe.params = st.params;
    probe.seed = cfg.seed;
    if (st.kind == "merge" && st.params["recipe"].contains("seed")) {
      probe.seed = st.params["recipe"]["seed"].get<std::uint64_t>();
    }
    for (const auto& [where, ref] : detail::stage_inputs(st)) probe.inputs.emplace_back(ref, resolver.resolve(ref, where));
    const bool uses_transcript =
        (st.kind == "generate" || st.kind == "score" || st.kind == "bpc") && inference.mode == InferenceOptions::Mode::Replay;
    if (uses_transcript) probe.inputs.emplace_back("transcript", inference.transcript);
    if (st.kind == "curate") {
      const auto tok = detail::param_or<std::string>(st, "tokenizer", "whitespace");
      if (tok.rfind("vocab:", 0) == 0) probe.inputs.emplace_back("vocab", resolver.resolve(tok.substr(6), "tokenizer"));
    }

    bool inputs_ready = true;
    for (const auto& [_, p] : probe.inputs) inputs_ready = inputs_ready && fs::exists(p);
    if (inputs_ready && manifest_is_current(manifest_path, probe.stage_key(), cfg.workspace)) {
      log(LogLevel::kInfo, "stage {}: up to date", st.name);
      summary.skipped.push_back(st.name);
      continue;
    }
    log(LogLevel::kInfo, "stage {}: running {}", st.name, st.kind);

    try {
      if (st.kind == "generate") {
        GenerateArgs a;
        a.prompts = in("prompts");
        a.output = outputs.at("output");
        a.model = detail::require_string(st, "model");
        a.source_model = detail::param_or<std::string>(st, "source_model", a.model);
        if (st.params.contains("template")) a.template_path = in("template");
        a.max_tokens = detail::param_or<std::uint64_t>(st, "max_tokens", 16384);
        a.temperature = detail::param_or<double>(st, "temperature", 0.0);
        a.concurrency = detail::param_or<unsigned>(st, "concurrency", 4);
        a.inference = inference;
        a.manifest = manifest_path;
        a.seed = cfg.seed;
        a.stage_name = st.name;
        a.manifest_root = cfg.workspace;
        a.params = st.params;
        cmd_generate(a);
      } else if (st.kind == "curate") {
        CurateArgs a;
        a.input = in("input");
        a.retained = outputs.at("retained");
        a.rejected = outputs.at("rejected");
        a.sft = outputs.at("sft");
        a.policy.max_length = detail::param_or<std::uint64_t>(st, "l_max", 16384);
        a.policy.require_correct = detail::param_or<bool>(st, "require_correct", true);
        std::string tok = detail::param_or<std::string>(st, "tokenizer", "whitespace");
        if (tok.rfind("vocab:", 0) == 0) tok = "vocab:" + resolver.resolve(tok.substr(6), "tokenizer").string();
        a.policy.tokenizer_id = tok;
        a.manifest = manifest_path;
        a.seed = cfg.seed;
        a.stage_name = st.name;
        a.manifest_root = cfg.workspace;
        a.params = st.params;
        cmd_curate(a);
      } else if (st.kind == "merge") {
        nlohmann::json recipe = st.params["recipe"];
        if (!recipe.contains("seed")) recipe["seed"] = cfg.seed;
        MergeArgs a;
        a.config = MergeConfig::from_json(recipe);
        a.resolve = [&](const fs::path& p) { return resolver.resolve(p.generic_string(), "stage '" + st.name + "'.recipe"); };
        a.output = outputs.at("output");
        a.threads = detail::param_or<unsigned>(st, "threads", opts.threads);
        a.manifest = manifest_path;
        a.stage_name = st.name;
        a.manifest_root = cfg.workspace;
        a.params = st.params;
        cmd_merge(a);
      } else if (st.kind == "score") {
        ScoreArgs a;
        a.benchmark = in("benchmark");
        a.benchmark_name = detail::param_or<std::string>(st, "benchmark_name", a.benchmark.stem().string());
        a.graded_output = outputs.at("graded");
        a.score_output = outputs.at("score");
        a.model = detail::require_string(st, "model");
        if (st.params.contains("template")) a.template_path = in("template");
        a.max_tokens = detail::param_or<std::uint64_t>(st, "max_tokens", 16384);
        a.temperature = detail::param_or<double>(st, "temperature", 0.0);
        a.concurrency = detail::param_or<unsigned>(st, "concurrency", 4);
        a.inference = inference;
        a.manifest = manifest_path;
        a.seed = cfg.seed;
        a.stage_name = st.name;
        a.manifest_root = cfg.workspace;
        a.params = st.params;
        cmd_score(a);
      } else if (st.kind == "bpc") {
        BpcArgs a;
        a.texts = in("texts");
        a.output = outputs.at("output");
        a.model = detail::param_or<std::string>(st, "model", "");
        a.method = detail::param_or<std::string>(st, "method", st.name);
        a.inference = inference;
        a.manifest = manifest_path;
        a.seed = cfg.seed;
        a.stage_name = st.name;
        a.manifest_root = cfg.workspace;
        a.params = st.params;
        cmd_bpc(a);
      } else if (st.kind == "report") {
        ReportArgs a;
        a.spec = st.params["spec"];
        a.resolve = [&](const std::string& ref) { return resolver.resolve(ref, "stage '" + st.name + "'.spec"); };
        a.output_prefix = cfg.workspace / "reports" / st.name;
        a.manifest = manifest_path;
        a.seed = cfg.seed;
        a.stage_name = st.name;
        a.manifest_root = cfg.workspace;
        a.params = st.params;
        a.inputs = probe.inputs;
        cmd_report(a);
      } else if (st.kind == "train") {
        TrainArgs a;
        a.input = in("input");
        a.out_dir = cfg.workspace / "checkpoints" / st.name;
        a.student = detail::param_or<std::string>(st, "student", "");
        if (st.params.contains("hyperparameters")) a.hyperparameters = st.params["hyperparameters"];
        a.manifest = manifest_path;
        a.seed = cfg.seed;
        a.stage_name = st.name;
        a.manifest_root = cfg.workspace;
        a.params = st.params;
        cmd_train_stub(a);
      }
    } catch (const ConfigError& e) {
      throw ConfigError("stage '" + st.name + "': " + e.what());
    } catch (const CapabilityError& e) {
      throw CapabilityError("stage '" + st.name + "': " + e.what());
    } catch (const NetworkError& e) {
      throw NetworkError("stage '" + st.name + "': " + e.what());
    } catch (const CacheMissError&) {
      throw;
    } catch (const DataError& e) {
      throw DataError("stage '" + st.name + "': " + e.what());
    }
    summary.executed.push_back(st.name);
  }
  return summary;
}

}  // namespace midcot
