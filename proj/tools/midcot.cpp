// Copyright 2026 The midcot Authors
// SPDX-License-Identifier: Apache-2.0
//
// midcot command-line entry point.
// Exit codes: 0 ok, 2 config/usage, 3 data, 4 network/capability.

#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "midcot/midcot.hpp"

namespace fs = std::filesystem;
using namespace midcot;

namespace {

struct InferenceFlags {
  std::string mode = "live";
  std::string transcript;
  std::string generate_route = "chat";
  std::string scoring_route = "echo";
  int timeout_s = 600;
  int max_attempts = 5;

  void add(CLI::App* cmd) {
    cmd->add_option("--mode", mode, "live, replay or record")
        ->check(CLI::IsMember({"live", "replay", "record"}))
        ->capture_default_str();
    cmd->add_option("--transcript", transcript, "Recorded transcript JSONL (replay/record)");
    cmd->add_option("--generate-route", generate_route, "chat or completions")
        ->check(CLI::IsMember({"chat", "completions"}))
        ->capture_default_str();
    cmd->add_option("--scoring-route", scoring_route, "echo or prompt_logprobs")
        ->check(CLI::IsMember({"echo", "prompt_logprobs"}))
        ->capture_default_str();
    cmd->add_option("--timeout", timeout_s, "Per-request timeout in seconds")->capture_default_str();
    cmd->add_option("--max-attempts", max_attempts, "Attempts per request, including the first")
        ->capture_default_str();
  }

  InferenceOptions options() const {
    InferenceOptions io;
    io.mode = InferenceOptions::parse_mode(mode);
    io.transcript = transcript;
    if (io.mode != InferenceOptions::Mode::Replay) {
      ClientConfig c = ClientConfig::from_env();
      c.timeout = std::chrono::seconds(timeout_s);
      c.generate_route = generate_route == "chat" ? GenerateRoute::Chat : GenerateRoute::Completions;
      c.scoring_route = scoring_route == "echo" ? ScoringRoute::Echo : ScoringRoute::PromptLogprobs;
      c.retry.max_attempts = max_attempts;
      io.client = c;
    }
    return io;
  }
};

std::optional<fs::path> opt_path(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return fs::path(s);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Checkpoint merging, CoT curation and evaluation metrics"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));
  std::string log_level;
  app.add_option("--log-level", log_level, "debug, info, warn, error or off")
      ->check(CLI::IsMember({"debug", "info", "warn", "error", "off"}));

  // merge
  auto* merge_cmd = app.add_subcommand("merge", "Merge checkpoints from a recipe");
  std::string merge_config, merge_output, merge_manifest;
  unsigned merge_threads = default_threads();
  merge_cmd->add_option("--config", merge_config, "Merge recipe (JSON)")->required();
  merge_cmd->add_option("--output", merge_output, "Output .safetensors path")->required();
  merge_cmd->add_option("--threads", merge_threads, "Worker threads")->capture_default_str();
  merge_cmd->add_option("--manifest", merge_manifest, "Manifest path (default: <output>.manifest.json)");

  // curate
  auto* curate_cmd = app.add_subcommand("curate", "Filter CoT records by correctness and length");
  std::string cur_in, cur_retained, cur_rejected, cur_sft, cur_manifest;
  FilterPolicy policy;
  curate_cmd->add_option("--input", cur_in, "Input records (JSONL)")->required();
  curate_cmd->add_option("--retained", cur_retained, "Retained records output")->required();
  curate_cmd->add_option("--rejected", cur_rejected, "Rejected records output")->required();
  curate_cmd->add_option("--sft", cur_sft, "Also write instruction/response pairs here");
  curate_cmd->add_option("--l-max", policy.max_length, "Maximum CoT length in tokens (inclusive)")
      ->capture_default_str();
  curate_cmd->add_option("--require-correct", policy.require_correct, "Reject records with wrong answers")
      ->capture_default_str();
  curate_cmd->add_option("--tokenizer", policy.tokenizer_id, "bytes, whitespace or vocab:<path>")
      ->capture_default_str();
  curate_cmd->add_option("--manifest", cur_manifest, "Manifest path (default: <retained>.manifest.json)");

  // generate
  auto* gen_cmd = app.add_subcommand("generate", "Generate CoT traces for a prompt set");
  GenerateArgs gen;
  std::string gen_prompts, gen_output, gen_template, gen_manifest;
  InferenceFlags gen_inf;
  gen_cmd->add_option("--prompts", gen_prompts, "Prompt set (JSONL with id, prompt, gold_answer)")->required();
  gen_cmd->add_option("--output", gen_output, "Output records (JSONL)")->required();
  gen_cmd->add_option("--model", gen.model, "Model name sent to the server")->required();
  gen_cmd->add_option("--source-model", gen.source_model, "Label stored in records (default: model)");
  gen_cmd->add_option("--template", gen_template, "Prompt template with a {prompt} slot");
  gen_cmd->add_option("--max-tokens", gen.max_tokens, "Completion token limit")->capture_default_str();
  gen_cmd->add_option("--temperature", gen.temperature, "Sampling temperature")->capture_default_str();
  gen_cmd->add_option("--concurrency", gen.concurrency, "Requests in flight")->capture_default_str();
  gen_cmd->add_option("--manifest", gen_manifest, "Manifest path (default: <output>.manifest.json)");
  gen_inf.add(gen_cmd);

  // score
  auto* score_cmd = app.add_subcommand("score", "Zero-shot exact-match accuracy on a benchmark");
  ScoreArgs sc;
  std::string sc_bench, sc_graded, sc_output, sc_template, sc_manifest;
  InferenceFlags sc_inf;
  score_cmd->add_option("--benchmark", sc_bench, "Benchmark items (JSONL with id, prompt, gold_answer)")->required();
  score_cmd->add_option("--name", sc.benchmark_name, "Benchmark name (default: file stem)");
  score_cmd->add_option("--graded", sc_graded, "Graded records output (JSONL)")->required();
  score_cmd->add_option("--output", sc_output, "Score output (JSON)")->required();
  score_cmd->add_option("--model", sc.model, "Model name")->required();
  score_cmd->add_option("--template", sc_template, "Prompt template with a {prompt} slot");
  score_cmd->add_option("--max-tokens", sc.max_tokens, "Completion token limit")->capture_default_str();
  score_cmd->add_option("--temperature", sc.temperature, "Sampling temperature")->capture_default_str();
  score_cmd->add_option("--concurrency", sc.concurrency, "Requests in flight")->capture_default_str();
  score_cmd->add_option("--manifest", sc_manifest, "Manifest path (default: <output>.manifest.json)");
  sc_inf.add(score_cmd);

  // bpc
  auto* bpc_cmd = app.add_subcommand("bpc", "Bits per UTF-8 byte of texts under a model");
  BpcArgs bp;
  std::string bp_texts, bp_output, bp_manifest;
  InferenceFlags bp_inf;
  bpc_cmd->add_option("--texts", bp_texts, "Texts (JSONL: id, text[, context][, token_logprobs]) or records")
      ->required();
  bpc_cmd->add_option("--output", bp_output, "Result (JSON)")->required();
  bpc_cmd->add_option("--model", bp.model, "Scoring model");
  bpc_cmd->add_option("--method", bp.method, "Method label for the report table");
  bpc_cmd->add_option("--manifest", bp_manifest, "Manifest path (default: <output>.manifest.json)");
  bp_inf.add(bpc_cmd);

  // report
  auto* report_cmd = app.add_subcommand("report", "Render a score report from a spec");
  std::string rep_spec, rep_prefix, rep_manifest;
  bool rep_no_csv = false;
  report_cmd->add_option("--spec", rep_spec, "Report spec (JSON)")->required();
  report_cmd->add_option("--output-prefix", rep_prefix, "Writes <prefix>.json, <prefix>.md, <prefix>.<table>.csv")
      ->required();
  report_cmd->add_flag("--no-csv", rep_no_csv, "Skip CSV tables");
  report_cmd->add_option("--manifest", rep_manifest, "Manifest path (default: <prefix>.manifest.json)");

  // run
  auto* run_cmd = app.add_subcommand("run", "Run a pipeline config in its workspace");
  std::string run_config, run_mode, run_transcript;
  unsigned run_threads = default_threads();
  run_cmd->add_option("--config", run_config, "Pipeline config (JSON)")->required();
  run_cmd->add_option("--threads", run_threads, "Worker threads for merge stages")->capture_default_str();
  run_cmd->add_option("--mode", run_mode, "Override the inference mode: live, replay or record")
      ->check(CLI::IsMember({"live", "replay", "record"}));
  run_cmd->add_option("--transcript", run_transcript, "Override the transcript path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ExitCode::kConfig);
  }

  if (!log_level.empty()) {
    const LogLevel lv = log_level == "debug" ? LogLevel::kDebug
                        : log_level == "info" ? LogLevel::kInfo
                        : log_level == "warn" ? LogLevel::kWarn
                        : log_level == "error" ? LogLevel::kError
                                               : LogLevel::kOff;
    Logger::instance().set_level(lv);
  }

  try {
    if (*merge_cmd) {
      MergeArgs a;
      a.config = load_merge_config(merge_config);
      a.output = merge_output;
      a.threads = merge_threads;
      a.manifest = opt_path(merge_manifest);
      cmd_merge(a);
      std::cout << merge_output << '\n';
    } else if (*curate_cmd) {
      CurateArgs a;
      a.input = cur_in;
      a.retained = cur_retained;
      a.rejected = cur_rejected;
      a.sft = opt_path(cur_sft);
      a.policy = policy;
      a.manifest = opt_path(cur_manifest);
      const CurateCounts c = cmd_curate(a);
      std::cout << c.to_json().dump() << '\n';
    } else if (*gen_cmd) {
      gen.prompts = gen_prompts;
      gen.output = gen_output;
      gen.template_path = opt_path(gen_template);
      gen.manifest = opt_path(gen_manifest);
      gen.inference = gen_inf.options();
      const GenerateResult r = cmd_generate(gen);
      std::cout << "wrote " << r.written << " records to " << gen_output << '\n';
    } else if (*score_cmd) {
      sc.benchmark = sc_bench;
      sc.graded_output = sc_graded;
      sc.score_output = sc_output;
      sc.template_path = opt_path(sc_template);
      sc.manifest = opt_path(sc_manifest);
      sc.inference = sc_inf.options();
      const BenchmarkScore s = cmd_score(sc);
      std::cout << to_json(s).dump() << '\n';
    } else if (*bpc_cmd) {
      bp.texts = bp_texts;
      bp.output = bp_output;
      bp.manifest = opt_path(bp_manifest);
      bp.inference = bp_inf.options();
      const BpcCell cell = cmd_bpc(bp);
      std::cout << fmt::format("bpc {:.6f} over {} texts ({} bytes)", cell.bpc, cell.n_texts, cell.utf8_len) << '\n';
    } else if (*report_cmd) {
      ReportArgs a;
      const fs::path spec_path = rep_spec;
      a.spec = detail::read_json_file(spec_path, true);
      const fs::path dir = spec_path.parent_path();
      a.resolve = [dir](const std::string& p) {
        const fs::path path = p;
        return path.is_absolute() ? path : dir / path;
      };
      a.output_prefix = rep_prefix;
      a.csv = !rep_no_csv;
      a.manifest = opt_path(rep_manifest);
      cmd_report(a);
      std::cout << rep_prefix << ".md\n";
    } else if (*run_cmd) {
      const PipelineConfig cfg = load_pipeline_config(run_config);
      RunOptions opts;
      opts.threads = run_threads;
      if (!run_mode.empty() || !run_transcript.empty()) {
        InferenceOptions io;
        io.mode = InferenceOptions::parse_mode(run_mode.empty() ? cfg.inference.value("mode", "live") : run_mode);
        io.transcript = run_transcript.empty() ? fs::path(cfg.inference.value("transcript", "")) : fs::path(run_transcript);
        if (run_transcript.empty() && io.transcript.is_relative() && !io.transcript.empty()) {
          io.transcript = cfg.config_dir / io.transcript;
        }
        opts.inference = io;
      }
      const RunSummary s = cmd_run(cfg, opts);
      std::cout << "executed " << s.executed.size() << " stage(s), skipped " << s.skipped.size() << '\n';
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.code());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kData);
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kData);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kData);
  }
  return 0;
}
