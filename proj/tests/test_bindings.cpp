#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <sstream>

#include "midcot/bindings.hpp"
#include "support.hpp"

using namespace midcot;
using testing_support::read_file;
using testing_support::run_cli;
using testing_support::TempDir;
using testing_support::write_file;
namespace fs = std::filesystem;

namespace {

fs::path demo() { return testing_support::fixtures() / "demo"; }

std::vector<std::string> lines_of(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

std::vector<std::string> dumped(const nlohmann::ordered_json& arr) {
  std::vector<std::string> out;
  for (const auto& r : arr) out.push_back(r.dump());
  return out;
}

}  // namespace

TEST(Bindings, MergeMatchesCliBytes) {
  TempDir dir;
  const auto cli = run_cli({"merge", "--config", (demo() / "merge_recipe.json").string(), "--output",
                            (dir / "cli.safetensors").string()},
                           dir.path());
  ASSERT_EQ(cli.exit_code, 0) << cli.err;

  auto mapping = nlohmann::json::parse(read_file(demo() / "merge_recipe.json"));
  mapping["output"] = (dir / "bound.safetensors").string();
  mapping["base_dir"] = demo().string();
  mapping["threads"] = 4;
  EXPECT_EQ(bind::bind_merge(mapping), (dir / "bound.safetensors").string());
  EXPECT_EQ(read_file(dir / "bound.safetensors"), read_file(dir / "cli.safetensors"));
  EXPECT_EQ(read_file(dir / "bound.safetensors"), read_file(demo() / "expected" / "ta_merge.safetensors"));
}

TEST(Bindings, MergeErrorsMatchCli) {
  TempDir dir;
  auto mapping = nlohmann::json::parse(read_file(demo() / "merge_recipe.json"));
  mapping["contributors"][0]["drop_rate"] = 1.0;
  write_file(dir / "bad.json", mapping.dump());
  const auto cli =
      run_cli({"merge", "--config", (dir / "bad.json").string(), "--output", (dir / "o.safetensors").string()},
              dir.path());
  EXPECT_EQ(cli.exit_code, 2);

  mapping["output"] = (dir / "o.safetensors").string();
  mapping["base_dir"] = demo().string();
  try {
    bind::bind_merge(mapping);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.code(), ExitCode::kConfig);
    EXPECT_NE(cli.err.find(e.what()), std::string::npos) << cli.err << " vs " << e.what();
  }
  EXPECT_THROW(bind::bind_merge(nlohmann::json::array()), ConfigError);
  mapping.erase("output");
  EXPECT_THROW(bind::bind_merge(mapping), ConfigError);
}

TEST(Bindings, FilterMatchesCliOutputs) {
  TempDir dir;
  const fs::path input = testing_support::fixtures() / "graded" / "records.jsonl";
  for (const std::uint64_t l_max : {3u, 8u, 16384u}) {
    const auto cli = run_cli({"curate", "--input", input.string(), "--retained", (dir / "r.jsonl").string(),
                              "--rejected", (dir / "x.jsonl").string(), "--l-max", std::to_string(l_max)},
                             dir.path());
    ASSERT_EQ(cli.exit_code, 0) << cli.err;

    nlohmann::json records = nlohmann::json::array();
    for (const auto& line : lines_of(read_file(input))) records.push_back(nlohmann::json::parse(line));
    const auto out = bind::bind_filter(records, {{"max_length", l_max}, {"tokenizer_id", "whitespace"}});
    EXPECT_EQ(dumped(out["retained"]), lines_of(read_file(dir / "r.jsonl"))) << "l_max " << l_max;
    EXPECT_EQ(dumped(out["rejected"]), lines_of(read_file(dir / "x.jsonl"))) << "l_max " << l_max;
  }
}

TEST(Bindings, FilterRejectsBadInput) {
  EXPECT_THROW(bind::bind_filter(nlohmann::json::object(), nlohmann::json::object()), ConfigError);
  EXPECT_THROW(bind::bind_filter(nlohmann::json::array(), {{"max_length", 0}}), ConfigError);
  EXPECT_THROW(bind::bind_filter(nlohmann::json::array(), {{"colour", "red"}}), ConfigError);
  EXPECT_THROW(bind::bind_filter(nlohmann::json::parse(R"([{"id": "a"}])"), nlohmann::json::object()), DataError);
}

TEST(Bindings, BpcMatchesCli) {
  TempDir dir;
  const auto fixture = nlohmann::json::parse(read_file(testing_support::fixtures() / "bpc" / "transcript.json"));
  const double half = std::log(0.5);
  const nlohmann::json hand = {{"id", "hand"},
                               {"text", "abcd"},
                               {"token_logprobs",
                                {{{"token", "ab"}, {"logprob", half}}, {{"token", "cd"}, {"logprob", half}}}}};
  const nlohmann::json fixture_row = {
      {"id", fixture["text_id"]}, {"text", fixture["text"]}, {"token_logprobs", fixture["entries"]}};

  for (const auto& row : {hand, fixture_row}) {
    write_file(dir / "texts.jsonl", row.dump() + "\n");
    const auto cli = run_cli({"bpc", "--texts", (dir / "texts.jsonl").string(), "--output", (dir / "b.json").string()},
                             dir.path());
    ASSERT_EQ(cli.exit_code, 0) << cli.err;
    const auto doc = nlohmann::json::parse(read_file(dir / "b.json"));
    EXPECT_EQ(bind::bind_bpc(row["token_logprobs"], row["text"].get<std::string>()),
              doc["texts"][0]["bpc"].get<double>());
  }
  EXPECT_EQ(bind::bind_bpc(hand["token_logprobs"], "abcd"), 0.5);
  EXPECT_THROW(bind::bind_bpc(nlohmann::json::object(), "abcd"), DataError);
}

TEST(Bindings, GradeExtractAndVersion) {
  const auto g = bind::bind_grade({{"id", "a"}, {"prompt", "q"}, {"cot", "so \\boxed{ \\dfrac{1}{2} }"}, {"gold_answer", "$\\frac{1}{2}$"}});
  EXPECT_EQ(g["correct"], true);
  EXPECT_EQ(bind::bind_extract("\\boxed{3} then \\boxed{4}"), "4");
  EXPECT_EQ(bind::bind_extract("none"), std::nullopt);
  EXPECT_EQ(bind::version(), kVersion);
}
