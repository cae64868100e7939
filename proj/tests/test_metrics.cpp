#include <cmath>
#include <numbers>
#include <random>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "midcot/dataset.hpp"
#include "midcot/metrics.hpp"
#include "support.hpp"

using namespace midcot;

namespace {

CotRecord graded(bool correct) {
  CotRecord r;
  r.id = "x";
  r.correct = correct;
  return r;
}

}  // namespace

TEST(Accuracy, Examples) {
  const std::vector<CotRecord> all = {graded(true), graded(true)};
  EXPECT_EQ(exact_match_accuracy("b", all).accuracy, 1.0);
  const std::vector<CotRecord> half = {graded(true), graded(false), graded(false), graded(true)};
  const auto s = exact_match_accuracy("b", half);
  EXPECT_EQ(s.accuracy, 0.5);
  EXPECT_EQ(s.n_items, 4u);
  EXPECT_EQ(s.n_correct, 2u);
  EXPECT_THROW(exact_match_accuracy("b", std::vector<CotRecord>{}), DataError);
  std::vector<CotRecord> ungraded(1);
  EXPECT_THROW(exact_match_accuracy("b", ungraded), DataError);
}

TEST(Accuracy, HandTalliedBenchmark) {
  const auto dir = testing_support::fixtures() / "benchmark";
  const auto tally = nlohmann::json::parse(testing_support::read_file(dir / "tally.json"));
  std::vector<CotRecord> records;
  for (auto r : read_jsonl(dir / "items.jsonl")) records.push_back(grade(std::move(r)));
  const auto s = exact_match_accuracy("fixture", records);
  EXPECT_EQ(s.n_items, tally["n_items"].get<std::uint64_t>());
  EXPECT_EQ(s.n_correct, tally["n_correct"].get<std::uint64_t>());
  EXPECT_EQ(s.accuracy, 16.0 / 30.0);
  std::vector<std::string> ids;
  for (const auto& r : records) {
    if (*r.correct) ids.push_back(r.id);
  }
  EXPECT_EQ(ids, tally["correct_ids"].get<std::vector<std::string>>());
}

TEST(Average, PublishedRow) {
  const std::vector<double> row = {13.33, 52.50, 25.62, 70.40, 84.98};
  EXPECT_NEAR(average_score(row), 49.37, 0.01);
}

TEST(Average, Properties) {
  const std::vector<double> one = {0.42};
  EXPECT_EQ(average_score(one), 0.42);
  const std::vector<double> same(7, 0.3);
  EXPECT_NEAR(average_score(same), 0.3, 1e-15);
  EXPECT_THROW(average_score(std::vector<double>{}), DataError);

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  for (int i = 0; i < 200; ++i) {
    std::vector<double> v(1 + rng() % 10);
    for (auto& x : v) x = u(rng);
    const double a = average_score(v);
    std::shuffle(v.begin(), v.end(), rng);
    EXPECT_NEAR(average_score(v), a, 1e-12);
    EXPECT_GE(a, *std::min_element(v.begin(), v.end()) - 1e-12);
    EXPECT_LE(a, *std::max_element(v.begin(), v.end()) + 1e-12);
  }
  const std::vector<BenchmarkScore> scores = {{"a", 2, 1, 0.5}, {"b", 4, 1, 0.25}};
  EXPECT_EQ(average_score(scores), 0.375);
}

TEST(Delta, PublishedValues) {
  const auto gain = performance_delta(55.84, 52.18);
  EXPECT_NEAR(gain.delta, 3.66, 0.005);
  EXPECT_EQ(gain.direction(), "gain");
  const auto loss = performance_delta(21.25, 30.26);
  EXPECT_NEAR(loss.delta, -9.01, 0.005);
  EXPECT_EQ(loss.direction(), "loss");
  // Remaining small-model rows against the 1.5B and 3B instruct averages.
  EXPECT_NEAR(performance_delta(23.29, 30.26).delta, -6.97, 0.005);
  EXPECT_NEAR(performance_delta(32.00, 39.36).delta, -7.36, 0.005);
  EXPECT_EQ(performance_delta(7.5, 7.5).delta, 0.0);
  EXPECT_EQ(performance_delta(7.5, 7.5).direction(), "none");
  EXPECT_THROW(performance_delta(NAN, 1.0), DataError);
  EXPECT_THROW(performance_delta(1.0, INFINITY), DataError);
}

TEST(Delta, Antisymmetric) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-100, 100);
  for (int i = 0; i < 1000; ++i) {
    const double a = u(rng);
    const double b = u(rng);
    EXPECT_EQ(performance_delta(a, b).delta, -performance_delta(b, a).delta);
  }
}

TEST(Bpc, HandExample) {
  const std::vector<TokenLogprob> e = {{"ab", std::log(0.5)}, {"cd", std::log(0.5)}};
  const auto r = bpc(e, "abcd", "t");
  EXPECT_NEAR(r.sum_neg_log2_prob, 2.0, 1e-12);
  EXPECT_EQ(r.utf8_len, 4u);
  EXPECT_NEAR(r.bpc, 0.5, 1e-12);
}

TEST(Bpc, CertainTextIsZero) {
  const std::vector<TokenLogprob> e = {{"x", std::nullopt}, {"y", 0.0}, {"z", 0.0}};
  EXPECT_EQ(bpc(e, "xyz").bpc, 0.0);
  const std::vector<TokenLogprob> slack = {{"x", 5e-7}};
  EXPECT_EQ(bpc(slack, "x").bpc, 0.0);
}

TEST(Bpc, RejectsMalformedInput) {
  const std::vector<TokenLogprob> positive = {{"x", 0.01}};
  EXPECT_THROW(bpc(positive, "x"), DataError);
  const std::vector<TokenLogprob> nan = {{"x", NAN}};
  EXPECT_THROW(bpc(nan, "x"), DataError);
  const std::vector<TokenLogprob> inf = {{"x", -INFINITY}};
  EXPECT_THROW(bpc(inf, "x"), DataError);
  EXPECT_THROW(bpc(std::vector<TokenLogprob>{}, ""), DataError);
}

TEST(Bpc, FixtureMatchesScalarReference) {
  const auto doc = nlohmann::json::parse(testing_support::read_file(testing_support::fixtures() / "bpc" / "transcript.json"));
  const std::string text = doc["text"];
  std::vector<TokenLogprob> entries;
  std::string joined;
  for (const auto& e : doc["entries"]) {
    entries.push_back({e["token"], e["logprob"].is_null() ? std::nullopt : std::optional<double>(e["logprob"])});
    joined += e["token"].get<std::string>();
  }
  ASSERT_EQ(joined, text);
  // Reference: long double accumulation in log2.
  long double bits = 0;
  for (const auto& e : doc["entries"]) {
    if (!e["logprob"].is_null()) bits += -static_cast<long double>(e["logprob"].get<double>()) / std::log(2.0L);
  }
  const std::size_t bytes = text.size();
  const double want = static_cast<double>(bits / bytes);
  const auto r = bpc(entries, text, doc["text_id"]);
  EXPECT_NEAR(r.bpc, want, 1e-9);
  EXPECT_GT(text.size(), entries.size());  // multi-byte characters counted as bytes
}

TEST(Bpc, RetokenizationAndDuplicationInvariance) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> p(0.05, 1.0);
  for (int trial = 0; trial < 300; ++trial) {
    std::string text;
    std::vector<TokenLogprob> entries;
    for (int i = 0; i < 1 + static_cast<int>(rng() % 20); ++i) {
      const std::string tok(1 + rng() % 4, static_cast<char>('a' + rng() % 26));
      text += tok;
      entries.push_back({tok, std::log(p(rng))});
    }
    const double base = bpc(entries, text).bpc;

    // Merge adjacent token pairs, multiplying their probabilities.
    std::vector<TokenLogprob> merged;
    for (std::size_t i = 0; i < entries.size(); i += 2) {
      if (i + 1 == entries.size()) {
        merged.push_back(entries[i]);
      } else {
        merged.push_back({entries[i].token + entries[i + 1].token, *entries[i].logprob + *entries[i + 1].logprob});
      }
    }
    EXPECT_NEAR(bpc(merged, text).bpc, base, 1e-12);

    std::vector<TokenLogprob> doubled = entries;
    doubled.insert(doubled.end(), entries.begin(), entries.end());
    EXPECT_NEAR(bpc(doubled, text + text).bpc, base, 1e-12);
  }
}

TEST(Lengths, Examples) {
  const auto r = length_report(std::map<std::string, std::vector<std::uint64_t>>{{"g", {100, 300}}});
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r[0].mean_tokens, 200.0);
  EXPECT_EQ(r[0].median_tokens, 100u);
  EXPECT_EQ(r[0].p95_tokens, 300u);
  EXPECT_FALSE(r[0].ratio_to_reference);

  const auto ratio = length_report(
      std::map<std::string, std::vector<std::uint64_t>>{{"merged", {500}}, {"teacher", {900, 1100}}}, "teacher");
  EXPECT_EQ(ratio[0].group, "merged");
  EXPECT_EQ(ratio[0].ratio_to_reference, 0.5);
  EXPECT_EQ(ratio[1].ratio_to_reference, 1.0);

  EXPECT_THROW(length_report(std::map<std::string, std::vector<std::uint64_t>>{{"g", {}}}), DataError);
  EXPECT_THROW(length_report(std::map<std::string, std::vector<std::uint64_t>>{{"g", {1}}}, "other"), ConfigError);
}

TEST(Lengths, FromRecordsNeedsCounts) {
  CotRecord r;
  r.id = "a";
  EXPECT_THROW(length_report(std::map<std::string, std::vector<CotRecord>>{{"g", {r}}}), DataError);
  r.token_count = 12;
  EXPECT_EQ(length_report(std::map<std::string, std::vector<CotRecord>>{{"g", {r}}})[0].median_tokens, 12u);
}

TEST(Lengths, MatchBruteForce) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    std::map<std::string, std::vector<std::uint64_t>> groups;
    const int n_groups = 1 + static_cast<int>(rng() % 4);
    for (int g = 0; g < n_groups; ++g) {
      auto& v = groups["g" + std::to_string(g)];
      for (int i = 0; i < 1 + static_cast<int>(rng() % 1000); ++i) v.push_back(rng() % 20000);
    }
    const auto reports = length_report(groups, "g0");
    ASSERT_EQ(reports.size(), groups.size());
    double ref_mean = 0;
    for (auto x : groups["g0"]) ref_mean += static_cast<double>(x);
    ref_mean /= static_cast<double>(groups["g0"].size());
    for (const auto& r : reports) {
      const auto& v = groups[r.group];
      double sum = 0;
      for (auto x : v) sum += static_cast<double>(x);
      // Nearest rank: the smallest value with at least q*n values at or below it.
      const auto rank_value = [&](double q) {
        for (auto cand : v) {
          std::size_t at_or_below = 0;
          for (auto x : v) at_or_below += x <= cand;
          std::size_t below = 0;
          for (auto x : v) below += x < cand;
          if (static_cast<double>(at_or_below) >= q * static_cast<double>(v.size()) &&
              static_cast<double>(below) < q * static_cast<double>(v.size())) {
            return cand;
          }
        }
        return std::uint64_t{0};
      };
      ASSERT_EQ(r.count, v.size());
      ASSERT_NEAR(r.mean_tokens, sum / static_cast<double>(v.size()), 1e-9);
      if (v.size() <= 300) {
        ASSERT_EQ(r.median_tokens, rank_value(0.5));
        ASSERT_EQ(r.p95_tokens, rank_value(0.95));
      }
      ASSERT_NEAR(*r.ratio_to_reference, r.mean_tokens / ref_mean, 1e-12);
    }
  }
}

TEST(Markers, Examples) {
  EXPECT_EQ(marker_count("Wait... wait, WAIT").at("wait"), 3u);
  EXPECT_EQ(marker_count("waiter awaits").at("wait"), 0u);
  EXPECT_EQ(marker_count("").at("wait"), 0u);
  const auto m = marker_count("Hmm, but wait. Hmm", {"hmm", "but", "wait"});
  EXPECT_EQ(m.at("hmm"), 2u);
  EXPECT_EQ(m.at("but"), 1u);
  EXPECT_EQ(m.at("wait"), 1u);
  EXPECT_THROW(marker_count("x", {}), ConfigError);
}

TEST(Markers, PlantedCount) {
  std::mt19937_64 rng(209);
  const std::vector<std::string> filler = {"so", "the", "waiter", "sum", "is", "await", "waiting", "12", "\n", "okay",
                                           "w-a-i-t", "twait"};
  const std::vector<std::string> planted = {"wait", "Wait", "WAIT", "Wait,", "wait...", "(wait)", "\"wait\""};
  std::string text;
  int remaining = 209;
  while (remaining > 0) {
    if (rng() % 3 == 0) {
      text += planted[rng() % planted.size()] + " ";
      --remaining;
    } else {
      text += filler[rng() % filler.size()] + " ";
    }
  }
  EXPECT_EQ(marker_count(text).at("wait"), 209u);
}
