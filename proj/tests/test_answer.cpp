#include <fstream>
#include <random>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "midcot/answer.hpp"
#include "support.hpp"

using namespace midcot;

TEST(ExtractAnswer, Examples) {
  EXPECT_EQ(extract_answer("... so x = \\boxed{42}."), "42");
  EXPECT_EQ(extract_answer("\\boxed{\\frac{1}{2}} ... \\boxed{3}"), "3");
  EXPECT_EQ(extract_answer("nothing to see"), std::nullopt);
  EXPECT_EQ(extract_answer(""), std::nullopt);
}

TEST(ExtractAnswer, NestedBracesBalance) {
  EXPECT_EQ(extract_answer("\\boxed{\\frac{a}{b^{2}}} then text"), "\\frac{a}{b^{2}}");
  EXPECT_EQ(extract_answer("\\boxed{x} \\boxed{{y}}"), "{y}");
}

TEST(ExtractAnswer, HandLabeledCorpus) {
  const auto dir = testing_support::fixtures() / "answers";
  const auto labels = nlohmann::json::parse(testing_support::read_file(dir / "labels.json"));
  std::ifstream in(dir / "traces.jsonl");
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    const auto rec = nlohmann::json::parse(line);
    const auto id = rec["id"].get<std::string>();
    const auto& want = labels.at(id);
    const auto got = extract_answer(rec["cot"].get<std::string>());
    if (want.is_null()) {
      EXPECT_FALSE(got.has_value()) << id << " gave " << got.value_or("");
    } else {
      ASSERT_TRUE(got.has_value()) << id;
      EXPECT_EQ(*got, want.get<std::string>()) << id;
    }
    ++n;
  }
  EXPECT_EQ(n, 50);
}

TEST(NormalizeAnswer, Examples) {
  EXPECT_EQ(normalize_answer(" 1,000 "), "1000");
  EXPECT_EQ(normalize_answer("\\dfrac{1}{2}"), "\\frac{1}{2}");
  EXPECT_EQ(normalize_answer("$\\Pi$."), "\\pi");
  EXPECT_EQ(normalize_answer("a \t\n b"), "a b");
  EXPECT_EQ(normalize_answer("-12,345"), "-12345");
  EXPECT_EQ(normalize_answer("1,2"), "1,2");  // not a grouped integer
  EXPECT_EQ(normalize_answer("(1,000, 2)"), "(1,000, 2)");
  EXPECT_EQ(normalize_answer("\\sqrt{2}"), "\\sqrt{2}");
}

namespace {

std::string random_answer_like(std::mt19937_64& rng) {
  static const std::vector<std::string> pieces = {
      " ", "  ", "\t", "\n", "$", ".", ",", "1", "23", "456", "-", "\\dfrac", "\\frac", "{", "}", "x", "Y",
      "\\boxed", "7,000", "0.5", "/", "^", "ABC", "\\Text", "$$", "..", " . ", "1,234,567"};
  std::uniform_int_distribution<std::size_t> len(0, 12);
  std::uniform_int_distribution<std::size_t> pick(0, pieces.size() - 1);
  std::string s;
  for (std::size_t i = len(rng); i > 0; --i) s += pieces[pick(rng)];
  return s;
}

}  // namespace

TEST(NormalizeAnswer, IdempotentProperty) {
  std::mt19937_64 rng(404);
  for (int i = 0; i < 20000; ++i) {
    const std::string s = random_answer_like(rng);
    const std::string once = normalize_answer(s);
    ASSERT_EQ(normalize_answer(once), once) << "input: [" << s << "]";
  }
}

TEST(ExtractAnswer, NeverThrowsOnArbitraryBytes) {
  std::mt19937_64 rng(405);
  std::uniform_int_distribution<int> len(0, 200);
  std::uniform_int_distribution<int> byte(0, 255);
  for (int i = 0; i < 20000; ++i) {
    std::string s;
    for (int k = len(rng); k > 0; --k) s.push_back(static_cast<char>(byte(rng)));
    if (i % 2 == 0) s += random_answer_like(rng);
    const auto r = extract_answer(s);
    if (r) ASSERT_EQ(normalize_answer(*r), *r);
  }
}
