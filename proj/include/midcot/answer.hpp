// Copyright 2026 The midcot Authors
// SPDX-License-Identifier: Apache-2.0
//
// Rule-based final-answer extraction and the normal form used for exact match.

#pragma once

#include <cctype>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace midcot {

namespace detail {

inline bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }
inline bool is_digit(char c) { return c >= '0' && c <= '9'; }
inline bool is_word(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0 || c == '_'; }

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

/// True for "1,234" / "-12,345,678": an integer with thousands separators.
inline bool is_grouped_integer(std::string_view s) {
  if (!s.empty() && (s.front() == '-' || s.front() == '+')) s.remove_prefix(1);
  const auto first_comma = s.find(',');
  if (first_comma == std::string_view::npos || first_comma == 0 || first_comma > 3) return false;
  for (std::size_t i = 0; i < first_comma; ++i) {
    if (!is_digit(s[i])) return false;
  }
  std::size_t i = first_comma;
  while (i < s.size()) {
    if (i + 4 > s.size() || s[i] != ',') return false;
    if (!is_digit(s[i + 1]) || !is_digit(s[i + 2]) || !is_digit(s[i + 3])) return false;
    i += 4;
  }
  return true;
}

/// Content of every top-level \boxed{...} group, in order. Groups whose braces
/// never balance are ignored. \{ and \} inside a group are literal.
inline std::vector<std::string_view> boxed_groups(std::string_view text) {
  static constexpr std::string_view kTag = "\\boxed";
  std::vector<std::string_view> groups;
  std::size_t pos = 0;
  while ((pos = text.find(kTag, pos)) != std::string_view::npos) {
    std::size_t i = pos + kTag.size();
    while (i < text.size() && text[i] == ' ') ++i;
    if (i >= text.size() || text[i] != '{') {
      pos += kTag.size();
      continue;
    }
    const std::size_t open = i;
    int depth = 0;
    std::size_t close = std::string_view::npos;
    for (; i < text.size(); ++i) {
      const char c = text[i];
      if (c == '\\' && i + 1 < text.size() && (text[i + 1] == '{' || text[i + 1] == '}')) {
        ++i;
      } else if (c == '{') {
        ++depth;
      } else if (c == '}' && --depth == 0) {
        close = i;
        break;
      }
    }
    if (close == std::string_view::npos) {
      pos = open;
      continue;
    }
    groups.push_back(text.substr(open + 1, close - open - 1));
    pos = close + 1;
  }
  return groups;
}

/// Numeric tokens of one line: [-]digits[,ddd]*[.digits][/digits], not glued
/// to a neighbouring word character.
inline std::vector<std::string_view> numeric_tokens(std::string_view line) {
  std::vector<std::string_view> out;
  const std::size_t n = line.size();
  std::size_t i = 0;
  while (i < n) {
    const std::size_t start = i;
    std::size_t j = i;
    if (line[j] == '-' && j + 1 < n) ++j;
    const bool leading_dot = line[j] == '.' && j + 1 < n && is_digit(line[j + 1]);
    if (!is_digit(line[j]) && !leading_dot) {
      ++i;
      continue;
    }
    std::size_t k = j;
    while (k < n && is_digit(line[k])) ++k;
    while (k + 4 <= n && line[k] == ',' && is_digit(line[k + 1]) &&
           is_digit(line[k + 2]) && is_digit(line[k + 3]) && (k + 4 == n || !is_digit(line[k + 4]))) {
      k += 4;
    }
    if (k + 1 < n && line[k] == '.' && is_digit(line[k + 1])) {
      ++k;
      while (k < n && is_digit(line[k])) ++k;
    }
    if (k + 1 < n && line[k] == '/' && is_digit(line[k + 1])) {
      ++k;
      while (k < n && is_digit(line[k])) ++k;
    }
    const bool left_ok = start == 0 || !(is_word(line[start - 1]) || line[start - 1] == '.');
    const bool right_ok = k == n || !is_word(line[k]);
    if (left_ok && right_ok) out.push_back(line.substr(start, k - start));
    i = k > i ? k : i + 1;
  }
  return out;
}

}  // namespace detail

/// Normal form for exact match: trim; drop surrounding '$' and trailing
/// periods; remove thousands separators from integers; collapse whitespace;
/// lowercase; \dfrac -> \frac. Other LaTeX is left alone. Idempotent.
inline std::string normalize_answer(std::string_view raw) {
  std::string s(raw);
  while (true) {
    const std::string before = s;

    std::string_view v = detail::trim(s);
    while (!v.empty() && v.front() == '$') v.remove_prefix(1);
    while (!v.empty() && v.back() == '$') v.remove_suffix(1);
    v = detail::trim(v);
    while (!v.empty() && v.back() == '.') v.remove_suffix(1);
    v = detail::trim(v);

    std::string collapsed;
    collapsed.reserve(v.size());
    bool in_space = false;
    for (char c : v) {
      if (detail::is_space(c)) {
        in_space = true;
        continue;
      }
      if (in_space) collapsed.push_back(' ');
      in_space = false;
      collapsed.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }

    std::string out;
    static constexpr std::string_view kDfrac = "\\dfrac";
    for (std::size_t i = 0; i < collapsed.size();) {
      if (collapsed.compare(i, kDfrac.size(), kDfrac) == 0) {
        out += "\\frac";
        i += kDfrac.size();
      } else {
        out.push_back(collapsed[i++]);
      }
    }
    if (detail::is_grouped_integer(out)) {
      std::erase(out, ',');
    }
    s = std::move(out);
    if (s == before) return s;
  }
}

/// Final answer of a reasoning trace: the last top-level \boxed{...} group, or
/// failing that the last numeric token on the last line that has one.
/// Returned normalized; nullopt when neither rule applies.
inline std::optional<std::string> extract_answer(std::string_view cot) {
  const auto groups = detail::boxed_groups(cot);
  if (!groups.empty()) return normalize_answer(groups.back());

  std::size_t end = cot.size();
  while (true) {
    const std::size_t nl = end == 0 ? std::string_view::npos : cot.rfind('\n', end - 1);
    const std::size_t begin = nl == std::string_view::npos ? 0 : nl + 1;
    const auto tokens = detail::numeric_tokens(cot.substr(begin, end - begin));
    if (!tokens.empty()) return normalize_answer(tokens.back());
    if (nl == std::string_view::npos) break;
    end = nl;
  }
  return std::nullopt;
}

}  // namespace midcot
