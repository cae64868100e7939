// Copyright 2026 The midcot Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <unordered_set>

#include "midcot/answer.hpp"
#include "midcot/error.hpp"

namespace midcot {

/// Counts tokens of a text under one fixed scheme. Implementations must be
/// safe to call concurrently.
class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  virtual std::size_t count(std::string_view text) const = 0;
};

class ByteTokenizer final : public Tokenizer {
 public:
  std::size_t count(std::string_view text) const override { return text.size(); }
};

class WhitespaceTokenizer final : public Tokenizer {
 public:
  std::size_t count(std::string_view text) const override {
    std::size_t n = 0;
    bool in_token = false;
    for (char c : text) {
      const bool space = detail::is_space(c);
      if (!space && !in_token) ++n;
      in_token = !space;
    }
    return n;
  }
};

/// Greedy longest-match over a vocabulary file (one token per line, UTF-8).
/// Bytes no vocabulary entry covers count as one token each.
class VocabTokenizer final : public Tokenizer {
 public:
  explicit VocabTokenizer(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read vocabulary file '" + path.string() + "'");
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      max_len_ = std::max(max_len_, line.size());
      vocab_.insert(std::move(line));
    }
    if (vocab_.empty()) throw ConfigError("vocabulary file '" + path.string() + "' is empty");
  }

  std::size_t count(std::string_view text) const override {
    std::size_t n = 0;
    std::size_t i = 0;
    while (i < text.size()) {
      std::size_t len = std::min(max_len_, text.size() - i);
      while (len > 1 && vocab_.count(std::string(text.substr(i, len))) == 0) --len;
      i += len;
      ++n;
    }
    return n;
  }

 private:
  std::unordered_set<std::string> vocab_;
  std::size_t max_len_ = 1;
};

/// Resolves tokenizer ids: "bytes", "whitespace", "vocab:<path>", or a name
/// added with register_tokenizer(). Resolved tokenizers are cached.
class TokenizerRegistry {
 public:
  static TokenizerRegistry& instance() {
    static TokenizerRegistry registry;
    return registry;
  }

  void add(const std::string& id, std::shared_ptr<const Tokenizer> tokenizer) {
    std::lock_guard lock(mu_);
    cache_[id] = std::move(tokenizer);
  }

  std::shared_ptr<const Tokenizer> resolve(const std::string& id) {
    std::lock_guard lock(mu_);
    if (auto it = cache_.find(id); it != cache_.end()) return it->second;
    std::shared_ptr<const Tokenizer> t;
    if (id == "bytes") {
      t = std::make_shared<ByteTokenizer>();
    } else if (id == "whitespace") {
      t = std::make_shared<WhitespaceTokenizer>();
    } else if (id.rfind("vocab:", 0) == 0) {
      t = std::make_shared<VocabTokenizer>(id.substr(6));
    } else {
      throw ConfigError("unknown tokenizer '" + id + "' (expected bytes, whitespace or vocab:<path>)");
    }
    cache_.emplace(id, t);
    return t;
  }

 private:
  std::mutex mu_;
  std::map<std::string, std::shared_ptr<const Tokenizer>> cache_;
};

inline void register_tokenizer(const std::string& id, std::shared_ptr<const Tokenizer> tokenizer) {
  TokenizerRegistry::instance().add(id, std::move(tokenizer));
}

inline std::size_t count_tokens(std::string_view text, const std::string& tokenizer_id) {
  return TokenizerRegistry::instance().resolve(tokenizer_id)->count(text);
}

}  // namespace midcot
