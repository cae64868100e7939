// Copyright 2026 The midcot Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <mutex>
#include <string>
#include <string_view>

#include <fmt/core.h>

namespace midcot {

enum class LogLevel { kDebug = 0, kInfo, kWarn, kError, kOff };

/// Process-wide logger writing to stderr unless a sink is installed.
/// MIDCOT_LOG=debug|info|warn|error|off sets the initial level.
class Logger {
 public:
  using Sink = std::function<void(LogLevel, std::string_view)>;

  static Logger& instance() {
    static Logger logger;
    return logger;
  }

  void set_level(LogLevel level) { level_ = level; }
  LogLevel level() const { return level_; }

  void set_sink(Sink sink) {
    std::lock_guard lock(mu_);
    sink_ = std::move(sink);
  }

  void write(LogLevel level, std::string_view msg) {
    if (level < level_.load()) return;
    std::lock_guard lock(mu_);
    if (sink_) {
      sink_(level, msg);
      return;
    }
    static constexpr const char* kNames[] = {"debug", "info", "warn", "error"};
    std::cerr << "[" << kNames[static_cast<int>(level)] << "] " << msg << '\n';
  }

 private:
  Logger() {
    const char* env = std::getenv("MIDCOT_LOG");
    const std::string v = env ? env : "";
    if (v == "debug") level_ = LogLevel::kDebug;
    else if (v == "warn") level_ = LogLevel::kWarn;
    else if (v == "error") level_ = LogLevel::kError;
    else if (v == "off") level_ = LogLevel::kOff;
  }

  std::atomic<LogLevel> level_{LogLevel::kInfo};
  std::mutex mu_;
  Sink sink_;
};

template <typename... Args>
void log(LogLevel level, fmt::format_string<Args...> f, Args&&... args) {
  auto& logger = Logger::instance();
  if (level < logger.level()) return;
  logger.write(level, fmt::format(f, std::forward<Args>(args)...));
}

}  // namespace midcot
