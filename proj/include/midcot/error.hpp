// Copyright 2026 The midcot Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>

namespace midcot {

/// Process exit codes shared by every CLI subcommand.
enum class ExitCode : int {
  kOk = 0,
  kConfig = 2,   ///< bad configuration or usage
  kData = 3,     ///< malformed or inconsistent input data
  kNetwork = 4,  ///< transport failure or missing server capability
};

/// Base of all errors raised by the library. Each error carries the exit code
/// the CLI maps it to.
class Error : public std::runtime_error {
 public:
  Error(const std::string& what, ExitCode code) : std::runtime_error(what), code_(code) {}
  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(what, ExitCode::kConfig) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(what, ExitCode::kData) {}
};

/// A structural problem in a checkpoint file, positioned at an absolute byte
/// offset and (when known) attributed to a tensor.
class FormatError : public DataError {
 public:
  FormatError(std::string tensor, std::uint64_t position, const std::string& reason)
      : DataError(describe(tensor, position, reason)),
        tensor_(std::move(tensor)),
        position_(position),
        reason_(reason) {}

  const std::string& tensor() const noexcept { return tensor_; }
  std::uint64_t position() const noexcept { return position_; }
  const std::string& reason() const noexcept { return reason_; }

 private:
  static std::string describe(const std::string& tensor, std::uint64_t position,
                              const std::string& reason) {
    std::string out = "safetensors: ";
    if (!tensor.empty()) out += "tensor '" + tensor + "' ";
    out += "at byte " + std::to_string(position) + ": " + reason;
    return out;
  }

  std::string tensor_;
  std::uint64_t position_;
  std::string reason_;
};

class NetworkError : public Error {
 public:
  explicit NetworkError(const std::string& what) : Error(what, ExitCode::kNetwork) {}
};

/// The server cannot do what was asked (e.g. no prompt log-probabilities).
class CapabilityError : public NetworkError {
 public:
  explicit CapabilityError(const std::string& what) : NetworkError(what) {}
};

/// Replay mode found no recorded response for a request.
class CacheMissError : public DataError {
 public:
  explicit CacheMissError(const std::string& key)
      : DataError("replay cache miss for request " + key), key_(key) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

}  // namespace midcot
