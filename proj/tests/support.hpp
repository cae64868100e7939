// Shared helpers for the test suites: temp dirs, file I/O, CLI invocation and
// random checkpoint generators.
#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <vector>

#include "midcot/tensor_store.hpp"

#ifndef MIDCOT_SOURCE_DIR
#error "MIDCOT_SOURCE_DIR must be defined"
#endif
#ifndef MIDCOT_CLI_PATH
#error "MIDCOT_CLI_PATH must be defined"
#endif

namespace testing_support {

namespace fs = std::filesystem;

inline fs::path source_dir() { return MIDCOT_SOURCE_DIR; }
inline fs::path fixtures() { return source_dir() / "tests" / "fixtures"; }
inline fs::path cli_path() { return MIDCOT_CLI_PATH; }

class TempDir {
 public:
  TempDir() {
    std::string tmpl = (fs::temp_directory_path() / "midcot-test-XXXXXX").string();
    if (::mkdtemp(tmpl.data()) == nullptr) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const fs::path& p, const std::string& bytes) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << bytes;
}

inline std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'') out += "'\\''";
    else out += c;
  }
  return out + "'";
}

struct CliResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

/// Runs the midcot binary with `args`; output is captured through files.
inline CliResult run_cli(const std::vector<std::string>& args, const fs::path& scratch,
                         const std::string& env = "") {
  std::string cmd = env.empty() ? "" : env + " ";
  cmd += shell_quote(cli_path().string());
  for (const auto& a : args) cmd += " " + shell_quote(a);
  const fs::path out = scratch / "cli.out";
  const fs::path err = scratch / "cli.err";
  cmd += " >" + shell_quote(out.string()) + " 2>" + shell_quote(err.string());
  const int status = std::system(cmd.c_str());
  CliResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = read_file(out);
  r.err = read_file(err);
  return r;
}

/// Values k/256 with |k| <= 4096: sums and differences of two such values are
/// exact in float32, so F32 arithmetic on them has no rounding.
inline float grid_value(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> k(-4096, 4096);
  return static_cast<float>(k(rng)) / 256.0f;
}

inline float any_finite_float(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> kind(0, 9);
  switch (kind(rng)) {
    case 0: return 0.0f;
    case 1: return -0.0f;
    default: break;
  }
  std::normal_distribution<float> n(0.0f, 1.0f);
  std::uniform_int_distribution<int> e(-20, 20);
  return std::ldexp(n(rng), e(rng));
}

inline midcot::Shape random_shape(std::mt19937_64& rng, std::uint64_t max_elements) {
  std::uniform_int_distribution<int> rank_d(0, 3);
  const int rank = rank_d(rng);
  midcot::Shape shape;
  std::uint64_t total = 1;
  for (int i = 0; i < rank; ++i) {
    std::uniform_int_distribution<std::uint64_t> dim(0, 5);
    std::uint64_t d = dim(rng);
    if (total * std::max<std::uint64_t>(d, 1) > max_elements) d = 1;
    shape.push_back(d);
    total *= std::max<std::uint64_t>(d, 1);
  }
  return shape;
}

inline midcot::DType random_dtype(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(0, 2);
  return static_cast<midcot::DType>(d(rng));
}

/// Random tensor whose bytes are arbitrary (including NaN payloads).
inline midcot::TensorView random_raw_tensor(std::mt19937_64& rng, const std::string& name) {
  midcot::TensorView t;
  t.name = name;
  t.dtype = random_dtype(rng);
  t.shape = random_shape(rng, 64);
  t.data.resize(t.byte_size());
  for (auto& b : t.data) b = static_cast<std::uint8_t>(rng());
  return t;
}

inline std::string random_name(std::mt19937_64& rng) {
  static const std::string kAlphabet = "abcdefghijklmnopqrstuvwxyz._0123456789";
  std::uniform_int_distribution<std::size_t> len(1, 12);
  std::uniform_int_distribution<std::size_t> ch(0, kAlphabet.size() - 1);
  std::string s;
  const std::size_t n = len(rng);
  for (std::size_t i = 0; i < n; ++i) s += kAlphabet[ch(rng)];
  return s;
}

inline midcot::Checkpoint random_checkpoint(std::mt19937_64& rng, std::size_t max_tensors = 6) {
  midcot::Checkpoint c;
  std::uniform_int_distribution<std::size_t> count(0, max_tensors);
  const std::size_t n = count(rng);
  while (c.size() < n) {
    std::string name = random_name(rng);
    if (name == "__metadata__" || c.contains(name)) continue;
    c.insert(random_raw_tensor(rng, name));
  }
  std::uniform_int_distribution<int> meta(0, 3);
  for (int i = meta(rng); i > 0; --i) c.set_metadata(random_name(rng), random_name(rng));
  return c;
}

}  // namespace testing_support
