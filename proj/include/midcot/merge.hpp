// Copyright 2026 The midcot Authors
// SPDX-License-Identifier: Apache-2.0
//
// Delta-based checkpoint merging: per-tensor deltas against a base, DARE random
// drop with 1/(1-p) rescaling, and TIES sign-consensus combination.
//
// All arithmetic happens in float32. For one element i of tensor t:
//
//   delta_k      = contributor_k[i] - base[i]
//   sparsified_k = kept ? delta_k * float(1 / (1 - p_k)) : 0       (DARE)
//   DareTies     : sign  = sign(sum_k w_k * sparsified_k)
//                  value = sum_{k agrees} w_k * sparsified_k / sum_{k agrees} w_k
//   DareLinear   : value = sum_k w_k * sparsified_k
//   TaskArith.   : value = sum_k w_k * delta_k
//   merged[i]    = value == 0 ? base[i] : base[i] + value
//
// Sums run over contributors in config order. A contributor "agrees" when its
// element is nonzero with the elected sign.
//
// Randomness: each (tensor, contributor) pair owns a std::mt19937_64 seeded
// with splitmix64(derive_tensor_seed(seed, name) + k). Uniforms are the top 53
// bits of each draw scaled to [0, 1); an element is dropped when u < p, drawn
// in row-major order. Results therefore do not depend on thread scheduling.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "midcot/error.hpp"
#include "midcot/hash.hpp"
#include "midcot/parallel.hpp"
#include "midcot/tensor_store.hpp"

namespace midcot {

enum class MergeMode { DareTies, DareLinear, TaskArithmetic };
enum class OutputDType { PreserveBase, F32 };

constexpr std::string_view to_string(MergeMode m) noexcept {
  switch (m) {
    case MergeMode::DareTies: return "dare_ties";
    case MergeMode::DareLinear: return "dare_linear";
    case MergeMode::TaskArithmetic: return "task_arithmetic";
  }
  return "?";
}

constexpr std::string_view to_string(OutputDType d) noexcept {
  return d == OutputDType::F32 ? "f32" : "preserve_base";
}

struct Contributor {
  std::filesystem::path path;
  double weight = 1.0;
  double drop_rate = 0.0;
};

/// A merge recipe. Paths are kept as written; `base_dir` resolves relative ones.
struct MergeConfig {
  std::filesystem::path base;
  std::vector<Contributor> contributors;
  std::uint64_t seed = 0;
  MergeMode mode = MergeMode::DareTies;
  OutputDType output_dtype = OutputDType::PreserveBase;
  std::filesystem::path base_dir;

  void validate() const {
    if (base.empty()) throw ConfigError("base: must name a checkpoint");
    if (contributors.empty()) throw ConfigError("contributors: at least one contributor is required");
    for (std::size_t k = 0; k < contributors.size(); ++k) {
      const auto& c = contributors[k];
      const std::string field = "contributors[" + std::to_string(k) + "]";
      if (c.path.empty()) throw ConfigError(field + ".path: must name a checkpoint");
      if (!std::isfinite(c.weight)) throw ConfigError(field + ".weight: must be finite");
      if (!(c.drop_rate >= 0.0 && c.drop_rate < 1.0)) {
        throw ConfigError(field + ".drop_rate: must be in [0, 1), got " +
                          nlohmann::json(c.drop_rate).dump());
      }
    }
  }

  std::filesystem::path resolve(const std::filesystem::path& p) const {
    return p.is_absolute() || base_dir.empty() ? p : base_dir / p;
  }

  nlohmann::json to_json() const {
    nlohmann::json contribs = nlohmann::json::array();
    for (const auto& c : contributors) {
      contribs.push_back({{"path", c.path.generic_string()},
                          {"weight", c.weight},
                          {"drop_rate", c.drop_rate}});
    }
    return {{"base", base.generic_string()},
            {"contributors", contribs},
            {"mode", std::string(to_string(mode))},
            {"seed", seed},
            {"output_dtype", std::string(to_string(output_dtype))}};
  }

  /// Digest of the canonical recipe (sorted keys, compact).
  std::string sha256() const { return sha256_hex(to_json().dump()); }

  static MergeConfig from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir = {}) {
    if (!doc.is_object()) throw ConfigError("merge recipe must be an object");
    static const char* const kKeys[] = {"base", "contributors", "mode", "seed", "output_dtype"};
    for (const auto& [key, _] : doc.items()) {
      if (std::find(std::begin(kKeys), std::end(kKeys), key) == std::end(kKeys)) {
        throw ConfigError(key + ": unknown merge recipe key");
      }
    }
    MergeConfig cfg;
    cfg.base_dir = base_dir;

    if (!doc.contains("base") || !doc["base"].is_string()) throw ConfigError("base: required string");
    cfg.base = doc["base"].get<std::string>();

    if (!doc.contains("contributors") || !doc["contributors"].is_array()) {
      throw ConfigError("contributors: required list");
    }
    std::size_t k = 0;
    for (const auto& c : doc["contributors"]) {
      const std::string field = "contributors[" + std::to_string(k++) + "]";
      if (!c.is_object()) throw ConfigError(field + ": must be an object");
      Contributor out;
      if (!c.contains("path") || !c["path"].is_string()) throw ConfigError(field + ".path: required string");
      out.path = c["path"].get<std::string>();
      if (!c.contains("weight") || !c["weight"].is_number()) throw ConfigError(field + ".weight: required number");
      out.weight = c["weight"].get<double>();
      if (!c.contains("drop_rate") || !c["drop_rate"].is_number()) {
        throw ConfigError(field + ".drop_rate: required number");
      }
      out.drop_rate = c["drop_rate"].get<double>();
      cfg.contributors.push_back(std::move(out));
    }

    if (!doc.contains("mode") || !doc["mode"].is_string()) throw ConfigError("mode: required string");
    const auto mode = doc["mode"].get<std::string>();
    if (mode == "dare_ties") cfg.mode = MergeMode::DareTies;
    else if (mode == "dare_linear") cfg.mode = MergeMode::DareLinear;
    else if (mode == "task_arithmetic") cfg.mode = MergeMode::TaskArithmetic;
    else throw ConfigError("mode: expected dare_ties, dare_linear or task_arithmetic, got '" + mode + "'");

    if (!doc.contains("seed") || !doc["seed"].is_number_unsigned()) {
      throw ConfigError("seed: required non-negative integer");
    }
    cfg.seed = doc["seed"].get<std::uint64_t>();

    if (doc.contains("output_dtype")) {
      const auto& od = doc["output_dtype"];
      if (od == "preserve_base") cfg.output_dtype = OutputDType::PreserveBase;
      else if (od == "f32") cfg.output_dtype = OutputDType::F32;
      else throw ConfigError("output_dtype: expected preserve_base or f32");
    }
    cfg.validate();
    return cfg;
  }
};

inline MergeConfig load_merge_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read merge recipe '" + path.string() + "'");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("merge recipe '" + path.string() + "': " + e.what());
  }
  return MergeConfig::from_json(doc, path.parent_path());
}

struct DeltaTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

/// Stable per-tensor seed: splitmix64(seed ^ splitmix64(fnv1a64(name))).
constexpr std::uint64_t derive_tensor_seed(std::uint64_t global_seed, std::string_view tensor_name) noexcept {
  return splitmix64(global_seed ^ splitmix64(fnv1a64(tensor_name)));
}

constexpr std::uint64_t contributor_stream_seed(std::uint64_t tensor_seed, std::size_t k) noexcept {
  return splitmix64(tensor_seed + k);
}

/// Uniform [0, 1) doubles from a seeded mt19937_64, identical on every platform.
class DropStream {
 public:
  explicit DropStream(std::uint64_t seed) : engine_(seed) {}
  double next_uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

 private:
  std::mt19937_64 engine_;
};

namespace detail {

inline DeltaTensor delta_against(const std::vector<float>& base, const Checkpoint& ft,
                                 const TensorInfo& base_info) {
  const TensorInfo& info = ft.info(base_info.name);
  if (info.shape != base_info.shape) {
    throw DataError("tensor '" + base_info.name + "': shape mismatch between contributor and base");
  }
  const std::vector<float> other = ft.tensor_f32(base_info.name);
  DeltaTensor d{base_info.name, base_info.shape, std::vector<float>(base.size())};
  for (std::size_t i = 0; i < base.size(); ++i) d.values[i] = other[i] - base[i];
  return d;
}

inline void check_same_shape(std::span<const DeltaTensor> deltas) {
  if (deltas.empty()) throw DataError("no deltas to combine");
  for (const auto& d : deltas) {
    if (d.shape != deltas.front().shape || d.values.size() != deltas.front().values.size()) {
      throw DataError("tensor '" + deltas.front().name + "': delta shape mismatch");
    }
  }
}

constexpr std::int8_t sign_of(float v) noexcept { return v > 0.0f ? 1 : (v < 0.0f ? -1 : 0); }

}  // namespace detail

/// values[i] = fine_tuned[i] - base[i] in float32.
inline DeltaTensor compute_delta(const Checkpoint& fine_tuned, const Checkpoint& base,
                                 const std::string& name) {
  if (!base.contains(name)) throw DataError("base checkpoint has no tensor '" + name + "'");
  if (!fine_tuned.contains(name)) throw DataError("fine-tuned checkpoint has no tensor '" + name + "'");
  return detail::delta_against(base.tensor_f32(name), fine_tuned, base.info(name));
}

/// DARE: drop each element with probability p, rescale survivors by 1/(1-p).
inline DeltaTensor dare_sparsify(DeltaTensor delta, double drop_rate, DropStream& rng) {
  if (!(drop_rate >= 0.0 && drop_rate < 1.0)) {
    throw ConfigError("drop_rate must be in [0, 1), got " + nlohmann::json(drop_rate).dump());
  }
  if (drop_rate == 0.0) return delta;
  const auto scale = static_cast<float>(1.0 / (1.0 - drop_rate));
  for (float& v : delta.values) {
    v = rng.next_uniform() < drop_rate ? 0.0f : v * scale;
  }
  return delta;
}

/// Elected sign per element: sign of the weighted sum, 0 on exact cancellation.
inline std::vector<std::int8_t> ties_sign_elect(std::span<const DeltaTensor> deltas,
                                                std::span<const float> weights) {
  detail::check_same_shape(deltas);
  if (weights.size() != deltas.size()) throw DataError("ties_sign_elect: one weight per delta required");
  const std::size_t n = deltas.front().values.size();
  std::vector<std::int8_t> signs(n);
  for (std::size_t i = 0; i < n; ++i) {
    float sum = 0.0f;
    for (std::size_t k = 0; k < deltas.size(); ++k) sum += weights[k] * deltas[k].values[i];
    signs[i] = detail::sign_of(sum);
  }
  return signs;
}

/// Weighted mean of the contributions that agree with the elected sign.
inline DeltaTensor ties_combine(std::span<const DeltaTensor> deltas, std::span<const float> weights,
                                std::span<const std::int8_t> signs) {
  detail::check_same_shape(deltas);
  if (weights.size() != deltas.size()) throw DataError("ties_combine: one weight per delta required");
  const std::size_t n = deltas.front().values.size();
  if (signs.size() != n) throw DataError("ties_combine: sign tensor shape mismatch");
  DeltaTensor out{deltas.front().name, deltas.front().shape, std::vector<float>(n, 0.0f)};
  for (std::size_t i = 0; i < n; ++i) {
    if (signs[i] == 0) continue;
    float num = 0.0f;
    float den = 0.0f;
    bool any = false;
    for (std::size_t k = 0; k < deltas.size(); ++k) {
      const float v = deltas[k].values[i];
      if (v == 0.0f || detail::sign_of(v) != signs[i]) continue;
      num += weights[k] * v;
      den += weights[k];
      any = true;
    }
    if (!any) continue;
    // Agreeing weights that cancel exactly leave the numerator undivided.
    out.values[i] = den == 0.0f ? num : num / den;
  }
  return out;
}

inline DeltaTensor weighted_sum(std::span<const DeltaTensor> deltas, std::span<const float> weights) {
  detail::check_same_shape(deltas);
  if (weights.size() != deltas.size()) throw DataError("weighted_sum: one weight per delta required");
  DeltaTensor out{deltas.front().name, deltas.front().shape,
                  std::vector<float>(deltas.front().values.size(), 0.0f)};
  for (std::size_t i = 0; i < out.values.size(); ++i) {
    float sum = 0.0f;
    for (std::size_t k = 0; k < deltas.size(); ++k) sum += weights[k] * deltas[k].values[i];
    out.values[i] = sum;
  }
  return out;
}

/// Checks that every contributor tensor exists in base with the same shape.
inline void check_compatible(const Checkpoint& base, std::span<const Checkpoint> contributors) {
  for (std::size_t k = 0; k < contributors.size(); ++k) {
    for (const auto& name : contributors[k].names()) {
      if (!base.contains(name)) {
        throw DataError("contributors[" + std::to_string(k) + "]: tensor '" + name +
                        "' has no counterpart in base");
      }
      if (contributors[k].info(name).shape != base.info(name).shape) {
        throw DataError("contributors[" + std::to_string(k) + "]: tensor '" + name +
                        "' shape differs from base");
      }
    }
  }
}

/// Merges a single tensor. `contributors` are positionally aligned with
/// config.contributors.
inline TensorView merge_tensor(const MergeConfig& config, const Checkpoint& base,
                               std::span<const Checkpoint> contributors, const std::string& name) {
  const TensorInfo& info = base.info(name);
  const std::vector<float> base_values = base.tensor_f32(name);
  const std::uint64_t tensor_seed = derive_tensor_seed(config.seed, name);

  std::vector<DeltaTensor> deltas;
  std::vector<float> weights;
  deltas.reserve(contributors.size());
  for (std::size_t k = 0; k < contributors.size(); ++k) {
    DeltaTensor d = contributors[k].contains(name)
                        ? detail::delta_against(base_values, contributors[k], info)
                        : DeltaTensor{name, info.shape, std::vector<float>(base_values.size(), 0.0f)};
    if (config.mode != MergeMode::TaskArithmetic) {
      DropStream rng(contributor_stream_seed(tensor_seed, k));
      d = dare_sparsify(std::move(d), config.contributors[k].drop_rate, rng);
    }
    deltas.push_back(std::move(d));
    weights.push_back(static_cast<float>(config.contributors[k].weight));
  }

  const DeltaTensor combined = config.mode == MergeMode::DareTies
                                   ? ties_combine(deltas, weights, ties_sign_elect(deltas, weights))
                                   : weighted_sum(deltas, weights);

  std::vector<float> merged(base_values.size());
  for (std::size_t i = 0; i < merged.size(); ++i) {
    const float c = combined.values[i];
    merged[i] = c == 0.0f ? base_values[i] : base_values[i] + c;
  }
  const DType out_dtype = config.output_dtype == OutputDType::F32 ? DType::F32 : info.dtype;
  return TensorView{name, out_dtype, info.shape, cast_from_f32(merged, out_dtype)};
}

inline std::map<std::string, std::string> merge_metadata(const MergeConfig& config,
                                                          const Checkpoint& base) {
  std::map<std::string, std::string> meta = base.metadata();
  meta["merge.mode"] = std::string(to_string(config.mode));
  meta["merge.seed"] = std::to_string(config.seed);
  meta["merge.config_sha256"] = config.sha256();
  return meta;
}

/// In-memory merge. Tensors are processed on up to `threads` workers.
inline Checkpoint merge(const MergeConfig& config, const Checkpoint& base,
                        std::span<const Checkpoint> contributors, unsigned threads = 1) {
  config.validate();
  if (contributors.size() != config.contributors.size()) {
    throw ConfigError("merge: expected " + std::to_string(config.contributors.size()) +
                      " contributor checkpoints, got " + std::to_string(contributors.size()));
  }
  check_compatible(base, contributors);
  const std::vector<std::string> names = base.names();
  std::vector<TensorView> results(names.size());
  parallel_for(names.size(), threads,
               [&](std::size_t i) { results[i] = merge_tensor(config, base, contributors, names[i]); });
  Checkpoint out;
  for (auto& t : results) out.insert(std::move(t));
  for (const auto& [k, v] : merge_metadata(config, base)) out.set_metadata(k, v);
  return out;
}

/// Streaming merge straight to a canonical safetensors file. Produces the same
/// bytes as save_checkpoint(merge(...)) while holding only in-flight tensors.
inline void merge_to_file(const MergeConfig& config, const Checkpoint& base,
                          std::span<const Checkpoint> contributors, const std::filesystem::path& output,
                          unsigned threads = 1) {
  config.validate();
  if (contributors.size() != config.contributors.size()) {
    throw ConfigError("merge: expected " + std::to_string(config.contributors.size()) +
                      " contributor checkpoints, got " + std::to_string(contributors.size()));
  }
  check_compatible(base, contributors);
  std::vector<TensorInfo> infos;
  for (const auto& name : base.names()) {
    TensorInfo info = base.info(name);
    if (config.output_dtype == OutputDType::F32) {
      info.dtype = DType::F32;
      info.byte_size = element_count(info.shape) * 4;
    }
    infos.push_back(std::move(info));
  }
  const Layout layout = canonical_layout(infos, merge_metadata(config, base));
  detail::AtomicFile out(output);
  detail::write_header(out, layout);
  parallel_for(layout.offsets.size(), threads, [&](std::size_t i) {
    const auto& [name, offset] = layout.offsets[i];
    const TensorView t = merge_tensor(config, base, contributors, name);
    out.write_at(offset, t.data.data(), t.data.size());
  });
  out.commit();
}

/// Opens a checkpoint file, or a shard manifest when the path ends in .json.
inline Checkpoint open_any_checkpoint(const std::filesystem::path& path) {
  return path.extension() == ".json" ? open_sharded_checkpoint(path) : open_checkpoint(path);
}

struct OpenedMerge {
  Checkpoint base;
  std::vector<Checkpoint> contributors;
};

inline OpenedMerge open_merge_inputs(const MergeConfig& config) {
  OpenedMerge m;
  m.base = open_any_checkpoint(config.resolve(config.base));
  for (const auto& c : config.contributors) m.contributors.push_back(open_any_checkpoint(config.resolve(c.path)));
  return m;
}

}  // namespace midcot
