// Copyright 2026 The midcot Authors
// SPDX-License-Identifier: Apache-2.0
//
// Reading, validating and writing safetensors checkpoints.
//
// File layout: an 8-byte little-endian header length N, then N bytes of JSON
// mapping tensor names to {dtype, shape, data_offsets}, then the data region.
// data_offsets are [begin, end) relative to the start of the data region.
// Optional string metadata lives under "__metadata__".
//
// Opening a checkpoint reads the header only. Tensor bytes are fetched on
// demand with positioned reads, so a Checkpoint can be shared by worker threads
// that each read disjoint tensors.

#pragma once

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "midcot/dtype.hpp"
#include "midcot/error.hpp"

namespace midcot {

using Bytes = std::vector<std::uint8_t>;
using Shape = std::vector<std::uint64_t>;

inline std::uint64_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::uint64_t{1},
                         [](std::uint64_t a, std::uint64_t b) { return a * b; });
}

/// One tensor with its bytes resident in memory (row-major, little-endian).
struct TensorView {
  std::string name;
  DType dtype = DType::F32;
  Shape shape;
  Bytes data;

  std::uint64_t byte_size() const { return element_count(shape) * byte_width(dtype); }

  void validate() const {
    if (name.empty()) throw DataError("tensor name must be non-empty");
    if (data.size() != byte_size()) {
      throw DataError("tensor '" + name + "': data holds " + std::to_string(data.size()) +
                      " bytes but shape and dtype require " + std::to_string(byte_size()));
    }
  }

  std::vector<float> to_f32() const { return cast_to_f32(data, dtype); }

  static TensorView from_f32(std::string name, Shape shape, std::span<const float> values,
                             DType dtype = DType::F32) {
    TensorView t{std::move(name), dtype, std::move(shape), cast_from_f32(values, dtype)};
    t.validate();
    return t;
  }

  friend bool operator==(const TensorView&, const TensorView&) = default;
};

struct TensorInfo {
  std::string name;
  DType dtype = DType::F32;
  Shape shape;
  std::uint64_t byte_size = 0;
};

/// Counters for bytes pulled from a backing file. Header bytes are counted
/// separately from tensor data.
struct IoStats {
  std::uint64_t header_bytes = 0;
  std::uint64_t data_bytes = 0;
  std::uint64_t data_reads = 0;
};

namespace detail {

class FileSource {
 public:
  explicit FileSource(const std::filesystem::path& path) : path_(path) {
    fd_ = ::open(path.c_str(), O_RDONLY | O_CLOEXEC);
    if (fd_ < 0) {
      throw DataError("cannot open '" + path.string() + "': " + std::strerror(errno));
    }
    struct stat st {};
    if (::fstat(fd_, &st) != 0) {
      ::close(fd_);
      throw DataError("cannot stat '" + path.string() + "': " + std::strerror(errno));
    }
    size_ = static_cast<std::uint64_t>(st.st_size);
  }
  FileSource(const FileSource&) = delete;
  FileSource& operator=(const FileSource&) = delete;
  ~FileSource() {
    if (fd_ >= 0) ::close(fd_);
  }

  std::uint64_t size() const noexcept { return size_; }
  const std::filesystem::path& path() const noexcept { return path_; }

  void read(std::uint64_t offset, std::uint8_t* out, std::uint64_t len, bool header) const {
    std::uint64_t done = 0;
    while (done < len) {
      const ssize_t n = ::pread(fd_, out + done, len - done, static_cast<off_t>(offset + done));
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) {
        throw DataError("short read from '" + path_.string() + "' at byte " +
                        std::to_string(offset + done));
      }
      done += static_cast<std::uint64_t>(n);
    }
    if (header) {
      header_bytes_ += len;
    } else {
      data_bytes_ += len;
      ++data_reads_;
    }
  }

  IoStats stats() const noexcept {
    return {header_bytes_.load(), data_bytes_.load(), data_reads_.load()};
  }

 private:
  std::filesystem::path path_;
  int fd_ = -1;
  std::uint64_t size_ = 0;
  mutable std::atomic<std::uint64_t> header_bytes_{0};
  mutable std::atomic<std::uint64_t> data_bytes_{0};
  mutable std::atomic<std::uint64_t> data_reads_{0};
};

/// Byte position of a tensor's key inside the header text, for diagnostics.
inline std::uint64_t key_position(std::string_view header, const std::string& name) {
  const std::string quoted = nlohmann::json(name).dump();
  const auto at = header.find(quoted);
  return 8 + (at == std::string_view::npos ? 0 : at);
}

}  // namespace detail

/// A named, lexicographically ordered set of tensors plus string metadata.
/// Tensors are either resident or backed by a byte range of an opened file.
class Checkpoint {
 public:
  Checkpoint() = default;

  void insert(TensorView tensor) {
    tensor.validate();
    if (entries_.count(tensor.name) != 0) {
      throw DataError("duplicate tensor name '" + tensor.name + "'");
    }
    Entry e;
    e.info = {tensor.name, tensor.dtype, tensor.shape, tensor.byte_size()};
    e.resident = std::make_shared<const Bytes>(std::move(tensor.data));
    const std::string key = e.info.name;
    entries_.emplace(key, std::move(e));
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [name, _] : entries_) out.push_back(name);
    return out;
  }

  const TensorInfo& info(const std::string& name) const { return entry(name).info; }

  /// Reads (or copies) one tensor's bytes. Only that tensor's byte range is
  /// touched in the backing file.
  TensorView tensor(const std::string& name) const {
    const Entry& e = entry(name);
    TensorView t{e.info.name, e.info.dtype, e.info.shape, {}};
    if (e.resident) {
      t.data = *e.resident;
    } else {
      t.data.resize(e.info.byte_size);
      e.source->read(e.file_offset, t.data.data(), e.info.byte_size, false);
    }
    return t;
  }

  std::vector<float> tensor_f32(const std::string& name) const { return tensor(name).to_f32(); }

  const std::map<std::string, std::string>& metadata() const noexcept { return metadata_; }
  void set_metadata(const std::string& key, std::string value) { metadata_[key] = std::move(value); }

  const std::optional<std::filesystem::path>& source_path() const noexcept { return source_path_; }

  /// Aggregate I/O over every backing file.
  IoStats io_stats() const {
    IoStats total;
    std::vector<const detail::FileSource*> seen;
    for (const auto& [_, e] : entries_) {
      if (!e.source || std::find(seen.begin(), seen.end(), e.source.get()) != seen.end()) continue;
      seen.push_back(e.source.get());
      const IoStats s = e.source->stats();
      total.header_bytes += s.header_bytes;
      total.data_bytes += s.data_bytes;
      total.data_reads += s.data_reads;
    }
    return total;
  }

  /// Tensor-by-tensor equality of names, dtypes, shapes and bytes.
  bool same_tensors(const Checkpoint& other) const {
    if (names() != other.names()) return false;
    for (const auto& name : names()) {
      if (tensor(name) != other.tensor(name)) return false;
    }
    return true;
  }

  friend Checkpoint open_checkpoint(const std::filesystem::path& path);
  friend Checkpoint open_sharded_checkpoint(const std::filesystem::path& manifest);

 private:
  struct Entry {
    TensorInfo info;
    std::shared_ptr<const Bytes> resident;
    std::shared_ptr<const detail::FileSource> source;
    std::uint64_t file_offset = 0;
  };

  const Entry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw DataError("no tensor named '" + name + "'");
    return it->second;
  }

  std::map<std::string, Entry> entries_;
  std::map<std::string, std::string> metadata_;
  std::optional<std::filesystem::path> source_path_;
};

/// Opens a safetensors file and validates its header. No tensor data is read.
inline Checkpoint open_checkpoint(const std::filesystem::path& path) {
  auto source = std::make_shared<detail::FileSource>(path);
  const std::uint64_t file_size = source->size();
  if (file_size < 8) {
    throw FormatError("", 0, "file is " + std::to_string(file_size) +
                                 " bytes, too short for the 8-byte header length");
  }
  std::uint8_t len_bytes[8];
  source->read(0, len_bytes, 8, true);
  std::uint64_t header_len = 0;
  for (int i = 7; i >= 0; --i) header_len = (header_len << 8) | len_bytes[i];
  if (header_len > file_size - 8) {
    throw FormatError("", 0, "malformed header length " + std::to_string(header_len) +
                                 " exceeds the " + std::to_string(file_size - 8) +
                                 " bytes after the length prefix");
  }

  std::string header(header_len, '\0');
  source->read(8, reinterpret_cast<std::uint8_t*>(header.data()), header_len, true);

  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(header);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("", 8 + (e.byte > 0 ? e.byte - 1 : 0),
                      std::string("header is not valid JSON (") + e.what() + ")");
  }
  if (!doc.is_object()) throw FormatError("", 8, "header JSON must be an object");

  const std::uint64_t data_start = 8 + header_len;
  const std::uint64_t data_size = file_size - data_start;

  Checkpoint ckpt;
  ckpt.source_path_ = path;

  struct Span {
    std::uint64_t begin, end;
    std::string name;
  };
  std::vector<Span> spans;

  for (auto it = doc.begin(); it != doc.end(); ++it) {
    const std::string& name = it.key();
    const std::uint64_t key_pos = detail::key_position(header, name);
    const nlohmann::json& v = it.value();

    if (name == "__metadata__") {
      if (!v.is_object()) throw FormatError(name, key_pos, "__metadata__ must be an object");
      for (auto m = v.begin(); m != v.end(); ++m) {
        if (!m.value().is_string()) {
          throw FormatError(name, key_pos, "metadata value for '" + m.key() + "' is not a string");
        }
        ckpt.metadata_[m.key()] = m.value().get<std::string>();
      }
      continue;
    }
    if (name.empty()) throw FormatError(name, key_pos, "empty tensor name");
    if (!v.is_object()) throw FormatError(name, key_pos, "tensor entry must be an object");

    auto dt = v.find("dtype");
    if (dt == v.end() || !dt->is_string()) throw FormatError(name, key_pos, "missing dtype");
    const auto dtype = parse_dtype(dt->get<std::string>());
    if (!dtype) {
      throw FormatError(name, key_pos, "unsupported dtype '" + dt->get<std::string>() + "'");
    }

    auto sh = v.find("shape");
    if (sh == v.end() || !sh->is_array()) throw FormatError(name, key_pos, "missing shape");
    Shape shape;
    for (const auto& d : *sh) {
      if (!d.is_number_unsigned()) {
        throw FormatError(name, key_pos, "shape entries must be non-negative integers");
      }
      shape.push_back(d.get<std::uint64_t>());
    }

    auto off = v.find("data_offsets");
    if (off == v.end() || !off->is_array() || off->size() != 2 || !(*off)[0].is_number_unsigned() ||
        !(*off)[1].is_number_unsigned()) {
      throw FormatError(name, key_pos, "data_offsets must be two non-negative integers");
    }
    const auto begin = (*off)[0].get<std::uint64_t>();
    const auto end = (*off)[1].get<std::uint64_t>();
    if (end < begin) {
      throw FormatError(name, data_start + begin,
                        "data_offsets end " + std::to_string(end) + " precedes begin");
    }
    if (end > data_size) {
      throw FormatError(name, data_start + begin,
                        "offsets out of bounds: [" + std::to_string(begin) + ", " +
                            std::to_string(end) + ") exceeds the " + std::to_string(data_size) +
                            "-byte data region");
    }
    const std::uint64_t want = element_count(shape) * byte_width(*dtype);
    if (end - begin != want) {
      throw FormatError(name, data_start + begin,
                        "shape/offset size mismatch: offsets span " + std::to_string(end - begin) +
                            " bytes, shape and dtype require " + std::to_string(want));
    }

    spans.push_back({begin, end, name});
    Checkpoint::Entry e;
    e.info = {name, *dtype, std::move(shape), want};
    e.source = source;
    e.file_offset = data_start + begin;
    ckpt.entries_.emplace(name, std::move(e));
  }

  std::sort(spans.begin(), spans.end(), [](const Span& a, const Span& b) {
    return a.begin != b.begin ? a.begin < b.begin : a.end < b.end;
  });
  const Span* furthest = nullptr;
  for (const Span& cur : spans) {
    if (cur.end == cur.begin) continue;
    if (furthest != nullptr && cur.begin < furthest->end) {
      throw FormatError(cur.name, data_start + cur.begin,
                        "offsets overlapping with tensor '" + furthest->name + "'");
    }
    if (furthest == nullptr || cur.end > furthest->end) furthest = &cur;
  }
  return ckpt;
}

/// Opens a checkpoint split over several files. The manifest is JSON, either
/// {"shards": [file, ...]} or the common {"weight_map": {tensor: file}} index.
/// Shards are concatenated; a tensor present in two shards is an error.
inline Checkpoint open_sharded_checkpoint(const std::filesystem::path& manifest) {
  nlohmann::json doc;
  try {
    std::ifstream in(manifest);
    if (!in) throw DataError("cannot open shard manifest '" + manifest.string() + "'");
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("shard manifest '" + manifest.string() + "': " + e.what());
  }
  std::vector<std::string> files;
  if (doc.contains("shards") && doc["shards"].is_array()) {
    for (const auto& f : doc["shards"]) files.push_back(f.get<std::string>());
  } else if (doc.contains("weight_map") && doc["weight_map"].is_object()) {
    for (const auto& [_, f] : doc["weight_map"].items()) {
      const auto file = f.get<std::string>();
      if (std::find(files.begin(), files.end(), file) == files.end()) files.push_back(file);
    }
  } else {
    throw DataError("shard manifest '" + manifest.string() + "' lists no shards");
  }
  std::sort(files.begin(), files.end());

  Checkpoint out;
  out.source_path_ = manifest;
  for (const auto& file : files) {
    Checkpoint shard = open_checkpoint(manifest.parent_path() / file);
    for (auto& [name, e] : shard.entries_) {
      if (out.entries_.count(name) != 0) {
        throw DataError("tensor '" + name + "' appears in more than one shard");
      }
      out.entries_.emplace(name, e);
    }
    for (const auto& [k, v] : shard.metadata_) out.metadata_.emplace(k, v);
  }
  return out;
}

/// Placement of each tensor in a canonical file: names in lexicographic order,
/// data packed back to back from offset 0.
struct Layout {
  std::string header;  // padded to a multiple of 8 bytes
  std::vector<std::pair<std::string, std::uint64_t>> offsets;  // absolute file offsets
  std::uint64_t file_size = 0;
};

inline Layout canonical_layout(const std::vector<TensorInfo>& infos,
                               const std::map<std::string, std::string>& metadata) {
  std::vector<TensorInfo> sorted = infos;
  std::sort(sorted.begin(), sorted.end(),
            [](const TensorInfo& a, const TensorInfo& b) { return a.name < b.name; });
  nlohmann::json header = nlohmann::json::object();
  if (!metadata.empty()) header["__metadata__"] = metadata;
  std::uint64_t cursor = 0;
  std::vector<std::pair<std::string, std::uint64_t>> rel;
  for (const auto& info : sorted) {
    if (info.name.empty()) throw DataError("tensor name must be non-empty");
    if (info.name == "__metadata__") throw DataError("'__metadata__' is reserved");
    if (header.contains(info.name)) throw DataError("duplicate tensor name '" + info.name + "'");
    header[info.name] = {{"dtype", std::string(to_string(info.dtype))},
                         {"shape", info.shape},
                         {"data_offsets", {cursor, cursor + info.byte_size}}};
    rel.emplace_back(info.name, cursor);
    cursor += info.byte_size;
  }
  Layout layout;
  layout.header = header.dump();
  layout.header.append((8 - layout.header.size() % 8) % 8, ' ');
  const std::uint64_t data_start = 8 + layout.header.size();
  for (auto& [name, off] : rel) layout.offsets.emplace_back(name, data_start + off);
  layout.file_size = data_start + cursor;
  return layout;
}

namespace detail {

/// Output file written through a temporary sibling and renamed into place on
/// commit(). Supports positioned writes from several threads.
class AtomicFile {
 public:
  explicit AtomicFile(std::filesystem::path path)
      : path_(std::move(path)), tmp_(path_.string() + ".partial") {
    fd_ = ::open(tmp_.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
    if (fd_ < 0) {
      throw DataError("cannot write '" + path_.string() + "': " + std::strerror(errno));
    }
  }
  AtomicFile(const AtomicFile&) = delete;
  AtomicFile& operator=(const AtomicFile&) = delete;
  ~AtomicFile() {
    if (fd_ >= 0) {
      ::close(fd_);
      std::error_code ec;
      std::filesystem::remove(tmp_, ec);
    }
  }

  void write_at(std::uint64_t offset, const void* data, std::uint64_t len) const {
    const auto* p = static_cast<const std::uint8_t*>(data);
    std::uint64_t done = 0;
    while (done < len) {
      const ssize_t n = ::pwrite(fd_, p + done, len - done, static_cast<off_t>(offset + done));
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) {
        throw DataError("write to '" + path_.string() + "' failed: " + std::strerror(errno));
      }
      done += static_cast<std::uint64_t>(n);
    }
  }

  void commit() {
    if (::fsync(fd_) != 0 || ::close(fd_) != 0) {
      fd_ = -1;
      throw DataError("cannot finalize '" + path_.string() + "': " + std::strerror(errno));
    }
    fd_ = -1;
    std::error_code ec;
    std::filesystem::rename(tmp_, path_, ec);
    if (ec) throw DataError("cannot move output into place at '" + path_.string() + "': " + ec.message());
  }

 private:
  std::filesystem::path path_;
  std::filesystem::path tmp_;
  int fd_ = -1;
};

inline void write_header(const AtomicFile& out, const Layout& layout) {
  std::uint8_t len[8];
  std::uint64_t n = layout.header.size();
  for (int i = 0; i < 8; ++i, n >>= 8) len[i] = static_cast<std::uint8_t>(n & 0xFF);
  out.write_at(0, len, 8);
  out.write_at(8, layout.header.data(), layout.header.size());
}

}  // namespace detail

/// Writes the canonical encoding of `ckpt`: sorted header keys, tensors packed
/// in name order, header padded with spaces to 8 bytes. Equal checkpoints give
/// identical files. Tensors are streamed one at a time.
inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::vector<TensorInfo> infos;
  for (const auto& name : ckpt.names()) infos.push_back(ckpt.info(name));
  const Layout layout = canonical_layout(infos, ckpt.metadata());
  detail::AtomicFile out(path);
  detail::write_header(out, layout);
  for (const auto& [name, offset] : layout.offsets) {
    const TensorView t = ckpt.tensor(name);
    t.validate();
    out.write_at(offset, t.data.data(), t.data.size());
  }
  out.commit();
}

}  // namespace midcot
