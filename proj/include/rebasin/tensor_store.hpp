// Copyright 2026 The rebasin Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// MRG1: a flat archive of named f32 tensors.
//
//   bytes 0..3    "MRG1"
//   bytes 4..7    u32 LE format version (1)
//   bytes 8..15   u64 LE header length H
//   bytes 16..    H bytes of UTF-8 JSON:
//                 {"tensors": {name: {"dtype":"f32","shape":[...],
//                                     "offset":o,"nbytes":n}},
//                  "metadata": {key: string}}
//   payload       tensors back to back in lexicographic name order,
//                 offsets relative to the payload start (16 + H)

#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "rebasin/error.hpp"

namespace rebasin {

static_assert(std::endian::native == std::endian::little,
              "MRG1 I/O assumes a little-endian host");

inline constexpr char kArchiveMagic[4] = {'M', 'R', 'G', '1'};
inline constexpr std::uint32_t kArchiveVersion = 1;

// Metadata key that lets NaN/Inf values through write and read.
inline constexpr const char* kAllowNonfiniteKey = "allow_nonfinite";

struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<float> data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<float> d)
      : shape(std::move(s)), data(std::move(d)) {}

  static Tensor zeros(std::vector<std::size_t> s) {
    const std::size_t n = element_count(s);
    return Tensor(std::move(s), std::vector<float>(n, 0.0f));
  }

  static std::size_t element_count(std::span<const std::size_t> s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1},
                           std::multiplies<>());
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  bool same_bits(const Tensor& other) const {
    return shape == other.shape && data.size() == other.data.size() &&
           (data.empty() ||
            std::memcmp(data.data(), other.data.data(),
                        data.size() * sizeof(float)) == 0);
  }
};

inline std::string shape_string(std::span<const std::size_t> shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

struct TensorArchive {
  std::map<std::string, Tensor> entries;
  std::map<std::string, std::string> metadata;

  bool contains(const std::string& name) const {
    return entries.count(name) != 0;
  }

  const Tensor& at(const std::string& name) const {
    auto it = entries.find(name);
    if (it == entries.end()) {
      throw ValidationError("missing tensor '" + name + "'");
    }
    return it->second;
  }

  Tensor& at(const std::string& name) {
    auto it = entries.find(name);
    if (it == entries.end()) {
      throw ValidationError("missing tensor '" + name + "'");
    }
    return it->second;
  }

  const std::string& meta(const std::string& key) const {
    auto it = metadata.find(key);
    if (it == metadata.end()) {
      throw ValidationError("missing metadata key '" + key + "'");
    }
    return it->second;
  }

  bool allows_nonfinite() const {
    auto it = metadata.find(kAllowNonfiniteKey);
    return it != metadata.end() && it->second == "true";
  }

  bool same_bits(const TensorArchive& other) const {
    if (metadata != other.metadata) return false;
    if (entries.size() != other.entries.size()) return false;
    for (auto a = entries.begin(), b = other.entries.begin();
         a != entries.end(); ++a, ++b) {
      if (a->first != b->first || !a->second.same_bits(b->second)) {
        return false;
      }
    }
    return true;
  }
};

inline bool valid_tensor_name(std::string_view name) {
  if (name.empty()) return false;
  for (char c : name) {
    const bool ok = (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') ||
                    (c >= '0' && c <= '9') || c == '_' || c == '.';
    if (!ok) return false;
  }
  return true;
}

namespace detail {

inline void validate_tensor(const std::string& name, const Tensor& t,
                            bool allow_nonfinite) {
  if (!valid_tensor_name(name)) {
    throw ValidationError("invalid tensor name '" + name + "'");
  }
  if (t.shape.empty()) {
    throw ShapeError("tensor '" + name + "' has an empty shape");
  }
  for (std::size_t d : t.shape) {
    if (d == 0) {
      throw ShapeError("tensor '" + name + "' has a zero dimension " +
                       shape_string(t.shape));
    }
  }
  if (Tensor::element_count(t.shape) != t.data.size()) {
    throw ShapeError("tensor '" + name + "' shape " + shape_string(t.shape) +
                     " does not match " + std::to_string(t.data.size()) +
                     " values");
  }
  if (!allow_nonfinite) {
    for (float v : t.data) {
      if (!std::isfinite(v)) {
        throw ValidationError("tensor '" + name + "' holds a non-finite value");
      }
    }
  }
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>(v >> (8 * i)));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>(v >> (8 * i)));
}

inline std::uint64_t get_le(std::span<const std::uint8_t> bytes) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  }
  return v;
}

}  // namespace detail

// Serializes to an in-memory byte string. Deterministic: std::map keeps
// entries and metadata in lexicographic order.
inline std::string serialize_archive(const TensorArchive& archive) {
  const bool allow_nonfinite = archive.allows_nonfinite();
  nlohmann::ordered_json tensors = nlohmann::ordered_json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : archive.entries) {
    detail::validate_tensor(name, t, allow_nonfinite);
    const std::uint64_t nbytes = t.data.size() * sizeof(float);
    nlohmann::ordered_json entry;
    entry["dtype"] = "f32";
    entry["shape"] = t.shape;
    entry["offset"] = offset;
    entry["nbytes"] = nbytes;
    tensors[name] = std::move(entry);
    offset += nbytes;
  }
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();
  for (const auto& [k, v] : archive.metadata) meta[k] = v;

  nlohmann::ordered_json header;
  header["tensors"] = std::move(tensors);
  header["metadata"] = std::move(meta);
  const std::string header_text = header.dump();

  std::string out;
  out.reserve(16 + header_text.size() + offset);
  out.append(kArchiveMagic, 4);
  detail::put_u32(out, kArchiveVersion);
  detail::put_u64(out, header_text.size());
  out += header_text;
  for (const auto& [name, t] : archive.entries) {
    out.append(reinterpret_cast<const char*>(t.data.data()),
               t.data.size() * sizeof(float));
  }
  return out;
}

// Returns the number of bytes written.
inline std::size_t write_archive(const TensorArchive& archive,
                                 std::ostream& sink) {
  const std::string bytes = serialize_archive(archive);
  sink.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!sink) throw IoError("failed to write archive bytes");
  return bytes.size();
}

inline std::size_t write_archive(const TensorArchive& archive,
                                 const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  return write_archive(archive, f);
}

struct ReadOptions {
  bool allow_nonfinite = false;
};

inline TensorArchive read_archive(std::span<const std::uint8_t> bytes,
                                  ReadOptions options = {}) {
  if (bytes.size() < 16) {
    throw FormatError("truncated archive: " + std::to_string(bytes.size()) +
                      " bytes is shorter than the 16-byte preamble");
  }
  if (std::memcmp(bytes.data(), kArchiveMagic, 4) != 0) {
    throw FormatError("bad magic, expected MRG1");
  }
  const auto version = detail::get_le(bytes.subspan(4, 4));
  if (version != kArchiveVersion) {
    throw FormatError("unsupported format version " + std::to_string(version));
  }
  const std::uint64_t header_len = detail::get_le(bytes.subspan(8, 8));
  if (header_len > bytes.size() - 16) {
    throw FormatError("truncated archive: header declares " +
                      std::to_string(header_len) + " bytes, only " +
                      std::to_string(bytes.size() - 16) + " available");
  }
  const auto header_bytes = bytes.subspan(16, header_len);
  const auto payload = bytes.subspan(16 + header_len);

  // nlohmann silently keeps the last duplicate key; catch duplicates while
  // parsing instead.
  std::string duplicate;
  std::vector<std::string> seen_names;
  std::string top_key;
  auto on_event = [&](int depth, nlohmann::json::parse_event_t event,
                      nlohmann::json& parsed) {
    if (event == nlohmann::json::parse_event_t::key) {
      if (depth == 1) {
        top_key = parsed.get<std::string>();
      } else if (depth == 2 && top_key == "tensors") {
        auto name = parsed.get<std::string>();
        for (const auto& s : seen_names) {
          if (s == name) duplicate = name;
        }
        seen_names.push_back(std::move(name));
      }
    }
    return true;
  };
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_bytes.begin(), header_bytes.end(),
                                   on_event);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed header JSON: ") + e.what());
  }
  if (!duplicate.empty()) {
    throw FormatError("duplicate tensor name '" + duplicate + "'");
  }
  if (!header.is_object() || !header.contains("tensors") ||
      !header["tensors"].is_object()) {
    throw FormatError("header is missing the 'tensors' object");
  }

  TensorArchive archive;
  if (header.contains("metadata")) {
    const auto& meta = header["metadata"];
    if (!meta.is_object()) throw FormatError("'metadata' must be an object");
    for (const auto& [k, v] : meta.items()) {
      if (!v.is_string()) {
        throw FormatError("metadata value for '" + k + "' is not a string");
      }
      archive.metadata[k] = v.get<std::string>();
    }
  }
  const bool allow_nonfinite =
      options.allow_nonfinite || archive.allows_nonfinite();

  std::uint64_t expected_offset = 0;
  for (const auto& [name, desc] : header["tensors"].items()) {
    try {
      if (!desc.is_object()) throw FormatError("descriptor is not an object");
      if (desc.value("dtype", "") != "f32") {
        throw FormatError("unsupported dtype");
      }
      const auto& jshape = desc.at("shape");
      if (!jshape.is_array() || jshape.empty()) {
        throw FormatError("shape must be a non-empty array");
      }
      std::vector<std::size_t> shape;
      std::uint64_t count = 1;
      for (const auto& d : jshape) {
        if (!d.is_number_unsigned() || d.get<std::uint64_t>() == 0) {
          throw FormatError("shape dims must be positive integers");
        }
        const auto dim = d.get<std::uint64_t>();
        if (count > (std::uint64_t{1} << 62) / dim) {
          throw FormatError("shape element count overflows");
        }
        count *= dim;
        shape.push_back(static_cast<std::size_t>(dim));
      }
      const auto& joff = desc.at("offset");
      const auto& jn = desc.at("nbytes");
      if (!joff.is_number_unsigned() || !jn.is_number_unsigned()) {
        throw FormatError("offset/nbytes must be unsigned integers");
      }
      const auto offset = joff.get<std::uint64_t>();
      const auto nbytes = jn.get<std::uint64_t>();
      if (nbytes != count * sizeof(float)) {
        throw FormatError("size mismatch: nbytes " + std::to_string(nbytes) +
                          " but shape " + shape_string(shape) + " needs " +
                          std::to_string(count * sizeof(float)));
      }
      if (offset != expected_offset) {
        throw FormatError("offset " + std::to_string(offset) +
                          " breaks contiguous layout (expected " +
                          std::to_string(expected_offset) + ")");
      }
      if (offset > payload.size() || nbytes > payload.size() - offset) {
        throw FormatError("truncated payload");
      }
      Tensor t(std::move(shape), std::vector<float>(count));
      std::memcpy(t.data.data(), payload.data() + offset, nbytes);
      detail::validate_tensor(name, t, allow_nonfinite);
      archive.entries.emplace(name, std::move(t));
      expected_offset += nbytes;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("tensor '" + name + "': " + e.what());
    } catch (const Error& e) {
      if (e.category() == "format") {
        throw FormatError("tensor '" + name + "': " + e.what());
      }
      throw;
    }
  }
  if (expected_offset != payload.size()) {
    throw FormatError("payload holds " + std::to_string(payload.size()) +
                      " bytes but the header accounts for " +
                      std::to_string(expected_offset));
  }
  return archive;
}

inline TensorArchive read_archive(std::istream& source,
                                  ReadOptions options = {}) {
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(source)),
                                  std::istreambuf_iterator<char>());
  if (source.bad()) throw IoError("failed to read archive stream");
  return read_archive(std::span<const std::uint8_t>(bytes), options);
}

inline TensorArchive read_archive(const std::filesystem::path& path,
                                  ReadOptions options = {}) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  return read_archive(f, options);
}

inline TensorArchive read_archive_bytes(const std::string& bytes,
                                        ReadOptions options = {}) {
  return read_archive(
      std::span<const std::uint8_t>(
          reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()),
      options);
}

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// 64-bit FNV-1a, hex encoded. Used for provenance fields, not security.
inline std::string digest_bytes(std::string_view bytes) {
  std::uint64_t h = fnv1a64(bytes);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = kHex[h & 0xf];
    h >>= 4;
  }
  return out;
}

inline std::string archive_digest(const TensorArchive& archive) {
  return digest_bytes(serialize_archive(archive));
}

}  // namespace rebasin
