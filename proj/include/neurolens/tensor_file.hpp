#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "neurolens/error.hpp"

namespace neurolens {

/// One named float32 tensor, row-major.
struct NamedTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float> data;
};

/// Container format shared by model weights and probes: a JSON manifest listing
/// every tensor (name, dtype, shape, byte offset, byte length) plus one raw
/// little-endian float32 blob. See docs/FORMATS.md.
namespace tensor_file {

inline std::size_t element_count(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
  }
}

/// Writes `<manifest_path>` and a blob next to it named `blob_name`.
/// `header` supplies extra manifest fields (format, config, ...); "blob" and "tensors" are filled here.
inline void write(const std::filesystem::path& manifest_path, const std::string& blob_name,
                  nlohmann::json header, const std::vector<NamedTensor>& tensors) {
  const auto dir = manifest_path.parent_path();
  if (!dir.empty()) std::filesystem::create_directories(dir);
  std::ofstream blob(dir / blob_name, std::ios::binary);
  if (!blob) fail(ErrorCode::IoError, "cannot write blob " + (dir / blob_name).string());

  nlohmann::json entries = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    if (element_count(t.shape) != t.data.size()) {
      fail(ErrorCode::ShapeMismatch, "tensor '" + t.name + "' data does not match its shape");
    }
    for (float f : t.data) {
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      bits = to_le(bits);
      blob.write(reinterpret_cast<const char*>(&bits), 4);
    }
    const std::uint64_t length = 4ULL * t.data.size();
    entries.push_back({{"name", t.name}, {"dtype", "float32"}, {"shape", t.shape}, {"offset", offset}, {"length", length}});
    offset += length;
  }
  header["blob"] = blob_name;
  header["tensors"] = entries;
  std::ofstream os(manifest_path, std::ios::binary);
  if (!os) fail(ErrorCode::IoError, "cannot write manifest " + manifest_path.string());
  os << header.dump(2) << '\n';
}

struct Loaded {
  nlohmann::json manifest;
  std::map<std::string, NamedTensor> tensors;
};

inline nlohmann::json read_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream is(manifest_path, std::ios::binary);
  if (!is) fail(ErrorCode::IoError, "cannot read manifest " + manifest_path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::SchemaError, "manifest " + manifest_path.string() + " is not valid JSON: " + e.what());
  }
}

/// Reads the manifest and every tensor it lists. Byte lengths must match declared shapes.
inline Loaded read(const std::filesystem::path& manifest_path) {
  Loaded out;
  out.manifest = read_manifest(manifest_path);
  const auto& m = out.manifest;
  if (!m.contains("blob") || !m["blob"].is_string()) fail(ErrorCode::SchemaError, "manifest lacks 'blob'");
  if (!m.contains("tensors") || !m["tensors"].is_array()) fail(ErrorCode::SchemaError, "manifest lacks 'tensors'");

  const auto blob_path = manifest_path.parent_path() / m["blob"].get<std::string>();
  std::ifstream blob(blob_path, std::ios::binary | std::ios::ate);
  if (!blob) fail(ErrorCode::MissingTensor, "blob file " + blob_path.string() + " does not exist");
  const auto blob_size = static_cast<std::uint64_t>(blob.tellg());

  for (const auto& e : m["tensors"]) {
    NamedTensor t;
    std::uint64_t offset = 0, length = 0;
    try {
      t.name = e.at("name").get<std::string>();
      t.shape = e.at("shape").get<std::vector<std::size_t>>();
      offset = e.at("offset").get<std::uint64_t>();
      length = e.at("length").get<std::uint64_t>();
      if (e.value("dtype", std::string("float32")) != "float32") {
        fail(ErrorCode::SchemaError, "tensor '" + t.name + "' has unsupported dtype");
      }
    } catch (const nlohmann::json::exception& ex) {
      fail(ErrorCode::SchemaError, std::string("malformed tensor entry: ") + ex.what());
    }
    const std::uint64_t expected = 4ULL * element_count(t.shape);
    if (length != expected) {
      fail(ErrorCode::ShapeMismatch, "tensor '" + t.name + "' declares " + std::to_string(length) +
                                         " bytes but its shape needs " + std::to_string(expected));
    }
    if (offset + length > blob_size) {
      fail(ErrorCode::MissingTensor, "tensor '" + t.name + "' extends past the end of the blob");
    }
    t.data.resize(element_count(t.shape));
    blob.seekg(static_cast<std::streamoff>(offset));
    for (auto& f : t.data) {
      std::uint32_t bits;
      blob.read(reinterpret_cast<char*>(&bits), 4);
      bits = to_le(bits);
      std::memcpy(&f, &bits, 4);
    }
    out.tensors.emplace(t.name, std::move(t));
  }
  return out;
}

}  // namespace tensor_file
}  // namespace neurolens
