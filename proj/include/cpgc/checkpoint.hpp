#pragma once

// Tensor checkpoint format.
//
//   <name>.json  manifest: {"format", "blob", "tensors": [{name, shape, offset, count}], "meta"}
//   <name>.bin   every tensor's values back to back as little-endian IEEE-754
//                binary64, row-major; `offset` is in bytes.
//
// Round trips are bit-exact.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpgc/errors.hpp"
#include "cpgc/tensor.hpp"

namespace cpgc {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr const char* kCheckpointFormat = "cpgc-tensors-v1";

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct TensorBundle {
  std::vector<NamedTensor> tensors;
  json meta = json::object();

  const Tensor& at(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return t.tensor;
    }
    throw FileError("checkpoint has no tensor named '" + name + "'");
  }
};

namespace io {

template <class T>
void append_le(std::string& out, T bits) {
  for (std::size_t b = 0; b < sizeof(T); ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
}

template <class T>
T read_le(const unsigned char* p) {
  T bits = 0;
  for (std::size_t b = 0; b < sizeof(T); ++b) bits |= static_cast<T>(p[b]) << (8 * b);
  return bits;
}

inline void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FileError("cannot open for writing: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FileError("write failed: " + path.string());
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot open for reading: " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline json read_json(const fs::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw FileError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

}  // namespace io

/// Writes `<manifest_path>` and its blob next to it (same stem, .bin).
inline void save_tensors(const fs::path& manifest_path, const std::vector<std::pair<std::string, const Tensor*>>& tensors,
                         const json& meta = json::object()) {
  fs::path blob_path = manifest_path;
  blob_path.replace_extension(".bin");
  std::string blob;
  json entries = json::array();
  for (const auto& [name, t] : tensors) {
    entries.push_back({{"name", name}, {"shape", t->shape}, {"offset", blob.size()}, {"count", t->values.size()}});
    for (double v : t->values) io::append_le(blob, std::bit_cast<std::uint64_t>(v));
  }
  json manifest = {{"format", kCheckpointFormat},
                   {"blob", blob_path.filename().string()},
                   {"tensors", entries},
                   {"meta", meta}};
  if (!manifest_path.parent_path().empty()) fs::create_directories(manifest_path.parent_path());
  io::write_file(blob_path, blob);
  io::write_json(manifest_path, manifest);
}

inline TensorBundle load_tensors(const fs::path& manifest_path) {
  const json manifest = io::read_json(manifest_path);
  if (manifest.value("format", "") != kCheckpointFormat) {
    throw FileError("not a tensor checkpoint: " + manifest_path.string());
  }
  const fs::path blob_path = manifest_path.parent_path() / manifest.at("blob").get<std::string>();
  const std::string blob = io::read_file(blob_path);
  TensorBundle bundle;
  bundle.meta = manifest.value("meta", json::object());
  for (const auto& e : manifest.at("tensors")) {
    const auto offset = e.at("offset").get<std::size_t>();
    const auto count = e.at("count").get<std::size_t>();
    if (offset + count * 8 > blob.size()) throw FileError("truncated blob: " + blob_path.string());
    std::vector<double> values(count);
    const auto* p = reinterpret_cast<const unsigned char*>(blob.data()) + offset;
    for (std::size_t i = 0; i < count; ++i) values[i] = std::bit_cast<double>(io::read_le<std::uint64_t>(p + 8 * i));
    bundle.tensors.push_back({e.at("name").get<std::string>(), Tensor(e.at("shape").get<Shape>(), std::move(values))});
  }
  return bundle;
}

}  // namespace cpgc
