#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "devgest/core/errors.hpp"
#include "devgest/core/tensor.hpp"

namespace devgest {

// Tensor container: magic, little-endian u64 manifest length, JSON manifest,
// then the named arrays as raw little-endian float32 in manifest order.
// The JSON dump is key-sorted by nlohmann, so identical content produces
// identical bytes.

inline constexpr char kTensorFileMagic[8] = {'D', 'G', 'T', 'E', 'N', 'S', '0', '1'};

struct TensorFile {
  nlohmann::json meta;  // free-form; callers store config/stage/rng here
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const {
    for (auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

inline void write_tensor_file(const std::filesystem::path& path, const TensorFile& tf) {
  nlohmann::json manifest;
  manifest["format_version"] = 1;
  manifest["meta"] = tf.meta;
  nlohmann::json list = nlohmann::json::array();
  uint64_t offset = 0;
  for (auto& [name, t] : tf.tensors) {
    nlohmann::json e;
    e["name"] = name;
    e["shape"] = t.shape;
    e["offset"] = offset;
    e["count"] = t.numel();
    list.push_back(e);
    offset += static_cast<uint64_t>(t.numel()) * 4;
  }
  manifest["tensors"] = list;
  std::string mjson = manifest.dump();

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FileError("cannot open for writing: " + path.string());
  f.write(kTensorFileMagic, 8);
  uint64_t mlen = mjson.size();
  f.write(reinterpret_cast<const char*>(&mlen), 8);
  f.write(mjson.data(), static_cast<std::streamsize>(mjson.size()));
  std::vector<float> buf;
  for (auto& [name, t] : tf.tensors) {
    buf.resize(t.data.size());
    for (size_t i = 0; i < t.data.size(); ++i) buf[i] = static_cast<float>(t.data[i]);
    f.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * 4));
  }
  if (!f) throw FileError("write failed: " + path.string());
}

inline TensorFile read_tensor_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FileError("cannot open: " + path.string());
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kTensorFileMagic, 8) != 0)
    throw FileError("not a tensor container: " + path.string());
  uint64_t mlen = 0;
  f.read(reinterpret_cast<char*>(&mlen), 8);
  if (!f || mlen > (1ull << 32)) throw FileError("corrupt manifest length: " + path.string());
  std::string mjson(mlen, '\0');
  f.read(mjson.data(), static_cast<std::streamsize>(mlen));
  if (!f) throw FileError("truncated manifest: " + path.string());
  nlohmann::json manifest = nlohmann::json::parse(mjson, nullptr, false);
  if (manifest.is_discarded()) throw FileError("bad manifest JSON: " + path.string());
  if (!manifest.contains("format_version") || manifest["format_version"].get<int>() != 1)
    throw FileError("unsupported container version: " + path.string());

  TensorFile tf;
  tf.meta = manifest.value("meta", nlohmann::json::object());
  for (auto& e : manifest["tensors"]) {
    std::string name = e["name"].get<std::string>();
    std::vector<int> shape = e["shape"].get<std::vector<int>>();
    int64_t count = e["count"].get<int64_t>();
    Tensor t(shape);
    if (t.numel() != count) throw FileError("manifest shape/count mismatch: " + name);
    std::vector<float> buf(static_cast<size_t>(count));
    f.read(reinterpret_cast<char*>(buf.data()), count * 4);
    if (!f) throw FileError("truncated tensor data: " + name + " in " + path.string());
    for (int64_t i = 0; i < count; ++i) t[i] = static_cast<double>(buf[static_cast<size_t>(i)]);
    tf.tensors.emplace_back(std::move(name), std::move(t));
  }
  return tf;
}

}  // namespace devgest
