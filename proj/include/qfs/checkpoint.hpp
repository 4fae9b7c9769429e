#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "qfs/common.hpp"
#include "qfs/tensor.hpp"

namespace qfs {

// Ordered name -> tensor registry. Iteration order is lexicographic, which
// keeps the optimizer walk and the checkpoint layout deterministic.
template <typename T>
class ParamStore {
 public:
  Tensor<T> add(const std::string& name, Tensor<T> t) {
    if (params_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    params_.emplace(name, t);
    return t;
  }

  bool has(const std::string& name) const { return params_.count(name) > 0; }

  Tensor<T> get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }

  const std::map<std::string, Tensor<T>>& all() const { return params_; }

  std::vector<std::pair<std::string, Tensor<T>>> trainable() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (const auto& [name, t] : params_)
      if (t.requires_grad()) out.emplace_back(name, t);
    return out;
  }

  int64_t count_all() const {
    int64_t n = 0;
    for (const auto& [_, t] : params_) n += t.numel();
    return n;
  }

  int64_t count_trainable() const {
    int64_t n = 0;
    for (const auto& [_, t] : params_)
      if (t.requires_grad()) n += t.numel();
    return n;
  }

  void zero_grads() {
    for (auto& [_, t] : params_) t.zero_grad();
  }

 private:
  std::map<std::string, Tensor<T>> params_;
};

// Checkpoint file: magic, little-endian u64 header length, JSON header
// (version, dtype, run config snapshot, tensor name -> shape/offset/numel),
// then raw little-endian values in header order.
namespace ckpt {

constexpr char kMagic[8] = {'Q', 'F', 'S', 'C', 'K', 'P', 'T', '1'};

template <typename T>
const char* dtype_name() {
  if constexpr (sizeof(T) == 4) return "f32";
  return "f64";
}

template <typename T>
void save(const std::string& path, const ParamStore<T>& store, const nlohmann::json& config) {
  nlohmann::json header;
  header["version"] = 1;
  header["dtype"] = dtype_name<T>();
  header["config"] = config;
  nlohmann::json tensors = nlohmann::json::object();
  uint64_t offset = 0;
  for (const auto& [name, t] : store.all()) {
    nlohmann::json meta;
    meta["shape"] = t.shape();
    meta["offset"] = offset;
    meta["numel"] = t.numel();
    meta["trainable"] = t.requires_grad();
    tensors[name] = meta;
    offset += static_cast<uint64_t>(t.numel()) * sizeof(T);
  }
  header["tensors"] = tensors;
  const std::string hs = header.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint for writing: " + path);
  f.write(kMagic, 8);
  uint64_t hlen = hs.size();
  f.write(reinterpret_cast<const char*>(&hlen), 8);
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& [name, t] : store.all()) {
    f.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(T)));
  }
  if (!f) throw DataError("failed writing checkpoint: " + path);
}

inline nlohmann::json read_header(std::ifstream& f, const std::string& path) {
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kMagic, 8) != 0)
    throw DataError("not a checkpoint file: " + path);
  uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), 8);
  std::string hs(hlen, '\0');
  f.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!f) throw DataError("truncated checkpoint header: " + path);
  nlohmann::json header = nlohmann::json::parse(hs, nullptr, false);
  if (header.is_discarded()) throw DataError("corrupt checkpoint header: " + path);
  if (header.value("version", 0) != 1)
    throw DataError("unsupported checkpoint version in " + path);
  return header;
}

inline nlohmann::json peek_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint: " + path);
  return read_header(f, path).value("config", nlohmann::json::object());
}

// Loads values into an existing store; every stored tensor must be present
// with an identical shape (model/checkpoint mismatch is an error).
template <typename T>
nlohmann::json load(const std::string& path, ParamStore<T>& store) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint: " + path);
  nlohmann::json header = read_header(f, path);
  if (header.value("dtype", "") != dtype_name<T>())
    throw DataError("checkpoint dtype " + header.value("dtype", std::string("?")) +
                    " does not match run dtype " + dtype_name<T>());
  const auto& tensors = header.at("tensors");
  const std::streampos data_start = f.tellg();
  for (const auto& [name, t] : store.all()) {
    if (!tensors.contains(name))
      throw DataError("checkpoint " + path + " is missing tensor " + name +
                      " (model/checkpoint mismatch)");
    const auto& meta = tensors.at(name);
    Shape shape = meta.at("shape").template get<Shape>();
    if (shape != t.shape())
      throw DataError("checkpoint tensor " + name + " has shape " + shape_str(shape) +
                      " but the model expects " + shape_str(t.shape()));
    f.seekg(data_start + static_cast<std::streamoff>(meta.at("offset").template get<uint64_t>()));
    Tensor<T> dst = t;
    f.read(reinterpret_cast<char*>(dst.data()),
           static_cast<std::streamsize>(dst.numel() * sizeof(T)));
    if (!f) throw DataError("truncated checkpoint data: " + path);
  }
  return header.value("config", nlohmann::json::object());
}

}  // namespace ckpt

}  // namespace qfs
