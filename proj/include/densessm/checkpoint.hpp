#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "densessm/model.hpp"

namespace densessm {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// File layout, all integers little-endian:
//   "DSSM" | u32 version | u64 n | n bytes of JSON {"config": {...}, "meta": {...}}
//   u64 tensor count, then per tensor in name order:
//     u32 name length | name | u8 dtype | u32 rank | u64 extents[rank] | payload
//   u32 CRC-32 of every preceding byte
template <class T>
struct Checkpoint {
  ModelConfig config;
  nlohmann::json meta = nlohmann::json::object();  // training step, RNG state, ...
  std::map<std::string, Tensor<T>> tensors;        // parameters plus optional "opt.*" moments
};

template <class T>
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint<T>& ckpt);
template <class T>
Checkpoint<T> decode_checkpoint(std::span<const std::uint8_t> bytes);

template <class T>
void write_checkpoint(const std::string& path, const Checkpoint<T>& ckpt);
template <class T>
Checkpoint<T> read_checkpoint(const std::string& path);

/// Reads and validates only the header; used to pick the dtype before loading.
ModelConfig peek_checkpoint_config(const std::string& path);

/// The model's parameters as a checkpoint with empty meta.
template <class T>
Checkpoint<T> snapshot(const Model<T>& model);

/// Copies checkpoint parameters into `model`. Rejects a differing config, a
/// missing parameter, a shape mismatch, or an unknown non-"opt." tensor.
template <class T>
void restore(Model<T>& model, const Checkpoint<T>& ckpt);

template <class T>
void save(const Model<T>& model, const std::string& path) {
  write_checkpoint(path, snapshot(model));
}

template <class T>
Model<T> load(const std::string& path) {
  const Checkpoint<T> ckpt = read_checkpoint<T>(path);
  Model<T> model(ckpt.config);
  restore(model, ckpt);
  return model;
}

}  // namespace densessm
