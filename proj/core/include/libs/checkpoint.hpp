#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "libs/params.hpp"
#include "libs/tensor.hpp"

namespace libs {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor value;  // f32-representable
  bool operator==(const NamedTensor&) const = default;
};

// Named tensors plus a flat key=value snapshot (configuration, epoch,
// validation history and trainer state).
struct Checkpoint {
  std::vector<NamedTensor> tensors;
  std::map<std::string, std::string> meta;

  const Tensor* find(const std::string& name) const;
  void put(const std::string& name, const Tensor& value);
  // Adds every parameter of the store under prefix + name.
  void put_store(const ParameterStore& store, const std::string& prefix = "");
  // Copies prefix + name for every parameter of the store; FormatError when
  // a tensor is missing or has the wrong shape.
  void load_store(ParameterStore& store, const std::string& prefix = "") const;

  const std::string& meta_at(const std::string& key) const;

  bool operator==(const Checkpoint&) const = default;
};

// "LIBSCKPT", u32 version, u32 tensor count, per tensor u16 name length +
// name, u8 rank, u32 dims, f32 values; then u32 length + key=value text.
std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::string bytes, const std::string& source);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// FNV-1a 64 as 16 hex digits.
std::string digest(std::string_view bytes);
std::string file_digest(const std::filesystem::path& path);

}  // namespace libs
