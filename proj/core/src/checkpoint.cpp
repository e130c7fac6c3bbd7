#include "libs/checkpoint.hpp"

#include <cstdio>

#include "libs/binio.hpp"

namespace libs {

namespace {

constexpr std::string_view kCheckpointMagic = "LIBSCKPT";

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t.value;
  }
  return nullptr;
}

void Checkpoint::put(const std::string& name, const Tensor& value) {
  for (auto& t : tensors) {
    if (t.name == name) {
      t.value = value;
      return;
    }
  }
  tensors.push_back({name, value});
}

void Checkpoint::put_store(const ParameterStore& store,
                           const std::string& prefix) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    put(prefix + store[i].name, store[i].value);
  }
}

void Checkpoint::load_store(ParameterStore& store,
                            const std::string& prefix) const {
  for (std::size_t i = 0; i < store.size(); ++i) {
    const std::string name = prefix + store[i].name;
    const Tensor* t = find(name);
    if (!t) throw FormatError("checkpoint has no tensor '" + name + "'");
    if (t->shape() != store[i].value.shape()) {
      throw FormatError("checkpoint tensor '" + name + "' has shape " +
                        shape_str(t->shape()) + ", model expects " +
                        shape_str(store[i].value.shape()));
    }
    store[i].value = *t;
  }
}

const std::string& Checkpoint::meta_at(const std::string& key) const {
  auto it = meta.find(key);
  if (it == meta.end()) {
    throw FormatError("checkpoint metadata has no key '" + key + "'");
  }
  return it->second;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  BinaryWriter w;
  w.raw(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    if (t.name.size() > 0xffff) {
      throw ContractError("tensor name too long: " + t.name.substr(0, 40));
    }
    w.u16(static_cast<std::uint16_t>(t.name.size()));
    w.raw(t.name);
    w.u8(static_cast<std::uint8_t>(t.value.rank()));
    for (auto d : t.value.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (Real v : t.value.data()) w.f32(static_cast<float>(v));
  }
  w.block(format_key_values(ckpt.meta));
  return w.bytes();
}

Checkpoint parse_checkpoint(std::string bytes, const std::string& source) {
  BinaryReader r(std::move(bytes), source);
  r.expect_magic(kCheckpointMagic);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    r.fail("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const std::uint16_t name_len = r.u16();
    t.name = r.raw(name_len);
    const std::uint8_t rank = r.u8();
    if (rank == 0 || rank > 2) {
      r.fail("tensor '" + t.name + "' has unsupported rank " +
             std::to_string(rank));
    }
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = r.u32();
      n *= d;
    }
    std::vector<Real> data(n);
    for (auto& v : data) v = r.f32();
    t.value = Tensor(std::move(shape), std::move(data));
    ckpt.tensors.push_back(std::move(t));
  }
  const std::size_t meta_at = r.offset();
  try {
    ckpt.meta = parse_key_values(r.block(), source + " config block");
  } catch (const ConfigError& e) {
    throw FormatError(std::string(e.what()) + " (block at offset " +
                      std::to_string(meta_at) + ")");
  }
  if (!r.at_end()) r.fail("trailing bytes after config block");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt,
                     const std::filesystem::path& path) {
  write_text_file(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint(read_text_file(path), path.string());
}

std::string file_digest(const std::filesystem::path& path) {
  return digest(read_text_file(path));
}

std::string digest(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace libs
