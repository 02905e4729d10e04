#include "saghog/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace saghog::ad {

namespace {

constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& out, uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::ostream& out, uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }

uint32_t get_u32(std::istream& in) {
  uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
uint64_t get_u64(std::istream& in) {
  uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 8);
  return v;
}

void put_tensor_record(std::ostream& out, const std::string& name, const Tensor<float>& t) {
  put_u32(out, static_cast<uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_u32(out, static_cast<uint32_t>(t.shape.size()));
  for (int e : t.shape) put_u64(out, static_cast<uint64_t>(e));
  out.write(reinterpret_cast<const char*>(t.v.data()), static_cast<std::streamsize>(t.v.size() * 4));
}

std::pair<std::string, Tensor<float>> get_tensor_record(std::istream& in) {
  const uint32_t name_len = get_u32(in);
  std::string name(name_len, '\0');
  in.read(name.data(), name_len);
  const uint32_t rank = get_u32(in);
  std::vector<int> shape(rank);
  for (auto& e : shape) e = static_cast<int>(get_u64(in));
  Tensor<float> t(shape);
  in.read(reinterpret_cast<char*>(t.v.data()), static_cast<std::streamsize>(t.v.size() * 4));
  return {std::move(name), std::move(t)};
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out.write("SGCK", 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<uint32_t>(ckpt.meta_json.size()));
  out.write(ckpt.meta_json.data(), static_cast<std::streamsize>(ckpt.meta_json.size()));
  put_u32(out, static_cast<uint32_t>(ckpt.params.size()));
  for (const auto& p : ckpt.params) put_tensor_record(out, p.name, p.value);
  out.put(ckpt.has_optimizer_state ? 1 : 0);
  if (ckpt.has_optimizer_state) {
    put_u64(out, static_cast<uint64_t>(ckpt.optimizer_step));
    for (const auto& p : ckpt.params) put_tensor_record(out, p.name, p.m);
    for (const auto& p : ckpt.params) put_tensor_record(out, p.name, p.v);
  }
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "SGCK", 4) != 0)
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  const uint32_t version = get_u32(in);
  if (version != kVersion)
    throw std::runtime_error("load_checkpoint: unsupported version in " + path);
  Checkpoint ckpt;
  const uint32_t meta_len = get_u32(in);
  ckpt.meta_json.resize(meta_len);
  in.read(ckpt.meta_json.data(), meta_len);
  const uint32_t count = get_u32(in);
  ckpt.params.resize(count);
  for (auto& p : ckpt.params) {
    auto [name, t] = get_tensor_record(in);
    p.name = std::move(name);
    p.value = std::move(t);
  }
  ckpt.has_optimizer_state = in.get() == 1;
  if (ckpt.has_optimizer_state) {
    ckpt.optimizer_step = static_cast<int64_t>(get_u64(in));
    for (auto& p : ckpt.params) {
      auto [name, t] = get_tensor_record(in);
      if (name != p.name) throw std::runtime_error("load_checkpoint: moment record order mismatch");
      p.m = std::move(t);
    }
    for (auto& p : ckpt.params) {
      auto [name, t] = get_tensor_record(in);
      if (name != p.name) throw std::runtime_error("load_checkpoint: moment record order mismatch");
      p.v = std::move(t);
    }
  }
  if (!in) throw std::runtime_error("load_checkpoint: truncated file " + path);
  return ckpt;
}

}  // namespace saghog::ad
