#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <string>

#include "promodet/harness/config.hpp"
#include "promodet/model.hpp"

namespace promodet::harness {

// Layout (little-endian):
//   "PROMODET" | u32 version | u64 len, config text | u64 count |
//   count x (u32 len, name | i32 n, c, h, w | f32 data)
// Arrays are parameters plus batch-norm running statistics, keyed by name.
inline constexpr char kCheckpointMagic[8] = {'P', 'R', 'O', 'M', 'O', 'D', 'E', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename V>
void put(std::ostream& out, V v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V take(std::istream& in, const std::string& path) {
  V v;
  in.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!in) throw IoError(path + ": truncated checkpoint");
  return v;
}

inline std::string take_string(std::istream& in, std::uint64_t len, const std::string& path) {
  if (len > (1u << 30)) throw IoError(path + ": corrupt checkpoint (string length)");
  std::string s(len, '\0');
  in.read(s.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError(path + ": truncated checkpoint");
  return s;
}

}  // namespace detail

inline void save_checkpoint(Model<float>& model, const Config& cfg, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path + ": cannot write checkpoint");
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put(out, kCheckpointVersion);
  const std::string text = to_text(cfg);
  detail::put<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  const auto arrays = model.store().arrays();
  detail::put<std::uint64_t>(out, arrays.size());
  for (const auto& [name, t] : arrays) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    const auto& s = t->shape();
    for (int d : {s.n, s.c, s.h, s.w}) detail::put<std::int32_t>(out, d);
    out.write(reinterpret_cast<const char*>(t->data()),
              static_cast<std::streamsize>(t->size() * sizeof(float)));
  }
  if (!out) throw IoError(path + ": write failed");
}

struct LoadedModel {
  Config config;
  std::unique_ptr<Model<float>> model;
};

inline LoadedModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path + ": checkpoint not found");
  char magic[sizeof(kCheckpointMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw IoError(path + ": not a checkpoint file");
  }
  const auto version = detail::take<std::uint32_t>(in, path);
  if (version != kCheckpointVersion) {
    throw IoError(path + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto text = detail::take_string(in, detail::take<std::uint64_t>(in, path), path);
  LoadedModel lm;
  lm.config = parse_config(text, path + "#config");
  lm.model = std::make_unique<Model<float>>(lm.config.model);
  auto arrays = lm.model->store().arrays();
  const auto count = detail::take<std::uint64_t>(in, path);
  if (count != arrays.size()) {
    throw IoError(path + ": " + std::to_string(count) + " arrays stored, model has " +
                  std::to_string(arrays.size()));
  }
  for (std::uint64_t k = 0; k < count; ++k) {
    const auto name = detail::take_string(in, detail::take<std::uint32_t>(in, path), path);
    nn::Shape s;
    s.n = detail::take<std::int32_t>(in, path);
    s.c = detail::take<std::int32_t>(in, path);
    s.h = detail::take<std::int32_t>(in, path);
    s.w = detail::take<std::int32_t>(in, path);
    const auto it = arrays.find(name);
    if (it == arrays.end()) throw IoError(path + ": unexpected array '" + name + "'");
    if (!(it->second->shape() == s)) {
      throw IoError(path + ": array '" + name + "' has shape " + s.str() + ", model expects " +
                    it->second->shape().str());
    }
    in.read(reinterpret_cast<char*>(it->second->data()),
            static_cast<std::streamsize>(it->second->size() * sizeof(float)));
    if (!in) throw IoError(path + ": truncated checkpoint");
  }
  return lm;
}

}  // namespace promodet::harness
