#pragma once

// Checkpoint format: a one-line magic, a JSON header describing parameter
// names/shapes plus caller metadata, then the raw float64 payload in header
// order. Little-endian only; asserted at compile time since every supported
// target is.

#include <bit>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "gsrec/core/graph.hpp"
#include "gsrec/core/tensor.hpp"

namespace gsrec {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is little-endian float64");

inline constexpr const char* kCheckpointMagic = "GSREC-CKPT-1\n";

inline void save_checkpoint(const ParameterStore& store,
                            const std::string& path,
                            const nlohmann::json& meta = {}) {
  nlohmann::json header;
  header["meta"] = meta;
  header["params"] = nlohmann::json::array();
  for (const std::string& name : store.names()) {
    const Tensor& t = store.get(name);
    header["params"].push_back({{"name", name}, {"shape", t.shape()}});
  }
  std::string hs = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out.write(kCheckpointMagic,
            static_cast<std::streamsize>(std::string(kCheckpointMagic).size()));
  uint64_t hlen = hs.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const std::string& name : store.names()) {
    const Tensor& t = store.get(name);
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("short write on checkpoint: " + path);
}

// Loads parameters into the store, creating missing ones and validating the
// shape of any that already exist. Returns the stored metadata.
inline nlohmann::json load_checkpoint(ParameterStore& store,
                                      const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint: " + path);
  std::string magic(std::string(kCheckpointMagic).size(), '\0');
  in.read(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (!in || magic != kCheckpointMagic) {
    throw std::runtime_error("not a checkpoint file: " + path);
  }
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!in || hlen > (1ull << 30)) {
    throw std::runtime_error("corrupt checkpoint header: " + path);
  }
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw std::runtime_error("truncated checkpoint header: " + path);
  nlohmann::json header = nlohmann::json::parse(hs);
  for (const auto& entry : header.at("params")) {
    std::string name = entry.at("name").get<std::string>();
    Shape shape = entry.at("shape").get<Shape>();
    Tensor* dst;
    if (store.has(name)) {
      dst = &store.get(name);
      if (dst->shape() != shape) {
        throw std::runtime_error("checkpoint shape mismatch for '" + name +
                                 "': file has " + shape_str(shape) +
                                 ", store has " + shape_str(dst->shape()));
      }
    } else {
      dst = &store.create(name, shape);
    }
    in.read(reinterpret_cast<char*>(dst->data()),
            static_cast<std::streamsize>(dst->numel() * sizeof(double)));
    if (!in) {
      throw std::runtime_error("truncated checkpoint payload at '" + name +
                               "': " + path);
    }
  }
  return header.value("meta", nlohmann::json{});
}

}  // namespace gsrec
