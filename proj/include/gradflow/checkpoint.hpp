#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "gradflow/arch.hpp"
#include "gradflow/error.hpp"
#include "gradflow/network.hpp"

// Checkpoint container: "CNNCKPT1", little-endian u32 tensor count, then per
// tensor a u16 name length + name, u8 rank, rank u64 dims and the row-major
// f64 payload, closed by a CRC-32 of all preceding bytes.
//
// Besides the trainable parameters and batch-norm running statistics, a few
// reserved "__meta.*" tensors carry the architecture fingerprint, the
// architecture text itself (one char per f64), and the training counters, so
// a checkpoint alone reconstructs a runnable network.

namespace gradflow {

inline constexpr char kCheckpointMagic[9] = "CNNCKPT1";

struct TrainState {
  std::size_t epoch = 0;
  std::uint64_t seed = 0;
};

namespace detail {

struct NamedTensor {
  std::string name;
  std::vector<std::size_t> dims;
  std::vector<double> values;
};

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_f64(std::vector<std::uint8_t>& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}

inline double u64_as_f64(std::uint64_t bits) {
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

inline std::uint64_t f64_as_u64(double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  return bits;
}

struct CheckpointReader {
  const std::vector<std::uint8_t>& bytes;
  const std::string& path;
  std::size_t offset = 0;

  void need(std::size_t n, const char* what) const {
    if (offset + n > bytes.size()) {
      throw ParseError(path + ": truncated " + std::string(what) + " at offset " +
                       std::to_string(offset) + ", need " + std::to_string(n) + " bytes, have " +
                       std::to_string(bytes.size() - offset));
    }
  }

  std::uint16_t read_u16(const char* what) {
    need(2, what);
    const std::uint16_t v = static_cast<std::uint16_t>(bytes[offset]) |
                            static_cast<std::uint16_t>(bytes[offset + 1]) << 8;
    offset += 2;
    return v;
  }

  std::uint32_t read_u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[offset + i]) << (8 * i);
    offset += 4;
    return v;
  }

  std::uint64_t read_u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[offset + i]) << (8 * i);
    offset += 8;
    return v;
  }
};

// Meta tensors first, then layer tensors in forward order: a stable order so
// identical state always serializes to identical bytes.
inline std::vector<NamedTensor> gather_tensors(Network& net, const TrainState& state) {
  std::vector<NamedTensor> tensors;

  tensors.push_back({"__meta.fingerprint", {1}, {u64_as_f64(fingerprint(net))}});
  tensors.push_back({"__meta.epoch", {1}, {static_cast<double>(state.epoch)}});
  tensors.push_back({"__meta.seed", {1}, {u64_as_f64(state.seed)}});
  const std::string arch = describe(net);
  NamedTensor arch_tensor{"__meta.arch", {arch.size()}, {}};
  arch_tensor.values.reserve(arch.size());
  for (char c : arch) arch_tensor.values.push_back(static_cast<double>(c));
  tensors.push_back(std::move(arch_tensor));

  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    LayerNode& node = net.layers[i];
    const std::string prefix = "l" + std::string(i < 10 ? "0" : "") + std::to_string(i) + "." +
                               layer_kind_name(node.kind);
    if (node.kind == LayerKind::kConv) {
      auto& c = std::get<ConvLayer>(node.impl);
      tensors.push_back({prefix + ".w", {c.w.n, c.w.d, c.w.h, c.w.w}, c.w.data});
      tensors.push_back({prefix + ".b", {c.b.size()}, c.b});
    } else if (node.kind == LayerKind::kBatchNorm) {
      auto& bn = std::get<BatchNormLayer>(node.impl);
      tensors.push_back({prefix + ".w", {bn.state.w.size()}, bn.state.w});
      tensors.push_back({prefix + ".b", {bn.state.b.size()}, bn.state.b});
      tensors.push_back({prefix + ".rmean", {bn.state.running_mean.size()}, bn.state.running_mean});
      tensors.push_back({prefix + ".rvar", {bn.state.running_var.size()}, bn.state.running_var});
    } else if (node.kind == LayerKind::kFc) {
      auto& fc = std::get<FcLayer>(node.impl);
      tensors.push_back({prefix + ".w", {fc.w.rows, fc.w.cols}, fc.w.data});
      tensors.push_back({prefix + ".b", {fc.b.size()}, fc.b});
    }
  }
  return tensors;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, Network& net, const TrainState& state) {
  std::vector<detail::NamedTensor> tensors = detail::gather_tensors(net, state);

  std::vector<std::uint8_t> bytes;
  bytes.insert(bytes.end(), kCheckpointMagic, kCheckpointMagic + 8);
  detail::put_u32(bytes, static_cast<std::uint32_t>(tensors.size()));
  for (const detail::NamedTensor& t : tensors) {
    detail::put_u16(bytes, static_cast<std::uint16_t>(t.name.size()));
    bytes.insert(bytes.end(), t.name.begin(), t.name.end());
    bytes.push_back(static_cast<std::uint8_t>(t.dims.size()));
    for (std::size_t d : t.dims) detail::put_u64(bytes, d);
    for (double v : t.values) detail::put_f64(bytes, v);
  }
  const std::uint32_t checksum =
      static_cast<std::uint32_t>(crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
  detail::put_u32(bytes, checksum);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path);
}

namespace detail {

inline std::map<std::string, NamedTensor> parse_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());

  if (bytes.size() < 12) {
    throw ParseError(path + ": file of " + std::to_string(bytes.size()) +
                     " bytes is smaller than the 12-byte minimum");
  }
  if (std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw ParseError(path + ": bad magic at offset 0");
  }
  const std::uint32_t stored_crc = static_cast<std::uint32_t>(bytes[bytes.size() - 4]) |
                                   static_cast<std::uint32_t>(bytes[bytes.size() - 3]) << 8 |
                                   static_cast<std::uint32_t>(bytes[bytes.size() - 2]) << 16 |
                                   static_cast<std::uint32_t>(bytes[bytes.size() - 1]) << 24;
  const std::uint32_t actual_crc = static_cast<std::uint32_t>(
      crc32(0L, bytes.data(), static_cast<uInt>(bytes.size() - 4)));
  if (stored_crc != actual_crc) {
    throw ParseError(path + ": checksum mismatch at offset " +
                     std::to_string(bytes.size() - 4) + " (stored " +
                     std::to_string(stored_crc) + ", computed " + std::to_string(actual_crc) +
                     ")");
  }

  CheckpointReader reader{bytes, path, 8};
  const std::uint32_t count = reader.read_u32("tensor count");
  std::map<std::string, NamedTensor> tensors;
  for (std::uint32_t t = 0; t < count; ++t) {
    NamedTensor tensor;
    const std::uint16_t name_len = reader.read_u16("name length");
    reader.need(name_len, "name");
    tensor.name.assign(reinterpret_cast<const char*>(bytes.data() + reader.offset), name_len);
    reader.offset += name_len;
    reader.need(1, "rank");
    const std::uint8_t rank = bytes[reader.offset++];
    std::size_t cells = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      const std::uint64_t dim = reader.read_u64("dimension");
      tensor.dims.push_back(static_cast<std::size_t>(dim));
      cells *= static_cast<std::size_t>(dim);
    }
    tensor.values.resize(cells);
    for (std::size_t i = 0; i < cells; ++i) {
      tensor.values[i] = u64_as_f64(reader.read_u64("payload"));
    }
    tensors.emplace(tensor.name, std::move(tensor));
  }
  if (reader.offset != bytes.size() - 4) {
    throw ParseError(path + ": " + std::to_string(bytes.size() - 4 - reader.offset) +
                     " unexpected trailing bytes at offset " + std::to_string(reader.offset));
  }
  return tensors;
}

inline const NamedTensor& expect_tensor(const std::map<std::string, NamedTensor>& tensors,
                                        const std::string& name, std::size_t cells,
                                        const std::string& path) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ParseError(path + ": missing tensor " + name);
  if (it->second.values.size() != cells) {
    throw ParseError(path + ": tensor " + name + " holds " +
                     std::to_string(it->second.values.size()) + " values, expected " +
                     std::to_string(cells));
  }
  return it->second;
}

}  // namespace detail

// Restores parameters, running statistics and counters into an already built
// network after verifying the architecture fingerprint.
inline TrainState load_checkpoint(const std::string& path, Network& net) {
  const std::map<std::string, detail::NamedTensor> tensors = detail::parse_checkpoint(path);

  const detail::NamedTensor& fp = detail::expect_tensor(tensors, "__meta.fingerprint", 1, path);
  if (detail::f64_as_u64(fp.values[0]) != fingerprint(net)) {
    throw ConfigError(path + ": checkpoint fingerprint does not match this architecture");
  }

  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    LayerNode& node = net.layers[i];
    const std::string prefix = "l" + std::string(i < 10 ? "0" : "") + std::to_string(i) + "." +
                               layer_kind_name(node.kind);
    if (node.kind == LayerKind::kConv) {
      auto& c = std::get<ConvLayer>(node.impl);
      c.w.data = detail::expect_tensor(tensors, prefix + ".w", c.w.size(), path).values;
      c.b = detail::expect_tensor(tensors, prefix + ".b", c.b.size(), path).values;
    } else if (node.kind == LayerKind::kBatchNorm) {
      auto& bn = std::get<BatchNormLayer>(node.impl);
      bn.state.w = detail::expect_tensor(tensors, prefix + ".w", bn.state.w.size(), path).values;
      bn.state.b = detail::expect_tensor(tensors, prefix + ".b", bn.state.b.size(), path).values;
      bn.state.running_mean =
          detail::expect_tensor(tensors, prefix + ".rmean", bn.state.running_mean.size(), path)
              .values;
      bn.state.running_var =
          detail::expect_tensor(tensors, prefix + ".rvar", bn.state.running_var.size(), path)
              .values;
    } else if (node.kind == LayerKind::kFc) {
      auto& fc = std::get<FcLayer>(node.impl);
      fc.w.data = detail::expect_tensor(tensors, prefix + ".w", fc.w.size(), path).values;
      fc.b = detail::expect_tensor(tensors, prefix + ".b", fc.b.size(), path).values;
    }
  }

  TrainState state;
  state.epoch = static_cast<std::size_t>(
      detail::expect_tensor(tensors, "__meta.epoch", 1, path).values[0]);
  state.seed = detail::f64_as_u64(detail::expect_tensor(tensors, "__meta.seed", 1, path).values[0]);
  net.pass_valid = false;
  return state;
}

// Rebuilds the network from the stored architecture text, then restores into
// it.
inline Network load_checkpoint_network(const std::string& path, TrainState* state = nullptr) {
  const std::map<std::string, detail::NamedTensor> tensors = detail::parse_checkpoint(path);
  auto arch_it = tensors.find("__meta.arch");
  if (arch_it == tensors.end()) throw ParseError(path + ": missing tensor __meta.arch");
  std::string arch;
  arch.reserve(arch_it->second.values.size());
  for (double v : arch_it->second.values) arch.push_back(static_cast<char>(v));
  Network net = parse_architecture(arch);
  TrainState loaded = load_checkpoint(path, net);
  if (state != nullptr) *state = loaded;
  return net;
}

}  // namespace gradflow
