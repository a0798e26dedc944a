#pragma once

// Flat binary checkpoints: magic, version, header length, a UTF-8 header with
// one "name<TAB>shape<TAB>offset" line per tensor, then little-endian float64
// payloads. Round trips are bit-exact.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "autograd.hpp"

namespace molem {

inline constexpr char kCheckpointMagic[8] = {'M', 'O', 'L', 'E', 'M', 'C', 'K', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_le(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_le(const std::string& in, std::size_t at, int bytes) {
  require(at + static_cast<std::size_t>(bytes) <= in.size(), "truncated checkpoint");
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string serialize_checkpoint(const std::vector<const Parameter*>& params) {
  std::string header;
  std::size_t offset = 0;
  for (const Parameter* p : params) {
    require(p->name.find_first_of("\t\n") == std::string::npos, "parameter names cannot contain tabs or newlines");
    header += p->name + '\t';
    for (std::size_t i = 0; i < p->value.shape.size(); ++i) {
      if (i) header += 'x';
      header += std::to_string(p->value.shape[i]);
    }
    header += '\t' + std::to_string(offset) + '\n';
    offset += p->value.data.size() * 8;
  }
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_le(out, kCheckpointVersion, 4);
  detail::put_le(out, header.size(), 8);
  out += header;
  out.reserve(out.size() + offset);
  for (const Parameter* p : params) {
    for (double v : p->value.data) detail::put_le(out, std::bit_cast<std::uint64_t>(v), 8);
  }
  return out;
}

/// Tensors by name, in file order.
struct CheckpointContents {
  std::vector<std::string> names;
  std::map<std::string, Tensor> tensors;
};

inline CheckpointContents parse_checkpoint(const std::string& bytes) {
  require(bytes.size() >= 20 && std::memcmp(bytes.data(), kCheckpointMagic, 8) == 0, "not a checkpoint file");
  const auto version = static_cast<std::uint32_t>(detail::get_le(bytes, 8, 4));
  require(version == kCheckpointVersion, "unsupported checkpoint version " + std::to_string(version));
  const std::size_t hlen = detail::get_le(bytes, 12, 8);
  const std::size_t data_start = 20 + hlen;
  require(data_start <= bytes.size(), "truncated checkpoint header");
  std::istringstream header(bytes.substr(20, hlen));
  CheckpointContents out;
  std::string line;
  while (std::getline(header, line)) {
    const std::size_t t1 = line.find('\t'), t2 = line.rfind('\t');
    require(t1 != std::string::npos && t2 > t1, "malformed checkpoint header line");
    const std::string name = line.substr(0, t1);
    std::vector<std::size_t> shape;
    std::stringstream dims(line.substr(t1 + 1, t2 - t1 - 1));
    std::string dim;
    while (std::getline(dims, dim, 'x')) shape.push_back(std::stoull(dim));
    const std::size_t offset = std::stoull(line.substr(t2 + 1));
    Tensor t(shape, 0.0);
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      t.data[i] = std::bit_cast<double>(detail::get_le(bytes, data_start + offset + 8 * i, 8));
    }
    require(!out.tensors.count(name), "duplicate tensor '" + name + "' in checkpoint");
    out.names.push_back(name);
    out.tensors.emplace(name, std::move(t));
  }
  return out;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), "cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), "failed writing '" + path + "'");
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void save_checkpoint(const std::string& path, const std::vector<Parameter*>& params) {
  write_file(path, serialize_checkpoint(std::vector<const Parameter*>(params.begin(), params.end())));
}

/// Overwrites each parameter's value from the checkpoint; names and shapes
/// must match exactly.
inline void load_into(const CheckpointContents& ck, const std::vector<Parameter*>& params) {
  for (Parameter* p : params) {
    auto it = ck.tensors.find(p->name);
    require(it != ck.tensors.end(), "checkpoint lacks tensor '" + p->name + "'");
    require(it->second.shape == p->value.shape, "shape mismatch for '" + p->name + "'");
    p->value = it->second;
  }
}

}  // namespace molem
