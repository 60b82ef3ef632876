#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "spectok/errors.hpp"
#include "spectok/model.hpp"

namespace spectok {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

// Checkpoint layout (all integers little-endian):
//   magic "SPTKCKPT" (8 bytes), u32 version = 1, u64 tensor count,
//   then per tensor: u32 name length, name bytes, u32 rank,
//   u64 extents[rank], f64 data[numel].
inline constexpr char kCheckpointMagic[8] = {'S', 'P', 'T', 'K',
                                             'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is, const std::string& path) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("truncated checkpoint: " + path);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const VitModel& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::write_pod(os, kCheckpointVersion);
  detail::write_pod(os, static_cast<std::uint64_t>(model.params.size()));
  for (const NamedParam& p : model.params) {
    detail::write_pod(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    detail::write_pod(os, static_cast<std::uint32_t>(p.tensor.rank()));
    for (std::size_t e : p.tensor.shape()) {
      detail::write_pod(os, static_cast<std::uint64_t>(e));
    }
    const auto& d = p.tensor.data();
    os.write(reinterpret_cast<const char*>(d.data()),
             static_cast<std::streamsize>(d.size() * sizeof(double)));
  }
  if (!os) throw IoError("write failed: " + path);
}

// Loads into an existing model. The checkpoint must carry exactly the model's
// parameter set (same names, same shapes); anything else is an error, since a
// silent partial load would mask a spec-config mismatch.
inline void load_checkpoint(VitModel& model, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw IoError("not a checkpoint file: " + path);
  }
  auto version = detail::read_pod<std::uint32_t>(is, path);
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version) +
                  ": " + path);
  }
  auto count = detail::read_pod<std::uint64_t>(is, path);

  std::map<std::string, std::pair<std::vector<std::size_t>, std::vector<double>>>
      entries;
  for (std::uint64_t i = 0; i < count; ++i) {
    auto name_len = detail::read_pod<std::uint32_t>(is, path);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw IoError("truncated checkpoint: " + path);
    auto rank = detail::read_pod<std::uint32_t>(is, path);
    if (rank > 8) throw IoError("corrupt checkpoint (rank " +
                                std::to_string(rank) + "): " + path);
    std::vector<std::size_t> shape(rank);
    std::size_t n = 1;
    for (auto& e : shape) {
      e = static_cast<std::size_t>(detail::read_pod<std::uint64_t>(is, path));
      n *= e;
    }
    std::vector<double> data(n);
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
    if (!is) throw IoError("truncated checkpoint: " + path);
    if (!entries.emplace(std::move(name), std::make_pair(std::move(shape),
                                                         std::move(data)))
             .second) {
      throw IoError("duplicate tensor name in checkpoint: " + path);
    }
  }

  if (entries.size() != model.params.size()) {
    throw IoError("checkpoint holds " + std::to_string(entries.size()) +
                  " tensors, model expects " +
                  std::to_string(model.params.size()) + ": " + path);
  }
  for (NamedParam& p : model.params) {
    auto it = entries.find(p.name);
    if (it == entries.end()) {
      throw IoError("checkpoint missing tensor " + p.name + ": " + path);
    }
    if (it->second.first != p.tensor.shape()) {
      throw IoError("shape mismatch for " + p.name + ": checkpoint " +
                    detail::shape_str(it->second.first) + " vs model " +
                    detail::shape_str(p.tensor.shape()));
    }
    p.tensor.data() = std::move(it->second.second);
  }
}

}  // namespace spectok
