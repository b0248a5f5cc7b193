#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "pointform/common.hpp"
#include "pointform/optim.hpp"
#include "pointform/tensor.hpp"

namespace pf {

// Checkpoint layout, little-endian throughout:
//   "PFCK"  u32 version
//   repeated until EOF:
//     u32 name length, name bytes, u32 rank, rank x u64 extents, f64 payload
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <class T>
T take(std::istream& is, const std::string& what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) throw IoError(cat("checkpoint: truncated while reading ", what));
  return v;
}

}  // namespace detail

struct TensorRecord {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> data;
};

template <class S>
void save_checkpoint(const std::string& path, const ParamStore<S>& store) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError(cat("checkpoint: cannot open ", path, " for writing"));
  os.write("PFCK", 4);
  detail::put<std::uint32_t>(os, kCheckpointVersion);
  for (const auto& it : store.items) {
    detail::put<std::uint32_t>(os, std::uint32_t(it.name.size()));
    os.write(it.name.data(), std::streamsize(it.name.size()));
    detail::put<std::uint32_t>(os, std::uint32_t(it.var->shape.size()));
    for (auto d : it.var->shape) detail::put<std::uint64_t>(os, d);
    for (S v : it.var->value) detail::put<double>(os, double(v));
  }
  if (!os) throw IoError(cat("checkpoint: write failed for ", path));
}

inline std::vector<TensorRecord> read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(cat("checkpoint: cannot open ", path));
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "PFCK", 4) != 0)
    throw IoError(cat("checkpoint: ", path, " lacks PFCK magic"));
  auto version = detail::take<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion)
    throw IoError(cat("checkpoint: version ", version, " unsupported, expected ",
                      kCheckpointVersion));
  std::vector<TensorRecord> out;
  while (true) {
    std::uint32_t nlen{};
    is.read(reinterpret_cast<char*>(&nlen), sizeof(nlen));
    if (is.eof()) break;
    if (!is) throw IoError("checkpoint: truncated record header");
    TensorRecord rec;
    rec.name.resize(nlen);
    is.read(rec.name.data(), nlen);
    if (!is) throw IoError("checkpoint: truncated tensor name");
    auto rank = detail::take<std::uint32_t>(is, "rank");
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      auto d = detail::take<std::uint64_t>(is, cat("extent of ", rec.name));
      rec.shape.push_back(std::size_t(d));
      count *= std::size_t(d);
    }
    rec.data.resize(count);
    is.read(reinterpret_cast<char*>(rec.data.data()),
            std::streamsize(count * sizeof(double)));
    if (!is) throw IoError(cat("checkpoint: truncated payload of ", rec.name));
    out.push_back(std::move(rec));
  }
  return out;
}

// load values into an existing registry; names and shapes must agree
template <class S>
void load_checkpoint(const std::string& path, ParamStore<S>& store) {
  auto records = read_checkpoint(path);
  check(records.size() == store.items.size(),
        cat("checkpoint: holds ", records.size(), " tensors, model has ",
            store.items.size()));
  for (const auto& rec : records) {
    bool found = false;
    for (auto& it : store.items) {
      if (it.name != rec.name) continue;
      check(it.var->shape == rec.shape,
            cat("checkpoint: shape mismatch for ", rec.name, ", file ",
                shape_str(rec.shape), " vs model ", shape_str(it.var->shape)));
      for (std::size_t i = 0; i < rec.data.size(); ++i)
        it.var->value[i] = S(rec.data[i]);
      found = true;
      break;
    }
    check(found, cat("checkpoint: model has no parameter named ", rec.name));
  }
}

}  // namespace pf
