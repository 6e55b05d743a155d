#pragma once

// Byte-stable text checkpoints for named tensors. Values are written as C++
// hexfloats so save/load roundtrips are exact and files are reproducible.

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lambo/tensor.hpp"

namespace lambo::ckpt {

struct CheckpointError : std::runtime_error {
  explicit CheckpointError(const std::string& what) : std::runtime_error(what) {}
};

inline constexpr const char* kMagic = "lambo-checkpoint";
inline constexpr int kVersion = 1;

inline std::string hexdump(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%a", x);
  return buf;
}

inline void write_named_tensors(std::ostream& os,
                                const std::vector<std::pair<std::string, Tensor>>& items) {
  os << kMagic << " v" << kVersion << "\n";
  os << "count " << items.size() << "\n";
  for (const auto& [name, t] : items) {
    os << "tensor " << name << " " << t.rank();
    for (std::size_t i = 0; i < t.rank(); ++i) os << " " << t.dim(i);
    os << "\n";
    for (std::size_t i = 0; i < t.numel(); ++i) {
      os << hexdump(t[i]) << (i + 1 == t.numel() ? "" : " ");
    }
    os << "\n";
  }
}

inline std::vector<std::pair<std::string, Tensor>> read_named_tensors(std::istream& is) {
  std::string magic, version;
  is >> magic >> version;
  if (magic != kMagic || version != "v" + std::to_string(kVersion))
    throw CheckpointError("bad checkpoint header: " + magic + " " + version);
  std::string kw;
  std::size_t count = 0;
  is >> kw >> count;
  if (kw != "count") throw CheckpointError("expected count line");
  std::vector<std::pair<std::string, Tensor>> items;
  items.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    std::string name;
    std::size_t rank = 0;
    is >> kw >> name >> rank;
    if (!is || kw != "tensor") throw CheckpointError("expected tensor record");
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) is >> d;
    Tensor t(shape);
    for (std::size_t i = 0; i < t.numel(); ++i) {
      std::string tok;
      is >> tok;
      t[i] = std::strtod(tok.c_str(), nullptr);
    }
    if (!is) throw CheckpointError("truncated checkpoint reading " + name);
    items.emplace_back(std::move(name), std::move(t));
  }
  return items;
}

inline void save_file(const std::string& path,
                      const std::vector<std::pair<std::string, Tensor>>& items) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open for write: " + path);
  write_named_tensors(f, items);
}

inline std::vector<std::pair<std::string, Tensor>> load_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open for read: " + path);
  return read_named_tensors(f);
}

}  // namespace lambo::ckpt
