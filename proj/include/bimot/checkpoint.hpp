#pragma once

// Named-array container.
//
// Layout: u64 little-endian header length N, N bytes of UTF-8 JSON
//   {"<name>": {"dtype": "F32"|"F64", "shape": [...], "offset": b, "nbytes": n}, ...,
//    "__metadata__": {"<key>": "<string>", ...}}
// followed by the raw little-endian value blobs; offsets are relative to the
// first byte after the header.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "bimot/tensor.hpp"

namespace bimot {

enum class DType { kF32, kF64 };

const char* dtype_name(DType dtype);

class ArrayArchive {
 public:
  struct Entry {
    DType dtype;
    Shape shape;
    std::vector<std::uint8_t> bytes;
  };

  void put(const std::string& name, std::span<const float> values, Shape shape);
  void put(const std::string& name, std::span<const double> values, Shape shape);
  template <typename T>
  void put(const std::string& name, const Tensor<T>& tensor) {
    put(name, tensor.values(), tensor.shape());
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const Entry& entry(const std::string& name) const;
  // Values converted to T when the stored dtype differs.
  template <typename T>
  std::vector<T> get(const std::string& name) const;

  std::map<std::string, std::string>& metadata() { return metadata_; }
  const std::map<std::string, std::string>& metadata() const { return metadata_; }
  const std::map<std::string, Entry>& entries() const { return entries_; }

  void save(const std::filesystem::path& path) const;
  static ArrayArchive load(const std::filesystem::path& path);

 private:
  std::map<std::string, Entry> entries_;
  std::map<std::string, std::string> metadata_;
};

}  // namespace bimot
