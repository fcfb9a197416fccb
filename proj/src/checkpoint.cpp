#include "bimot/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <json.hpp>

#include "bimot/errors.hpp"

namespace bimot {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs assume a little-endian host");

const char* dtype_name(DType dtype) {
  return dtype == DType::kF32 ? "F32" : "F64";
}

namespace {

DType parse_dtype(const std::string& s) {
  if (s == "F32") return DType::kF32;
  if (s == "F64") return DType::kF64;
  throw DataError("checkpoint: unknown dtype " + s);
}

template <typename T>
std::vector<std::uint8_t> to_bytes(std::span<const T> values) {
  std::vector<std::uint8_t> bytes(values.size_bytes());
  std::memcpy(bytes.data(), values.data(), bytes.size());
  return bytes;
}

template <typename Src, typename Dst>
std::vector<Dst> convert(const std::vector<std::uint8_t>& bytes) {
  std::vector<Src> src(bytes.size() / sizeof(Src));
  std::memcpy(src.data(), bytes.data(), bytes.size());
  if constexpr (std::is_same_v<Src, Dst>) {
    return src;
  } else {
    return std::vector<Dst>(src.begin(), src.end());
  }
}

}  // namespace

void ArrayArchive::put(const std::string& name, std::span<const float> values, Shape shape) {
  if (shape_numel(shape) != values.size()) throw ShapeError("checkpoint: " + name + " shape/value mismatch");
  entries_[name] = Entry{DType::kF32, std::move(shape), to_bytes(values)};
}

void ArrayArchive::put(const std::string& name, std::span<const double> values, Shape shape) {
  if (shape_numel(shape) != values.size()) throw ShapeError("checkpoint: " + name + " shape/value mismatch");
  entries_[name] = Entry{DType::kF64, std::move(shape), to_bytes(values)};
}

const ArrayArchive::Entry& ArrayArchive::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw DataError("checkpoint: missing array " + name);
  return it->second;
}

template <typename T>
std::vector<T> ArrayArchive::get(const std::string& name) const {
  const Entry& e = entry(name);
  return e.dtype == DType::kF32 ? convert<float, T>(e.bytes) : convert<double, T>(e.bytes);
}

template std::vector<float> ArrayArchive::get<float>(const std::string&) const;
template std::vector<double> ArrayArchive::get<double>(const std::string&) const;

void ArrayArchive::save(const std::filesystem::path& path) const {
  nlohmann::ordered_json header = nlohmann::ordered_json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, e] : entries_) {
    header[name] = {{"dtype", dtype_name(e.dtype)},
                    {"shape", e.shape},
                    {"offset", offset},
                    {"nbytes", e.bytes.size()}};
    offset += e.bytes.size();
  }
  header["__metadata__"] = metadata_;
  const std::string text = header.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("checkpoint: cannot write " + path.string());
  const std::uint64_t n = text.size();
  out.write(reinterpret_cast<const char*>(&n), sizeof(n));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, e] : entries_) {
    out.write(reinterpret_cast<const char*>(e.bytes.data()), static_cast<std::streamsize>(e.bytes.size()));
  }
  if (!out) throw ConfigError("checkpoint: write failed for " + path.string());
}

ArrayArchive ArrayArchive::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("checkpoint: cannot open " + path.string());
  std::uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&n), sizeof(n));
  if (!in || n > (1ull << 32)) throw DataError("checkpoint: corrupt header in " + path.string());
  std::string text(n, '\0');
  in.read(text.data(), static_cast<std::streamsize>(n));
  std::vector<std::uint8_t> blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto header = nlohmann::json::parse(text);
  ArrayArchive archive;
  for (const auto& [name, info] : header.items()) {
    if (name == "__metadata__") {
      for (const auto& [k, v] : info.items()) archive.metadata_[k] = v.get<std::string>();
      continue;
    }
    Entry e;
    e.dtype = parse_dtype(info.at("dtype").get<std::string>());
    e.shape = info.at("shape").get<Shape>();
    const auto offset = info.at("offset").get<std::uint64_t>();
    const auto nbytes = info.at("nbytes").get<std::uint64_t>();
    const std::size_t width = e.dtype == DType::kF32 ? 4 : 8;
    if (offset + nbytes > blob.size() || nbytes != shape_numel(e.shape) * width) {
      throw DataError("checkpoint: array " + name + " has inconsistent extent in " + path.string());
    }
    e.bytes.assign(blob.begin() + static_cast<std::ptrdiff_t>(offset),
                   blob.begin() + static_cast<std::ptrdiff_t>(offset + nbytes));
    archive.entries_[name] = std::move(e);
  }
  return archive;
}

}  // namespace bimot
