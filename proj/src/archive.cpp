#include "hello/archive.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "hello/common.hpp"

static_assert(std::endian::native == std::endian::little,
              "archive I/O assumes a little-endian host");

namespace hello {

namespace {

constexpr char kMagic[8] = {'H', 'E', 'L', 'O', 'A', 'R', 'C', '1'};
constexpr uint32_t kVersion = 1;

template <class T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is, const std::string& origin) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw TruncationError("unexpected end of archive: " + origin);
  return v;
}

uint64_t header_bytes(const std::string& name, const Shape& shape) {
  return 4 + name.size() + 1 + 1 + 8 * shape.size();
}

}  // namespace

void TensorArchive::put(const std::string& name, Tensorf t) {
  if (name.empty()) throw ValidationError("archive entry name must be non-empty");
  entries_.insert_or_assign(name, Value(std::move(t)));
}

void TensorArchive::put(const std::string& name, Tensord t) {
  if (name.empty()) throw ValidationError("archive entry name must be non-empty");
  entries_.insert_or_assign(name, Value(std::move(t)));
}

std::vector<std::string> TensorArchive::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [k, v] : entries_) out.push_back(k);
  return out;
}

const Tensorf& TensorArchive::get_f32(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw IoError("archive entry not found: " + name);
  const auto* p = std::get_if<Tensorf>(&it->second);
  if (!p) throw ValidationError("archive entry " + name + " has width 8, expected 4");
  return *p;
}

const Tensord& TensorArchive::get_f64(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw IoError("archive entry not found: " + name);
  const auto* p = std::get_if<Tensord>(&it->second);
  if (!p) throw ValidationError("archive entry " + name + " has width 4, expected 8");
  return *p;
}

int TensorArchive::width(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw IoError("archive entry not found: " + name);
  return std::holds_alternative<Tensorf>(it->second) ? 4 : 8;
}

uint64_t TensorArchive::byte_size() const {
  uint64_t total = 8 + 4 + 8;
  for (const auto& [name, val] : entries_) {
    const Shape& shape = std::holds_alternative<Tensorf>(val)
                             ? std::get<Tensorf>(val).shape
                             : std::get<Tensord>(val).shape;
    uint64_t width = std::holds_alternative<Tensorf>(val) ? 4 : 8;
    total += header_bytes(name, shape);
    total += width * static_cast<uint64_t>(shape_numel(shape));
  }
  return total;
}

void TensorArchive::save(std::ostream& os) const {
  os.write(kMagic, 8);
  write_pod<uint32_t>(os, kVersion);
  write_pod<uint64_t>(os, entries_.size());
  for (const auto& [name, val] : entries_) {
    write_pod<uint32_t>(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    bool f32 = std::holds_alternative<Tensorf>(val);
    const Shape& shape = f32 ? std::get<Tensorf>(val).shape : std::get<Tensord>(val).shape;
    write_pod<uint8_t>(os, f32 ? 4 : 8);
    write_pod<uint8_t>(os, static_cast<uint8_t>(shape.size()));
    for (int64_t d : shape) write_pod<uint64_t>(os, static_cast<uint64_t>(d));
  }
  for (const auto& [name, val] : entries_) {
    if (const auto* p = std::get_if<Tensorf>(&val)) {
      os.write(reinterpret_cast<const char*>(p->ptr()),
               static_cast<std::streamsize>(4 * p->numel()));
    } else {
      const auto& t = std::get<Tensord>(val);
      os.write(reinterpret_cast<const char*>(t.ptr()),
               static_cast<std::streamsize>(8 * t.numel()));
    }
  }
  if (!os) throw IoError("archive write failed");
}

void TensorArchive::save_file(const std::string& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for writing: " + path);
  save(os);
  os.flush();
  if (!os) throw IoError("archive write failed: " + path);
}

TensorArchive TensorArchive::load(std::istream& is, uint64_t stream_size,
                                  const std::string& origin) {
  if (stream_size < 8 + 4 + 8)
    throw FormatError("not a tensor archive (too small): " + origin);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    throw FormatError("not a tensor archive (bad magic): " + origin);
  uint32_t version = read_pod<uint32_t>(is, origin);
  if (version != kVersion)
    throw FormatError("unsupported archive version " + std::to_string(version) +
                      ": " + origin);
  uint64_t count = read_pod<uint64_t>(is, origin);

  struct Header {
    std::string name;
    uint8_t width;
    Shape shape;
  };
  std::vector<Header> headers;
  headers.reserve(count);
  uint64_t consumed = 8 + 4 + 8;
  uint64_t payload = 0;
  std::string prev;
  for (uint64_t i = 0; i < count; ++i) {
    uint32_t name_len = read_pod<uint32_t>(is, origin);
    if (name_len == 0 || name_len > 4096)
      throw FormatError("corrupt entry name length in " + origin);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw TruncationError("unexpected end of archive: " + origin);
    if (i > 0 && !(prev < name))
      throw FormatError("entries out of order in " + origin);
    prev = name;
    uint8_t width = read_pod<uint8_t>(is, origin);
    if (width != 4 && width != 8)
      throw FormatError("corrupt width " + std::to_string(width) + " for entry " +
                        name + " in " + origin);
    uint8_t ndim = read_pod<uint8_t>(is, origin);
    Shape shape(ndim);
    int64_t numel = 1;
    for (uint8_t d = 0; d < ndim; ++d) {
      uint64_t dim = read_pod<uint64_t>(is, origin);
      if (dim == 0 || dim > uint64_t(1) << 40)
        throw FormatError("corrupt dimension for entry " + name + " in " + origin);
      shape[d] = static_cast<int64_t>(dim);
      numel *= shape[d];
    }
    consumed += header_bytes(name, shape);
    payload += static_cast<uint64_t>(width) * static_cast<uint64_t>(numel);
    headers.push_back({std::move(name), width, std::move(shape)});
  }
  if (stream_size < consumed + payload)
    throw TruncationError("archive truncated: " + origin + " needs " +
                          std::to_string(consumed + payload) + " bytes, has " +
                          std::to_string(stream_size));

  TensorArchive arc;
  for (auto& h : headers) {
    if (h.width == 4) {
      Tensorf t(h.shape);
      is.read(reinterpret_cast<char*>(t.ptr()),
              static_cast<std::streamsize>(4 * t.numel()));
      if (!is) throw TruncationError("unexpected end of archive: " + origin);
      arc.entries_.insert_or_assign(h.name, Value(std::move(t)));
    } else {
      Tensord t(h.shape);
      is.read(reinterpret_cast<char*>(t.ptr()),
              static_cast<std::streamsize>(8 * t.numel()));
      if (!is) throw TruncationError("unexpected end of archive: " + origin);
      arc.entries_.insert_or_assign(h.name, Value(std::move(t)));
    }
  }
  return arc;
}

TensorArchive TensorArchive::load_file(const std::string& path) {
  std::error_code ec;
  uint64_t fsize = std::filesystem::file_size(path, ec);
  if (ec) throw IoError("cannot open archive: " + path);
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open archive: " + path);
  return load(is, fsize, path);
}

void archive_put_string(TensorArchive& arc, const std::string& name,
                        const std::string& value) {
  Tensorf t({static_cast<int64_t>(std::max<std::size_t>(value.size(), 1))});
  if (value.empty()) {
    t[0] = 0.0f;
  } else {
    for (std::size_t i = 0; i < value.size(); ++i)
      t[static_cast<int64_t>(i)] = static_cast<float>(static_cast<unsigned char>(value[i]));
  }
  arc.put(name, std::move(t));
}

std::string archive_get_string(const TensorArchive& arc, const std::string& name) {
  const Tensorf& t = arc.get_f32(name);
  std::string out;
  out.reserve(static_cast<std::size_t>(t.numel()));
  for (int64_t i = 0; i < t.numel(); ++i) {
    float v = t[i];
    if (v == 0.0f) continue;  // zero pads an empty string
    if (v < 1.0f || v > 255.0f || v != std::floor(v))
      throw FormatError("entry " + name + " does not decode as a string");
    out.push_back(static_cast<char>(static_cast<unsigned char>(v)));
  }
  return out;
}

void archive_put_strings(TensorArchive& arc, const std::string& name,
                         const std::vector<std::string>& items) {
  std::string joined;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].find('\n') != std::string::npos)
      throw ValidationError("string list items must not contain newlines: " + name);
    if (i) joined.push_back('\n');
    joined += items[i];
  }
  archive_put_string(arc, name, joined);
}

std::vector<std::string> archive_get_strings(const TensorArchive& arc,
                                             const std::string& name) {
  std::string joined = archive_get_string(arc, name);
  std::vector<std::string> out;
  if (joined.empty()) return out;
  std::stringstream ss(joined);
  std::string item;
  while (std::getline(ss, item)) out.push_back(item);
  return out;
}

void archive_put_scalar(TensorArchive& arc, const std::string& name, int64_t v) {
  if (v < 0 || v > (int64_t(1) << 24))
    throw ValidationError("scalar out of exact float range: " + name);
  Tensorf t({1});
  t[0] = static_cast<float>(v);
  arc.put(name, std::move(t));
}

int64_t archive_get_scalar(const TensorArchive& arc, const std::string& name) {
  const Tensorf& t = arc.get_f32(name);
  if (t.numel() != 1) throw ValidationError("entry " + name + " is not a scalar");
  float v = t[0];
  if (v < 0.0f || v != std::floor(v))
    throw FormatError("entry " + name + " is not a non-negative integer scalar");
  return static_cast<int64_t>(v);
}

}  // namespace hello
