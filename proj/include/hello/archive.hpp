#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "hello/tensor.hpp"

namespace hello {

// Container of named tensors, the single on-disk format of the toolkit.
//
// Layout (all integers little-endian):
//   magic   8 bytes  "HELOARC1"
//   version u32      1
//   count   u64
//   count entry headers, in ascending name order:
//     name_len u32, name bytes, width u8 (4 or 8), ndim u8, ndim x u64 dims
//   payloads, contiguous, same order as the headers.
//
// Entries iterate in name order, so serialization is byte-reproducible.
class TensorArchive {
 public:
  using Value = std::variant<Tensorf, Tensord>;

  void put(const std::string& name, Tensorf t);
  void put(const std::string& name, Tensord t);

  bool contains(const std::string& name) const { return entries_.count(name) > 0; }
  std::size_t size() const { return entries_.size(); }
  std::vector<std::string> names() const;

  // Throw IoError if the name is missing, ValidationError on width mismatch.
  const Tensorf& get_f32(const std::string& name) const;
  const Tensord& get_f64(const std::string& name) const;
  int width(const std::string& name) const;  // 4 or 8

  void erase(const std::string& name) { entries_.erase(name); }

  // Exact size in bytes of the serialized archive.
  uint64_t byte_size() const;

  void save(std::ostream& os) const;
  void save_file(const std::string& path) const;

  // `origin` names the source in error messages.
  static TensorArchive load(std::istream& is, uint64_t stream_size,
                            const std::string& origin);
  static TensorArchive load_file(const std::string& path);

 private:
  std::map<std::string, Value> entries_;
};

// Strings ride in the archive as width-4 tensors, one character per element.
void archive_put_string(TensorArchive& arc, const std::string& name,
                        const std::string& value);
std::string archive_get_string(const TensorArchive& arc, const std::string& name);

// Lists are newline-joined; items must not contain newlines.
void archive_put_strings(TensorArchive& arc, const std::string& name,
                         const std::vector<std::string>& items);
std::vector<std::string> archive_get_strings(const TensorArchive& arc,
                                             const std::string& name);

// Non-negative integer scalars (ranks, counts) as width-4 scalars.
void archive_put_scalar(TensorArchive& arc, const std::string& name, int64_t v);
int64_t archive_get_scalar(const TensorArchive& arc, const std::string& name);

}  // namespace hello
