#include "hello/npyio.hpp"

#include <cctype>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "hello/common.hpp"
#include "hello/encoders.hpp"

namespace hello {

namespace {

const char kMagic[6] = {'\x93', 'N', 'U', 'M', 'P', 'Y'};

std::string npy_header(const std::string& descr, const Shape& shape) {
  std::ostringstream os;
  os << "{'descr': '" << descr << "', 'fortran_order': False, 'shape': (";
  for (std::size_t i = 0; i < shape.size(); ++i) os << shape[i] << ", ";
  os << "), }";
  std::string head = os.str();
  // Data start (magic 6 + version 2 + hlen 2 + header) padded to 64 bytes,
  // header space-padded and newline-terminated per the format spec.
  std::size_t total = 10 + head.size() + 1;
  std::size_t pad = (64 - total % 64) % 64;
  head.append(pad, ' ');
  head.push_back('\n');
  return head;
}

template <class T>
void save_npy_impl(const std::string& path, const Tensor<T>& t,
                   const std::string& descr) {
  if (t.rank() < 1) throw ValidationError("refusing to write a rank-0 npy array");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  std::string head = npy_header(descr, t.shape);
  os.write(kMagic, 6);
  os.put('\x01');
  os.put('\x00');
  auto hlen = static_cast<uint16_t>(head.size());
  char lenb[2] = {static_cast<char>(hlen & 0xff), static_cast<char>(hlen >> 8)};
  os.write(lenb, 2);
  os.write(head.data(), static_cast<std::streamsize>(head.size()));
  os.write(reinterpret_cast<const char*>(t.ptr()),
           static_cast<std::streamsize>(sizeof(T) * t.data.size()));
  if (!os) throw IoError("write failed for " + path);
}

// Pulls `'key':` out of the header dict; the grammar is the fixed python
// repr numpy emits, so a scan is enough.
std::string dict_value(const std::string& head, const std::string& key,
                       const std::string& path) {
  std::string quoted = "'" + key + "'";
  std::size_t at = head.find(quoted);
  if (at == std::string::npos) throw FormatError(path + ": npy header lacks " + quoted);
  at = head.find(':', at + quoted.size());
  if (at == std::string::npos) throw FormatError(path + ": malformed npy header");
  ++at;
  while (at < head.size() && std::isspace(static_cast<unsigned char>(head[at]))) ++at;
  std::size_t end = at;
  if (head[at] == '\'') {
    end = head.find('\'', at + 1);
    if (end == std::string::npos) throw FormatError(path + ": unterminated string");
    return head.substr(at + 1, end - at - 1);
  }
  if (head[at] == '(') {
    end = head.find(')', at);
    if (end == std::string::npos) throw FormatError(path + ": unterminated shape");
    return head.substr(at, end - at + 1);
  }
  while (end < head.size() && head[end] != ',' && head[end] != '}') ++end;
  std::string v = head.substr(at, end - at);
  while (!v.empty() && std::isspace(static_cast<unsigned char>(v.back()))) v.pop_back();
  return v;
}

Shape parse_shape(const std::string& tuple, const std::string& path) {
  Shape shape;
  std::size_t i = 1;  // past '('
  while (i < tuple.size() && tuple[i] != ')') {
    while (i < tuple.size() &&
           !std::isdigit(static_cast<unsigned char>(tuple[i])) && tuple[i] != ')')
      ++i;
    if (i >= tuple.size() || tuple[i] == ')') break;
    int64_t v = 0;
    while (i < tuple.size() && std::isdigit(static_cast<unsigned char>(tuple[i]))) {
      v = v * 10 + (tuple[i] - '0');
      ++i;
    }
    shape.push_back(v);
  }
  if (shape.empty()) throw FormatError(path + ": rank-0 npy arrays are not supported");
  return shape;
}

template <class T>
Tensor<T> read_payload(std::ifstream& is, const Shape& shape, const std::string& path) {
  Tensor<T> t(shape);
  is.read(reinterpret_cast<char*>(t.ptr()),
          static_cast<std::streamsize>(sizeof(T) * t.data.size()));
  if (static_cast<std::size_t>(is.gcount()) != sizeof(T) * t.data.size())
    throw TruncationError(path + ": payload shorter than shape promises");
  return t;
}

}  // namespace

void save_npy(const std::string& path, const Tensorf& t) { save_npy_impl(path, t, "<f4"); }
void save_npy(const std::string& path, const Tensord& t) { save_npy_impl(path, t, "<f8"); }

NpyValue load_npy(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  char magic[6];
  is.read(magic, 6);
  if (is.gcount() != 6 || std::memcmp(magic, kMagic, 6) != 0)
    throw FormatError(path + ": not a npy file");
  unsigned char ver[2];
  is.read(reinterpret_cast<char*>(ver), 2);
  if (is.gcount() != 2) throw TruncationError(path + ": truncated npy version");
  if (ver[0] != 1)
    throw FormatError(path + ": unsupported npy version " + std::to_string(ver[0]) +
                      "." + std::to_string(ver[1]));
  unsigned char lenb[2];
  is.read(reinterpret_cast<char*>(lenb), 2);
  if (is.gcount() != 2) throw TruncationError(path + ": truncated npy header length");
  std::size_t hlen = static_cast<std::size_t>(lenb[0]) | (static_cast<std::size_t>(lenb[1]) << 8);
  std::string head(hlen, '\0');
  is.read(head.data(), static_cast<std::streamsize>(hlen));
  if (static_cast<std::size_t>(is.gcount()) != hlen)
    throw TruncationError(path + ": truncated npy header");

  std::string descr = dict_value(head, "descr", path);
  std::string order = dict_value(head, "fortran_order", path);
  Shape shape = parse_shape(dict_value(head, "shape", path), path);
  if (order != "False")
    throw FormatError(path + ": fortran-order npy arrays are not supported");
  if (descr == "<f4") return read_payload<float>(is, shape, path);
  if (descr == "<f8") return read_payload<double>(is, shape, path);
  throw FormatError(path + ": unsupported descr '" + descr + "' (need <f4 or <f8)");
}

TensorArchive import_encoder_archive(const std::string& manifest_path) {
  std::ifstream is(manifest_path);
  if (!is) throw IoError("cannot open " + manifest_path);
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest_path + ": " + e.what());
  }
  for (const char* key : {"arch", "d_f", "input_shape", "pixel_mean", "pixel_std",
                          "tensors", "text_table"}) {
    if (!m.contains(key))
      throw FormatError(manifest_path + ": manifest lacks \"" + key + "\"");
  }

  std::filesystem::path base = std::filesystem::path(manifest_path).parent_path();
  auto resolve = [&](const std::string& rel) { return (base / rel).string(); };
  auto as_f32 = [&](const std::string& rel) {
    NpyValue v = load_npy(resolve(rel));
    if (auto* f = std::get_if<Tensorf>(&v)) return std::move(*f);
    return std::get<Tensord>(v).cast<float>();
  };

  TensorArchive arc;
  for (auto it = m["tensors"].begin(); it != m["tensors"].end(); ++it) {
    arc.put(it.key(), as_f32(it.value().get<std::string>()));
  }
  arc.put("txt/table", as_f32(m["text_table"].get<std::string>()));

  archive_put_string(arc, "meta/arch", m["arch"].get<std::string>());
  archive_put_scalar(arc, "meta/d_f", m["d_f"].get<int64_t>());
  auto ishape_v = m["input_shape"].get<std::vector<double>>();
  if (ishape_v.size() != 3)
    throw FormatError(manifest_path + ": input_shape must have 3 entries");
  Tensorf ishape({3});
  for (int64_t i = 0; i < 3; ++i) ishape[i] = static_cast<float>(ishape_v[static_cast<std::size_t>(i)]);
  arc.put("meta/input_shape", std::move(ishape));
  for (const char* stat : {"pixel_mean", "pixel_std"}) {
    auto vals = m[stat].get<std::vector<double>>();
    if (vals.empty()) throw FormatError(manifest_path + ": empty " + std::string(stat));
    Tensorf t({static_cast<int64_t>(vals.size())});
    for (std::size_t i = 0; i < vals.size(); ++i) t[static_cast<int64_t>(i)] = static_cast<float>(vals[i]);
    arc.put("meta/" + std::string(stat), std::move(t));
  }

  // Shape validation: a broken import must fail here, not at first use.
  ImageEncoder enc = load_pretrained_encoder(arc, m["arch"].get<std::string>());
  TextEncoder txt = load_text_encoder(arc);
  if (enc.d_f() != txt.d_f())
    throw ValidationError(manifest_path + ": image d_f " + std::to_string(enc.d_f()) +
                          " != text table d_f " + std::to_string(txt.d_f()));
  return arc;
}

}  // namespace hello
