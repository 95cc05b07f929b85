#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "stmesh/tensor.hpp"

namespace stmesh {

static_assert(std::endian::native == std::endian::little, "raw tensor IO assumes a little-endian host");

// Raw tensor file: u64 rank, u64 extents[rank], then numel IEEE-754 values,
// all little-endian. The element width is not stored; readers infer it from
// the file size.
template <class T>
void write_raw_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  const std::uint64_t rank = t.rank();
  os.write(reinterpret_cast<const char*>(&rank), sizeof rank);
  for (std::size_t d : t.shape()) {
    const std::uint64_t e = d;
    os.write(reinterpret_cast<const char*>(&e), sizeof e);
  }
  os.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * sizeof(T)));
  if (!os) throw FormatError("write failed for " + path.string());
}

struct RawTensorHeader {
  Shape shape;
  std::size_t element_width = 0;
};

namespace detail {

inline std::vector<char> slurp(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

inline RawTensorHeader parse_raw_header(const std::vector<char>& bytes, const std::string& name, std::size_t& offset) {
  auto read_u64 = [&](std::uint64_t& v) {
    if (offset + 8 > bytes.size()) throw FormatError(name + ": truncated header");
    std::memcpy(&v, bytes.data() + offset, 8);
    offset += 8;
  };
  std::uint64_t rank = 0;
  read_u64(rank);
  if (rank > 16) throw FormatError(name + ": implausible rank " + std::to_string(rank));
  RawTensorHeader h;
  std::uint64_t count = 1;
  for (std::uint64_t i = 0; i < rank; ++i) {
    std::uint64_t e = 0;
    read_u64(e);
    h.shape.push_back(static_cast<std::size_t>(e));
    count *= e;
  }
  const std::size_t payload = bytes.size() - offset;
  if (count == 0) {
    if (payload != 0) throw FormatError(name + ": trailing bytes after empty tensor");
    h.element_width = 0;
    return h;
  }
  if (payload % count != 0 || (payload / count != 4 && payload / count != 8)) {
    throw FormatError(name + ": payload of " + std::to_string(payload) + " bytes does not match " +
                      std::to_string(count) + " elements of shape " + shape_str(h.shape));
  }
  h.element_width = payload / count;
  return h;
}

}  // namespace detail

inline RawTensorHeader read_raw_header(const std::filesystem::path& path) {
  const auto bytes = detail::slurp(path);
  std::size_t offset = 0;
  return detail::parse_raw_header(bytes, path.filename().string(), offset);
}

// Reads a raw tensor of either width and converts to T.
template <class T>
Tensor<T> read_raw_tensor(const std::filesystem::path& path) {
  const auto bytes = detail::slurp(path);
  std::size_t offset = 0;
  const RawTensorHeader h = detail::parse_raw_header(bytes, path.filename().string(), offset);
  const std::size_t n = shape_numel(h.shape);
  std::vector<T> values(n);
  if (h.element_width == 8) {
    for (std::size_t i = 0; i < n; ++i) {
      double v;
      std::memcpy(&v, bytes.data() + offset + 8 * i, 8);
      values[i] = static_cast<T>(v);
    }
  } else if (h.element_width == 4) {
    for (std::size_t i = 0; i < n; ++i) {
      float v;
      std::memcpy(&v, bytes.data() + offset + 4 * i, 4);
      values[i] = static_cast<T>(v);
    }
  }
  return Tensor<T>(h.shape, std::move(values));
}

// Reads and insists on an exact shape and element width.
template <class T>
Tensor<T> read_raw_tensor_checked(const std::filesystem::path& path, const Shape& expected) {
  Tensor<T> t = read_raw_tensor<T>(path);
  if (t.shape() != expected) {
    throw FormatError(path.filename().string() + ": manifest extents " + shape_str(expected) + " but file holds " +
                      shape_str(t.shape()));
  }
  return t;
}

// key=value text files used by every manifest.
using KeyValues = std::map<std::string, std::string>;

inline void write_key_values(const std::filesystem::path& path, const KeyValues& kv) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  for (const auto& [k, v] : kv) os << k << '=' << v << '\n';
  if (!os) throw FormatError("write failed for " + path.string());
}

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline KeyValues read_key_values(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open " + path.string());
  KeyValues kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw FormatError(path.filename().string() + ":" + std::to_string(lineno) + ": expected key=value");
    }
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline const std::string& require_key(const KeyValues& kv, const std::string& key, const std::string& file) {
  auto it = kv.find(key);
  if (it == kv.end()) throw FormatError(file + ": missing key '" + key + "'");
  return it->second;
}

inline std::string shape_to_text(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out;
}

inline Shape shape_from_text(const std::string& text, const std::string& file) {
  Shape s;
  if (text.empty()) return s;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto comma = text.find(',', pos);
    const std::string tok = text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    try {
      s.push_back(static_cast<std::size_t>(std::stoull(tok)));
    } catch (const std::exception&) {
      throw FormatError(file + ": bad extents '" + text + "'");
    }
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return s;
}

}  // namespace stmesh
