#ifndef CPCR_NPY_HPP
#define CPCR_NPY_HPP

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "cpcr/common.hpp"

namespace cpcr {

// Minimal NPY (format version 1.0) reader/writer covering C-order arrays of
// the element types this project stores on disk.

struct NpyArray {
  std::string descr;             // "<f4", "<f8", "|u1", "<i4"
  std::vector<int> shape;        // C order
  std::vector<unsigned char> raw;

  std::int64_t element_count() const {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  }
};

namespace detail {

inline int npy_element_size(const std::string& descr) {
  if (descr == "|u1" || descr == "|i1") return 1;
  if (descr == "<i2" || descr == "<u2") return 2;
  if (descr == "<f4" || descr == "<i4" || descr == "<u4") return 4;
  if (descr == "<f8" || descr == "<i8") return 8;
  throw DataError("npy: unsupported dtype descriptor '" + descr + "'");
}

// Extracts the value of a python-dict entry ('key': value) from the header.
inline std::string npy_dict_value(const std::string& header,
                                  const std::string& key,
                                  const std::string& path) {
  const std::string quoted = "'" + key + "'";
  size_t k = header.find(quoted);
  if (k == std::string::npos)
    throw DataError("npy: header of " + path + " lacks key " + quoted);
  size_t colon = header.find(':', k + quoted.size());
  if (colon == std::string::npos)
    throw DataError("npy: malformed header in " + path);
  size_t start = header.find_first_not_of(" \t", colon + 1);
  if (start == std::string::npos)
    throw DataError("npy: malformed header in " + path);
  size_t end;
  if (header[start] == '\'') {
    end = header.find('\'', start + 1);
    if (end == std::string::npos)
      throw DataError("npy: malformed header in " + path);
    return header.substr(start + 1, end - start - 1);
  }
  if (header[start] == '(') {
    end = header.find(')', start + 1);
    if (end == std::string::npos)
      throw DataError("npy: malformed header in " + path);
    return header.substr(start, end - start + 1);
  }
  end = header.find_first_of(",}", start);
  if (end == std::string::npos)
    throw DataError("npy: malformed header in " + path);
  std::string v = header.substr(start, end - start);
  while (!v.empty() && (v.back() == ' ' || v.back() == '\t')) v.pop_back();
  return v;
}

inline std::vector<int> npy_parse_shape(const std::string& tuple,
                                        const std::string& path) {
  std::vector<int> shape;
  std::string digits;
  for (char ch : tuple) {
    if (ch >= '0' && ch <= '9') {
      digits.push_back(ch);
    } else if (!digits.empty()) {
      shape.push_back(std::stoi(digits));
      digits.clear();
    }
  }
  if (!digits.empty()) shape.push_back(std::stoi(digits));
  for (int d : shape)
    if (d <= 0) throw DataError("npy: non-positive dimension in " + path);
  return shape;
}

}  // namespace detail

inline NpyArray read_npy(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("npy: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "\x93NUMPY", 6) != 0)
    throw DataError("npy: " + path + " is not an NPY file");
  const int major = static_cast<unsigned char>(magic[6]);
  if (major != 1)
    throw DataError("npy: " + path + " uses unsupported format version " +
                    std::to_string(major));
  unsigned char len_bytes[2];
  in.read(reinterpret_cast<char*>(len_bytes), 2);
  if (!in) throw DataError("npy: truncated header in " + path);
  const size_t header_len =
      static_cast<size_t>(len_bytes[0]) | (static_cast<size_t>(len_bytes[1]) << 8);
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw DataError("npy: truncated header in " + path);

  NpyArray arr;
  arr.descr = detail::npy_dict_value(header, "descr", path);
  const std::string order = detail::npy_dict_value(header, "fortran_order", path);
  if (order != "False")
    throw DataError("npy: " + path + " is Fortran-ordered; only C order is supported");
  arr.shape = detail::npy_parse_shape(
      detail::npy_dict_value(header, "shape", path), path);

  const int esz = detail::npy_element_size(arr.descr);
  const std::int64_t bytes = arr.element_count() * esz;
  arr.raw.resize(static_cast<size_t>(bytes));
  in.read(reinterpret_cast<char*>(arr.raw.data()), bytes);
  if (!in) throw DataError("npy: truncated data in " + path);
  return arr;
}

inline void write_npy(const std::string& path, const std::string& descr,
                      const std::vector<int>& shape, const void* data) {
  std::string dict = "{'descr': '" + descr + "', 'fortran_order': False, 'shape': (";
  for (size_t i = 0; i < shape.size(); ++i) {
    dict += std::to_string(shape[i]);
    if (shape.size() == 1 || i + 1 < shape.size()) dict += ",";
    if (i + 1 < shape.size()) dict += " ";
  }
  dict += "), }";
  // Pad with spaces so the data section starts on a 64-byte boundary.
  size_t total = 10 + dict.size() + 1;
  const size_t padded = (total + 63) / 64 * 64;
  dict.append(padded - total, ' ');
  dict.push_back('\n');

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("npy: cannot write " + path);
  out.write("\x93NUMPY\x01\x00", 8);
  const size_t hlen = dict.size();
  const unsigned char len_bytes[2] = {static_cast<unsigned char>(hlen & 0xff),
                                      static_cast<unsigned char>((hlen >> 8) & 0xff)};
  out.write(reinterpret_cast<const char*>(len_bytes), 2);
  out.write(dict.data(), static_cast<std::streamsize>(dict.size()));
  std::int64_t count = 1;
  for (int d : shape) count *= d;
  out.write(reinterpret_cast<const char*>(data),
            count * detail::npy_element_size(descr));
  if (!out) throw IoError("npy: write failed for " + path);
}

inline std::vector<float> npy_as_f32(const NpyArray& arr, const std::string& path) {
  std::vector<float> out(static_cast<size_t>(arr.element_count()));
  if (arr.descr == "<f4") {
    std::memcpy(out.data(), arr.raw.data(), arr.raw.size());
  } else if (arr.descr == "<f8") {
    const double* p = reinterpret_cast<const double*>(arr.raw.data());
    for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(p[i]);
  } else if (arr.descr == "|u1") {
    for (size_t i = 0; i < out.size(); ++i) out[i] = arr.raw[i];
  } else if (arr.descr == "<i2") {
    const std::int16_t* p = reinterpret_cast<const std::int16_t*>(arr.raw.data());
    for (size_t i = 0; i < out.size(); ++i) out[i] = p[i];
  } else if (arr.descr == "<i4") {
    const std::int32_t* p = reinterpret_cast<const std::int32_t*>(arr.raw.data());
    for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(p[i]);
  } else {
    throw DataError("npy: " + path + " has dtype " + arr.descr +
                    ", expected a numeric image type");
  }
  return out;
}

inline std::vector<std::uint8_t> npy_as_u8(const NpyArray& arr,
                                           const std::string& path) {
  if (arr.descr != "|u1")
    throw DataError("npy: " + path + " has dtype " + arr.descr +
                    ", expected |u1 labels");
  return std::vector<std::uint8_t>(arr.raw.begin(), arr.raw.end());
}

}  // namespace cpcr

#endif
