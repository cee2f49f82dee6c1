#ifndef CPCR_NIFTI_IO_HPP
#define CPCR_NIFTI_IO_HPP

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "cpcr/common.hpp"

namespace cpcr {

// Single-file NIfTI-1 volumes (.nii / .nii.gz), the format ACDC ships in.
// Volumes are returned in (z, y, x) order with matching voxel spacing.

struct NiftiVolume {
  std::array<int, 3> dims{0, 0, 0};        // z, y, x
  std::array<float, 3> spacing{1, 1, 1};   // z, y, x
  std::vector<float> data;                 // z-major, x fastest

  std::int64_t voxel_count() const {
    return static_cast<std::int64_t>(dims[0]) * dims[1] * dims[2];
  }
};

namespace detail {

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("nifti: cannot open " + path);
  const std::streamsize n = in.tellg();
  in.seekg(0);
  std::vector<unsigned char> bytes(static_cast<size_t>(n));
  in.read(reinterpret_cast<char*>(bytes.data()), n);
  if (!in) throw IoError("nifti: read failed for " + path);
  return bytes;
}

inline std::vector<unsigned char> gzip_inflate(
    const std::vector<unsigned char>& in, const std::string& path) {
  z_stream strm{};
  if (inflateInit2(&strm, 15 + 32) != Z_OK)
    throw IoError("nifti: inflateInit failed for " + path);
  std::vector<unsigned char> out;
  out.reserve(in.size() * 4);
  unsigned char buf[1 << 16];
  strm.next_in = const_cast<unsigned char*>(in.data());
  strm.avail_in = static_cast<uInt>(in.size());
  int ret = Z_OK;
  do {
    strm.next_out = buf;
    strm.avail_out = sizeof(buf);
    ret = inflate(&strm, Z_NO_FLUSH);
    if (ret != Z_OK && ret != Z_STREAM_END) {
      inflateEnd(&strm);
      throw DataError("nifti: corrupt gzip stream in " + path);
    }
    out.insert(out.end(), buf, buf + (sizeof(buf) - strm.avail_out));
  } while (ret != Z_STREAM_END);
  inflateEnd(&strm);
  return out;
}

inline std::vector<unsigned char> gzip_deflate(
    const std::vector<unsigned char>& in, const std::string& path) {
  z_stream strm{};
  if (deflateInit2(&strm, Z_DEFAULT_COMPRESSION, Z_DEFLATED, 15 + 16, 8,
                   Z_DEFAULT_STRATEGY) != Z_OK)
    throw IoError("nifti: deflateInit failed for " + path);
  std::vector<unsigned char> out;
  unsigned char buf[1 << 16];
  strm.next_in = const_cast<unsigned char*>(in.data());
  strm.avail_in = static_cast<uInt>(in.size());
  int ret = Z_OK;
  do {
    strm.next_out = buf;
    strm.avail_out = sizeof(buf);
    ret = deflate(&strm, Z_FINISH);
    out.insert(out.end(), buf, buf + (sizeof(buf) - strm.avail_out));
  } while (ret != Z_STREAM_END);
  deflateEnd(&strm);
  return out;
}

template <typename T>
T read_le(const unsigned char* p, bool swap) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  if (swap) {
    unsigned char* b = reinterpret_cast<unsigned char*>(&v);
    for (size_t i = 0; i < sizeof(T) / 2; ++i)
      std::swap(b[i], b[sizeof(T) - 1 - i]);
  }
  return v;
}

}  // namespace detail

inline NiftiVolume read_nifti(const std::string& path) {
  std::vector<unsigned char> bytes = detail::read_file_bytes(path);
  if (bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b)
    bytes = detail::gzip_inflate(bytes, path);
  if (bytes.size() < 352)
    throw DataError("nifti: " + path + " is too small to hold a header");

  bool swap = false;
  std::int32_t sizeof_hdr = detail::read_le<std::int32_t>(bytes.data(), false);
  if (sizeof_hdr != 348) {
    sizeof_hdr = detail::read_le<std::int32_t>(bytes.data(), true);
    if (sizeof_hdr != 348)
      throw DataError("nifti: " + path + " has an invalid header size");
    swap = true;
  }
  if (std::memcmp(bytes.data() + 344, "n+1\0", 4) != 0)
    throw DataError("nifti: " + path +
                    " is not a single-file NIfTI-1 volume (bad magic)");

  std::array<std::int16_t, 8> dim;
  for (int i = 0; i < 8; ++i)
    dim[static_cast<size_t>(i)] =
        detail::read_le<std::int16_t>(bytes.data() + 40 + 2 * i, swap);
  const std::int16_t datatype = detail::read_le<std::int16_t>(bytes.data() + 70, swap);
  std::array<float, 8> pixdim;
  for (int i = 0; i < 8; ++i)
    pixdim[static_cast<size_t>(i)] =
        detail::read_le<float>(bytes.data() + 76 + 4 * i, swap);
  const float vox_offset = detail::read_le<float>(bytes.data() + 108, swap);
  float scl_slope = detail::read_le<float>(bytes.data() + 112, swap);
  const float scl_inter = detail::read_le<float>(bytes.data() + 116, swap);

  const int ndim = dim[0];
  if (ndim < 2 || ndim > 7)
    throw DataError("nifti: " + path + " has unsupported dimensionality " +
                    std::to_string(ndim));
  for (int i = 4; i <= ndim; ++i)
    if (dim[static_cast<size_t>(i)] > 1)
      throw DataError("nifti: " + path +
                      " has more than one volume along axis " +
                      std::to_string(i) + "; expected a single 3D volume");
  NiftiVolume vol;
  vol.dims = {ndim >= 3 ? dim[3] : 1, dim[2], dim[1]};
  for (int a = 0; a < 3; ++a)
    if (vol.dims[static_cast<size_t>(a)] <= 0)
      throw DataError("nifti: " + path + " has a non-positive dimension");
  vol.spacing = {ndim >= 3 && pixdim[3] > 0 ? pixdim[3] : 1.0f,
                 pixdim[2] > 0 ? pixdim[2] : 1.0f,
                 pixdim[1] > 0 ? pixdim[1] : 1.0f};

  const std::int64_t count = vol.voxel_count();
  const size_t offset = static_cast<size_t>(vox_offset);
  auto need = [&](int elem_size) {
    if (bytes.size() < offset + static_cast<size_t>(count) * elem_size)
      throw DataError("nifti: truncated voxel data in " + path);
  };
  vol.data.resize(static_cast<size_t>(count));
  const unsigned char* d = bytes.data() + offset;
  switch (datatype) {
    case 2:  // uint8
      need(1);
      for (std::int64_t i = 0; i < count; ++i) vol.data[i] = d[i];
      break;
    case 256:  // int8
      need(1);
      for (std::int64_t i = 0; i < count; ++i)
        vol.data[i] = static_cast<std::int8_t>(d[i]);
      break;
    case 4:  // int16
      need(2);
      for (std::int64_t i = 0; i < count; ++i)
        vol.data[i] = detail::read_le<std::int16_t>(d + 2 * i, swap);
      break;
    case 512:  // uint16
      need(2);
      for (std::int64_t i = 0; i < count; ++i)
        vol.data[i] = detail::read_le<std::uint16_t>(d + 2 * i, swap);
      break;
    case 8:  // int32
      need(4);
      for (std::int64_t i = 0; i < count; ++i)
        vol.data[i] = static_cast<float>(detail::read_le<std::int32_t>(d + 4 * i, swap));
      break;
    case 16:  // float32
      need(4);
      for (std::int64_t i = 0; i < count; ++i)
        vol.data[i] = detail::read_le<float>(d + 4 * i, swap);
      break;
    case 64:  // float64
      need(8);
      for (std::int64_t i = 0; i < count; ++i)
        vol.data[i] = static_cast<float>(detail::read_le<double>(d + 8 * i, swap));
      break;
    default:
      throw DataError("nifti: " + path + " uses unsupported datatype code " +
                      std::to_string(datatype));
  }
  if (scl_slope != 0.0f && !(scl_slope == 1.0f && scl_inter == 0.0f))
    for (float& v : vol.data) v = v * scl_slope + scl_inter;
  return vol;
}

namespace detail {

inline void write_nifti_bytes(const std::string& path,
                              const std::array<int, 3>& dims_zyx,
                              const std::array<float, 3>& spacing_zyx,
                              std::int16_t datatype, std::int16_t bitpix,
                              const void* data, std::int64_t data_bytes) {
  std::vector<unsigned char> bytes(352, 0);
  auto put = [&](size_t off, const void* src, size_t n) {
    std::memcpy(bytes.data() + off, src, n);
  };
  const std::int32_t hdr = 348;
  put(0, &hdr, 4);
  std::int16_t dim[8] = {3, static_cast<std::int16_t>(dims_zyx[2]),
                         static_cast<std::int16_t>(dims_zyx[1]),
                         static_cast<std::int16_t>(dims_zyx[0]), 1, 1, 1, 1};
  put(40, dim, sizeof(dim));
  put(70, &datatype, 2);
  put(72, &bitpix, 2);
  float pixdim[8] = {1.0f, spacing_zyx[2], spacing_zyx[1], spacing_zyx[0],
                     1.0f, 1.0f, 1.0f, 1.0f};
  put(76, pixdim, sizeof(pixdim));
  const float vox_offset = 352.0f;
  put(108, &vox_offset, 4);
  const float scl_slope = 1.0f, scl_inter = 0.0f;
  put(112, &scl_slope, 4);
  put(116, &scl_inter, 4);
  put(344, "n+1\0", 4);

  const unsigned char* p = static_cast<const unsigned char*>(data);
  bytes.insert(bytes.end(), p, p + data_bytes);
  if (ends_with(path, ".gz")) bytes = gzip_deflate(bytes, path);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("nifti: cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("nifti: write failed for " + path);
}

}  // namespace detail

inline void write_nifti(const std::string& path,
                        const std::array<int, 3>& dims_zyx,
                        const std::array<float, 3>& spacing_zyx,
                        const std::vector<float>& data) {
  detail::write_nifti_bytes(path, dims_zyx, spacing_zyx, 16, 32, data.data(),
                            static_cast<std::int64_t>(data.size()) * 4);
}

inline void write_nifti(const std::string& path,
                        const std::array<int, 3>& dims_zyx,
                        const std::array<float, 3>& spacing_zyx,
                        const std::vector<std::uint8_t>& data) {
  detail::write_nifti_bytes(path, dims_zyx, spacing_zyx, 2, 8, data.data(),
                            static_cast<std::int64_t>(data.size()));
}

}  // namespace cpcr

#endif
