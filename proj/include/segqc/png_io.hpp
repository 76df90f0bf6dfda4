#pragma once

#include <png.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "segqc/error.hpp"

namespace segqc {

using Bytes = std::vector<std::uint8_t>;

inline Bytes read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  Bytes out((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  return out;
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> data) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

/// 8-bit pixels as stored on disk, row-major.
struct PixelBuffer {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<std::uint8_t> data;
};

namespace detail {

inline Bytes encode_png(const PixelBuffer& px, std::uint32_t format) {
  if (px.width <= 0 || px.height <= 0)
    throw EncodeError("cannot encode an empty image");
  if (px.data.size() != static_cast<std::size_t>(px.width) * px.height * px.channels)
    throw EncodeError("pixel buffer size does not match dimensions");

  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(px.width);
  image.height = static_cast<png_uint_32>(px.height);
  image.format = format;

  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, px.data.data(), 0, nullptr))
    throw EncodeError(std::string("png sizing failed: ") + image.message);
  Bytes out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, px.data.data(), 0, nullptr))
    throw EncodeError(std::string("png encode failed: ") + image.message);
  out.resize(size);
  return out;
}

} // namespace detail

inline Bytes encode_png_gray(const PixelBuffer& px) { return detail::encode_png(px, PNG_FORMAT_GRAY); }
inline Bytes encode_png_rgb(const PixelBuffer& px) { return detail::encode_png(px, PNG_FORMAT_RGB); }

/// Decodes any PNG into 8-bit single-channel pixels (color input is reduced to gray).
inline PixelBuffer decode_png_gray(std::span<const std::uint8_t> bytes) {
  if (bytes.empty()) throw IoError("empty png buffer");
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
    throw IoError(std::string("png decode failed: ") + image.message);
  image.format = PNG_FORMAT_GRAY;
  PixelBuffer px;
  px.width = static_cast<int>(image.width);
  px.height = static_cast<int>(image.height);
  px.channels = 1;
  px.data.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, px.data.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError(std::string("png decode failed: ") + image.message);
  }
  return px;
}

/// Decodes an RGB PNG (used by tests and the service to inspect overlays).
inline PixelBuffer decode_png_rgb(std::span<const std::uint8_t> bytes) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
    throw IoError(std::string("png decode failed: ") + image.message);
  image.format = PNG_FORMAT_RGB;
  PixelBuffer px;
  px.width = static_cast<int>(image.width);
  px.height = static_cast<int>(image.height);
  px.channels = 3;
  px.data.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, px.data.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError(std::string("png decode failed: ") + image.message);
  }
  return px;
}

} // namespace segqc
