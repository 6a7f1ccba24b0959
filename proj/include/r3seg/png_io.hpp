#pragma once

#include <png.h>

#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "r3seg/errors.hpp"
#include "r3seg/grid.hpp"

// Lossless 8-bit RGB raster I/O. PNG writing here is deterministic for a
// given image (fixed filter/compression settings, no ancillary chunks), which
// dataset manifests rely on for checksums.

namespace r3seg {

namespace detail {
struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;
}  // namespace detail

inline void write_png(const std::string& path, const Image& img) {
  if (img.h < 1 || img.w < 1) throw InputError("write_png: empty image");
  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError("write_png: cannot open " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("write_png: libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("write_png: libpng info init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("write_png: encode failed for " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, png_uint_32(img.w), png_uint_32(img.h), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_compression_level(png, 6);
  png_set_filter(png, PNG_FILTER_TYPE_BASE, PNG_FILTER_NONE);
  png_write_info(png, info);
  std::vector<png_bytep> rows(img.h);
  for (int y = 0; y < img.h; ++y)
    rows[y] = const_cast<png_bytep>(img.d.data() + size_t(y) * img.w * 3);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline Image read_png(const std::string& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("read_png: cannot open " + path);

  png_byte header[8];
  if (std::fread(header, 1, 8, fp.get()) != 8 || png_sig_cmp(header, 0, 8))
    throw CorruptionError("read_png: not a PNG file: " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("read_png: libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("read_png: libpng info init failed");
  }
  Image img;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw CorruptionError("read_png: decode failed for " + path);
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  // Normalize everything to 8-bit RGB.
  png_set_expand(png);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  const png_byte color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  img.h = int(png_get_image_height(png, info));
  img.w = int(png_get_image_width(png, info));
  img.d.resize(size_t(img.h) * img.w * 3);
  if (png_get_rowbytes(png, info) != size_t(img.w) * 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw CorruptionError("read_png: unexpected row size in " + path);
  }
  std::vector<png_bytep> rows(img.h);
  for (int y = 0; y < img.h; ++y) rows[y] = img.d.data() + size_t(y) * img.w * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

}  // namespace r3seg
