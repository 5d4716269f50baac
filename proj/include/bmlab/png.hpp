#pragma once

// 8-bit RGB PNG writer over libpng with fixed encoder settings, so equal
// pixels always give equal bytes. Requires linking libpng.

#include <png.h>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace bmlab {

struct RgbImage {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> pixels;  // row-major, RGB interleaved

  RgbImage() = default;
  RgbImage(std::size_t h, std::size_t w) : height(h), width(w), pixels(h * w * 3, 0) {}

  std::uint8_t* at(std::size_t i, std::size_t j) { return &pixels[(i * width + j) * 3]; }
  const std::uint8_t* at(std::size_t i, std::size_t j) const { return &pixels[(i * width + j) * 3]; }
};

inline void write_png(const RgbImage& img, const std::filesystem::path& path) {
  if (img.height == 0 || img.width == 0 || img.pixels.size() != img.height * img.width * 3) {
    throw std::invalid_argument("write_png: malformed image");
  }
  FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw std::runtime_error("cannot open for writing: " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw std::runtime_error("write_png: libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw std::runtime_error("failed writing: " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_compression_level(png, 6);
  png_set_filter(png, 0, PNG_FILTER_NONE);
  png_write_info(png, info);
  for (std::size_t i = 0; i < img.height; ++i) {
    png_write_row(png, const_cast<png_bytep>(img.at(i, 0)));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fclose(fp) != 0) throw std::runtime_error("failed writing: " + path.string());
}

// Reads back width/height from the IHDR chunk.
inline std::pair<std::size_t, std::size_t> png_dimensions(const std::filesystem::path& path) {
  FILE* fp = std::fopen(path.string().c_str(), "rb");
  if (!fp) throw std::runtime_error("cannot open: " + path.string());
  unsigned char hdr[24];
  const std::size_t n = std::fread(hdr, 1, sizeof hdr, fp);
  std::fclose(fp);
  if (n != sizeof hdr || png_sig_cmp(hdr, 0, 8) != 0) throw std::runtime_error("not a PNG: " + path.string());
  auto be32 = [&](int o) {
    return (std::size_t{hdr[o]} << 24) | (std::size_t{hdr[o + 1]} << 16) | (std::size_t{hdr[o + 2]} << 8) |
           std::size_t{hdr[o + 3]};
  };
  return {be32(20), be32(16)};  // height, width
}

}  // namespace bmlab
