#include "fblnet/image_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

#include "fblnet/errors.hpp"

namespace fblnet {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

Tensor<float> read_png_rgb(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  FBL_CHECK(fp != nullptr, Err::Io, "cannot open " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  FBL_CHECK(png != nullptr, Err::Io, "png reader allocation failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw FblError(Err::Io, "png info allocation failed");
  }
  std::vector<png_bytep> rows;
  std::vector<png_byte> pixels;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FblError(Err::Io, "png decode failed for " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  png_uint_32 w = png_get_image_width(png, info);
  png_uint_32 h = png_get_image_height(png, info);
  png_byte color = png_get_color_type(png, info);
  png_byte depth = png_get_bit_depth(png, info);

  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_set_strip_alpha(png);  // also covers tRNS-expanded alpha
  png_read_update_info(png, info);

  std::size_t rowbytes = png_get_rowbytes(png, info);
  FBL_CHECK(rowbytes == static_cast<std::size_t>(w) * 3, Err::Io,
            "unexpected png layout in " + path);
  pixels.resize(static_cast<std::size_t>(h) * rowbytes);
  rows.resize(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = pixels.data() + static_cast<std::size_t>(y) * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Tensor<float> out(Shape{3, static_cast<int>(h), static_cast<int>(w)});
  const float inv = 1.0f / 255.0f;
  std::int64_t plane = static_cast<std::int64_t>(h) * w;
  for (std::int64_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c) out[c * plane + i] = static_cast<float>(pixels[static_cast<std::size_t>(i) * 3 + static_cast<std::size_t>(c)]) * inv;
  return out;
}

Tensor<float> read_png_gray(const std::string& path) {
  Tensor<float> rgb = read_png_rgb(path);
  int h = rgb.dim(1), w = rgb.dim(2);
  std::int64_t plane = static_cast<std::int64_t>(h) * w;
  Tensor<float> out(Shape{h, w});
  for (std::int64_t i = 0; i < plane; ++i)
    out[i] = (rgb[i] + rgb[plane + i] + rgb[2 * plane + i]) / 3.0f;
  return out;
}

void write_png_gray(const std::string& path, const Tensor<float>& img) {
  FBL_CHECK(img.rank() == 2, Err::Shape, "write_png_gray expects an H x W grid");
  int h = img.dim(0), w = img.dim(1);
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  FBL_CHECK(fp != nullptr, Err::Io, "cannot write " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  FBL_CHECK(png != nullptr, Err::Io, "png writer allocation failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw FblError(Err::Io, "png info allocation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw FblError(Err::Io, "png encode failed for " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<png_byte> row(static_cast<std::size_t>(w));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      float v = img.at(y, x);
      v = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
      row[static_cast<std::size_t>(x)] = static_cast<png_byte>(std::lround(v * 255.0f));
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace fblnet
