#include "functakit/image.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <vector>

namespace functakit {

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

}  // namespace

ImageData load_png(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("cannot open image: " + path);

  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8))
    throw FormatError("not a PNG file: " + path);

  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("libpng allocation failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("libpng allocation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("corrupt PNG: " + path);
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  // fold every variant down to 8-bit gray or RGB
  const auto color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8)
    png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color & PNG_COLOR_MASK_ALPHA || png_get_valid(png, info, PNG_INFO_tRNS))
    png_set_strip_alpha(png);
  png_read_update_info(png, info);

  ImageData img;
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  img.channels = static_cast<int>(png_get_channels(png, info));
  if (img.channels != 1 && img.channels != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("unsupported channel count in " + path);
  }

  const auto stride = static_cast<std::size_t>(img.width) *
                      static_cast<std::size_t>(img.channels);
  std::vector<png_byte> raw(static_cast<std::size_t>(img.height) * stride);
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
  for (int r = 0; r < img.height; ++r)
    rows[static_cast<std::size_t>(r)] = raw.data() + static_cast<std::size_t>(r) * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  img.pixels.resize(img.channels,
                    static_cast<Eigen::Index>(img.width) * img.height);
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c)
      for (int ch = 0; ch < img.channels; ++ch)
        img.pixels(ch, static_cast<Eigen::Index>(r) * img.width + c) =
            static_cast<float>(raw[static_cast<std::size_t>(r) * stride +
                                   static_cast<std::size_t>(c * img.channels + ch)]) /
            255.0f;
  return img;
}

void save_png(const ImageData& img, const std::string& path) {
  if (img.channels != 1 && img.channels != 3)
    throw ValueError("save_png: channels must be 1 or 3");
  check_shape(img.width > 0 && img.height > 0 &&
                  img.pixels.rows() == img.channels &&
                  img.pixels.cols() ==
                      static_cast<Eigen::Index>(img.width) * img.height,
              "save_png: pixel buffer does not match the declared size");

  const std::string tmp = path + ".tmp";
  {
    FilePtr fp(std::fopen(tmp.c_str(), "wb"));
    if (!fp) throw IoError("cannot create image: " + path);

    png_structp png =
        png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("libpng allocation failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
      png_destroy_write_struct(&png, nullptr);
      throw IoError("libpng allocation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
      png_destroy_write_struct(&png, &info);
      throw IoError("PNG write failed: " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
                 static_cast<png_uint_32>(img.height), 8,
                 img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    const auto stride = static_cast<std::size_t>(img.width) *
                        static_cast<std::size_t>(img.channels);
    std::vector<png_byte> row(stride);
    for (int r = 0; r < img.height; ++r) {
      for (int c = 0; c < img.width; ++c)
        for (int ch = 0; ch < img.channels; ++ch) {
          const float v = img.pixels(
              ch, static_cast<Eigen::Index>(r) * img.width + c);
          const float clamped = std::min(1.0f, std::max(0.0f, v));
          row[static_cast<std::size_t>(c * img.channels + ch)] =
              static_cast<png_byte>(std::lround(clamped * 255.0f));
        }
      png_write_row(png, row.data());
    }
    png_write_end(png, info);
    png_destroy_write_struct(&png, &info);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot finalize image: " + path);
  }
}

ImageData as_image(const MatXf& decoded, int side) {
  if (decoded.rows() != 1 && decoded.rows() != 3)
    throw ValueError("as_image: channels must be 1 or 3");
  check_shape(decoded.cols() == static_cast<Eigen::Index>(side) * side,
              "as_image: pixel count must be side^2");
  ImageData img;
  img.width = side;
  img.height = side;
  img.channels = static_cast<int>(decoded.rows());
  img.pixels = decoded;
  return img;
}

}  // namespace functakit
