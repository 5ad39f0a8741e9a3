#include "featguide/image_io.hpp"

#include <png.h>

#include <cstring>
#include <fstream>
#include <sstream>

namespace featguide {

namespace {

struct ReadCursor {
  std::string_view bytes;
  std::size_t pos = 0;
};

void read_callback(png_structp png, png_bytep out, png_size_t length) {
  auto* cursor = static_cast<ReadCursor*>(png_get_io_ptr(png));
  if (cursor->pos + length > cursor->bytes.size()) png_error(png, "truncated PNG");
  std::memcpy(out, cursor->bytes.data() + cursor->pos, length);
  cursor->pos += length;
}

void write_callback(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<std::string*>(png_get_io_ptr(png));
  out->append(reinterpret_cast<const char*>(data), length);
}

void flush_callback(png_structp) {}

[[noreturn]] void error_callback(png_structp, png_const_charp message) {
  throw ContractError(std::string("png: ") + message);
}

void warning_callback(png_structp, png_const_charp) {}

std::string encode(const std::uint8_t* pixels, std::size_t width, std::size_t height, int color_type,
                   std::size_t channels) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, error_callback, warning_callback);
  png_infop info = png_create_info_struct(png);
  std::string out;
  try {
    png_set_write_fn(png, &out, write_callback, flush_callback);
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, color_type,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::size_t y = 0; y < height; ++y) {
      png_write_row(png, const_cast<png_bytep>(pixels + y * width * channels));
    }
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
  return out;
}

// Decodes to 8-bit RGB or gray depending on `want_rgb`.
std::vector<std::uint8_t> decode(std::string_view bytes, bool want_rgb, std::size_t& width, std::size_t& height) {
  if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0) {
    throw ContractError("png: not a PNG stream");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, error_callback, warning_callback);
  png_infop info = png_create_info_struct(png);
  ReadCursor cursor{bytes, 0};
  std::vector<std::uint8_t> pixels;
  try {
    png_set_read_fn(png, &cursor, read_callback);
    png_read_info(png, info);
    const int color = png_get_color_type(png, info);
    if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
    const bool is_gray = (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA);
    if (want_rgb && is_gray) png_set_gray_to_rgb(png);
    if (!want_rgb && !is_gray) png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    png_read_update_info(png, info);
    width = png_get_image_width(png, info);
    height = png_get_image_height(png, info);
    const std::size_t row_bytes = png_get_rowbytes(png, info);
    pixels.resize(row_bytes * height);
    std::vector<png_bytep> rows(height);
    for (std::size_t y = 0; y < height; ++y) rows[y] = pixels.data() + y * row_bytes;
    png_read_image(png, rows.data());
  } catch (...) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return pixels;
}

}  // namespace

std::string encode_png(const Image& image) {
  if (image.rgb.size() != 3 * image.width * image.height) throw ContractError("png: RGB buffer size mismatch");
  return encode(image.rgb.data(), image.width, image.height, PNG_COLOR_TYPE_RGB, 3);
}

std::string encode_png(const GrayImage& image) {
  if (image.pixels.size() != image.width * image.height) throw ContractError("png: gray buffer size mismatch");
  return encode(image.pixels.data(), image.width, image.height, PNG_COLOR_TYPE_GRAY, 1);
}

Image decode_png_rgb(std::string_view bytes) {
  Image img;
  img.rgb = decode(bytes, true, img.width, img.height);
  return img;
}

GrayImage decode_png_gray(std::string_view bytes) {
  GrayImage img;
  img.pixels = decode(bytes, false, img.width, img.height);
  return img;
}

std::string read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContractError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_bytes(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Image read_png(const std::filesystem::path& path) { return decode_png_rgb(read_bytes(path)); }

void write_png(const std::filesystem::path& path, const Image& image) { write_bytes(path, encode_png(image)); }

}  // namespace featguide
