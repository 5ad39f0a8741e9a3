#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "featguide/backend.hpp"

namespace featguide {

/// Single-channel 8-bit raster.
struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

std::string encode_png(const Image& image);
std::string encode_png(const GrayImage& image);
/// Decodes any 8-bit PNG into RGB (alpha dropped, gray expanded).
Image decode_png_rgb(std::string_view bytes);
/// Decodes any 8-bit PNG into one channel (RGB averaged).
GrayImage decode_png_gray(std::string_view bytes);

Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& image);

std::string read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, std::string_view bytes);

}  // namespace featguide
