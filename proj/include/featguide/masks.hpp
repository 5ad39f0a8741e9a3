#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "featguide/image_io.hpp"

namespace featguide {

/// Integer displacement in cells, rows first.
struct Offset {
  int dy = 0;
  int dx = 0;
  friend bool operator==(const Offset&, const Offset&) = default;
};

/// Binary [height, width] raster.
class Mask {
 public:
  Mask() = default;
  Mask(std::size_t height, std::size_t width, bool fill = false);

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t cells() const { return bits_.size(); }

  bool at(std::size_t y, std::size_t x) const { return bits_[y * width_ + x] != 0; }
  void set(std::size_t y, std::size_t x, bool on = true) { bits_[y * width_ + x] = on ? 1 : 0; }
  bool contains(long y, long x) const;

  std::size_t count() const;
  bool none() const { return count() == 0; }
  bool same_grid(const Mask& other) const { return height_ == other.height_ && width_ == other.width_; }

  /// Inclusive bounding box; only meaningful when !none().
  struct Box {
    std::size_t y0, x0, y1, x1;
  };
  Box bbox() const;

  const std::vector<std::uint8_t>& bits() const { return bits_; }

  friend bool operator==(const Mask&, const Mask&) = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<std::uint8_t> bits_;
};

Mask operator|(const Mask& a, const Mask& b);
Mask operator&(const Mask& a, const Mask& b);
/// Cells of a that are not in b.
Mask operator-(const Mask& a, const Mask& b);
Mask complement(const Mask& m);
/// Shifts every cell by `offset`. Throws ContractError if any cell would leave the grid.
Mask translate(const Mask& m, Offset offset);
bool fits_after_translate(const Mask& m, Offset offset);
/// Chebyshev dilation by `radius` cells.
Mask dilate(const Mask& m, std::size_t radius);

/// Threshold-0.5 block average: output cell is on when at least half of its
/// factor x factor block is on.
Mask downsample(const Mask& m, std::size_t factor);

/// Single-channel PNG, 0 = off, 255 = on. Decoding treats values >= 128 as on.
std::string mask_to_png(const Mask& m);
Mask mask_from_png(std::string_view png);
std::string mask_to_base64_png(const Mask& m);
Mask mask_from_base64_png(const std::string& text);

}  // namespace featguide
