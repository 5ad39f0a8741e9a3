#include "featguide/masks.hpp"

#include <algorithm>

#include "featguide/encoding.hpp"

namespace featguide {

Mask::Mask(std::size_t height, std::size_t width, bool fill)
    : height_(height), width_(width), bits_(height * width, fill ? 1 : 0) {}

bool Mask::contains(long y, long x) const {
  return y >= 0 && x >= 0 && static_cast<std::size_t>(y) < height_ && static_cast<std::size_t>(x) < width_ &&
         at(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
}

std::size_t Mask::count() const { return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), 1)); }

Mask::Box Mask::bbox() const {
  Box b{height_, width_, 0, 0};
  for (std::size_t y = 0; y < height_; ++y) {
    for (std::size_t x = 0; x < width_; ++x) {
      if (!at(y, x)) continue;
      b.y0 = std::min(b.y0, y);
      b.x0 = std::min(b.x0, x);
      b.y1 = std::max(b.y1, y);
      b.x1 = std::max(b.x1, x);
    }
  }
  return b;
}

namespace {

void require_grid(const Mask& a, const Mask& b) {
  if (!a.same_grid(b)) throw ContractError("mask grids differ");
}

template <typename Op>
Mask combine(const Mask& a, const Mask& b, Op op) {
  require_grid(a, b);
  Mask out(a.height(), a.width());
  for (std::size_t y = 0; y < a.height(); ++y) {
    for (std::size_t x = 0; x < a.width(); ++x) out.set(y, x, op(a.at(y, x), b.at(y, x)));
  }
  return out;
}

}  // namespace

Mask operator|(const Mask& a, const Mask& b) { return combine(a, b, [](bool p, bool q) { return p || q; }); }
Mask operator&(const Mask& a, const Mask& b) { return combine(a, b, [](bool p, bool q) { return p && q; }); }
Mask operator-(const Mask& a, const Mask& b) { return combine(a, b, [](bool p, bool q) { return p && !q; }); }

Mask complement(const Mask& m) {
  Mask out(m.height(), m.width());
  for (std::size_t y = 0; y < m.height(); ++y) {
    for (std::size_t x = 0; x < m.width(); ++x) out.set(y, x, !m.at(y, x));
  }
  return out;
}

bool fits_after_translate(const Mask& m, Offset offset) {
  if (m.none()) return true;
  const Mask::Box b = m.bbox();
  const long h = static_cast<long>(m.height());
  const long w = static_cast<long>(m.width());
  return static_cast<long>(b.y0) + offset.dy >= 0 && static_cast<long>(b.y1) + offset.dy < h &&
         static_cast<long>(b.x0) + offset.dx >= 0 && static_cast<long>(b.x1) + offset.dx < w;
}

Mask translate(const Mask& m, Offset offset) {
  if (!fits_after_translate(m, offset)) {
    throw ContractError("translated mask leaves the grid");
  }
  Mask out(m.height(), m.width());
  for (std::size_t y = 0; y < m.height(); ++y) {
    for (std::size_t x = 0; x < m.width(); ++x) {
      if (m.at(y, x)) out.set(y + offset.dy, x + offset.dx);
    }
  }
  return out;
}

Mask dilate(const Mask& m, std::size_t radius) {
  Mask out(m.height(), m.width());
  const long r = static_cast<long>(radius);
  for (std::size_t y = 0; y < m.height(); ++y) {
    for (std::size_t x = 0; x < m.width(); ++x) {
      if (!m.at(y, x)) continue;
      for (long dy = -r; dy <= r; ++dy) {
        for (long dx = -r; dx <= r; ++dx) {
          const long yy = static_cast<long>(y) + dy;
          const long xx = static_cast<long>(x) + dx;
          if (yy >= 0 && xx >= 0 && yy < static_cast<long>(m.height()) && xx < static_cast<long>(m.width())) {
            out.set(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
          }
        }
      }
    }
  }
  return out;
}

Mask downsample(const Mask& m, std::size_t factor) {
  if (factor == 0 || m.height() % factor != 0 || m.width() % factor != 0) {
    throw ContractError("mask " + std::to_string(m.height()) + "x" + std::to_string(m.width()) +
                        " not divisible by " + std::to_string(factor));
  }
  if (factor == 1) return m;
  Mask out(m.height() / factor, m.width() / factor);
  const std::size_t block = factor * factor;
  for (std::size_t y = 0; y < out.height(); ++y) {
    for (std::size_t x = 0; x < out.width(); ++x) {
      std::size_t on = 0;
      for (std::size_t i = 0; i < factor; ++i) {
        for (std::size_t j = 0; j < factor; ++j) on += m.at(y * factor + i, x * factor + j) ? 1 : 0;
      }
      out.set(y, x, 2 * on >= block);
    }
  }
  return out;
}

std::string mask_to_png(const Mask& m) {
  GrayImage img{m.width(), m.height(), std::vector<std::uint8_t>(m.cells())};
  for (std::size_t i = 0; i < m.cells(); ++i) img.pixels[i] = m.bits()[i] ? 255 : 0;
  return encode_png(img);
}

Mask mask_from_png(std::string_view png) {
  const GrayImage img = decode_png_gray(png);
  Mask m(img.height, img.width);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) m.set(y, x, img.pixels[y * img.width + x] >= 128);
  }
  return m;
}

std::string mask_to_base64_png(const Mask& m) {
  const std::string png = mask_to_png(m);
  return base64_encode({reinterpret_cast<const std::uint8_t*>(png.data()), png.size()});
}

Mask mask_from_base64_png(const std::string& text) {
  const std::vector<std::uint8_t> bytes = base64_decode(text);
  return mask_from_png({reinterpret_cast<const char*>(bytes.data()), bytes.size()});
}

}  // namespace featguide
