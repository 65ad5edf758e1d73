#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace autosam {

// Row-major 2-D binary mask; nonzero bytes are foreground.
struct BinaryMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> bits;

  BinaryMask() = default;
  BinaryMask(std::size_t h, std::size_t w) : height(h), width(w), bits(h * w, 0) {}

  bool at(std::size_t y, std::size_t x) const { return bits[y * width + x] != 0; }
  void set(std::size_t y, std::size_t x, bool on = true) { bits[y * width + x] = on ? 1 : 0; }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto b : bits) n += b != 0;
    return n;
  }
  bool empty() const { return count() == 0; }

  // Pixels of `labels` equal to `cls`.
  static BinaryMask from_labels(const std::uint8_t* labels, std::size_t h, std::size_t w, std::uint8_t cls) {
    BinaryMask m(h, w);
    for (std::size_t i = 0; i < h * w; ++i) m.bits[i] = labels[i] == cls ? 1 : 0;
    return m;
  }
};

inline void require_same_extents(const BinaryMask& a, const BinaryMask& b) {
  if (a.height != b.height || a.width != b.width) {
    throw std::invalid_argument("mask extents differ: " + std::to_string(a.height) + "x" + std::to_string(a.width) +
                                " vs " + std::to_string(b.height) + "x" + std::to_string(b.width));
  }
}

}  // namespace autosam
