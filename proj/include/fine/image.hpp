#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace fine {

class ImageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr std::size_t kMinImageSide = 8;

// Square grayscale image, row-major, pixels in [0, 1]. Stored as float so the
// on-disk float32 form round-trips exactly.
struct Image {
  std::size_t side = 0;
  std::vector<float> pixels;

  Image() = default;
  explicit Image(std::size_t side_, float fill = 0.0f) : side(side_), pixels(side_ * side_, fill) {}

  float at(std::size_t r, std::size_t c) const { return pixels[r * side + c]; }
  float& at(std::size_t r, std::size_t c) { return pixels[r * side + c]; }

  bool operator==(const Image&) const = default;
};

// Pixels live on the lattice k / 2^24. Near 1 that is the float32 spacing, so
// 1 - x is exact for every lattice value and inversion is a true involution.
inline float to_pixel(double v) {
  return static_cast<float>(std::ldexp(std::nearbyint(std::ldexp(std::clamp(v, 0.0, 1.0), 24)), -24));
}

// Throws ImageError when the side is too small, the buffer is the wrong size,
// or a pixel leaves [0, 1].
void validate_image(const Image& img);

}  // namespace fine
