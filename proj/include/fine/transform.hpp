#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "fine/image.hpp"
#include "fine/rng.hpp"

namespace fine {

enum class Family : std::uint8_t {
  translation = 0,
  rotation = 1,
  reflection = 2,
  shear = 3,
  scale = 4,
  fisheye = 5,
  hwave = 6,
  blackwhite = 7,
  swap = 8,
};

inline constexpr std::size_t kFamilyCount = 9;

std::string_view family_name(Family f);
Family parse_family(std::string_view name);
std::vector<Family> all_families();
// The five affine families, in enum order.
std::vector<Family> affine_families();

enum class Axis : std::uint8_t { horizontal = 0, vertical = 1 };

struct Translation {
  int rows = 0;  // positive moves content down
  int cols = 0;  // positive moves content right
  bool operator==(const Translation&) const = default;
};
struct Rotation {
  double angle_deg = 0.0;  // counter-clockwise as displayed
  bool operator==(const Rotation&) const = default;
};
// horizontal mirrors left-right, vertical mirrors top-bottom.
struct Reflection {
  Axis axis = Axis::horizontal;
  bool operator==(const Reflection&) const = default;
};
// x' = x + tan(alpha) y, then y' = y + tan(beta) x'; about the image center.
struct Shear {
  double alpha_deg = 0.0;
  double beta_deg = 0.0;
  bool operator==(const Shear&) const = default;
};
struct Scale {
  double factor = 1.0;
  bool operator==(const Scale&) const = default;
};
// Sample at T(p) = p + (p - c) d |p - c|; x is the column, y the row.
struct Fisheye {
  double cx = 0.0;
  double cy = 0.0;
  double d = 0.0;
  bool operator==(const Fisheye&) const = default;
};
// Sample at row T(y) = y + a cos(f y), column unchanged.
struct HWave {
  double amplitude = 0.0;
  double frequency = 0.0;
  bool operator==(const HWave&) const = default;
};
// horizontal splits by a horizontal line: rows >= split are inverted.
// vertical splits by a vertical line: columns >= split are inverted.
struct BlackWhite {
  Axis axis = Axis::horizontal;
  int split = 0;
  bool operator==(const BlackWhite&) const = default;
};
// Quadrants 0 TL, 1 TR, 2 BL, 3 BR; output quadrant q shows source quadrant perm[q].
struct Swap {
  std::array<int, 4> perm{0, 1, 2, 3};
  bool operator==(const Swap&) const = default;
};

using TransformParams =
    std::variant<Translation, Rotation, Reflection, Shear, Scale, Fisheye, HWave, BlackWhite, Swap>;

struct TransformSpec {
  TransformParams params;

  Family family() const { return static_cast<Family>(params.index()); }
  bool operator==(const TransformSpec&) const = default;

  // Six float slots, zero padded, as serialized in dataset records.
  std::array<float, 6> packed() const;
  static TransformSpec unpack(Family family, const std::array<float, 6>& slots);
  std::string describe() const;
};

class TransformError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Throws TransformError when the parameters are unusable for an image of the
// given side (e.g. swap permutation not a permutation, odd side for swap).
void validate_spec(const TransformSpec& spec, std::size_t side);

Image apply_transform(const Image& img, const TransformSpec& spec);

enum class SampleMode { grid, constrained };
enum class OodSide { train, test };

struct SampleOptions {
  SampleMode mode = SampleMode::grid;
  std::optional<OodSide> side;  // required in constrained mode
  std::size_t image_side = 28;  // sets ranges for fisheye, blackwhite
};

// Draws uniformly from the admissible parameter set of the family.
TransformSpec sample_spec(Family family, const SampleOptions& opts, Rng& rng);

// True when the spec lies in the admissible set for (mode, side).
bool spec_admissible(const TransformSpec& spec, const SampleOptions& opts);

// Exact lattice inverse for reflection, blackwhite, swap, translation, rotation.
TransformSpec invert_syntactic(const TransformSpec& spec);

// Parameter grids of the affine families.
const std::vector<int>& translation_grid();
const std::vector<double>& rotation_grid();
const std::vector<double>& shear_grid();
const std::vector<double>& scale_grid();

}  // namespace fine
