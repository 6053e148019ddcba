#include "fine/transform.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace fine {

void validate_image(const Image& img) {
  if (img.side < kMinImageSide) {
    throw ImageError("image side " + std::to_string(img.side) + " is below the minimum of " +
                     std::to_string(kMinImageSide));
  }
  if (img.pixels.size() != img.side * img.side) {
    throw ImageError("image buffer holds " + std::to_string(img.pixels.size()) + " pixels, expected " +
                     std::to_string(img.side * img.side));
  }
  for (float p : img.pixels) {
    if (!(p >= 0.0f && p <= 1.0f)) throw ImageError("pixel value outside [0,1]");
  }
}

namespace {

constexpr std::string_view kFamilyNames[kFamilyCount] = {
    "translation", "rotation", "reflection", "shear", "scale",
    "fisheye",     "hwave",    "blackwhite", "swap"};

double deg2rad(double deg) { return deg * std::numbers::pi / 180.0; }

double snap(double v) {
  const double r = std::round(v);
  return std::abs(v - r) < 1e-9 ? r : v;
}

// Bilinear read with zero fill outside the grid. (r, c) are row/column.
double bilinear(const Image& img, double r, double c) {
  r = snap(r);
  c = snap(c);
  const double fr = std::floor(r), fc = std::floor(c);
  const long r0 = static_cast<long>(fr), c0 = static_cast<long>(fc);
  const double wr = r - fr, wc = c - fc;
  const long n = static_cast<long>(img.side);
  auto px = [&](long rr, long cc) -> double {
    if (rr < 0 || cc < 0 || rr >= n || cc >= n) return 0.0;
    return img.pixels[static_cast<std::size_t>(rr * n + cc)];
  };
  double v = (1.0 - wr) * (1.0 - wc) * px(r0, c0);
  if (wc > 0.0) v += (1.0 - wr) * wc * px(r0, c0 + 1);
  if (wr > 0.0) v += wr * (1.0 - wc) * px(r0 + 1, c0);
  if (wr > 0.0 && wc > 0.0) v += wr * wc * px(r0 + 1, c0 + 1);
  return v;
}

// Inverse mapping: for each output pixel, source(row, col) gives the sample point.
template <class Source>
Image resample(const Image& img, Source source) {
  Image out(img.side);
  for (std::size_t r = 0; r < img.side; ++r) {
    for (std::size_t c = 0; c < img.side; ++c) {
      auto [sr, sc] = source(static_cast<double>(r), static_cast<double>(c));
      out.at(r, c) = to_pixel(bilinear(img, sr, sc));
    }
  }
  return out;
}

Image translate(const Image& img, int dr, int dc) {
  Image out(img.side);
  const long n = static_cast<long>(img.side);
  for (long r = 0; r < n; ++r)
    for (long c = 0; c < n; ++c) {
      const long sr = r - dr, sc = c - dc;
      if (sr >= 0 && sc >= 0 && sr < n && sc < n) {
        out.pixels[static_cast<std::size_t>(r * n + c)] = img.pixels[static_cast<std::size_t>(sr * n + sc)];
      }
    }
  return out;
}

// Exact quarter turns counter-clockwise.
Image quarter_turns(const Image& img, int turns) {
  turns = ((turns % 4) + 4) % 4;
  const std::size_t n = img.side;
  Image out(n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) {
      std::size_t sr = r, sc = c;
      switch (turns) {
        case 1: sr = c; sc = n - 1 - r; break;
        case 2: sr = n - 1 - r; sc = n - 1 - c; break;
        case 3: sr = n - 1 - c; sc = r; break;
        default: break;
      }
      out.at(r, c) = img.at(sr, sc);
    }
  return out;
}

Image rotate(const Image& img, double angle_deg) {
  const double q = angle_deg / 90.0;
  if (q == std::round(q)) return quarter_turns(img, static_cast<int>(std::round(q)));
  const double ctr = (static_cast<double>(img.side) - 1.0) / 2.0;
  const double a = deg2rad(angle_deg);
  const double ca = std::cos(a), sa = std::sin(a);
  return resample(img, [=](double r, double c) {
    const double dx = c - ctr, dy = r - ctr;
    const double sx = ca * dx - sa * dy;
    const double sy = sa * dx + ca * dy;
    return std::pair{sy + ctr, sx + ctr};
  });
}

Image reflect(const Image& img, Axis axis) {
  const std::size_t n = img.side;
  Image out(n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) {
      out.at(r, c) = axis == Axis::horizontal ? img.at(r, n - 1 - c) : img.at(n - 1 - r, c);
    }
  return out;
}

Image shear(const Image& img, double alpha_deg, double beta_deg) {
  const double ctr = (static_cast<double>(img.side) - 1.0) / 2.0;
  const double ta = std::tan(deg2rad(alpha_deg)), tb = std::tan(deg2rad(beta_deg));
  return resample(img, [=](double r, double c) {
    const double xp = c - ctr, yp = r - ctr;
    const double y = yp - tb * xp;
    const double x = xp - ta * y;
    return std::pair{y + ctr, x + ctr};
  });
}

Image scale(const Image& img, double s) {
  if (s == 1.0) return img;
  const double ctr = (static_cast<double>(img.side) - 1.0) / 2.0;
  return resample(img, [=](double r, double c) {
    return std::pair{ctr + (r - ctr) / s, ctr + (c - ctr) / s};
  });
}

Image fisheye(const Image& img, const Fisheye& f) {
  if (f.d == 0.0) return img;
  return resample(img, [=](double r, double c) {
    const double dx = c - f.cx, dy = r - f.cy;
    const double rad = std::sqrt(dx * dx + dy * dy);
    return std::pair{r + dy * f.d * rad, c + dx * f.d * rad};
  });
}

Image hwave(const Image& img, const HWave& w) {
  if (w.amplitude == 0.0) return img;
  return resample(img, [=](double r, double c) {
    return std::pair{r + w.amplitude * std::cos(w.frequency * r), c};
  });
}

Image blackwhite(const Image& img, const BlackWhite& bw) {
  Image out = img;
  const std::size_t n = img.side;
  const std::size_t split = static_cast<std::size_t>(bw.split);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) {
      const std::size_t k = bw.axis == Axis::horizontal ? r : c;
      if (k >= split) out.at(r, c) = 1.0f - img.at(r, c);
    }
  return out;
}

Image swap_quadrants(const Image& img, const Swap& s) {
  const std::size_t n = img.side, h = n / 2;
  Image out(n);
  for (std::size_t q = 0; q < 4; ++q) {
    const std::size_t src = static_cast<std::size_t>(s.perm[q]);
    const std::size_t dr = (q / 2) * h, dc = (q % 2) * h;
    const std::size_t sr = (src / 2) * h, sc = (src % 2) * h;
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < h; ++c) out.at(dr + r, dc + c) = img.at(sr + r, sc + c);
  }
  return out;
}

bool is_permutation4(const std::array<int, 4>& p) {
  std::array<bool, 4> seen{};
  for (int v : p) {
    if (v < 0 || v > 3 || seen[static_cast<std::size_t>(v)]) return false;
    seen[static_cast<std::size_t>(v)] = true;
  }
  return true;
}

template <class T>
bool in_grid(const std::vector<T>& grid, T v) {
  return std::find(grid.begin(), grid.end(), v) != grid.end();
}

template <class T>
const T& pick(const std::vector<T>& v, Rng& rng) {
  if (v.empty()) throw TransformError("sample_spec: empty admissible set");
  return v[static_cast<std::size_t>(rng.below(v.size()))];
}

// Rounded through float so the serialized form reproduces the value exactly.
double as_float(double v) { return static_cast<double>(static_cast<float>(v)); }

double fisheye_d_max(std::size_t side) { return 1.0 / (2.0 * static_cast<double>(side)); }

}  // namespace

std::string_view family_name(Family f) {
  const auto i = static_cast<std::size_t>(f);
  if (i >= kFamilyCount) throw TransformError("unknown family id " + std::to_string(i));
  return kFamilyNames[i];
}

Family parse_family(std::string_view name) {
  for (std::size_t i = 0; i < kFamilyCount; ++i) {
    if (kFamilyNames[i] == name) return static_cast<Family>(i);
  }
  throw TransformError("unknown transformation family '" + std::string(name) + "'");
}

std::vector<Family> all_families() {
  std::vector<Family> out;
  for (std::size_t i = 0; i < kFamilyCount; ++i) out.push_back(static_cast<Family>(i));
  return out;
}

std::vector<Family> affine_families() {
  return {Family::translation, Family::rotation, Family::reflection, Family::shear, Family::scale};
}

const std::vector<int>& translation_grid() {
  static const std::vector<int> g{-9, -6, -3, 0, 3, 6, 9};
  return g;
}

const std::vector<double>& rotation_grid() {
  static const std::vector<double> g = [] {
    std::vector<double> v;
    for (int k = 0; k < 24; ++k) v.push_back(15.0 * k);
    return v;
  }();
  return g;
}

const std::vector<double>& shear_grid() {
  static const std::vector<double> g{-60, -45, -30, -15, 0, 15, 30, 45, 60};
  return g;
}

const std::vector<double>& scale_grid() {
  static const std::vector<double> g{0.5, 0.75, 1.0, 1.25};
  return g;
}

std::array<float, 6> TransformSpec::packed() const {
  std::array<float, 6> s{};
  std::visit(
      [&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, Translation>) {
          s[0] = static_cast<float>(p.rows);
          s[1] = static_cast<float>(p.cols);
        } else if constexpr (std::is_same_v<T, Rotation>) {
          s[0] = static_cast<float>(p.angle_deg);
        } else if constexpr (std::is_same_v<T, Reflection>) {
          s[0] = static_cast<float>(p.axis);
        } else if constexpr (std::is_same_v<T, Shear>) {
          s[0] = static_cast<float>(p.alpha_deg);
          s[1] = static_cast<float>(p.beta_deg);
        } else if constexpr (std::is_same_v<T, Scale>) {
          s[0] = static_cast<float>(p.factor);
        } else if constexpr (std::is_same_v<T, Fisheye>) {
          s[0] = static_cast<float>(p.cx);
          s[1] = static_cast<float>(p.cy);
          s[2] = static_cast<float>(p.d);
        } else if constexpr (std::is_same_v<T, HWave>) {
          s[0] = static_cast<float>(p.amplitude);
          s[1] = static_cast<float>(p.frequency);
        } else if constexpr (std::is_same_v<T, BlackWhite>) {
          s[0] = static_cast<float>(p.axis);
          s[1] = static_cast<float>(p.split);
        } else if constexpr (std::is_same_v<T, Swap>) {
          for (std::size_t i = 0; i < 4; ++i) s[i] = static_cast<float>(p.perm[i]);
        }
      },
      params);
  return s;
}

TransformSpec TransformSpec::unpack(Family family, const std::array<float, 6>& s) {
  auto axis = [](float v) {
    if (v != 0.0f && v != 1.0f) throw TransformError("axis slot must be 0 or 1");
    return static_cast<Axis>(static_cast<int>(v));
  };
  switch (family) {
    case Family::translation:
      return {Translation{static_cast<int>(s[0]), static_cast<int>(s[1])}};
    case Family::rotation: return {Rotation{s[0]}};
    case Family::reflection: return {Reflection{axis(s[0])}};
    case Family::shear: return {Shear{s[0], s[1]}};
    case Family::scale: return {Scale{s[0]}};
    case Family::fisheye: return {Fisheye{s[0], s[1], s[2]}};
    case Family::hwave: return {HWave{s[0], s[1]}};
    case Family::blackwhite: return {BlackWhite{axis(s[0]), static_cast<int>(s[1])}};
    case Family::swap:
      return {Swap{{static_cast<int>(s[0]), static_cast<int>(s[1]), static_cast<int>(s[2]),
                    static_cast<int>(s[3])}}};
  }
  throw TransformError("unknown family id " + std::to_string(static_cast<int>(family)));
}

std::string TransformSpec::describe() const {
  std::ostringstream os;
  os << family_name(family()) << '(';
  const auto s = packed();
  const int used[kFamilyCount] = {2, 1, 1, 2, 1, 3, 2, 2, 4};
  for (int i = 0; i < used[static_cast<int>(family())]; ++i) {
    if (i) os << ',';
    os << s[static_cast<std::size_t>(i)];
  }
  os << ')';
  return os.str();
}

void validate_spec(const TransformSpec& spec, std::size_t side) {
  std::visit(
      [&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, Rotation>) {
          if (!std::isfinite(p.angle_deg)) throw TransformError("rotation: non-finite angle");
        } else if constexpr (std::is_same_v<T, Shear>) {
          if (!(std::abs(p.alpha_deg) < 90.0 && std::abs(p.beta_deg) < 90.0)) {
            throw TransformError("shear: angles must lie strictly inside (-90, 90) degrees");
          }
        } else if constexpr (std::is_same_v<T, Scale>) {
          if (!(p.factor > 0.0) || !std::isfinite(p.factor)) {
            throw TransformError("scale: factor must be positive");
          }
        } else if constexpr (std::is_same_v<T, Fisheye>) {
          if (!(p.d >= 0.0) || !std::isfinite(p.cx) || !std::isfinite(p.cy) || !std::isfinite(p.d)) {
            throw TransformError("fisheye: distortion must be finite and non-negative");
          }
        } else if constexpr (std::is_same_v<T, HWave>) {
          if (!std::isfinite(p.amplitude) || !std::isfinite(p.frequency)) {
            throw TransformError("hwave: non-finite parameters");
          }
        } else if constexpr (std::is_same_v<T, BlackWhite>) {
          if (p.split < 0 || static_cast<std::size_t>(p.split) > side) {
            throw TransformError("blackwhite: split index outside [0, side]");
          }
        } else if constexpr (std::is_same_v<T, Swap>) {
          if (!is_permutation4(p.perm)) throw TransformError("swap: not a permutation of {0,1,2,3}");
          if (side % 2 != 0) throw TransformError("swap: image side must be even");
        }
      },
      spec.params);
}

Image apply_transform(const Image& img, const TransformSpec& spec) {
  validate_image(img);
  validate_spec(spec, img.side);
  Image out = std::visit(
      [&](const auto& p) -> Image {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, Translation>) return translate(img, p.rows, p.cols);
        else if constexpr (std::is_same_v<T, Rotation>) return rotate(img, p.angle_deg);
        else if constexpr (std::is_same_v<T, Reflection>) return reflect(img, p.axis);
        else if constexpr (std::is_same_v<T, Shear>) return shear(img, p.alpha_deg, p.beta_deg);
        else if constexpr (std::is_same_v<T, Scale>) return scale(img, p.factor);
        else if constexpr (std::is_same_v<T, Fisheye>) return fisheye(img, p);
        else if constexpr (std::is_same_v<T, HWave>) return hwave(img, p);
        else if constexpr (std::is_same_v<T, BlackWhite>) return blackwhite(img, p);
        else return swap_quadrants(img, p);
      },
      spec.params);
  for (float& p : out.pixels) {
    if (std::isnan(p)) throw ImageError("apply_transform: NaN pixel");
    p = std::clamp(p, 0.0f, 1.0f);
  }
  return out;
}

namespace {

std::vector<std::pair<int, int>> translation_set(const SampleOptions& o) {
  std::vector<std::pair<int, int>> out;
  for (int i : translation_grid())
    for (int j : translation_grid()) {
      const bool inner = std::abs(i) <= 3 && std::abs(j) <= 3;
      if (o.mode == SampleMode::constrained && (*o.side == OodSide::train) != inner) continue;
      out.emplace_back(i, j);
    }
  return out;
}

std::vector<double> rotation_set(const SampleOptions& o) {
  std::vector<double> out;
  for (double a : rotation_grid()) {
    if (o.mode == SampleMode::constrained && (*o.side == OodSide::train) != (a <= 180.0)) continue;
    out.push_back(a);
  }
  return out;
}

std::vector<std::pair<double, double>> shear_set(const SampleOptions& o) {
  std::vector<std::pair<double, double>> out;
  for (double a : shear_grid())
    for (double b : shear_grid()) {
      const bool inner = std::abs(a) <= 30.0 && std::abs(b) <= 30.0;
      if (o.mode == SampleMode::constrained && (*o.side == OodSide::train) != inner) continue;
      out.emplace_back(a, b);
    }
  return out;
}

void check_options(Family family, const SampleOptions& o) {
  if (o.mode == SampleMode::constrained) {
    if (!o.side) throw TransformError("sample_spec: constrained mode needs a train/test side");
    if (family != Family::translation && family != Family::rotation && family != Family::shear) {
      throw TransformError("sample_spec: no out-of-distribution rule for family '" +
                           std::string(family_name(family)) + "'");
    }
  }
}

}  // namespace

TransformSpec sample_spec(Family family, const SampleOptions& opts, Rng& rng) {
  check_options(family, opts);
  const double side = static_cast<double>(opts.image_side);
  switch (family) {
    case Family::translation: {
      auto [i, j] = pick(translation_set(opts), rng);
      return {Translation{i, j}};
    }
    case Family::rotation: return {Rotation{pick(rotation_set(opts), rng)}};
    case Family::reflection:
      return {Reflection{rng.below(2) == 0 ? Axis::horizontal : Axis::vertical}};
    case Family::shear: {
      auto [a, b] = pick(shear_set(opts), rng);
      return {Shear{a, b}};
    }
    case Family::scale: return {Scale{pick(scale_grid(), rng)}};
    case Family::fisheye: {
      const double cx = as_float(rng.uniform(side / 4.0, 3.0 * side / 4.0));
      const double cy = as_float(rng.uniform(side / 4.0, 3.0 * side / 4.0));
      const double dmax = fisheye_d_max(opts.image_side);
      const double d = as_float(rng.uniform(dmax / 10.0, dmax));
      return {Fisheye{cx, cy, d}};
    }
    case Family::hwave: {
      const double a = as_float(rng.uniform(1.0, 4.0));
      const double f = as_float(rng.uniform(0.2, 0.8));
      return {HWave{a, f}};
    }
    case Family::blackwhite: {
      const Axis axis = rng.below(2) == 0 ? Axis::horizontal : Axis::vertical;
      const int lo = static_cast<int>(opts.image_side / 4);
      const int hi = static_cast<int>(3 * opts.image_side / 4);
      const int split = lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
      return {BlackWhite{axis, split}};
    }
    case Family::swap: {
      std::array<int, 4> p{0, 1, 2, 3};
      do {
        rng.shuffle(p);
      } while (p == std::array<int, 4>{0, 1, 2, 3});
      return {Swap{p}};
    }
  }
  throw TransformError("sample_spec: unknown family");
}

bool spec_admissible(const TransformSpec& spec, const SampleOptions& opts) {
  const Family family = spec.family();
  try {
    check_options(family, opts);
  } catch (const TransformError&) {
    return false;
  }
  const double side = static_cast<double>(opts.image_side);
  return std::visit(
      [&](const auto& p) -> bool {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, Translation>) {
          return in_grid(translation_set(opts), std::pair{p.rows, p.cols});
        } else if constexpr (std::is_same_v<T, Rotation>) {
          return in_grid(rotation_set(opts), p.angle_deg);
        } else if constexpr (std::is_same_v<T, Reflection>) {
          return true;
        } else if constexpr (std::is_same_v<T, Shear>) {
          return in_grid(shear_set(opts), std::pair{p.alpha_deg, p.beta_deg});
        } else if constexpr (std::is_same_v<T, Scale>) {
          return in_grid(scale_grid(), p.factor);
        } else if constexpr (std::is_same_v<T, Fisheye>) {
          const double dmax = fisheye_d_max(opts.image_side);
          const double tol = 1e-6;
          return p.cx >= side / 4.0 - tol && p.cx <= 3.0 * side / 4.0 + tol &&
                 p.cy >= side / 4.0 - tol && p.cy <= 3.0 * side / 4.0 + tol &&
                 p.d >= dmax / 10.0 * (1 - tol) && p.d <= dmax * (1 + tol);
        } else if constexpr (std::is_same_v<T, HWave>) {
          return p.amplitude >= 1.0 - 1e-6 && p.amplitude <= 4.0 + 1e-6 &&
                 p.frequency >= 0.2 - 1e-6 && p.frequency <= 0.8 + 1e-6;
        } else if constexpr (std::is_same_v<T, BlackWhite>) {
          const int lo = static_cast<int>(opts.image_side / 4);
          const int hi = static_cast<int>(3 * opts.image_side / 4);
          return p.split >= lo && p.split <= hi;
        } else {
          return is_permutation4(p.perm) && p.perm != std::array<int, 4>{0, 1, 2, 3};
        }
      },
      spec.params);
}

TransformSpec invert_syntactic(const TransformSpec& spec) {
  return std::visit(
      [&](const auto& p) -> TransformSpec {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, Reflection> || std::is_same_v<T, BlackWhite>) {
          return spec;
        } else if constexpr (std::is_same_v<T, Swap>) {
          Swap inv;
          for (int q = 0; q < 4; ++q) inv.perm[static_cast<std::size_t>(p.perm[static_cast<std::size_t>(q)])] = q;
          return {inv};
        } else if constexpr (std::is_same_v<T, Translation>) {
          return {Translation{-p.rows, -p.cols}};
        } else if constexpr (std::is_same_v<T, Rotation>) {
          return {Rotation{360.0 - p.angle_deg}};
        } else if constexpr (std::is_same_v<T, Scale>) {
          if (p.factor == 1.0) return spec;
          throw TransformError("invert_syntactic: scale is not exactly invertible on the lattice");
        } else {
          throw TransformError("invert_syntactic: family '" + std::string(family_name(spec.family())) +
                               "' has no exact lattice inverse");
        }
      },
      spec.params);
}

}  // namespace fine
