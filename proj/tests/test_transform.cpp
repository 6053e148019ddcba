#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "fine/rng.hpp"
#include "fine/transform.hpp"

using namespace fine;

namespace {

Image random_image(std::size_t side, std::uint64_t seed) {
  Rng rng(seed);
  Image img(side);
  for (auto& p : img.pixels) p = to_pixel(rng.uniform());
  return img;
}

// Smooth blob, so bilinear resampling errors stay small.
Image blob(std::size_t side) {
  Image img(side);
  const double c = (static_cast<double>(side) - 1) / 2, s = side / 5.0;
  for (std::size_t r = 0; r < side; ++r)
    for (std::size_t col = 0; col < side; ++col) {
      const double dy = r - c, dx = col - c + 1.5;
      img.at(r, col) = to_pixel(std::exp(-(dx * dx + dy * dy) / (2 * s * s)));
    }
  return img;
}

TransformSpec spec(TransformParams p) { return TransformSpec{p}; }

}  // namespace

TEST(Apply, ScaleOneIsIdentity) {
  const auto img = random_image(28, 1);
  EXPECT_EQ(apply_transform(img, spec(Scale{1.0})), img);
}

TEST(Apply, HWaveZeroAmplitudeIsIdentity) {
  const auto img = random_image(16, 2);
  EXPECT_EQ(apply_transform(img, spec(HWave{0.0, 0.5})), img);
}

TEST(Apply, Rotation90MovesOneHotPixelLikeCoordinateOracle) {
  const std::size_t H = 28;
  const double c = (H - 1) / 2.0;
  for (std::size_t r : {0u, 3u, 13u, 27u}) {
    for (std::size_t col : {0u, 5u, 14u, 26u}) {
      Image img(H);
      img.at(r, col) = 1.0f;
      const auto out = apply_transform(img, spec(Rotation{90.0}));
      // Counter-clockwise on screen (rows grow downward): right goes to top.
      const double dx = col - c, dy = r - c;
      const auto r2 = static_cast<std::size_t>(std::lround(c - dx));
      const auto c2 = static_cast<std::size_t>(std::lround(c + dy));
      Image expect(H);
      expect.at(r2, c2) = 1.0f;
      EXPECT_EQ(out, expect) << "pixel (" << r << "," << col << ")";
    }
  }
}

TEST(Apply, BlackWhiteWholeImageInverts) {
  Image img(16, 0.3f);
  const auto out = apply_transform(img, spec(BlackWhite{Axis::horizontal, 0}));
  for (float p : out.pixels) EXPECT_NEAR(p, 0.7f, 1e-6);
}

TEST(Apply, BlackWhiteInvertsOnlyFromSplit) {
  Image img(16, 0.25f);
  const auto out = apply_transform(img, spec(BlackWhite{Axis::vertical, 6}));
  for (std::size_t r = 0; r < 16; ++r)
    for (std::size_t c = 0; c < 16; ++c) EXPECT_EQ(out.at(r, c), c >= 6 ? 0.75f : 0.25f);
}

TEST(Apply, FisheyeKeepsCenterPixel) {
  const auto img = random_image(16, 3);
  const auto out = apply_transform(img, spec(Fisheye{7.0, 5.0, 0.02}));
  EXPECT_EQ(out.at(5, 7), img.at(5, 7));
}

TEST(Apply, TranslationShiftsExactly) {
  const auto img = random_image(16, 4);
  const auto out = apply_transform(img, spec(Translation{3, -6}));
  for (std::size_t r = 0; r < 16; ++r)
    for (std::size_t c = 0; c < 16; ++c) {
      const long sr = static_cast<long>(r) - 3, sc = static_cast<long>(c) + 6;
      const float want = (sr >= 0 && sr < 16 && sc >= 0 && sc < 16) ? img.at(sr, sc) : 0.0f;
      EXPECT_EQ(out.at(r, c), want);
    }
}

TEST(Apply, ReflectionHorizontalMirrorsColumns) {
  const auto img = random_image(12, 5);
  const auto out = apply_transform(img, spec(Reflection{Axis::horizontal}));
  for (std::size_t r = 0; r < 12; ++r)
    for (std::size_t c = 0; c < 12; ++c) EXPECT_EQ(out.at(r, c), img.at(r, 11 - c));
}

TEST(Apply, SwapMovesQuadrants) {
  const auto img = random_image(16, 6);
  const auto out = apply_transform(img, spec(Swap{{3, 2, 1, 0}}));
  // Output top-left shows source bottom-right.
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(out.at(r, c), img.at(r + 8, c + 8));
}

TEST(Apply, OutputsStayInUnitInterval) {
  const auto img = random_image(16, 7);
  Rng rng(8);
  for (auto f : all_families()) {
    for (int k = 0; k < 10; ++k) {
      const auto out = apply_transform(img, sample_spec(f, {SampleMode::grid, std::nullopt, 16}, rng));
      for (float p : out.pixels) {
        EXPECT_GE(p, 0.0f);
        EXPECT_LE(p, 1.0f);
      }
    }
  }
}

TEST(Apply, InvalidSpecsRejected) {
  const auto img = random_image(16, 9);
  EXPECT_THROW(apply_transform(img, spec(Swap{{0, 0, 1, 2}})), TransformError);
  EXPECT_THROW(apply_transform(img, spec(Scale{0.0})), TransformError);
  EXPECT_THROW(apply_transform(img, spec(BlackWhite{Axis::horizontal, 17})), TransformError);
  Image bad(16);
  bad.pixels[3] = 1.5f;
  EXPECT_THROW(apply_transform(bad, spec(Scale{1.0})), ImageError);
  EXPECT_THROW(apply_transform(Image(4), spec(Scale{1.0})), ImageError);
}

TEST(Involution, SyntacticFamiliesUndoExactly) {
  const auto img = random_image(16, 10);
  for (auto ax : {Axis::horizontal, Axis::vertical}) {
    const auto s = spec(Reflection{ax});
    EXPECT_EQ(apply_transform(apply_transform(img, s), s), img);
    const auto b = spec(BlackWhite{ax, 5});
    EXPECT_EQ(apply_transform(apply_transform(img, b), b), img);
  }
  std::array<int, 4> perm{0, 1, 2, 3};
  do {
    const auto s = spec(Swap{perm});
    EXPECT_EQ(apply_transform(apply_transform(img, s), invert_syntactic(s)), img);
  } while (std::next_permutation(perm.begin(), perm.end()));
}

TEST(Involution, QuarterTurnsComposeToIdentity) {
  const auto img = random_image(15, 11);
  auto out = img;
  for (int k = 0; k < 4; ++k) out = apply_transform(out, spec(Rotation{90.0}));
  EXPECT_EQ(out, img);
  EXPECT_EQ(apply_transform(apply_transform(img, spec(Rotation{270.0})), spec(Rotation{90.0})), img);
}

TEST(Involution, GridRotationAndComplementWithinBilinearTolerance) {
  const std::size_t H = 28;
  const auto img = blob(H);
  for (double a : rotation_grid()) {
    const auto back = apply_transform(apply_transform(img, spec(Rotation{a})), spec(Rotation{std::fmod(360.0 - a, 360.0)}));
    double worst = 0;
    for (std::size_t r = 4; r < H - 4; ++r)
      for (std::size_t c = 4; c < H - 4; ++c) worst = std::max(worst, double(std::abs(back.at(r, c) - img.at(r, c))));
    EXPECT_LT(worst, 0.15) << "angle " << a;
  }
}

TEST(Invert, Examples) {
  EXPECT_EQ(invert_syntactic(spec(Reflection{Axis::horizontal})), spec(Reflection{Axis::horizontal}));
  EXPECT_EQ(invert_syntactic(spec(Swap{{1, 0, 3, 2}})), spec(Swap{{1, 0, 3, 2}}));
  EXPECT_EQ(invert_syntactic(spec(Translation{3, -6})), spec(Translation{-3, 6}));
  EXPECT_EQ(invert_syntactic(spec(Rotation{45.0})), spec(Rotation{315.0}));
  EXPECT_THROW(invert_syntactic(spec(Shear{15.0, 0.0})), TransformError);
  EXPECT_THROW(invert_syntactic(spec(HWave{1.0, 0.3})), TransformError);
  EXPECT_THROW(invert_syntactic(spec(Scale{0.5})), TransformError);
}

TEST(Invert, TranslationRoundTripInsideFrame) {
  Image img(16);
  for (std::size_t r = 5; r < 11; ++r)
    for (std::size_t c = 5; c < 11; ++c) img.at(r, c) = 0.5f;
  const auto s = spec(Translation{-3, 3});
  EXPECT_EQ(apply_transform(apply_transform(img, s), invert_syntactic(s)), img);
}

TEST(Sample, GridValuesOnly) {
  Rng rng(12);
  const std::set<int> tgrid{-9, -6, -3, 0, 3, 6, 9};
  std::set<double> rgrid, sgrid;
  for (int k = 0; k < 24; ++k) rgrid.insert(15.0 * k);
  for (int k = -4; k <= 4; ++k) sgrid.insert(15.0 * k);
  const std::set<double> scgrid{0.5, 0.75, 1.0, 1.25};
  SampleOptions o{SampleMode::grid, std::nullopt, 28};
  for (int k = 0; k < 500; ++k) {
    const auto t = std::get<Translation>(sample_spec(Family::translation, o, rng).params);
    EXPECT_TRUE(tgrid.count(t.rows) && tgrid.count(t.cols));
    EXPECT_TRUE(rgrid.count(std::get<Rotation>(sample_spec(Family::rotation, o, rng).params).angle_deg));
    const auto sh = std::get<Shear>(sample_spec(Family::shear, o, rng).params);
    EXPECT_TRUE(sgrid.count(sh.alpha_deg) && sgrid.count(sh.beta_deg));
    EXPECT_TRUE(scgrid.count(std::get<Scale>(sample_spec(Family::scale, o, rng).params).factor));
    const auto sw = std::get<Swap>(sample_spec(Family::swap, o, rng).params);
    auto sorted = sw.perm;
    std::sort(sorted.begin(), sorted.end());
    EXPECT_EQ(sorted, (std::array<int, 4>{0, 1, 2, 3}));
  }
}

TEST(Sample, ConstrainedSides) {
  Rng rng(13);
  SampleOptions train{SampleMode::constrained, OodSide::train, 28};
  SampleOptions test{SampleMode::constrained, OodSide::test, 28};
  for (int k = 0; k < 300; ++k) {
    const double a = std::get<Rotation>(sample_spec(Family::rotation, train, rng).params).angle_deg;
    EXPECT_LE(a, 180.0);
    EXPECT_EQ(std::fmod(a, 15.0), 0.0);
    EXPECT_GT(std::get<Rotation>(sample_spec(Family::rotation, test, rng).params).angle_deg, 180.0);
    const auto tt = std::get<Translation>(sample_spec(Family::translation, test, rng).params);
    EXPECT_TRUE(std::abs(tt.rows) >= 6 || std::abs(tt.cols) >= 6);
    const auto tr = std::get<Translation>(sample_spec(Family::translation, train, rng).params);
    EXPECT_TRUE(std::abs(tr.rows) <= 3 && std::abs(tr.cols) <= 3);
    const auto sh = std::get<Shear>(sample_spec(Family::shear, train, rng).params);
    EXPECT_TRUE(std::abs(sh.alpha_deg) <= 30 && std::abs(sh.beta_deg) <= 30);
    const auto st = std::get<Shear>(sample_spec(Family::shear, test, rng).params);
    EXPECT_TRUE(std::abs(st.alpha_deg) > 30 || std::abs(st.beta_deg) > 30);
  }
  EXPECT_THROW(sample_spec(Family::swap, train, rng), TransformError);
}

TEST(Sample, DeterministicForSeed) {
  for (auto f : all_families()) {
    Rng a(77), b(77);
    SampleOptions o{SampleMode::grid, std::nullopt, 16};
    EXPECT_EQ(sample_spec(f, o, a), sample_spec(f, o, b));
  }
}

TEST(Sample, ContinuousParamsRoundTripThroughPacking) {
  Rng rng(14);
  SampleOptions o{SampleMode::grid, std::nullopt, 16};
  for (auto f : all_families()) {
    for (int k = 0; k < 20; ++k) {
      const auto s = sample_spec(f, o, rng);
      EXPECT_EQ(TransformSpec::unpack(f, s.packed()), s) << s.describe();
      EXPECT_TRUE(spec_admissible(s, o));
    }
  }
}

TEST(Pixels, LatticeMakesInversionExact) {
  for (double v : {0.0, 1e-9, 0.1, 1.0 / 3.0, 0.5, 0.7, 1.0 - 1e-9, 1.0}) {
    const float p = to_pixel(v);
    EXPECT_EQ(1.0f - (1.0f - p), p) << v;
    EXPECT_LE(std::abs(p - v), 0x1.0p-25 + 1e-15);
  }
  EXPECT_EQ(to_pixel(-0.5), 0.0f);
  EXPECT_EQ(to_pixel(1.5), 1.0f);
}

TEST(Names, RoundTrip) {
  for (auto f : all_families()) EXPECT_EQ(parse_family(family_name(f)), f);
  EXPECT_THROW(parse_family("warp"), std::invalid_argument);
}
