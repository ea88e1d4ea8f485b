#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "cpgc/defense.hpp"
#include "cpgc/rng.hpp"

using namespace cpgc;
using namespace cpgc::defense;

namespace {

Tensor constant_image(double v) { return Tensor({32, 32, 3}, std::vector<double>(3072, v)); }

Tensor random_image(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(3072);
  for (auto& x : v) x = rng.uniform();
  return Tensor({32, 32, 3}, std::move(v));
}

double at(const Tensor& t, std::size_t y, std::size_t x, std::size_t c) { return t[(y * 32 + x) * 3 + c]; }

double l2_diff(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

// Textbook 2-D DCT-II / DCT-III on one 8x8 block, written from the formula.
Tensor jpeg_oracle(const Tensor& img) {
  Tensor out = img;
  auto alpha = [](int u) { return u == 0 ? std::sqrt(0.125) : 0.5; };
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t by = 0; by < 32; by += 8)
      for (std::size_t bx = 0; bx < 32; bx += 8) {
        double q[8][8];
        for (int u = 0; u < 8; ++u)
          for (int v = 0; v < 8; ++v) {
            double s = 0;
            for (int y = 0; y < 8; ++y)
              for (int x = 0; x < 8; ++x)
                s += (at(img, by + y, bx + x, c) * 255.0 - 128.0) * std::cos((2 * y + 1) * u * std::numbers::pi / 16) *
                     std::cos((2 * x + 1) * v * std::numbers::pi / 16);
            s *= alpha(u) * alpha(v);
            const double step = kQuality50Table[static_cast<std::size_t>(u * 8 + v)];
            q[u][v] = std::round(s / step) * step;
          }
        for (int y = 0; y < 8; ++y)
          for (int x = 0; x < 8; ++x) {
            double s = 0;
            for (int u = 0; u < 8; ++u)
              for (int v = 0; v < 8; ++v)
                s += alpha(u) * alpha(v) * q[u][v] * std::cos((2 * y + 1) * u * std::numbers::pi / 16) *
                     std::cos((2 * x + 1) * v * std::numbers::pi / 16);
            out.values[((by + y) * 32 + bx + x) * 3 + c] = std::clamp((s + 128.0) / 255.0, 0.0, 1.0);
          }
      }
  return out;
}

}  // namespace

TEST(Defense, NamesRoundTrip) {
  for (Defense d : {Defense::None, Defense::GaussianSmooth, Defense::MedianSmooth, Defense::AverageSmooth, Defense::JpegLike})
    EXPECT_EQ(parse_defense(defense_name(d)), d);
  EXPECT_THROW(parse_defense("nrp"), ContractError);
}

TEST(Defense, ConstantImagesAreFixedPoints) {
  for (double v : {0.0, 0.2, 0.5, 0.73, 1.0}) {
    const Tensor img = constant_image(v);
    EXPECT_EQ(median_smooth(img).values, img.values);
    for (const Tensor& out : {gaussian_smooth(img), average_smooth(img)})
      for (double x : out.values) EXPECT_NEAR(x, v, 1e-15);
    // Only the DC term survives; its rounding moves a flat block by at most
    // half a quantization step, i.e. 16 / 8 / 2 grey levels.
    for (double x : jpeg_like(img).values) EXPECT_LE(std::abs(x - v), 1.0 / 255.0 + 1e-12);
  }
}

TEST(Defense, GaussianKernelAndImpulseResponse) {
  const auto k = gaussian_kernel();
  double total = 0;
  for (double w : k) total += w;
  EXPECT_NEAR(total, 1.0, 1e-15);
  EXPECT_NEAR(k[0] / k[4], std::exp(-1.0), 1e-15);
  EXPECT_NEAR(k[1] / k[4], std::exp(-0.5), 1e-15);
  Tensor img = constant_image(0.0);
  img.values[(10 * 32 + 20) * 3 + 1] = 1.0;
  const Tensor g = gaussian_smooth(img);
  const Tensor a = average_smooth(img);
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) {
      EXPECT_NEAR(at(g, 10 + dy, 20 + dx, 1), k[static_cast<std::size_t>((dy + 1) * 3 + dx + 1)], 1e-15);
      EXPECT_NEAR(at(a, 10 + dy, 20 + dx, 1), 1.0 / 9.0, 1e-15);
    }
  EXPECT_EQ(at(g, 10, 20, 0), 0.0);
  EXPECT_EQ(at(g, 12, 20, 1), 0.0);
}

TEST(Defense, EdgeReplicationAtCorners) {
  Tensor img = constant_image(0.0);
  img.values[0] = 0.9;  // pixel (0,0), channel 0
  // The corner window sees the corner pixel four times under edge replication.
  EXPECT_NEAR(at(average_smooth(img), 0, 0, 0), 4 * 0.9 / 9.0, 1e-15);
}

TEST(Defense, MedianRemovesSaltPixel) {
  Tensor img = constant_image(0.3);
  img.values[(16 * 32 + 16) * 3 + 2] = 1.0;
  const Tensor m = median_smooth(img);
  EXPECT_EQ(at(m, 16, 16, 2), 0.3);
  EXPECT_EQ(m.values, constant_image(0.3).values);
}

TEST(Defense, JpegMatchesFormulaOracle) {
  for (std::uint64_t seed : {1, 2, 3}) {
    const Tensor img = random_image(seed);
    const Tensor got = jpeg_like(img), want = jpeg_oracle(img);
    for (std::size_t i = 0; i < got.values.size(); ++i) ASSERT_NEAR(got[i], want[i], 1e-9);
  }
}

TEST(Defense, JpegSecondPassChangesLessThanFirst) {
  for (std::uint64_t seed : {4, 5, 6}) {
    const Tensor img = random_image(seed);
    const Tensor once = jpeg_like(img), twice = jpeg_like(once);
    EXPECT_LT(l2_diff(twice, once), l2_diff(once, img));
  }
}

TEST(Defense, OutputsStayInRangeAndRejectBadShapes) {
  const Tensor img = random_image(9);
  for (Defense d : {Defense::None, Defense::GaussianSmooth, Defense::MedianSmooth, Defense::AverageSmooth, Defense::JpegLike}) {
    const Tensor out = apply_defense(img, d);
    ASSERT_EQ(out.shape, img.shape);
    for (double v : out.values) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    EXPECT_THROW(apply_defense(Tensor({4, 4, 3}, std::vector<double>(48, 0.0)), d), ShapeError);
  }
  EXPECT_EQ(apply_defense(img, Defense::None).values, img.values);
}
