#pragma once

// Input-preprocessing defenses on 32x32x3 images in [0, 1].

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <string>

#include "cpgc/corpus.hpp"
#include "cpgc/errors.hpp"
#include "cpgc/tensor.hpp"

namespace cpgc::defense {

enum class Defense : std::uint8_t { None, GaussianSmooth, MedianSmooth, AverageSmooth, JpegLike };

inline std::string defense_name(Defense d) {
  switch (d) {
    case Defense::None: return "none";
    case Defense::GaussianSmooth: return "gaussian_smooth";
    case Defense::MedianSmooth: return "median_smooth";
    case Defense::AverageSmooth: return "average_smooth";
    case Defense::JpegLike: return "jpeg_like";
  }
  return "?";
}

inline Defense parse_defense(const std::string& s) {
  for (Defense d : {Defense::None, Defense::GaussianSmooth, Defense::MedianSmooth, Defense::AverageSmooth, Defense::JpegLike})
    if (defense_name(d) == s) return d;
  throw ContractError("unknown defense '" + s + "'");
}

/// Standard quality-50 luminance quantization table, row-major.
inline constexpr std::array<int, 64> kQuality50Table = {
    16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
    14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
    18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};

/// Normalized 3x3 Gaussian weights with sigma = 1.
inline std::array<double, 9> gaussian_kernel() {
  std::array<double, 9> k{};
  double total = 0.0;
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) total += k[static_cast<std::size_t>((dy + 1) * 3 + dx + 1)] = std::exp(-(dx * dx + dy * dy) / 2.0);
  for (auto& w : k) w /= total;
  return k;
}

namespace detail {

constexpr std::size_t kSide = corpus::kImageSide;

inline void check_image(const Tensor& image) {
  if (image.shape != Shape{kSide, kSide, corpus::kChannels}) throw ShapeError("defense expects [32,32,3], got " + to_string(image.shape));
}

/// The 3x3 edge-replicated neighborhood of (y, x) in channel c, row-major.
inline std::array<double, 9> window(const Tensor& img, std::size_t y, std::size_t x, std::size_t c) {
  std::array<double, 9> w{};
  std::size_t n = 0;
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) {
      const auto yy = static_cast<std::size_t>(std::clamp<long>(static_cast<long>(y) + dy, 0, kSide - 1));
      const auto xx = static_cast<std::size_t>(std::clamp<long>(static_cast<long>(x) + dx, 0, kSide - 1));
      w[n++] = img[(yy * kSide + xx) * corpus::kChannels + c];
    }
  return w;
}

template <class Reduce>
Tensor filter3x3(const Tensor& image, Reduce reduce) {
  check_image(image);
  Tensor out = image;
  for (std::size_t y = 0; y < kSide; ++y)
    for (std::size_t x = 0; x < kSide; ++x)
      for (std::size_t c = 0; c < corpus::kChannels; ++c)
        out.values[(y * kSide + x) * corpus::kChannels + c] = reduce(window(image, y, x, c));
  return out;
}

/// Orthonormal 8-point DCT-II basis: basis[u][x].
inline const std::array<std::array<double, 8>, 8>& dct_basis() {
  static const auto basis = [] {
    std::array<std::array<double, 8>, 8> b{};
    for (std::size_t u = 0; u < 8; ++u)
      for (std::size_t x = 0; x < 8; ++x) {
        const double a = u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
        b[u][x] = a * std::cos((2.0 * static_cast<double>(x) + 1.0) * static_cast<double>(u) * std::numbers::pi / 16.0);
      }
    return b;
  }();
  return basis;
}

}  // namespace detail

inline Tensor gaussian_smooth(const Tensor& image) {
  static const auto k = gaussian_kernel();
  return detail::filter3x3(image, [](const std::array<double, 9>& w) {
    double s = 0.0;
    for (std::size_t i = 0; i < 9; ++i) s += k[i] * w[i];
    return std::clamp(s, 0.0, 1.0);
  });
}

inline Tensor average_smooth(const Tensor& image) {
  return detail::filter3x3(image, [](const std::array<double, 9>& w) {
    double s = 0.0;
    for (double v : w) s += v;
    return std::clamp(s / 9.0, 0.0, 1.0);
  });
}

inline Tensor median_smooth(const Tensor& image) {
  return detail::filter3x3(image, [](std::array<double, 9> w) {
    std::nth_element(w.begin(), w.begin() + 4, w.end());
    return w[4];
  });
}

/// Per channel: 8x8 block DCT on the 0..255 scale, quantize and dequantize with
/// the quality-50 table, inverse DCT, clamp back to [0, 1].
inline Tensor jpeg_like(const Tensor& image) {
  detail::check_image(image);
  const auto& b = detail::dct_basis();
  Tensor out = image;
  constexpr std::size_t side = detail::kSide, ch = corpus::kChannels;
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t by = 0; by < side; by += 8)
      for (std::size_t bx = 0; bx < side; bx += 8) {
        double block[8][8], coef[8][8], tmp[8][8];
        for (std::size_t y = 0; y < 8; ++y)
          for (std::size_t x = 0; x < 8; ++x) block[y][x] = image[((by + y) * side + bx + x) * ch + c] * 255.0 - 128.0;
        for (std::size_t u = 0; u < 8; ++u)
          for (std::size_t x = 0; x < 8; ++x) {
            double s = 0.0;
            for (std::size_t y = 0; y < 8; ++y) s += b[u][y] * block[y][x];
            tmp[u][x] = s;
          }
        for (std::size_t u = 0; u < 8; ++u)
          for (std::size_t v = 0; v < 8; ++v) {
            double s = 0.0;
            for (std::size_t x = 0; x < 8; ++x) s += tmp[u][x] * b[v][x];
            const double q = kQuality50Table[u * 8 + v];
            coef[u][v] = std::round(s / q) * q;
          }
        for (std::size_t y = 0; y < 8; ++y)
          for (std::size_t v = 0; v < 8; ++v) {
            double s = 0.0;
            for (std::size_t u = 0; u < 8; ++u) s += b[u][y] * coef[u][v];
            tmp[y][v] = s;
          }
        for (std::size_t y = 0; y < 8; ++y)
          for (std::size_t x = 0; x < 8; ++x) {
            double s = 0.0;
            for (std::size_t v = 0; v < 8; ++v) s += tmp[y][v] * b[v][x];
            out.values[((by + y) * side + bx + x) * ch + c] = std::clamp((s + 128.0) / 255.0, 0.0, 1.0);
          }
      }
  return out;
}

inline Tensor apply_defense(const Tensor& image, Defense d) {
  switch (d) {
    case Defense::None: detail::check_image(image); return image;
    case Defense::GaussianSmooth: return gaussian_smooth(image);
    case Defense::MedianSmooth: return median_smooth(image);
    case Defense::AverageSmooth: return average_smooth(image);
    case Defense::JpegLike: return jpeg_like(image);
  }
  throw ContractError("unknown defense");
}

}  // namespace cpgc::defense
