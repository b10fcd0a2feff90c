#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

namespace dtape::image {

// Helpers on a single square image stored row-major in a span of side*side
// doubles. Sampling outside the image clamps to the nearest edge pixel.

inline double pixel_clamped(std::span<const double> img, std::size_t side, long r, long c) {
  const long last = static_cast<long>(side) - 1;
  r = std::clamp(r, 0L, last);
  c = std::clamp(c, 0L, last);
  return img[static_cast<std::size_t>(r) * side + static_cast<std::size_t>(c)];
}

/// Bilinear sample at fractional (row, col).
inline double sample_bilinear(std::span<const double> img, std::size_t side, double r, double c) {
  const double fr = std::floor(r), fc = std::floor(c);
  const long r0 = static_cast<long>(fr), c0 = static_cast<long>(fc);
  const double dr = r - fr, dc = c - fc;
  return (1 - dr) * ((1 - dc) * pixel_clamped(img, side, r0, c0) + dc * pixel_clamped(img, side, r0, c0 + 1)) +
         dr * ((1 - dc) * pixel_clamped(img, side, r0 + 1, c0) + dc * pixel_clamped(img, side, r0 + 1, c0 + 1));
}

/// out(r, c) = img(src(r, c)) for an arbitrary source-coordinate map.
template <class Map>
std::vector<double> warp(std::span<const double> img, std::size_t side, Map&& src) {
  std::vector<double> out(side * side);
  for (std::size_t r = 0; r < side; ++r) {
    for (std::size_t c = 0; c < side; ++c) {
      const auto [sr, sc] = src(static_cast<double>(r), static_cast<double>(c));
      out[r * side + c] = sample_bilinear(img, side, sr, sc);
    }
  }
  return out;
}

/// 2D correlation with a (2R+1)^2 kernel, edge clamped. Kernel weights are used as given.
inline std::vector<double> convolve(std::span<const double> img, std::size_t side, std::span<const double> kernel,
                                    long radius) {
  const long width = 2 * radius + 1;
  std::vector<double> out(side * side, 0.0);
  for (long r = 0; r < static_cast<long>(side); ++r) {
    for (long c = 0; c < static_cast<long>(side); ++c) {
      double s = 0.0;
      for (long i = -radius; i <= radius; ++i)
        for (long j = -radius; j <= radius; ++j)
          s += kernel[static_cast<std::size_t>((i + radius) * width + (j + radius))] *
               pixel_clamped(img, side, r + i, c + j);
      out[static_cast<std::size_t>(r) * side + static_cast<std::size_t>(c)] = s;
    }
  }
  return out;
}

inline std::vector<double> gaussian_kernel(double sigma, long radius) {
  const long width = 2 * radius + 1;
  std::vector<double> k(static_cast<std::size_t>(width * width));
  double total = 0.0;
  for (long i = -radius; i <= radius; ++i)
    for (long j = -radius; j <= radius; ++j) {
      const double v = sigma > 0 ? std::exp(-(i * i + j * j) / (2 * sigma * sigma)) : (i == 0 && j == 0);
      k[static_cast<std::size_t>((i + radius) * width + (j + radius))] = v;
      total += v;
    }
  for (double& v : k) v /= total;
  return k;
}

inline std::vector<double> gaussian_blur(std::span<const double> img, std::size_t side, double sigma) {
  const long radius = 2;
  const auto k = gaussian_kernel(sigma, radius);
  return convolve(img, side, k, radius);
}

/// Smooth random field in [0, 1]: a coarse grid of uniforms, bilinearly upsampled.
template <class Rng>
std::vector<double> smooth_field(std::size_t side, std::size_t grid, Rng& rng) {
  std::vector<double> coarse(grid * grid);
  for (double& v : coarse) v = rng.uniform();
  std::vector<double> out(side * side);
  const double scale = side > 1 ? static_cast<double>(grid - 1) / static_cast<double>(side - 1) : 0.0;
  for (std::size_t r = 0; r < side; ++r)
    for (std::size_t c = 0; c < side; ++c)
      out[r * side + c] = sample_bilinear(coarse, grid, r * scale, c * scale);
  return out;
}

inline void clip01(std::span<double> v) {
  for (double& x : v) x = std::clamp(x, 0.0, 1.0);
}

inline void hflip(std::span<double> img, std::size_t side) {
  for (std::size_t r = 0; r < side; ++r) std::reverse(img.begin() + static_cast<std::ptrdiff_t>(r * side),
                                                      img.begin() + static_cast<std::ptrdiff_t>((r + 1) * side));
}

}  // namespace dtape::image
