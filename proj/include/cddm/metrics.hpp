// metrics.hpp
//
// PSNR, SSIM and their per-plane (axial / coronal / sagittal) averages.

#ifndef CDDM_METRICS_HPP
#define CDDM_METRICS_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "grid.hpp"

namespace cddm {

struct PsnrResult {
  double db = 0.0;
  bool identical = false;  // MSE == 0, db is +inf
};

inline PsnrResult psnr(std::span<const double> x, std::span<const double> ref, double peak) {
  if (x.size() != ref.size()) throw std::invalid_argument("psnr: size mismatch");
  if (!(peak > 0.0)) throw std::invalid_argument("psnr: peak must be positive");
  double se = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) se += (x[i] - ref[i]) * (x[i] - ref[i]);
  if (se == 0.0) return {std::numeric_limits<double>::infinity(), true};
  const double mse = se / static_cast<double>(x.size());
  return {10.0 * std::log10(peak * peak / mse), false};
}

inline PsnrResult psnr(const Volume& x, const Volume& ref, double peak = 1.0) {
  if (!x.same_shape(ref)) throw std::invalid_argument("psnr: dims mismatch");
  return psnr(x.data, ref.data, peak);
}

struct SsimParams {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double range = 1.0;
};

namespace detail {

inline std::vector<double> gaussian_kernel(std::size_t n, double sigma) {
  std::vector<double> k(n);
  const double c = 0.5 * static_cast<double>(n - 1);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(i) - c;
    k[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    s += k[i];
  }
  for (auto& v : k) v /= s;
  return k;
}

// Separable "valid" filtering of an h x w image.
inline std::vector<double> filter_valid(std::span<const double> img, std::size_t h, std::size_t w,
                                        const std::vector<double>& k) {
  const std::size_t n = k.size(), oh = h - n + 1, ow = w - n + 1;
  std::vector<double> tmp(h * ow), out(oh * ow);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += k[i] * img[y * w + x + i];
      tmp[y * ow + x] = s;
    }
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += k[i] * tmp[(y + i) * ow + x];
      out[y * ow + x] = s;
    }
  return out;
}

}  // namespace detail

/// Mean local SSIM over all window positions fully inside the h x w image.
inline double ssim(std::span<const double> x, std::span<const double> ref, std::size_t h, std::size_t w,
                   const SsimParams& p = {}) {
  if (x.size() != h * w || ref.size() != h * w) throw std::invalid_argument("ssim: size mismatch");
  if (p.window == 0 || h < p.window || w < p.window) throw std::invalid_argument("ssim: image smaller than window");
  const auto k = detail::gaussian_kernel(p.window, p.sigma);
  std::vector<double> xx(h * w), yy(h * w), xy(h * w);
  for (std::size_t i = 0; i < h * w; ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = ref[i] * ref[i];
    xy[i] = x[i] * ref[i];
  }
  const auto mx = detail::filter_valid(x, h, w, k);
  const auto my = detail::filter_valid(ref, h, w, k);
  const auto exx = detail::filter_valid(xx, h, w, k);
  const auto eyy = detail::filter_valid(yy, h, w, k);
  const auto exy = detail::filter_valid(xy, h, w, k);
  const double c1 = (p.k1 * p.range) * (p.k1 * p.range);
  const double c2 = (p.k2 * p.range) * (p.k2 * p.range);
  double acc = 0.0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double sxx = exx[i] - mx[i] * mx[i];
    const double syy = eyy[i] - my[i] * my[i];
    const double sxy = exy[i] - mx[i] * my[i];
    const double num = (2.0 * mx[i] * my[i] + c1) * (2.0 * sxy + c2);
    const double den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (sxx + syy + c2);
    acc += num / den;
  }
  return acc / static_cast<double>(mx.size());
}

enum class Plane { axial = 0, coronal = 1, sagittal = 2 };

inline const char* plane_name(Plane p) {
  switch (p) {
    case Plane::axial: return "axial";
    case Plane::coronal: return "coronal";
    case Plane::sagittal: return "sagittal";
  }
  return "?";
}

/// Extracts slice `i` of a volume in the given plane as a row-major image.
inline std::vector<double> plane_slice(const Volume& v, Plane p, std::size_t i, std::size_t& h, std::size_t& w) {
  std::vector<double> out;
  switch (p) {
    case Plane::axial:
      h = v.ny();
      w = v.nx();
      out.assign(v.slice(i).begin(), v.slice(i).end());
      break;
    case Plane::coronal:
      h = v.nz();
      w = v.nx();
      out.resize(h * w);
      for (std::size_t z = 0; z < h; ++z)
        for (std::size_t x = 0; x < w; ++x) out[z * w + x] = v.at(z, i, x);
      break;
    case Plane::sagittal:
      h = v.nz();
      w = v.ny();
      out.resize(h * w);
      for (std::size_t z = 0; z < h; ++z)
        for (std::size_t y = 0; y < w; ++y) out[z * w + y] = v.at(z, y, i);
      break;
  }
  return out;
}

inline std::size_t plane_count(const Volume& v, Plane p) {
  return p == Plane::axial ? v.nz() : p == Plane::coronal ? v.ny() : v.nx();
}

/// Slice-averaged PSNR/SSIM per plane. PSNR averages the finite per-slice
/// values; slices that match exactly are counted in `identical_slices`, and a
/// plane whose slices all match reports +inf.
struct PlaneMetrics {
  std::array<double, 3> psnr{};
  std::array<double, 3> ssim{};
  std::array<std::size_t, 3> identical_slices{};
  std::array<std::size_t, 3> ssim_window{};
};

inline PlaneMetrics plane_metrics(const Volume& x, const Volume& ref, double peak = 1.0, SsimParams sp = {}) {
  if (!x.same_shape(ref)) throw std::invalid_argument("plane_metrics: dims mismatch");
  sp.range = peak;
  PlaneMetrics m;
  for (Plane p : {Plane::axial, Plane::coronal, Plane::sagittal}) {
    const auto pi = static_cast<std::size_t>(p);
    const std::size_t n = plane_count(x, p);
    double psnr_sum = 0.0, ssim_sum = 0.0;
    std::size_t finite = 0;
    SsimParams local = sp;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t h = 0, w = 0;
      const auto a = plane_slice(x, p, i, h, w);
      const auto b = plane_slice(ref, p, i, h, w);
      // Thin planes get the largest odd window that fits.
      std::size_t win = std::min({sp.window, h, w});
      if (win % 2 == 0) --win;
      local.window = win;
      const auto ps = psnr(a, b, peak);
      if (ps.identical) {
        ++m.identical_slices[pi];
      } else {
        psnr_sum += ps.db;
        ++finite;
      }
      ssim_sum += ssim(a, b, h, w, local);
    }
    m.psnr[pi] = finite > 0 ? psnr_sum / static_cast<double>(finite) : std::numeric_limits<double>::infinity();
    m.ssim[pi] = ssim_sum / static_cast<double>(n);
    m.ssim_window[pi] = local.window;
  }
  return m;
}

}  // namespace cddm

#endif
