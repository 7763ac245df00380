// phantom.hpp
//
// Seeded synthetic volumes with sharp-edged ellipsoidal structures, normalised
// to [0, 1].

#ifndef CDDM_PHANTOM_HPP
#define CDDM_PHANTOM_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "grid.hpp"

namespace cddm {

enum class PhantomKind { shepp3d, blobs, shells };

inline PhantomKind parse_phantom_kind(const std::string& s) {
  if (s == "shepp3d") return PhantomKind::shepp3d;
  if (s == "blobs") return PhantomKind::blobs;
  if (s == "shells") return PhantomKind::shells;
  throw std::invalid_argument("unknown phantom kind '" + s + "'");
}

inline const char* phantom_kind_name(PhantomKind k) {
  switch (k) {
    case PhantomKind::shepp3d: return "shepp3d";
    case PhantomKind::blobs: return "blobs";
    case PhantomKind::shells: return "shells";
  }
  return "?";
}

struct PhantomSpec {
  PhantomKind kind = PhantomKind::shepp3d;
  Dims3 dims{8, 32, 32};
  std::uint64_t seed = 0;
};

namespace detail {

struct Ellipsoid {
  std::array<double, 3> centre;  // (x, y, z) in normalised coordinates
  std::array<double, 3> axes;    // half-axes (a, b, c)
  double angle;                  // rotation about z
  double value;
  bool additive;                 // add to what is there, or overwrite

  bool contains(double x, double y, double z) const {
    const double dx = x - centre[0], dy = y - centre[1], dz = z - centre[2];
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = (c * dx + s * dy) / axes[0];
    const double v = (-s * dx + c * dy) / axes[1];
    const double w = dz / axes[2];
    return u * u + v * v + w * w <= 1.0;
  }
};

inline Volume rasterise(const Dims3& dims, const std::vector<Ellipsoid>& shapes, double scale) {
  Volume v(dims);
  const auto [nz, ny, nx] = dims;
  for (std::size_t iz = 0; iz < nz; ++iz) {
    const double z = (static_cast<double>(iz) - 0.5 * static_cast<double>(nz - 1)) / (0.5 * static_cast<double>(nz));
    for (std::size_t iy = 0; iy < ny; ++iy) {
      const double y = (static_cast<double>(iy) - 0.5 * static_cast<double>(ny - 1)) / (0.5 * static_cast<double>(ny));
      for (std::size_t ix = 0; ix < nx; ++ix) {
        const double x = (static_cast<double>(ix) - 0.5 * static_cast<double>(nx - 1)) / (0.5 * static_cast<double>(nx));
        double val = 0.0;
        for (const auto& e : shapes)
          if (e.contains(x, y, z)) val = e.additive ? val + e.value : e.value;
        v.at(iz, iy, ix) = std::clamp(val * scale, 0.0, 1.0);
      }
    }
  }
  return v;
}

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * rng.uniform(); }

// 3D Shepp-Logan ellipsoids (x, y, z centres; a, b, c half-axes; angle; value).
inline std::vector<Ellipsoid> shepp_logan_3d() {
  const double pi = std::numbers::pi;
  return {
      {{0, 0, 0}, {0.69, 0.92, 0.9}, 0, 2.0, true},
      {{0, 0, 0}, {0.6624, 0.874, 0.88}, 0, -0.8, true},
      {{-0.22, 0, -0.25}, {0.41, 0.16, 0.21}, 3 * pi / 5, -0.2, true},
      {{0.22, 0, -0.25}, {0.31, 0.11, 0.22}, 2 * pi / 5, -0.2, true},
      {{0, 0.35, -0.25}, {0.21, 0.25, 0.5}, 0, 0.2, true},
      {{0, 0.1, -0.25}, {0.046, 0.046, 0.046}, 0, 0.2, true},
      {{-0.08, -0.65, -0.25}, {0.046, 0.023, 0.02}, 0, 0.1, true},
      {{0.06, -0.65, -0.25}, {0.046, 0.023, 0.02}, pi / 2, 0.1, true},
      {{0.06, -0.105, 0.625}, {0.056, 0.04, 0.1}, pi / 2, 0.2, true},
      {{0, 0.1, 0.625}, {0.056, 0.056, 0.1}, 0, -0.2, true},
  };
}

}  // namespace detail

/// Deterministic for a fixed spec. shepp3d jitters the classic ellipsoid set
/// by the seed; blobs and shells are drawn entirely from it.
inline Volume make_phantom(const PhantomSpec& spec) {
  if (spec.dims[0] == 0 || spec.dims[1] == 0 || spec.dims[2] == 0) throw std::invalid_argument("empty phantom dims");
  Rng rng(Rng::mix(spec.seed ^ (0xA5A5ULL + static_cast<std::uint64_t>(spec.kind))));
  std::vector<detail::Ellipsoid> shapes;
  double scale = 1.0;
  using detail::uniform;

  switch (spec.kind) {
    case PhantomKind::shepp3d: {
      shapes = detail::shepp_logan_3d();
      const double rot = uniform(rng, -0.3, 0.3);
      for (std::size_t i = 0; i < shapes.size(); ++i) {
        auto& e = shapes[i];
        const double c = std::cos(rot), s = std::sin(rot);
        const double x = e.centre[0], y = e.centre[1];
        e.centre[0] = c * x - s * y;
        e.centre[1] = s * x + c * y;
        e.angle += rot;
        if (i >= 2) {
          for (auto& a : e.axes) a *= uniform(rng, 0.85, 1.2);
          e.centre[0] += uniform(rng, -0.04, 0.04);
          e.centre[1] += uniform(rng, -0.04, 0.04);
          e.value *= uniform(rng, 0.7, 1.5);
        }
      }
      scale = 0.5;
      break;
    }
    case PhantomKind::blobs: {
      const double a = uniform(rng, 0.65, 0.85), b = uniform(rng, 0.7, 0.9);
      shapes.push_back({{0, 0, 0}, {a, b, uniform(rng, 1.0, 1.6)}, uniform(rng, 0, std::numbers::pi), uniform(rng, 0.25, 0.45), false});
      const std::size_t n = 4 + rng.below(5);
      for (std::size_t i = 0; i < n; ++i) {
        const double r = std::sqrt(rng.uniform()) * 0.45, th = uniform(rng, 0, 2 * std::numbers::pi);
        shapes.push_back({{r * std::cos(th), r * std::sin(th), uniform(rng, -0.6, 0.6)},
                          {uniform(rng, 0.08, 0.3), uniform(rng, 0.08, 0.3), uniform(rng, 0.3, 1.0)},
                          uniform(rng, 0, std::numbers::pi),
                          uniform(rng, 0.0, 1.0),
                          false});
      }
      break;
    }
    case PhantomKind::shells: {
      double a = uniform(rng, 0.75, 0.9), b = uniform(rng, 0.75, 0.9), c = uniform(rng, 1.0, 1.5);
      const double ang = uniform(rng, 0, std::numbers::pi);
      const std::size_t n = 2 + rng.below(3);
      for (std::size_t i = 0; i < n && a > 0.15 && b > 0.15; ++i) {
        shapes.push_back({{0, 0, 0}, {a, b, c}, ang, uniform(rng, 0.5, 1.0), false});
        const double t = uniform(rng, 0.06, 0.15);
        a -= t;
        b -= t;
        c -= t;
        shapes.push_back({{0, 0, 0}, {a, b, c}, ang, uniform(rng, 0.1, 0.4), false});
        a -= uniform(rng, 0.08, 0.2);
        b -= uniform(rng, 0.08, 0.2);
        c -= 0.1;
      }
      const std::size_t m = rng.below(3);
      for (std::size_t i = 0; i < m; ++i)
        shapes.push_back({{uniform(rng, -0.2, 0.2), uniform(rng, -0.2, 0.2), uniform(rng, -0.5, 0.5)},
                          {uniform(rng, 0.05, 0.12), uniform(rng, 0.05, 0.12), uniform(rng, 0.2, 0.6)},
                          0.0,
                          uniform(rng, 0.6, 1.0),
                          false});
      break;
    }
  }
  return detail::rasterise(spec.dims, shapes, scale);
}

}  // namespace cddm

#endif
