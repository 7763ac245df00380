// operators.hpp
//
// Matrix-free linear operators: the slice-wise parallel-beam projector A and
// its transpose, and the one-sided finite differences D_x, D_y, D_z.

#ifndef CDDM_OPERATORS_HPP
#define CDDM_OPERATORS_HPP

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "grid.hpp"

namespace cddm {

/// Parallel-beam geometry for one z-stack of identical slices.
struct Geometry {
  std::size_t nz = 1;
  std::size_t ny = 0;
  std::size_t nx = 0;
  double sy = 1.0;
  double sx = 1.0;
  std::vector<double> angles;  // radians in [0, pi), strictly increasing
  std::size_t n_det = 0;
  double det_spacing = 1.0;

  std::size_t n_views() const { return angles.size(); }

  /// Default sparse-view setup: equispaced views, one detector per column,
  /// detector pitch equal to the in-plane voxel pitch.
  static Geometry for_volume(const Volume& v, std::size_t n_views = 8) {
    Geometry g;
    g.nz = v.nz();
    g.ny = v.ny();
    g.nx = v.nx();
    g.sy = v.spacing[1];
    g.sx = v.spacing[2];
    g.angles = equispaced_angles(n_views);
    g.n_det = v.nx();
    g.det_spacing = v.spacing[2];
    return g;
  }

  void validate() const {
    if (angles.empty()) throw std::invalid_argument("geometry needs at least one view");
    if (n_det == 0 || ny == 0 || nx == 0 || nz == 0) throw std::invalid_argument("geometry has an empty axis");
    if (!(det_spacing > 0.0 && sx > 0.0 && sy > 0.0)) throw std::invalid_argument("non-positive pitch");
    check_view_angles(angles);
  }
};

namespace detail {

// Antiderivative of the unit tent max(0, 1 - |u|).
inline double tent_cdf(double u) {
  if (u <= -1.0) return 0.0;
  if (u < 0.0) return 0.5 * (u + 1.0) * (u + 1.0);
  if (u < 1.0) return 1.0 - 0.5 * (1.0 - u) * (1.0 - u);
  return 1.0;
}

}  // namespace detail

/// Sparse system matrix of one slice, shared by every z.
///
/// Each ray steps through the image one row (or column, whichever axis the ray
/// is closer to) at a time and linearly interpolates along the crossed row, as
/// in Joseph's method. The interpolated line integral is additionally averaged
/// over the detector bin, which has a closed form because the interpolant is
/// piecewise linear in the detector coordinate. A consequence is that every view
/// sees exactly the same total mass (sx * sy / det_spacing per unit voxel).
///
/// The adjoint uses the same stored weights, so <Ax, y> = <x, A^T y> up to
/// rounding.
class RadonProjector {
 public:
  using measurement_type = Sinogram;

  explicit RadonProjector(Geometry g) : geom_(std::move(g)) {
    geom_.validate();
    build();
  }

  const Geometry& geometry() const { return geom_; }
  std::size_t nnz() const { return cols_.size(); }

  Sinogram forward(const Volume& v) const {
    check_volume(v);
    Sinogram s(geom_.nz, geom_.angles, geom_.n_det);
    const std::size_t rays = geom_.n_views() * geom_.n_det;
    for (std::size_t z = 0; z < geom_.nz; ++z) {
      const double* img = v.data.data() + z * v.slice_size();
      double* out = s.data.data() + z * rays;
      for (std::size_t r = 0; r < rays; ++r) {
        double acc = 0.0;
        for (std::size_t k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) acc += weights_[k] * img[cols_[k]];
        out[r] = acc;
      }
    }
    return s;
  }

  Volume adjoint(const Sinogram& s) const {
    check_sinogram(s);
    Volume v({geom_.nz, geom_.ny, geom_.nx}, {1.0, geom_.sy, geom_.sx});
    const std::size_t rays = geom_.n_views() * geom_.n_det;
    for (std::size_t z = 0; z < geom_.nz; ++z) {
      double* img = v.data.data() + z * v.slice_size();
      const double* in = s.data.data() + z * rays;
      for (std::size_t r = 0; r < rays; ++r) {
        const double val = in[r];
        if (val == 0.0) continue;
        for (std::size_t k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) img[cols_[k]] += weights_[k] * val;
      }
    }
    return v;
  }

  /// A^T A v
  Volume normal(const Volume& v) const {
    Volume out = adjoint(forward(v));
    out.spacing = v.spacing;
    return out;
  }

 private:
  void check_volume(const Volume& v) const {
    if (v.nz() != geom_.nz || v.ny() != geom_.ny || v.nx() != geom_.nx)
      throw std::invalid_argument("volume dims do not match projector geometry");
  }
  void check_sinogram(const Sinogram& s) const {
    if (s.nz != geom_.nz || s.n_views != geom_.n_views() || s.n_det != geom_.n_det ||
        s.data.size() != s.nz * s.n_views * s.n_det)
      throw std::invalid_argument("sinogram dims do not match projector geometry");
  }

  void build() {
    const auto& g = geom_;
    const double cy = 0.5 * static_cast<double>(g.ny - 1);
    const double cx = 0.5 * static_cast<double>(g.nx - 1);
    const double cd = 0.5 * static_cast<double>(g.n_det - 1);
    const double scale = g.sx * g.sy / g.det_spacing;

    row_ptr_.assign(1, 0);
    for (double theta : g.angles) {
      const double c = std::cos(theta);
      const double s = std::sin(theta);
      const bool step_rows = std::abs(c) >= std::abs(s);
      for (std::size_t j = 0; j < g.n_det; ++j) {
        const double s_mid = (static_cast<double>(j) - cd) * g.det_spacing;
        const double s_lo = s_mid - 0.5 * g.det_spacing;
        const double s_hi = s_mid + 0.5 * g.det_spacing;
        if (step_rows) {
          // Ray: x(s, y) = s / c - y * tan(theta)
          const double tn = s / c;
          for (std::size_t iy = 0; iy < g.ny; ++iy) {
            const double y = (static_cast<double>(iy) - cy) * g.sy;
            double a = s_lo / c - y * tn;
            double b = s_hi / c - y * tn;
            if (a > b) std::swap(a, b);
            add_segment(iy, a / g.sx + cx, b / g.sx + cx, g.nx, scale, /*rows=*/true);
          }
        } else {
          // Ray: y(s, x) = s / sin - x * cot(theta)
          const double ct = c / s;
          for (std::size_t ix = 0; ix < g.nx; ++ix) {
            const double x = (static_cast<double>(ix) - cx) * g.sx;
            double a = s_lo / s - x * ct;
            double b = s_hi / s - x * ct;
            if (a > b) std::swap(a, b);
            add_segment(ix, a / g.sy + cy, b / g.sy + cy, g.ny, scale, /*rows=*/false);
          }
        }
        row_ptr_.push_back(cols_.size());
      }
    }
  }

  // Adds the tent-integrated weights of the interval [a, b] (in index units)
  // along row/column `fixed`. The integral over [a, b] is normalised by the
  // interval's preimage length, which is absorbed in `scale`.
  void add_segment(std::size_t fixed, double a, double b, std::size_t n, double scale, bool rows) {
    const long lo = static_cast<long>(std::floor(a)) - 1;
    const long hi = static_cast<long>(std::ceil(b)) + 1;
    for (long i = std::max(lo, 0L); i <= std::min(hi, static_cast<long>(n) - 1); ++i) {
      const double w = detail::tent_cdf(b - static_cast<double>(i)) - detail::tent_cdf(a - static_cast<double>(i));
      if (w <= 0.0) continue;
      const std::size_t col = rows ? fixed * geom_.nx + static_cast<std::size_t>(i)
                                   : static_cast<std::size_t>(i) * geom_.nx + fixed;
      cols_.push_back(col);
      weights_.push_back(scale * w);
    }
  }

  Geometry geom_;
  std::vector<std::size_t> row_ptr_;
  std::vector<std::size_t> cols_;
  std::vector<double> weights_;
};

inline Sinogram radon_forward(const Volume& v, const Geometry& g) { return RadonProjector(g).forward(v); }
inline Volume radon_adjoint(const Sinogram& s, const Geometry& g) { return RadonProjector(g).adjoint(s); }

/// A = I, used to run the solvers in pure denoising mode.
struct IdentityModel {
  using measurement_type = Volume;
  Volume forward(const Volume& v) const { return v; }
  Volume adjoint(const Volume& v) const { return v; }
  Volume normal(const Volume& v) const { return v; }
};

/// What the solvers need from a forward model.
template <typename M>
concept ForwardModel = requires(const M& m, const Volume& v, const typename M::measurement_type& y) {
  { m.forward(v) } -> std::same_as<typename M::measurement_type>;
  { m.adjoint(y) } -> std::same_as<Volume>;
  { m.normal(v) } -> std::same_as<Volume>;
};

// ---------------------------------------------------------------------------
// Finite differences

enum class Axis { z = 0, y = 1, x = 2 };

inline const char* axis_name(Axis a) {
  switch (a) {
    case Axis::z: return "z";
    case Axis::y: return "y";
    case Axis::x: return "x";
  }
  return "?";
}

/// Differences of a volume along one axis; that axis is one sample shorter.
struct GradField {
  Axis axis = Axis::x;
  Dims3 dims{0, 0, 0};
  std::vector<double> data;

  GradField() = default;
  GradField(Axis a, Dims3 d) : axis(a), dims(d), data(d[0] * d[1] * d[2], 0.0) {}

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
};

inline Dims3 grad_dims(const Dims3& src, Axis a) {
  Dims3 d = src;
  auto& n = d[static_cast<int>(a)];
  n = n > 0 ? n - 1 : 0;
  return d;
}

/// (D v)_i = v_i - v_{i+1} along `axis`, interior pairs only.
inline GradField diff_forward(const Volume& v, Axis axis) {
  GradField g(axis, grad_dims(v.dims, axis));
  if (g.empty()) return g;
  const auto [nz, ny, nx] = g.dims;
  const std::size_t stride = axis == Axis::x ? 1 : axis == Axis::y ? v.nx() : v.slice_size();
  std::size_t k = 0;
  for (std::size_t z = 0; z < nz; ++z)
    for (std::size_t y = 0; y < ny; ++y) {
      const double* src = v.data.data() + v.index(z, y, 0);
      for (std::size_t x = 0; x < nx; ++x, ++k) g.data[k] = src[x] - src[x + stride];
    }
  return g;
}

/// Exact transpose of diff_forward. `src_dims` is the shape of the volume the
/// field was taken from; an empty field maps to the zero volume.
inline Volume diff_adjoint(const GradField& g, const Dims3& src_dims, const Spacing3& spacing = {1.0, 1.0, 1.0}) {
  Volume v(src_dims, spacing);
  if (g.dims != grad_dims(src_dims, g.axis)) throw std::invalid_argument("gradient field shape mismatch");
  if (g.empty()) return v;
  const auto [nz, ny, nx] = g.dims;
  const std::size_t stride = g.axis == Axis::x ? 1 : g.axis == Axis::y ? v.nx() : v.slice_size();
  std::size_t k = 0;
  for (std::size_t z = 0; z < nz; ++z)
    for (std::size_t y = 0; y < ny; ++y) {
      double* dst = v.data.data() + v.index(z, y, 0);
      for (std::size_t x = 0; x < nx; ++x, ++k) {
        dst[x] += g.data[k];
        dst[x + stride] -= g.data[k];
      }
    }
  return v;
}

/// Stacked differences over a set of axes, e.g. D_xy = (D_x; D_y).
using GradStack = std::vector<GradField>;

inline GradStack diff_forward(const Volume& v, const std::vector<Axis>& axes) {
  GradStack out;
  out.reserve(axes.size());
  for (Axis a : axes) out.push_back(diff_forward(v, a));
  return out;
}

inline Volume diff_adjoint(const GradStack& gs, const Dims3& src_dims, const Spacing3& spacing = {1.0, 1.0, 1.0}) {
  Volume v(src_dims, spacing);
  for (const auto& g : gs) axpy(1.0, diff_adjoint(g, src_dims).data, v.data);
  return v;
}

inline GradStack zeros_like(const GradStack& gs) {
  GradStack out;
  for (const auto& g : gs) out.emplace_back(g.axis, g.dims);
  return out;
}

inline double l1_norm(const GradStack& gs) {
  double s = 0.0;
  for (const auto& g : gs)
    for (double v : g.data) s += std::abs(v);
  return s;
}

inline double dot(const GradStack& a, const GradStack& b) {
  if (a.size() != b.size()) throw std::invalid_argument("gradient stack size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += dot(a[i].data, b[i].data);
  return s;
}

/// Weights of the regularised normal operator
/// data * A^T A + rho1 * I + rho2 * sum_a D_a^T D_a.
struct NormalWeights {
  double data = 1.0;
  double rho1 = 0.0;
  double rho2 = 0.0;
  std::vector<Axis> axes;
};

template <ForwardModel Model>
Volume normal_apply(const Volume& v, const Model& model, const NormalWeights& w) {
  if (w.data < 0.0 || w.rho1 < 0.0 || w.rho2 < 0.0) throw std::invalid_argument("normal_apply: negative weight");
  Volume out = v.zeros_like();
  if (w.data != 0.0) axpy(w.data, model.normal(v).data, out.data);
  if (w.rho1 != 0.0) axpy(w.rho1, v.data, out.data);
  if (w.rho2 != 0.0)
    for (Axis a : w.axes) axpy(w.rho2, diff_adjoint(diff_forward(v, a), v.dims).data, out.data);
  return out;
}

}  // namespace cddm

#endif
