// solvers.hpp
//
// Soft thresholding, matrix-free conjugate gradients, and the ADMM solvers for
//
//   min_x 1/2 ||y - A x||^2 + lambda * sum_a ||D_a x||_1
//
// in two flavours: the standard one that treats all difference directions as
// one block, and the direction-split one that carries two copies h = v of the
// image, each penalising a different subset of directions.

#ifndef CDDM_SOLVERS_HPP
#define CDDM_SOLVERS_HPP

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "grid.hpp"
#include "operators.hpp"

namespace cddm {

/// S_k(a) = (a - k)_+ - (-a - k)_+
inline double soft_threshold(double a, double kappa) {
  if (a > kappa) return a - kappa;
  if (a < -kappa) return a + kappa;
  return 0.0;
}

inline std::vector<double> soft_threshold(std::span<const double> a, double kappa) {
  if (!(kappa >= 0.0)) throw std::invalid_argument("soft_threshold: negative threshold");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = soft_threshold(a[i], kappa);
  return out;
}

// ---------------------------------------------------------------------------
// Conjugate gradients

struct CgResult {
  std::vector<double> x;
  std::size_t iters = 0;
  double residual = 0.0;                 // final ||apply(x) - b||_2 (recursive estimate)
  std::vector<double> residual_history;  // entry 0 is the initial residual
};

using LinearMap = std::function<std::vector<double>(std::span<const double>)>;

/// Solves apply(x) = b for symmetric positive definite `apply`, starting from x0.
/// Stops once ||r|| <= tol * ||b|| or after max_iters iterations.
inline CgResult cg_solve(const LinearMap& apply, std::span<const double> b, std::span<const double> x0,
                         double tol, std::size_t max_iters) {
  if (b.size() != x0.size()) throw std::invalid_argument("cg_solve: b and x0 lengths differ");
  CgResult res;
  res.x.assign(x0.begin(), x0.end());

  const double b_norm = norm2(b);
  std::vector<double> r(b.begin(), b.end());
  {
    const auto ax = apply(res.x);
    axpy(-1.0, ax, r);
  }
  double rr = dot(r, r);
  res.residual = std::sqrt(rr);
  res.residual_history.push_back(res.residual);
  if (!std::isfinite(rr)) throw std::runtime_error("cg_solve: non-finite initial residual");
  if (res.residual <= tol * b_norm) return res;

  std::vector<double> p = r;
  while (res.iters < max_iters) {
    ++res.iters;
    const auto q = apply(p);
    const double pq = dot(p, q);
    if (!std::isfinite(pq))
      throw std::runtime_error("cg_solve: non-finite value at iteration " + std::to_string(res.iters));
    if (pq <= 0.0) {
      if (rr == 0.0) break;
      throw std::runtime_error("cg_solve: operator not positive definite at iteration " +
                               std::to_string(res.iters));
    }
    const double alpha = rr / pq;
    axpy(alpha, p, res.x);
    axpy(-alpha, q, r);
    const double rr_new = dot(r, r);
    if (!std::isfinite(rr_new))
      throw std::runtime_error("cg_solve: non-finite residual at iteration " + std::to_string(res.iters));
    res.residual = std::sqrt(rr_new);
    res.residual_history.push_back(res.residual);
    if (res.residual <= tol * b_norm) break;
    const double beta = rr_new / rr;
    rr = rr_new;
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = r[i] + beta * p[i];
  }
  return res;
}

/// Volume-shaped convenience wrapper.
inline Volume cg_solve(const std::function<Volume(const Volume&)>& apply, const Volume& b, const Volume& x0,
                       double tol, std::size_t max_iters, std::size_t* iters = nullptr) {
  Volume scratch = b.zeros_like();
  LinearMap flat = [&](std::span<const double> in) {
    scratch.data.assign(in.begin(), in.end());
    return apply(scratch).data;
  };
  auto res = cg_solve(flat, b.data, x0.data, tol, max_iters);
  if (iters) *iters = res.iters;
  Volume out = b.zeros_like();
  out.data = std::move(res.x);
  return out;
}

// ---------------------------------------------------------------------------
// ADMM

struct AdmmParams {
  double rho1 = 1.0;
  double rho2 = 1.0;
  double rho3 = 1.0;
  double lambda = 0.1;
  std::size_t K = 10;
  std::size_t cg_iters = 30;
  double cg_tol = 1e-6;
  bool warm_split = false;  // seed z with D x_init instead of zero

  void validate() const {
    if (!(rho1 > 0.0 && rho2 > 0.0 && rho3 > 0.0)) throw std::invalid_argument("ADMM penalties must be positive");
    if (!(lambda >= 0.0)) throw std::invalid_argument("ADMM lambda must be non-negative");
    if (K < 1) throw std::invalid_argument("ADMM needs K >= 1");
  }
};

/// Per-outer-iteration diagnostics.
struct AdmmTrace {
  std::vector<double> objective;
  std::vector<double> primal_residual;  // ||D x - z|| (both blocks for the split solver)
  std::vector<double> split_gap;        // ||h - v||, split solver only
};

inline void write_trace_csv(const AdmmTrace& t, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "iter,objective,primal_residual,split_gap\n" << std::setprecision(17);
  for (std::size_t i = 0; i < t.objective.size(); ++i) {
    os << i + 1 << ',' << t.objective[i] << ',' << t.primal_residual[i] << ','
       << (i < t.split_gap.size() ? t.split_gap[i] : 0.0) << '\n';
  }
}

inline const std::vector<Axis>& all_axes() {
  static const std::vector<Axis> a{Axis::x, Axis::y, Axis::z};
  return a;
}

/// 1/2 ||y - A x||^2 + lambda * sum_a ||D_a x||_1
template <ForwardModel Model>
double tv_objective(const Model& model, const typename Model::measurement_type& y, const Volume& x, double lambda,
                    const std::vector<Axis>& axes = all_axes()) {
  const auto ax = model.forward(x);
  double fid = 0.0;
  for (std::size_t i = 0; i < ax.data.size(); ++i) {
    const double d = y.data[i] - ax.data[i];
    fid += d * d;
  }
  return 0.5 * fid + lambda * l1_norm(diff_forward(x, axes));
}

namespace detail {

inline void shrink_update(GradStack& z, GradStack& s, const GradStack& dx, double kappa, double* primal_sq) {
  for (std::size_t a = 0; a < z.size(); ++a) {
    auto& zd = z[a].data;
    auto& sd = s[a].data;
    const auto& dd = dx[a].data;
    for (std::size_t i = 0; i < zd.size(); ++i) {
      zd[i] = soft_threshold(dd[i] + sd[i], kappa);
      const double r = dd[i] - zd[i];
      sd[i] += r;
      if (primal_sq) *primal_sq += r * r;
    }
  }
}

// D^T (z - s)
inline Volume diff_adjoint_of_difference(const GradStack& z, const GradStack& s, const Volume& like) {
  GradStack d = z;
  for (std::size_t a = 0; a < d.size(); ++a) axpy(-1.0, s[a].data, d[a].data);
  return diff_adjoint(d, like.dims, like.spacing);
}

inline void require_finite(const Volume& v, const char* what, std::size_t k) {
  if (!all_finite(v.data))
    throw std::runtime_error(std::string("ADMM: non-finite ") + what + " at outer iteration " + std::to_string(k));
}

}  // namespace detail

/// Standard ADMM with a single split z = D x over `axes` and penalty rho.
template <ForwardModel Model>
Volume standard_admm(const Model& model, const typename Model::measurement_type& y, double rho, double lambda,
                     std::size_t K, const Volume& x_init, const std::vector<Axis>& axes = all_axes(),
                     std::size_t cg_iters = 30, double cg_tol = 1e-6, AdmmTrace* trace = nullptr) {
  if (!(rho > 0.0) || !(lambda >= 0.0) || K < 1) throw std::invalid_argument("standard_admm: bad parameters");
  Volume x = x_init;
  GradStack z = zeros_like(diff_forward(x, axes));
  GradStack u = zeros_like(z);
  const Volume aty = model.adjoint(y);
  const NormalWeights nw{1.0, 0.0, rho, axes};
  auto apply = [&](const Volume& v) { return normal_apply(v, model, nw); };

  for (std::size_t k = 1; k <= K; ++k) {
    Volume b = aty;
    axpy(rho, detail::diff_adjoint_of_difference(z, u, x).data, b.data);
    x = cg_solve(apply, b, x, cg_tol, cg_iters);
    detail::require_finite(x, "x", k);
    double primal_sq = 0.0;
    detail::shrink_update(z, u, diff_forward(x, axes), lambda / rho, &primal_sq);
    if (trace) {
      trace->objective.push_back(tv_objective(model, y, x, lambda, axes));
      trace->primal_residual.push_back(std::sqrt(primal_sq));
    }
  }
  return x;
}

template <ForwardModel Model>
Volume standard_admm(const Model& model, const typename Model::measurement_type& y, const AdmmParams& p,
                     const Volume& x_init, AdmmTrace* trace = nullptr) {
  p.validate();
  return standard_admm(model, y, p.rho2, p.lambda, p.K, x_init, all_axes(), p.cg_iters, p.cg_tol, trace);
}

/// Which difference directions each image copy penalises.
struct SplitAxes {
  std::vector<Axis> h;  // handled together with the data term
  std::vector<Axis> v;  // handled in the pure-prior copy
};

inline SplitAxes split_xy_z() { return {{Axis::x, Axis::y}, {Axis::z}}; }
inline SplitAxes split_x_y() { return {{Axis::x}, {Axis::y}}; }
inline SplitAxes split_z_only() { return {{}, {Axis::z}}; }

/// Split variables of the direction-split ADMM.
struct AdmmState {
  Volume h, v, w;
  GradStack z_h, s_h, z_v, s_v;

  static AdmmState fresh(const Volume& x_init, const SplitAxes& split, bool warm_split = false) {
    AdmmState st;
    st.h = x_init;
    st.v = x_init;
    st.w = x_init.zeros_like();
    st.z_h = diff_forward(x_init, split.h);
    st.z_v = diff_forward(x_init, split.v);
    if (!warm_split) {
      st.z_h = zeros_like(st.z_h);
      st.z_v = zeros_like(st.z_v);
    }
    st.s_h = zeros_like(st.z_h);
    st.s_v = zeros_like(st.z_v);
    return st;
  }
};

/// Direction-split ADMM. Each outer iteration runs one inner ADMM pass on the
/// h-copy (data term + D_h prior, shrink at lambda/rho2), one on the v-copy
/// (D_v prior, shrink at lambda/(rho1*rho3)), then the consensus dual update.
/// Both linear systems are solved with CG. Returns h.
template <ForwardModel Model>
Volume specialized_admm(const Model& model, const typename Model::measurement_type& y, const AdmmParams& p,
                        const Volume& x_init, const SplitAxes& split, AdmmTrace* trace = nullptr,
                        AdmmState* state_out = nullptr) {
  p.validate();
  AdmmState st = AdmmState::fresh(x_init, split, p.warm_split);
  const Volume aty = model.adjoint(y);

  const NormalWeights h_weights{1.0, p.rho1, p.rho2, split.h};
  const NormalWeights v_weights{0.0, 1.0, p.rho3, split.v};
  auto apply_h = [&](const Volume& u) { return normal_apply(u, model, h_weights); };
  auto apply_v = [&](const Volume& u) { return normal_apply(u, model, v_weights); };
  const double kappa_h = p.lambda / p.rho2;
  const double kappa_v = p.lambda / (p.rho1 * p.rho3);

  for (std::size_t k = 1; k <= p.K; ++k) {
    // h-block
    Volume b_h = aty;
    for (std::size_t i = 0; i < b_h.size(); ++i) b_h.data[i] -= p.rho1 * (st.w.data[i] - st.v.data[i]);
    if (!split.h.empty()) axpy(p.rho2, detail::diff_adjoint_of_difference(st.z_h, st.s_h, st.h).data, b_h.data);
    st.h = cg_solve(apply_h, b_h, st.h, p.cg_tol, p.cg_iters);
    detail::require_finite(st.h, "h", k);
    double primal_sq = 0.0;
    detail::shrink_update(st.z_h, st.s_h, diff_forward(st.h, split.h), kappa_h, &primal_sq);

    // v-block
    Volume b_v = st.h;
    axpy(1.0, st.w.data, b_v.data);
    axpy(p.rho3, detail::diff_adjoint_of_difference(st.z_v, st.s_v, st.v).data, b_v.data);
    st.v = cg_solve(apply_v, b_v, st.v, p.cg_tol, p.cg_iters);
    detail::require_finite(st.v, "v", k);
    detail::shrink_update(st.z_v, st.s_v, diff_forward(st.v, split.v), kappa_v, &primal_sq);

    double gap_sq = 0.0;
    for (std::size_t i = 0; i < st.w.size(); ++i) {
      const double r = st.h.data[i] - st.v.data[i];
      st.w.data[i] += r;
      gap_sq += r * r;
    }
    if (trace) {
      std::vector<Axis> all = split.h;
      all.insert(all.end(), split.v.begin(), split.v.end());
      trace->objective.push_back(tv_objective(model, y, st.h, p.lambda, all));
      trace->primal_residual.push_back(std::sqrt(primal_sq));
      trace->split_gap.push_back(std::sqrt(gap_sq));
    }
  }
  if (state_out) *state_out = st;
  return st.h;
}

/// xy-plane prior on h, z prior on v: the 3D data-consistency solver.
template <ForwardModel Model>
Volume specialized_admm3d(const Model& model, const typename Model::measurement_type& y, const AdmmParams& p,
                          const Volume& x_init, AdmmTrace* trace = nullptr) {
  return specialized_admm(model, y, p, x_init, split_xy_z(), trace);
}

/// Single-slice variant used in training: D_x on h, D_y on v.
template <ForwardModel Model>
Volume specialized_admm2d(const Model& model, const typename Model::measurement_type& y, const AdmmParams& p,
                          const Volume& x_init, AdmmTrace* trace = nullptr) {
  if (x_init.nz() != 1) throw std::invalid_argument("specialized_admm2d expects a single slice");
  return specialized_admm(model, y, p, x_init, split_x_y(), trace);
}

}  // namespace cddm

#endif
