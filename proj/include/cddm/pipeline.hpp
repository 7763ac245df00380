// pipeline.hpp
//
// Cascaded reconstruction: a low-quality initial volume (ADMM, optionally
// refined by a coarse-resolution diffusion pass), noised to strength t0, then
// a descending DDIM loop where each step predicts x0, enforces data
// consistency with the direction-split ADMM, renoises with the same predicted
// noise, and hops down with either the base or the DM-tuned noise predictor.

#ifndef CDDM_PIPELINE_HPP
#define CDDM_PIPELINE_HPP

#include <chrono>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "denoiser.hpp"
#include "diffusion.hpp"
#include "grid.hpp"
#include "metrics.hpp"
#include "operators.hpp"
#include "solvers.hpp"

namespace cddm {

/// eps(x, t, c) over a whole volume, evaluated slice by slice.
using EpsProvider = std::function<Volume(const Volume& x, std::size_t t, Label c)>;

template <typename T>
EpsProvider provider_from(std::shared_ptr<const EpsNet<T>> net) {
  return [net](const Volume& x, std::size_t t, Label c) { return net->predict(x, t, c); };
}

/// theta_p (base) and theta_p' (DM fine-tuned).
struct NetPair {
  EpsProvider base;
  EpsProvider dm;
};

/// Data-consistency map: initial point -> consistent volume.
using Consistency3D = std::function<Volume(const Volume& x_init, const Sinogram& y)>;

enum class DirectionMode { xyz, z_only };
enum class Initializer { admm, coarse_diffusion };

inline SplitAxes split_for(DirectionMode m) { return m == DirectionMode::xyz ? split_xy_z() : split_z_only(); }

struct CddmConfig {
  double t0 = 0.5;
  std::size_t infer_steps = 50;
  bool dm_enabled = true;
  AdmmParams consistency{0.01, 10.0, 50.0, 0.2, 10, 30, 1e-6, true};
  DirectionMode directions = DirectionMode::xyz;
  AdmmParams low_quality{2.0, 0.8, 150.0, 1.2, 50, 30, 1e-6};
  Initializer initializer = Initializer::admm;
  std::size_t coarse_factor = 4;
  std::size_t coarse_steps = 10;  // DDIM steps of the coarse pass; 0 = plain resampling
  double coarse_t0 = 0.3;
  std::uint64_t seed = 0;

  /// tau_p = trained_T / infer_steps
  std::size_t interval(const Schedule& s) const { return s.T() / infer_steps; }

  void validate(const Schedule& s) const {
    if (!(t0 > 0.0 && t0 < 1.0)) throw std::invalid_argument("t0 must lie in (0, 1)");
    if (infer_steps == 0 || s.T() % infer_steps != 0)
      throw std::invalid_argument("infer_steps must divide the trained step count");
    if (initializer == Initializer::coarse_diffusion) {
      if (coarse_factor == 0) throw std::invalid_argument("coarse_factor must be positive");
      if (coarse_steps > 0 && s.T() % coarse_steps != 0)
        throw std::invalid_argument("coarse_steps must divide the trained step count");
      if (coarse_steps > 0 && !(coarse_t0 > 0.0 && coarse_t0 < 1.0))
        throw std::invalid_argument("coarse_t0 must lie in (0, 1)");
    }
    consistency.validate();
    low_quality.validate();
  }
};

/// K = t0 * T rounded, then snapped down onto the tau grid.
inline std::size_t start_step(double t0, std::size_t trained_T, std::size_t tau) {
  const auto K = static_cast<std::size_t>(std::llround(t0 * static_cast<double>(trained_T)));
  return (K / tau) * tau;
}

struct StepRecord {
  std::size_t k = 0;
  double psnr_pre = std::numeric_limits<double>::quiet_NaN();   // x0 estimate before consistency
  double psnr_post = std::numeric_limits<double>::quiet_NaN();  // after consistency
  double consistency_objective = 0.0;
  double seconds = 0.0;
};

struct ReconTrace {
  std::vector<StepRecord> steps;
};

inline void write_trace_csv(const ReconTrace& t, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "k,psnr_pre,psnr_post,consistency_objective,seconds\n" << std::setprecision(10);
  for (const auto& r : t.steps)
    os << r.k << ',' << r.psnr_pre << ',' << r.psnr_post << ',' << r.consistency_objective << ',' << r.seconds
       << '\n';
}

/// Default consistency: direction-split ADMM with the given profile and split.
inline Consistency3D admm_consistency(std::shared_ptr<const RadonProjector> projector, AdmmParams params,
                                      DirectionMode mode) {
  return [projector, params, mode](const Volume& x_init, const Sinogram& y) {
    return specialized_admm(*projector, y, params, x_init, split_for(mode));
  };
}

inline Consistency3D identity_consistency() {
  return [](const Volume& x, const Sinogram&) { return x; };
}

// ---------------------------------------------------------------------------
// Resampling for the coarse cascade stage

/// In-plane mean pooling by `f` (trailing rows/columns that do not fill a block are dropped).
inline Volume downsample_mean(const Volume& v, std::size_t f) {
  if (f == 0 || v.ny() < f || v.nx() < f) throw std::invalid_argument("downsample factor too large");
  const std::size_t ny = v.ny() / f, nx = v.nx() / f;
  Volume out({v.nz(), ny, nx}, {v.spacing[0], v.spacing[1] * static_cast<double>(f), v.spacing[2] * static_cast<double>(f)});
  const double inv = 1.0 / static_cast<double>(f * f);
  for (std::size_t z = 0; z < v.nz(); ++z)
    for (std::size_t y = 0; y < ny; ++y)
      for (std::size_t x = 0; x < nx; ++x) {
        double s = 0.0;
        for (std::size_t dy = 0; dy < f; ++dy)
          for (std::size_t dx = 0; dx < f; ++dx) s += v.at(z, y * f + dy, x * f + dx);
        out.at(z, y, x) = s * inv;
      }
  return out;
}

/// In-plane linear interpolation onto a (ny, nx) grid, pixel centres aligned,
/// edge values held constant.
inline Volume upsample_linear(const Volume& v, std::size_t ny, std::size_t nx, const Spacing3& spacing) {
  Volume out({v.nz(), ny, nx}, spacing);
  const double fy = static_cast<double>(v.ny()) / static_cast<double>(ny);
  const double fx = static_cast<double>(v.nx()) / static_cast<double>(nx);
  auto coord = [](double pos, std::size_t n, std::size_t& i0, std::size_t& i1, double& w) {
    pos = std::clamp(pos, 0.0, static_cast<double>(n - 1));
    i0 = static_cast<std::size_t>(std::floor(pos));
    i1 = std::min(i0 + 1, n - 1);
    w = pos - static_cast<double>(i0);
  };
  for (std::size_t z = 0; z < v.nz(); ++z)
    for (std::size_t y = 0; y < ny; ++y) {
      std::size_t y0, y1;
      double wy;
      coord((static_cast<double>(y) + 0.5) * fy - 0.5, v.ny(), y0, y1, wy);
      for (std::size_t x = 0; x < nx; ++x) {
        std::size_t x0, x1;
        double wx;
        coord((static_cast<double>(x) + 0.5) * fx - 0.5, v.nx(), x0, x1, wx);
        const double top = (1 - wx) * v.at(z, y0, x0) + wx * v.at(z, y0, x1);
        const double bot = (1 - wx) * v.at(z, y1, x0) + wx * v.at(z, y1, x1);
        out.at(z, y, x) = (1 - wy) * top + wy * bot;
      }
    }
  return out;
}

// ---------------------------------------------------------------------------

/// Low-quality initial volume. ADMM mode runs the split solver from A^T y with
/// the low-quality profile; the coarse mode then pools that result, runs a
/// short SDEdit-style DDIM pass at the coarse scale and upsamples.
inline Volume init_low_quality(const Sinogram& y, const RadonProjector& projector, const CddmConfig& cfg,
                               const Schedule& sched, const EpsProvider* base = nullptr,
                               Rng* rng = nullptr) {
  const Volume aty = projector.adjoint(y);
  Volume x = specialized_admm3d(projector, y, cfg.low_quality, aty);
  if (cfg.initializer == Initializer::admm) return x;

  Volume coarse = downsample_mean(x, cfg.coarse_factor);
  if (cfg.coarse_steps > 0) {
    if (!base || !rng) throw std::invalid_argument("coarse initializer needs a noise predictor and an Rng");
    const std::size_t tau = sched.T() / cfg.coarse_steps;
    const std::size_t K = start_step(cfg.coarse_t0, sched.T(), tau);
    if (K >= tau) {
      Volume xk = q_sample(coarse, K, randn_like(*rng, coarse), sched);
      for (std::size_t k : step_grid(K, tau)) xk = ddim_step(xk, k, k - tau, (*base)(xk, k, Label::c1), sched);
      coarse = std::move(xk);
    }
  }
  return upsample_linear(coarse, x.ny(), x.nx(), x.spacing);
}

struct StepOutput {
  Volume x_prev;     // x_{k - tau}
  Volume x0_hat;     // network estimate before consistency
  Volume x0_recon;   // after consistency
  Volume x_k_recon;  // renoised consistent estimate
};

/// One reconstruction step from x_k to x_{k - tau}.
inline StepOutput one_step_recon(const Volume& x_k, std::size_t k, std::size_t k_prev, const NetPair& nets,
                                 const Sinogram& y, const Consistency3D& consistency, const Schedule& sched,
                                 bool dm_enabled) {
  StepOutput o;
  const Volume eps = nets.base(x_k, k, Label::c1);
  o.x0_hat = predict_x0(x_k, k, eps, sched);
  o.x0_recon = consistency(o.x0_hat, y);
  if (!all_finite(o.x0_recon.data))
    throw std::runtime_error("data consistency produced non-finite values at step " + std::to_string(k));
  o.x_k_recon = q_sample(o.x0_recon, k, eps, sched);
  const Volume eps2 = dm_enabled ? nets.dm(o.x_k_recon, k, Label::c2) : nets.base(o.x_k_recon, k, Label::c1);
  o.x_prev = ddim_step(o.x_k_recon, k, k_prev, eps2, sched);
  return o;
}

struct CddmResult {
  Volume volume;
  ReconTrace trace;
  Volume initial;  // the low-quality volume the loop started from
  std::vector<std::size_t> executed_steps;
};

/// Full reconstruction. `ground_truth`, when given, fills the PSNR columns of
/// the trace. `consistency` overrides the default ADMM map (used by tests).
inline CddmResult cddm_reconstruct(const Sinogram& y, std::shared_ptr<const RadonProjector> projector,
                                   const NetPair& nets, const CddmConfig& cfg, const Schedule& sched, Rng& rng,
                                   const Volume* ground_truth = nullptr,
                                   std::optional<Consistency3D> consistency = std::nullopt,
                                   std::optional<Volume> initial = std::nullopt) {
  cfg.validate(sched);
  const Consistency3D dc = consistency ? *consistency : admm_consistency(projector, cfg.consistency, cfg.directions);
  const std::size_t tau = cfg.interval(sched);
  const std::size_t K = start_step(cfg.t0, sched.T(), tau);
  if (K < tau) throw std::invalid_argument("t0 too small for the step interval");

  CddmResult res;
  Rng init_rng = rng.split(1);
  res.initial = initial ? *initial : init_low_quality(y, *projector, cfg, sched, &nets.base, &init_rng);
  Volume x = q_sample(res.initial, K, randn_like(rng, res.initial), sched);

  for (std::size_t k : step_grid(K, tau)) {
    const auto t_start = std::chrono::steady_clock::now();
    StepOutput o = one_step_recon(x, k, k - tau, nets, y, dc, sched, cfg.dm_enabled);
    StepRecord rec;
    rec.k = k;
    if (ground_truth) {
      rec.psnr_pre = psnr(o.x0_hat, *ground_truth, 1.0).db;
      rec.psnr_post = psnr(o.x0_recon, *ground_truth, 1.0).db;
    }
    rec.consistency_objective = tv_objective(*projector, y, o.x0_recon, cfg.consistency.lambda);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    res.trace.steps.push_back(rec);
    res.executed_steps.push_back(k);
    x = std::move(o.x_prev);
  }
  res.volume = std::move(x);
  return res;
}

}  // namespace cddm

#endif
