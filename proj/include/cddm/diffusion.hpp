// diffusion.hpp
//
// Noise schedule, forward noising, x0 prediction and the DDIM / DDPM reverse
// steps. Timesteps are 1-based; alpha_bar(0) is defined as 1 so that a hop to
// t = 0 returns the clean estimate.

#ifndef CDDM_DIFFUSION_HPP
#define CDDM_DIFFUSION_HPP

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "grid.hpp"

namespace cddm {

class Schedule {
 public:
  /// Linear beta schedule from beta_1 to beta_T.
  static Schedule linear(std::size_t T, double beta_1 = 1e-4, double beta_T = 0.02) {
    if (T < 1) throw std::invalid_argument("schedule needs T >= 1");
    if (!(beta_1 > 0.0 && beta_1 <= beta_T && beta_T < 1.0))
      throw std::invalid_argument("schedule needs 0 < beta_1 <= beta_T < 1");
    Schedule s;
    s.beta_1_ = beta_1;
    s.beta_T_ = beta_T;
    s.beta_.resize(T);
    s.alpha_bar_.resize(T + 1);
    s.alpha_bar_[0] = 1.0;
    for (std::size_t t = 1; t <= T; ++t) {
      const double frac = T == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(T - 1);
      s.beta_[t - 1] = beta_1 + frac * (beta_T - beta_1);
      s.alpha_bar_[t] = s.alpha_bar_[t - 1] * (1.0 - s.beta_[t - 1]);
    }
    return s;
  }

  std::size_t T() const { return beta_.size(); }
  double beta_first() const { return beta_1_; }
  double beta_last() const { return beta_T_; }

  double beta(std::size_t t) const { return beta_.at(check(t, 1) - 1); }
  double alpha(std::size_t t) const { return 1.0 - beta(t); }
  double alpha_bar(std::size_t t) const { return alpha_bar_.at(check(t, 0)); }

  /// Posterior variance (1 - abar_{t-1}) / (1 - abar_t) * beta_t used by the
  /// stochastic DDPM step; zero at t = 1.
  double ddpm_variance(std::size_t t) const {
    check(t, 1);
    return (1.0 - alpha_bar_[t - 1]) / (1.0 - alpha_bar_[t]) * beta_[t - 1];
  }

  /// Stable identifier for checkpoint manifests.
  std::string hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto feed = [&h](std::uint64_t v) {
      for (int i = 0; i < 8; ++i) {
        h ^= (v >> (8 * i)) & 0xFF;
        h *= 1099511628211ULL;
      }
    };
    feed(T());
    for (double b : beta_) feed(std::bit_cast<std::uint64_t>(b));
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
  }

 private:
  std::size_t check(std::size_t t, std::size_t lo) const {
    if (t < lo || t > T())
      throw std::out_of_range("timestep " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " +
                              std::to_string(T()) + "]");
    return t;
  }

  double beta_1_ = 0.0;
  double beta_T_ = 0.0;
  std::vector<double> beta_;
  std::vector<double> alpha_bar_;
};

namespace detail {
inline void require_same(const Volume& a, const Volume& b, const char* what) {
  if (!a.same_shape(b)) throw std::invalid_argument(std::string(what) + ": shape mismatch");
}
}  // namespace detail

/// sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
inline Volume q_sample(const Volume& x0, std::size_t t, const Volume& eps, const Schedule& s) {
  if (t < 1) throw std::out_of_range("q_sample needs t >= 1");
  detail::require_same(x0, eps, "q_sample");
  const double a = std::sqrt(s.alpha_bar(t));
  const double b = std::sqrt(1.0 - s.alpha_bar(t));
  Volume out = x0;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a * x0.data[i] + b * eps.data[i];
  return out;
}

/// (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)
inline Volume predict_x0(const Volume& x_t, std::size_t t, const Volume& eps_hat, const Schedule& s) {
  if (t < 1) throw std::out_of_range("predict_x0 needs t >= 1");
  detail::require_same(x_t, eps_hat, "predict_x0");
  const double a = std::sqrt(s.alpha_bar(t));
  const double b = std::sqrt(1.0 - s.alpha_bar(t));
  Volume out = x_t;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = (x_t.data[i] - b * eps_hat.data[i]) / a;
  return out;
}

/// Generalised DDIM hop from t to t_prev:
///   sqrt(abar_prev) x0_hat + sqrt(1 - abar_prev - sigma^2) eps_hat + sigma * noise.
/// `noise` is required iff sigma > 0.
inline Volume ddim_step(const Volume& x_t, std::size_t t, std::size_t t_prev, const Volume& eps_hat,
                        const Schedule& s, double sigma = 0.0, const Volume* noise = nullptr) {
  if (!(t_prev < t)) throw std::invalid_argument("ddim_step needs t_prev < t");
  const double ab_prev = s.alpha_bar(t_prev);
  if (!(sigma >= 0.0) || sigma * sigma > (1.0 - ab_prev) * (1.0 + 1e-12) + 1e-300)
    throw std::invalid_argument("ddim_step: sigma outside [0, sqrt(1 - abar_prev)]");
  if (sigma > 0.0) {
    if (!noise) throw std::invalid_argument("ddim_step: sigma > 0 needs a noise volume");
    detail::require_same(x_t, *noise, "ddim_step");
  }
  const Volume x0 = predict_x0(x_t, t, eps_hat, s);
  const double a = std::sqrt(ab_prev);
  const double b = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
  Volume out = x0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.data[i] = a * x0.data[i] + b * eps_hat.data[i];
    if (sigma > 0.0) out.data[i] += sigma * noise->data[i];
  }
  return out;
}

inline Volume ddim_step(const Volume& x_t, std::size_t t, std::size_t t_prev, const Volume& eps_hat,
                        const Schedule& s, double sigma, Rng& rng) {
  if (sigma == 0.0) return ddim_step(x_t, t, t_prev, eps_hat, s);
  const Volume noise = randn_like(rng, x_t);
  return ddim_step(x_t, t, t_prev, eps_hat, s, sigma, &noise);
}

/// Ancestral DDPM step t -> t-1 with mean
///   (x_t - beta_t / sqrt(1 - abar_t) eps_hat) / sqrt(alpha_t)
/// and standard deviation sqrt(ddpm_variance(t)); no noise at t = 1.
inline Volume ddpm_step(const Volume& x_t, std::size_t t, const Volume& eps_hat, const Schedule& s,
                        const Volume& noise) {
  if (t < 1 || t > s.T()) throw std::out_of_range("ddpm_step: timestep out of range");
  detail::require_same(x_t, eps_hat, "ddpm_step");
  const double coef = s.beta(t) / std::sqrt(1.0 - s.alpha_bar(t));
  const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha(t));
  const double sigma = t > 1 ? std::sqrt(s.ddpm_variance(t)) : 0.0;
  if (sigma > 0.0) detail::require_same(x_t, noise, "ddpm_step");
  Volume out = x_t;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.data[i] = inv_sqrt_alpha * (x_t.data[i] - coef * eps_hat.data[i]);
    if (sigma > 0.0) out.data[i] += sigma * noise.data[i];
  }
  return out;
}

inline Volume ddpm_step(const Volume& x_t, std::size_t t, const Volume& eps_hat, const Schedule& s, Rng& rng) {
  if (t <= 1) return ddpm_step(x_t, t, eps_hat, s, x_t);
  return ddpm_step(x_t, t, eps_hat, s, randn_like(rng, x_t));
}

/// Weight on the consistency error in the discrepancy-mitigation target:
/// min(sqrt(abar_t / (1 - abar_t)), lambda_max).
inline double dm_coefficient(const Schedule& s, std::size_t t, double lambda_max) {
  if (!(lambda_max > 0.0)) throw std::invalid_argument("lambda_max must be positive");
  const double ab = s.alpha_bar(t);
  return std::min(std::sqrt(ab / (1.0 - ab)), lambda_max);
}

/// Descending step grid {K, K - tau, ..., tau}.
inline std::vector<std::size_t> step_grid(std::size_t K, std::size_t tau) {
  if (tau == 0) throw std::invalid_argument("step interval must be positive");
  std::vector<std::size_t> ks;
  for (std::size_t k = K; k >= tau; k -= tau) ks.push_back(k);
  return ks;
}

}  // namespace cddm

#endif
