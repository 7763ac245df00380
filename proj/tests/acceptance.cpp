// Acceptance driver: one PASS/FAIL line per criterion.
//
//   acceptance [--work DIR] [--config FILE] [--only N,...]
//
// Criteria 7-9 train (or reuse from DIR) the desk-scale networks described by
// the config; everything else is self-contained.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "cddm/cddm.hpp"

#ifndef CDDM_SOURCE_DIR
#define CDDM_SOURCE_DIR "."
#endif

namespace fs = std::filesystem;
using namespace cddm;

namespace {

// Pinned tolerances and budgets.
constexpr double kAdjointTol = 1e-10;
constexpr double kAdjointSeconds = 10.0;
constexpr double kCgTol = 1e-8;
constexpr double kCgSeconds = 1.0;
constexpr double kObjectiveRelTol = 0.005;
constexpr double kSolverSeconds = 120.0;
constexpr double kAlgebraTol = 1e-10;
constexpr double kAlgebraSeconds = 5.0;
constexpr double kGradRelTol = 1e-3;
constexpr double kGradSeconds = 30.0;
constexpr double kCollapseRelTol = 1e-12;  // equality up to rounding
constexpr double kCollapseSeconds = 5.0;
constexpr double kOrderingGapDb = 0.2;
constexpr std::size_t kOrderingMinPhantoms = 4;
constexpr double kEndToEndSeconds = 2 * 3600.0;

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string fmt(double v, int prec = 3) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// 1 ------------------------------------------------------------------------

Outcome adjoint_check() {
  Rng rng(101);
  double worst = 0.0;
  for (std::size_t n : {32, 64})
    for (std::size_t views : {4, 8, 16}) {
      const Volume like({1, n, n});
      const RadonProjector A(Geometry::for_volume(like, views));
      for (int trial = 0; trial < 20; ++trial) {
        const Volume x = randn_like(rng, like);
        Sinogram y = A.forward(like);
        y.data = randn(rng, y.data.size());
        const Sinogram ax = A.forward(x);
        const double lhs = dot(ax.data, y.data), rhs = dot(x.data, A.adjoint(y).data);
        worst = std::max(worst, std::abs(lhs - rhs) / (norm2(ax.data) * norm2(y.data)));
      }
    }
  return {worst < kAdjointTol, "max normalised mismatch " + fmt(worst)};
}

// 2 ------------------------------------------------------------------------

std::vector<double> dense_solve(std::vector<double> a, std::vector<double> b) {
  const std::size_t n = b.size();
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a[r * n + c]) > std::abs(a[piv * n + c])) piv = r;
    for (std::size_t k = 0; k < n; ++k) std::swap(a[c * n + k], a[piv * n + k]);
    std::swap(b[c], b[piv]);
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = a[r * n + c] / a[c * n + c];
      for (std::size_t k = c; k < n; ++k) a[r * n + k] -= f * a[c * n + k];
      b[r] -= f * b[c];
    }
  }
  std::vector<double> x(n);
  for (std::size_t i = n; i-- > 0;) {
    double s = b[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= a[i * n + k] * x[k];
    x[i] = s / a[i * n + i];
  }
  return x;
}

Outcome cg_check() {
  Rng rng(202);
  double worst = 0.0;
  for (int sys = 0; sys < 10; ++sys) {
    const std::size_t n = 8 + 6 * static_cast<std::size_t>(sys);  // 8 .. 62
    std::vector<double> m(n * n), a(n * n);
    for (auto& v : m) v = rng.normal();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = i == j ? 1.0 : 0.0;
        for (std::size_t k = 0; k < n; ++k) s += m[k * n + i] * m[k * n + j];
        a[i * n + j] = s;
      }
    const auto b = randn(rng, n);
    const LinearMap apply = [&a, n](std::span<const double> x) {
      std::vector<double> y(n, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) y[i] += a[i * n + j] * x[j];
      return y;
    };
    const auto res = cg_solve(apply, b, std::vector<double>(n, 0.0), 1e-15, 20 * n);
    worst = std::max(worst, max_abs_diff(res.x, dense_solve(a, b)));
  }
  return {worst < kCgTol, "max abs error " + fmt(worst)};
}

// 3 ------------------------------------------------------------------------

// Accelerated proximal gradient on 1/2|Ax - y|^2 + lambda |Dx|_1. The TV prox
// is solved on the dual by warm-started accelerated projected gradient.
Volume fista_tv(const RadonProjector& A, const Sinogram& y, const Volume& like, double lambda, std::size_t iters,
                std::size_t prox_iters) {
  Rng rng(303);
  Volume v = randn_like(rng, like);
  double L = 0.0;
  for (int i = 0; i < 200; ++i) {
    const double n = norm2(v.data);
    for (double& e : v.data) e /= n;
    v = A.normal(v);
    L = norm2(v.data);
  }
  L *= 1.01;

  const double dual_step = 1.0 / 12.0;  // |D D^T| <= 4 per axis
  GradStack p = zeros_like(diff_forward(like, all_axes()));
  auto prox = [&](const Volume& u, double gamma) {
    GradStack q = p, prev = p;
    double t = 1.0;
    for (std::size_t it = 0; it < prox_iters; ++it) {
      Volume x = u;
      axpy(-1.0, diff_adjoint(q, u.dims, u.spacing).data, x.data);
      const GradStack g = diff_forward(x, all_axes());
      GradStack next = q;
      for (std::size_t a = 0; a < next.size(); ++a)
        for (std::size_t i = 0; i < next[a].data.size(); ++i)
          next[a].data[i] = std::clamp(q[a].data[i] + dual_step * g[a].data[i], -gamma, gamma);
      const double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
      for (std::size_t a = 0; a < next.size(); ++a)
        for (std::size_t i = 0; i < next[a].data.size(); ++i)
          q[a].data[i] = next[a].data[i] + (t - 1.0) / tn * (next[a].data[i] - prev[a].data[i]);
      prev = std::move(next);
      t = tn;
    }
    p = prev;
    Volume x = u;
    axpy(-1.0, diff_adjoint(p, u.dims, u.spacing).data, x.data);
    return x;
  };

  Volume x = like.zeros_like(), z = x;
  double t = 1.0;
  for (std::size_t k = 0; k < iters; ++k) {
    Sinogram r = A.forward(z);
    axpy(-1.0, y.data, r.data);
    Volume u = z;
    axpy(-1.0 / L, A.adjoint(r).data, u.data);
    const Volume xn = prox(u, lambda / L);
    const double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    for (std::size_t i = 0; i < z.size(); ++i) z.data[i] = xn.data[i] + (t - 1.0) / tn * (xn.data[i] - x.data[i]);
    x = xn;
    t = tn;
  }
  return x;
}

Outcome solver_equivalence() {
  const Volume truth = make_phantom({PhantomKind::shepp3d, {4, 16, 16}, 42});
  const RadonProjector A(Geometry::for_volume(truth, 8));
  const Sinogram y = A.forward(truth);
  const double lambda = 0.1;
  const AdmmParams p{1.0, 1.0, 1.0, lambda, 500, 30, 1e-6};
  const Volume x0 = truth.zeros_like();

  const double f_spec = tv_objective(A, y, specialized_admm3d(A, y, p, x0), lambda);
  const double f_std = tv_objective(A, y, standard_admm(A, y, p, x0), lambda);
  const double f_orc = tv_objective(A, y, fista_tv(A, y, x0, lambda, 10000, 20), lambda);
  const double lo = std::min({f_spec, f_std, f_orc}), hi = std::max({f_spec, f_std, f_orc});
  const double spread = (hi - lo) / lo;
  return {spread < kObjectiveRelTol, "objectives specialized " + fmt(f_spec, 8) + " standard " + fmt(f_std, 8) +
                                         " oracle " + fmt(f_orc, 8) + ", spread " + fmt(100 * spread) + "%"};
}

// 4 ------------------------------------------------------------------------

double max_rel(const Volume& a, const Volume& b) {
  double scale = 0.0;
  for (double v : b.data) scale = std::max(scale, std::abs(v));
  return max_abs_diff(a.data, b.data) / std::max(scale, 1e-300);
}

Outcome diffusion_algebra() {
  const auto s = Schedule::linear(1000);
  Rng rng(404);
  const Volume like({2, 16, 16});
  const Volume x0 = randn_like(rng, like), eps = randn_like(rng, like);
  double round_trip = 0.0, ddim = 0.0, ddpm = 0.0;
  for (std::size_t t = 1; t <= s.T(); ++t) {
    const Volume xt = q_sample(x0, t, eps, s);
    round_trip = std::max(round_trip, max_rel(predict_x0(xt, t, eps, s), x0));
    if (t >= 2) {
      const std::size_t tp = t >= 21 ? t - 20 : 1;
      ddim = std::max(ddim, max_rel(ddim_step(xt, t, tp, eps, s), q_sample(x0, tp, eps, s)));
      const Volume eps_hat = randn_like(rng, like), z = randn_like(rng, like);
      const Volume a = ddpm_step(xt, t, eps_hat, s, z);
      const Volume b = ddim_step(xt, t, t - 1, eps_hat, s, std::sqrt(s.ddpm_variance(t)), &z);
      ddpm = std::max(ddpm, max_rel(a, b));
    }
  }
  const bool ok = round_trip < kAlgebraTol && ddim < kAlgebraTol && ddpm < kAlgebraTol;
  return {ok, "round trip " + fmt(round_trip) + ", ddim identity " + fmt(ddim) + ", ddpm/ddim " + fmt(ddpm)};
}

// 5 ------------------------------------------------------------------------

Outcome gradient_fidelity() {
  using NetD = EpsNet<double>;
  const NetConfig tiny{4, 2, 16};
  NetD net(tiny, 505);
  Rng rng(506);
  for (auto& p : net.params()) p += 0.05 * rng.normal();
  const std::size_t h = 8, w = 8;
  const auto x = randn(rng, h * w), r = randn(rng, h * w);
  auto loss = [&](const NetD& n, std::size_t t, Label c) {
    const auto out = n.forward(x, h, w, t, c);
    double l = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) l += r[i] * out[i] + 0.5 * out[i] * out[i];
    return l;
  };

  double worst = 0.0;
  std::size_t checked = 0, layers = 0;
  for (Label c : {Label::c1, Label::c2}) {
    const std::size_t t = c == Label::c1 ? 173 : 742;
    Tape<double> tape;
    const auto out = net.forward(x, h, w, t, c, &tape);
    std::vector<double> dout(out.size()), grad(net.num_params(), 0.0);
    for (std::size_t i = 0; i < out.size(); ++i) dout[i] = r[i] + out[i];
    net.backward(tape, dout, grad);

    for (const auto& layer : net.layout()) {
      std::size_t base = layer.offset, span = layer.size;
      if (layer.name == "label.embedding") {
        base += static_cast<std::size_t>(c) * tiny.emb_dim;
        span = tiny.emb_dim;
      }
      const std::size_t n = std::min<std::size_t>(10, span);
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t k = base + (span <= 10 ? j : rng.below(span));
        NetD plus = net, minus = net;
        plus.params()[k] += 1e-4;
        minus.params()[k] -= 1e-4;
        const double fd = (loss(plus, t, c) - loss(minus, t, c)) / 2e-4;
        const double scale = std::max({std::abs(fd), std::abs(grad[k]), 1e-9});
        worst = std::max(worst, std::abs(fd - grad[k]) / scale);
        ++checked;
      }
      ++layers;
    }
  }
  return {worst < kGradRelTol,
          std::to_string(checked) + " coordinates over " + std::to_string(layers) + " layer passes, max rel " + fmt(worst)};
}

// 6 ------------------------------------------------------------------------

Outcome dm_collapse() {
  const auto s = Schedule::linear(1000);
  const EpsNet<double> net(NetConfig{4, 2, 8}, 606);
  Rng rng(607);
  const Consistency2D identity = [](const Volume& v, const Sinogram&) { return v; };
  const Volume x0 = make_phantom({PhantomKind::blobs, {1, 16, 16}, 608});
  double loss_gap = 0.0, coef_gap = 0.0;
  for (double lmax : {0.5, 1.0, 5.0}) {
    for (std::size_t t = 1; t <= s.T(); ++t) {
      const double ab = s.alpha_bar(t);
      const double expect = std::min(std::sqrt(ab / (1.0 - ab)), lmax);
      coef_gap = std::max(coef_gap, std::abs(dm_coefficient(s, t, lmax) - expect) / expect);
      if (t % 37 != 1) continue;
      const Volume eps = randn_like(rng, x0);
      const DmSample d = dm_sample(x0, eps, t, eps, s, Sinogram{}, identity, lmax);
      const double l_std = mean_sq_diff(net.forward(d.x_t.data, 16, 16, t, Label::c2), eps.data);
      const double l_dm = mean_sq_diff(net.forward(d.x_t_recon.data, 16, 16, t, Label::c2), d.target.data);
      loss_gap = std::max(loss_gap, std::abs(l_dm - l_std) / l_std);
    }
  }
  const bool ok = loss_gap < kCollapseRelTol && coef_gap < kCollapseRelTol;
  return {ok, "loss rel gap " + fmt(loss_gap) + ", coefficient rel gap " + fmt(coef_gap)};
}

// 7-9 ----------------------------------------------------------------------

struct EndToEnd {
  Config cfg;
  fs::path work;
  std::optional<TrainedNets> nets;
  double train_seconds = 0.0;
  bool reused = false;
};

void ensure_nets(EndToEnd& e) {
  if (e.nets) return;
  const Schedule sched = schedule_from(e.cfg);
  const auto marker = e.work / "train_seconds.txt";
  e.reused = fs::exists(e.work / "base.ckpt") && fs::exists(e.work / "dm.ckpt");
  const auto t = Clock::now();
  e.nets = obtain_nets(e.cfg, sched, dims_from(e.cfg), e.work, &std::cerr);
  if (e.reused) {
    std::ifstream is(marker);
    is >> e.train_seconds;
  } else {
    e.train_seconds = seconds_since(t);
    std::ofstream(marker) << e.train_seconds << '\n';
  }
}

std::map<std::pair<std::string, std::size_t>, double> axial_by_cell(const ExperimentReport& r, double t0) {
  std::map<std::pair<std::string, std::size_t>, double> m;
  for (const auto& c : r.cells)
    if (c.ok && (!method_uses_diffusion(c.method) || c.t0 == t0)) m[{c.method, c.phantom}] = c.metrics.psnr[0];
  return m;
}

Outcome end_to_end(EndToEnd& e) {
  ensure_nets(e);
  Config c = e.cfg;
  c.set("experiment.t0", std::vector<double>{0.5});
  const auto t = Clock::now();
  const auto report = run_experiment(c, e.work / "ordering", &std::cerr, e.nets);
  const double total = e.train_seconds + seconds_since(t);

  const auto psnr = axial_by_cell(report, 0.5);
  std::size_t wins = 0;
  std::ostringstream per;
  double mean_on = 0, mean_off = 0, mean_admm = 0;
  const std::size_t n = report.spec.phantoms.size();
  for (std::size_t p = 0; p < n; ++p) {
    const double on = psnr.at({"cddm-dm-on", p}), off = psnr.at({"cddm-dm-off", p}), admm = psnr.at({"admm", p});
    mean_on += on / n;
    mean_off += off / n;
    mean_admm += admm / n;
    const bool win = on - off >= kOrderingGapDb && off - admm >= kOrderingGapDb;
    wins += win;
    per << (p ? " " : "") << fmt(on, 4) << "/" << fmt(off, 4) << "/" << fmt(admm, 4) << (win ? "+" : "-");
  }
  const bool ok = wins >= kOrderingMinPhantoms && total < kEndToEndSeconds;
  std::ostringstream d;
  d << wins << "/" << n << " phantoms ordered (dm-on/dm-off/admm dB: " << per.str() << "), means " << fmt(mean_on, 4)
    << "/" << fmt(mean_off, 4) << "/" << fmt(mean_admm, 4) << ", runtime " << fmt(total / 60.0) << " min"
    << (e.reused ? " (training time from cached run)" : "");
  return {ok, d.str()};
}

Outcome sweep_shape(EndToEnd& e) {
  ensure_nets(e);
  const auto t = Clock::now();
  const auto report = run_experiment(e.cfg, e.work / "sweep", &std::cerr, e.nets);
  const double elapsed = seconds_since(t);
  const std::string csv = slurp(e.work / "sweep" / "sweep_t0.csv");
  const std::string metrics = slurp(e.work / "sweep" / "metrics.csv");
  const bool no_nan = csv.find("nan") == std::string::npos && metrics.find("nan") == std::string::npos;
  const std::size_t expected = report.spec.phantoms.size() *
                               (1 + (report.spec.methods.size() - 1) * report.spec.t0_values.size());
  std::size_t ok_cells = 0;
  for (const auto& c : report.cells) ok_cells += c.ok;

  std::map<double, double> mean;
  for (const auto& c : report.cells)
    if (c.method == "cddm-dm-on") mean[c.t0] += c.metrics.psnr[0] / static_cast<double>(report.spec.phantoms.size());
  double worst_t0 = 0.0, worst = std::numeric_limits<double>::infinity();
  std::ostringstream d;
  for (const auto& [t0, v] : mean) {
    d << "t0=" << t0 << ":" << fmt(v, 4) << " ";
    if (v < worst) {
      worst = v;
      worst_t0 = t0;
    }
  }
  const bool ok = no_nan && ok_cells == expected && report.cells.size() == expected && mean.size() == 3 &&
                  worst_t0 != 0.5 && elapsed < 3 * kEndToEndSeconds;
  d << "dB, " << ok_cells << "/" << expected << " cells, " << (no_nan ? "no NaN" : "NaN present") << ", "
    << fmt(elapsed / 60.0) << " min";
  return {ok, d.str()};
}

Outcome determinism(EndToEnd& e) {
  ensure_nets(e);
  std::vector<std::string> diffs;
  // full method matrix, once serial and once threaded
  Config c = e.cfg;
  c.set("experiment.methods", known_methods());
  c.set("experiment.phantom_seeds", std::vector<double>{7001, 7002});
  c.set("experiment.t0", std::vector<double>{0.3, 0.5});
  c.set("experiment.threads", 1.0);
  run_experiment(c, e.work / "det_a", nullptr, e.nets);
  c.set("experiment.threads", 2.0);
  run_experiment(c, e.work / "det_b", nullptr, e.nets);
  for (const char* f : {"metrics.csv", "sweep_t0.csv"})
    if (slurp(e.work / "det_a" / f) != slurp(e.work / "det_b" / f)) diffs.push_back(f);

  // training entry points
  Config small = e.cfg;
  small.set("train.steps", 20.0);
  small.set("train_dm.steps", 5.0);
  small.set("data.volumes", 3.0);
  const Schedule sched = schedule_from(small);
  const Dims3 dims = dims_from(small);
  for (int run = 0; run < 2; ++run) {
    std::vector<LossRecord> tb, td;
    const auto base = train_base_net(small, sched, dims, &tb);
    const auto dm = train_dm_net(small, sched, dims, *base, &td);
    const auto dir = e.work / (run ? "det_train_b" : "det_train_a");
    fs::create_directories(dir);
    write_loss_csv(tb, dir / "base.loss.csv");
    write_loss_csv(td, dir / "dm.loss.csv");
    base->save(dir / "base.ckpt", sched.hash());
    dm->save(dir / "dm.ckpt", sched.hash());
  }
  for (const char* f : {"base.loss.csv", "dm.loss.csv", "base.ckpt", "dm.ckpt"})
    if (slurp(e.work / "det_train_a" / f) != slurp(e.work / "det_train_b" / f)) diffs.push_back(f);

  std::string d = diffs.empty() ? "metric, sweep and training outputs byte-identical across reruns" : "differs:";
  for (const auto& f : diffs) d += " " + f;
  return {diffs.empty(), d};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::string work = "acceptance_work";
  std::string config = std::string(CDDM_SOURCE_DIR) + "/configs/desk.toml";
  std::vector<int> only;
  app.add_option("--work", work, "scratch directory; trained checkpoints are cached here");
  app.add_option("--config", config, "end-to-end configuration")->check(CLI::ExistingFile);
  app.add_option("--only", only, "run a subset of criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  EndToEnd e2e{Config::load(config), fs::path(work), std::nullopt};
  fs::create_directories(e2e.work);

  struct Criterion {
    int id;
    const char* name;
    double budget;  // seconds; 0 means checked inside
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "adjoint correctness", kAdjointSeconds, adjoint_check},
      {2, "CG vs dense solve", kCgSeconds, cg_check},
      {3, "convex solver equivalence", kSolverSeconds, solver_equivalence},
      {4, "diffusion algebra", kAlgebraSeconds, diffusion_algebra},
      {5, "gradient fidelity", kGradSeconds, gradient_fidelity},
      {6, "DM objective collapse", kCollapseSeconds, dm_collapse},
      {7, "end-to-end ordering", 0, [&] { return end_to_end(e2e); }},
      {8, "t0 sweep shape", 0, [&] { return sweep_shape(e2e); }},
      {9, "determinism", 0, [&] { return determinism(e2e); }},
  };

  const std::set<int> selected(only.begin(), only.end());
  int failed = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    const auto t = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& ex) {
      o = {false, std::string("exception: ") + ex.what()};
    }
    const double s = seconds_since(t);
    if (c.budget > 0 && s >= c.budget) {
      o.pass = false;
      o.detail += ", over budget";
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  [" << c.id << "] " << c.name << ": " << o.detail << " ("
              << fmt(s, 3) << " s)" << std::endl;
  }
  return failed ? 1 : 0;
}
