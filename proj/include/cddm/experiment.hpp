// experiment.hpp
//
// Config-driven orchestration: solver/network/training settings from a config
// file, checkpoint reuse or training, and the method x phantom x t0 matrix
// with CSV/JSON reports, PGM centre slices and per-cell volumes.

#ifndef CDDM_EXPERIMENT_HPP
#define CDDM_EXPERIMENT_HPP

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "config.hpp"
#include "denoiser.hpp"
#include "diffusion.hpp"
#include "grid.hpp"
#include "metrics.hpp"
#include "operators.hpp"
#include "phantom.hpp"
#include "pipeline.hpp"
#include "solvers.hpp"

namespace cddm {

// ---------------------------------------------------------------------------
// Config -> typed settings

inline AdmmParams admm_params_from(const Config& c, const std::string& sec, AdmmParams d) {
  d.rho1 = c.get_double(sec + ".rho1", d.rho1);
  d.rho2 = c.get_double(sec + ".rho2", d.rho2);
  d.rho3 = c.get_double(sec + ".rho3", d.rho3);
  d.lambda = c.get_double(sec + ".lambda", d.lambda);
  d.K = c.get_size(sec + ".K", d.K);
  d.cg_iters = c.get_size(sec + ".cg_iters", d.cg_iters);
  d.cg_tol = c.get_double(sec + ".cg_tol", d.cg_tol);
  d.warm_split = c.get_bool(sec + ".warm_split", d.warm_split);
  d.validate();
  return d;
}

/// Low-quality generation profile.
inline AdmmParams default_low_quality() { return {2.0, 0.8, 150.0, 1.2, 50, 30, 1e-6}; }
/// Data-consistency profile.
inline AdmmParams default_consistency() { return {0.01, 10.0, 50.0, 0.2, 10, 30, 1e-6, true}; }

inline Schedule schedule_from(const Config& c) {
  return Schedule::linear(c.get_size("schedule.trained_T", 1000), c.get_double("schedule.beta_1", 1e-4),
                          c.get_double("schedule.beta_T", 0.02));
}

inline Dims3 dims_from(const Config& c) {
  const auto d = c.get_doubles("experiment.dims", {8, 32, 32});
  if (d.size() != 3) throw ConfigError("experiment.dims needs three entries (nz, ny, nx)");
  return {static_cast<std::size_t>(d[0]), static_cast<std::size_t>(d[1]), static_cast<std::size_t>(d[2])};
}

inline Geometry geometry_from(const Config& c, const Dims3& dims) {
  Volume like(dims);
  Geometry g = Geometry::for_volume(like, c.get_size("geometry.n_views", 8));
  g.n_det = c.get_size("geometry.n_det", g.n_det);
  g.det_spacing = c.get_double("geometry.det_spacing", g.det_spacing);
  g.validate();
  return g;
}

inline CddmConfig cddm_from(const Config& c) {
  CddmConfig k;
  k.t0 = c.get_double("cddm.t0", 0.5);
  k.infer_steps = c.get_size("cddm.infer_steps", 50);
  k.dm_enabled = c.get_bool("cddm.dm_enabled", true);
  const auto dir = c.get_string("cddm.directions", "xyz");
  if (dir == "xyz") k.directions = DirectionMode::xyz;
  else if (dir == "z-only") k.directions = DirectionMode::z_only;
  else throw ConfigError("cddm.directions must be \"xyz\" or \"z-only\"");
  const auto init = c.get_string("cddm.initializer", "admm");
  if (init == "admm") k.initializer = Initializer::admm;
  else if (init == "coarse-diffusion") k.initializer = Initializer::coarse_diffusion;
  else throw ConfigError("cddm.initializer must be \"admm\" or \"coarse-diffusion\"");
  k.coarse_factor = c.get_size("cddm.coarse_factor", 4);
  k.coarse_steps = c.get_size("cddm.coarse_steps", 10);
  k.coarse_t0 = c.get_double("cddm.coarse_t0", 0.3);
  k.consistency = admm_params_from(c, "admm.consistency", default_consistency());
  k.low_quality = admm_params_from(c, "admm.low_quality", default_low_quality());
  k.seed = c.get_u64("cddm.seed", 0);
  return k;
}

inline NetConfig net_from(const Config& c) {
  return {c.get_size("network.channels", 32), c.get_size("network.blocks", 4), c.get_size("network.emb_dim", 32)};
}

inline TrainConfig train_from(const Config& c, const std::string& sec, TrainConfig d) {
  d.steps = c.get_size(sec + ".steps", d.steps);
  d.batch = c.get_size(sec + ".batch", d.batch);
  d.lr = c.get_double(sec + ".lr", d.lr);
  d.lambda_max = c.get_double(sec + ".lambda_max", d.lambda_max);
  d.grad_clip = c.get_double(sec + ".grad_clip", d.grad_clip);
  d.seed = c.get_u64(sec + ".seed", d.seed);
  d.ema_decay = c.get_double(sec + ".ema_decay", d.ema_decay);
  d.augment = c.get_bool(sec + ".augment", d.augment);
  d.validate();
  return d;
}

/// Training slices: axial slices of `data.volumes` phantoms cycling through `data.kinds`.
inline SliceDataset training_set_from(const Config& c, const Dims3& dims) {
  const auto kinds = c.get_strings("data.kinds", {"shepp3d", "blobs", "shells"});
  const std::size_t n = c.get_size("data.volumes", 60);
  const std::uint64_t seed = c.get_u64("data.seed", 1);
  if (kinds.empty() || n == 0) throw ConfigError("training data needs at least one kind and one volume");
  SliceDataset ds;
  for (std::size_t i = 0; i < n; ++i)
    ds.add_volume(make_phantom({parse_phantom_kind(kinds[i % kinds.size()]), dims, seed * 1000003ULL + i}));
  return ds;
}

// ---------------------------------------------------------------------------
// Output helpers

/// 16-bit binary PGM, linear window [0, peak] -> [0, 65535].
inline void write_pgm16(const std::filesystem::path& path, std::span<const double> img, std::size_t h, std::size_t w,
                        double peak = 1.0) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "P5\n" << w << ' ' << h << "\n65535\n";
  for (double v : img) {
    const double s = std::clamp(v / peak, 0.0, 1.0);
    const auto q = static_cast<std::uint16_t>(std::lround(s * 65535.0));
    const unsigned char be[2] = {static_cast<unsigned char>(q >> 8), static_cast<unsigned char>(q & 0xFF)};
    os.write(reinterpret_cast<const char*>(be), 2);
  }
}

inline void write_centre_slices(const std::filesystem::path& dir, const std::string& stem, const Volume& v) {
  for (Plane p : {Plane::axial, Plane::coronal, Plane::sagittal}) {
    std::size_t h = 0, w = 0;
    const auto img = plane_slice(v, p, plane_count(v, p) / 2, h, w);
    write_pgm16(dir / (stem + "_" + plane_name(p) + ".pgm"), img, h, w);
  }
}

/// Sinogram in the raw volume format, dims (nz, n_views, n_det), angles in the sidecar.
inline void save_sinogram(const Sinogram& s, const std::filesystem::path& path) {
  Volume v({s.nz, s.n_views, s.n_det});
  v.data = s.data;
  save_raw(v, path);
  std::ifstream hs(sidecar_path(path));
  auto header = nlohmann::json::parse(hs);
  hs.close();
  header["kind"] = "sinogram";
  header["view_angles"] = s.view_angles;
  std::ofstream os(sidecar_path(path));
  os << header.dump() << '\n';
}

inline Sinogram load_sinogram(const std::filesystem::path& path) {
  const Volume v = load_raw(path);
  std::ifstream hs(sidecar_path(path));
  const auto header = nlohmann::json::parse(hs);
  std::vector<double> angles = header.contains("view_angles") ? header["view_angles"].get<std::vector<double>>()
                                                              : equispaced_angles(v.ny());
  if (angles.size() != v.ny()) throw std::runtime_error("sinogram angle count does not match its dims");
  check_view_angles(angles);
  Sinogram s(v.nz(), angles, v.nx());
  s.data = v.data;
  return s;
}

// ---------------------------------------------------------------------------
// Networks

struct TrainedNets {
  std::shared_ptr<const Net> base;
  std::shared_ptr<const Net> dm;
  std::vector<LossRecord> base_trace, dm_trace;
};

inline std::shared_ptr<const Net> train_base_net(const Config& c, const Schedule& sched, const Dims3& dims,
                                                 std::vector<LossRecord>* trace = nullptr) {
  const auto cfg = train_from(c, "train", TrainConfig{});
  const SliceDataset ds = training_set_from(c, dims);
  auto res = train_standard(Net(net_from(c), c.get_u64("network.seed", 7)), ds, sched, cfg);
  if (trace) *trace = res.trace;
  return std::make_shared<const Net>(std::move(res.net));
}

inline std::shared_ptr<const Net> train_dm_net(const Config& c, const Schedule& sched, const Dims3& dims,
                                               const Net& base, std::vector<LossRecord>* trace = nullptr) {
  TrainConfig d;
  d.steps = 500;
  d.batch = 2;
  const auto cfg = train_from(c, "train_dm", d);
  const SliceDataset ds = training_set_from(c, dims);
  Geometry g = geometry_from(c, {1, dims[1], dims[2]});
  auto projector = std::make_shared<const RadonProjector>(g);
  const AdmmParams p2d = admm_params_from(c, "admm.train", default_consistency());
  auto res = train_dm(base, ds, sched, projector, admm2d_consistency(projector, p2d), cfg);
  if (trace) *trace = res.trace;
  return std::make_shared<const Net>(std::move(res.net));
}

/// Loads the checkpoints named in [checkpoints] when present, otherwise trains
/// and saves them there (or under out_dir).
inline TrainedNets obtain_nets(const Config& c, const Schedule& sched, const Dims3& dims,
                               const std::filesystem::path& out_dir, std::ostream* log = nullptr) {
  TrainedNets nets;
  const std::filesystem::path base_path = c.get_string("checkpoints.base", (out_dir / "base.ckpt").string());
  const std::filesystem::path dm_path = c.get_string("checkpoints.dm", (out_dir / "dm.ckpt").string());
  const std::string h = sched.hash();
  if (std::filesystem::exists(base_path)) {
    nets.base = std::make_shared<const Net>(Net::load(base_path, &h));
  } else {
    if (log) *log << "training base network -> " << base_path << std::endl;
    nets.base = train_base_net(c, sched, dims, &nets.base_trace);
    if (base_path.has_parent_path()) std::filesystem::create_directories(base_path.parent_path());
    nets.base->save(base_path, h);
    write_loss_csv(nets.base_trace, base_path.string() + ".loss.csv");
  }
  if (std::filesystem::exists(dm_path)) {
    nets.dm = std::make_shared<const Net>(Net::load(dm_path, &h));
  } else {
    if (log) *log << "DM fine-tuning -> " << dm_path << std::endl;
    nets.dm = train_dm_net(c, sched, dims, *nets.base, &nets.dm_trace);
    if (dm_path.has_parent_path()) std::filesystem::create_directories(dm_path.parent_path());
    nets.dm->save(dm_path, h);
    write_loss_csv(nets.dm_trace, dm_path.string() + ".loss.csv");
  }
  return nets;
}

// ---------------------------------------------------------------------------
// Experiment matrix

inline const std::vector<std::string>& known_methods() {
  static const std::vector<std::string> m{"admm", "standard-admm", "cddm-dm-off", "cddm-dm-on", "cddm-z-only"};
  return m;
}

inline bool method_uses_diffusion(const std::string& m) { return m.rfind("cddm", 0) == 0; }

struct ExperimentSpec {
  std::vector<std::string> methods;
  std::vector<PhantomSpec> phantoms;
  std::vector<double> t0_values;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  Dims3 dims{8, 32, 32};
  bool write_volumes = true;
};

inline ExperimentSpec experiment_from(const Config& c) {
  ExperimentSpec e;
  e.methods = c.get_strings("experiment.methods", {});
  if (e.methods.empty()) throw ConfigError("experiment.methods is empty");
  for (const auto& m : e.methods)
    if (std::find(known_methods().begin(), known_methods().end(), m) == known_methods().end())
      throw ConfigError("unknown method '" + m + "'");
  e.dims = dims_from(c);
  const auto kinds = c.get_strings("experiment.phantoms", {"shepp3d"});
  const auto seeds = c.get_doubles("experiment.phantom_seeds", {});
  if (kinds.empty()) throw ConfigError("experiment.phantoms is empty");
  const std::size_t n = seeds.empty() ? kinds.size() : seeds.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto kind = parse_phantom_kind(kinds[i % kinds.size()]);
    const std::uint64_t s = seeds.empty() ? 1000 + i : static_cast<std::uint64_t>(seeds[i]);
    e.phantoms.push_back({kind, e.dims, s});
  }
  e.t0_values = c.get_doubles("experiment.t0", {c.get_double("cddm.t0", 0.5)});
  if (e.t0_values.empty()) throw ConfigError("experiment.t0 is empty");
  e.seed = c.get_u64("experiment.seed", 0);
  e.threads = std::max<std::size_t>(1, c.get_size("experiment.threads", 1));
  e.write_volumes = c.get_bool("experiment.write_volumes", true);
  return e;
}

struct CellResult {
  std::string method;
  std::size_t phantom = 0;
  double t0 = 0.0;
  PlaneMetrics metrics;
  bool ok = false;
  std::string error;
};

struct ExperimentReport {
  std::vector<CellResult> cells;
  ExperimentSpec spec;
};

inline std::string fmt_num(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

inline std::string cell_name(const CellResult& c, const ExperimentSpec& e) {
  std::ostringstream os;
  os << c.method << "_p" << c.phantom << "_" << phantom_kind_name(e.phantoms[c.phantom].kind);
  if (method_uses_diffusion(c.method)) os << "_t0-" << std::fixed << std::setprecision(2) << c.t0;
  return os.str();
}

/// metrics.csv rows: one per (method, phantom, t0, plane).
inline void write_metrics_csv(const ExperimentReport& r, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "method,phantom,kind,seed,t0,plane,psnr,ssim\n";
  for (const auto& c : r.cells) {
    if (!c.ok) continue;
    const auto& ph = r.spec.phantoms[c.phantom];
    for (Plane p : {Plane::axial, Plane::coronal, Plane::sagittal}) {
      const auto i = static_cast<std::size_t>(p);
      os << c.method << ',' << c.phantom << ',' << phantom_kind_name(ph.kind) << ',' << ph.seed << ','
         << (method_uses_diffusion(c.method) ? fmt_num(c.t0) : std::string("")) << ',' << plane_name(p) << ','
         << fmt_num(c.metrics.psnr[i]) << ',' << fmt_num(c.metrics.ssim[i]) << '\n';
    }
  }
}

/// sweep_t0.csv: per (t0, method) the mean over phantoms of each plane's PSNR/SSIM.
inline void write_sweep_csv(const ExperimentReport& r, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "t0,method,psnr_axial,psnr_coronal,psnr_sagittal,ssim_axial,ssim_coronal,ssim_sagittal,cells\n";
  for (double t0 : r.spec.t0_values)
    for (const auto& m : r.spec.methods) {
      if (!method_uses_diffusion(m)) continue;
      std::array<double, 3> ps{}, ss{};
      std::size_t n = 0;
      for (const auto& c : r.cells)
        if (c.ok && c.method == m && c.t0 == t0) {
          for (std::size_t i = 0; i < 3; ++i) {
            ps[i] += c.metrics.psnr[i];
            ss[i] += c.metrics.ssim[i];
          }
          ++n;
        }
      if (n == 0) continue;
      os << fmt_num(t0) << ',' << m;
      for (double v : ps) os << ',' << fmt_num(v / static_cast<double>(n));
      for (double v : ss) os << ',' << fmt_num(v / static_cast<double>(n));
      os << ',' << n << '\n';
    }
}

inline nlohmann::json report_json(const ExperimentReport& r) {
  nlohmann::json j;
  for (const auto& c : r.cells) {
    nlohmann::json row = {{"method", c.method}, {"phantom", c.phantom}, {"ok", c.ok}};
    if (method_uses_diffusion(c.method)) row["t0"] = c.t0;
    if (c.ok) {
      for (Plane p : {Plane::axial, Plane::coronal, Plane::sagittal}) {
        const auto i = static_cast<std::size_t>(p);
        row["planes"][plane_name(p)] = {{"psnr", fmt_num(c.metrics.psnr[i])}, {"ssim", fmt_num(c.metrics.ssim[i])}};
      }
    } else {
      row["error"] = c.error;
    }
    j["cells"].push_back(row);
  }
  // aggregate means per method (and t0)
  std::map<std::string, std::pair<std::array<double, 6>, std::size_t>> agg;
  for (const auto& c : r.cells) {
    if (!c.ok) continue;
    const std::string key = method_uses_diffusion(c.method) ? c.method + "@t0=" + fmt_num(c.t0) : c.method;
    auto& [sum, n] = agg[key];
    for (std::size_t i = 0; i < 3; ++i) {
      sum[i] += c.metrics.psnr[i];
      sum[3 + i] += c.metrics.ssim[i];
    }
    ++n;
  }
  for (const auto& [key, v] : agg) {
    const auto& [sum, n] = v;
    nlohmann::json a;
    for (Plane p : {Plane::axial, Plane::coronal, Plane::sagittal}) {
      const auto i = static_cast<std::size_t>(p);
      a[plane_name(p)] = {{"psnr", fmt_num(sum[i] / static_cast<double>(n))},
                          {"ssim", fmt_num(sum[3 + i] / static_cast<double>(n))}};
    }
    a["cells"] = n;
    j["aggregate"][key] = a;
  }
  return j;
}

/// Runs every cell. Throws after writing partial artifacts if any cell failed.
inline ExperimentReport run_experiment(const Config& c, const std::filesystem::path& out_dir,
                                       std::ostream* log = nullptr, std::optional<TrainedNets> nets_in = std::nullopt) {
  ExperimentReport report;
  report.spec = experiment_from(c);  // validates before any compute
  const auto& spec = report.spec;
  std::filesystem::create_directories(out_dir / "cells");

  const Schedule sched = schedule_from(c);
  const CddmConfig base_cfg = cddm_from(c);
  auto projector = std::make_shared<const RadonProjector>(geometry_from(c, spec.dims));

  const bool needs_nets = std::any_of(spec.methods.begin(), spec.methods.end(), method_uses_diffusion);
  TrainedNets nets;
  if (needs_nets) nets = nets_in ? *nets_in : obtain_nets(c, sched, spec.dims, out_dir, log);
  NetPair pair;
  if (needs_nets) pair = {provider_from(nets.base), provider_from(nets.dm)};

  // ground truth, measurements, and the shared low-quality start per phantom
  std::vector<Volume> truth, initial;
  std::vector<Sinogram> sinos;
  for (const auto& ph : spec.phantoms) {
    truth.push_back(make_phantom(ph));
    sinos.push_back(projector->forward(truth.back()));
    CddmConfig ic = base_cfg;
    ic.initializer = Initializer::admm;
    initial.push_back(init_low_quality(sinos.back(), *projector, ic, sched));
  }

  for (const auto& m : spec.methods)
    for (std::size_t p = 0; p < spec.phantoms.size(); ++p) {
      if (method_uses_diffusion(m)) {
        for (double t0 : spec.t0_values) report.cells.push_back({m, p, t0, {}, false, {}});
      } else {
        report.cells.push_back({m, p, 0.0, {}, false, {}});
      }
    }

  const Rng master(spec.seed);
  auto run_cell = [&](CellResult& cell) {
    const Volume& gt = truth[cell.phantom];
    const Sinogram& y = sinos[cell.phantom];
    Volume out;
    ReconTrace trace;
    if (cell.method == "admm") {
      out = initial[cell.phantom];
    } else if (cell.method == "standard-admm") {
      const AdmmParams lq = base_cfg.low_quality;
      out = standard_admm(*projector, y, lq, projector->adjoint(y));
    } else {
      CddmConfig k = base_cfg;
      k.t0 = cell.t0;
      k.dm_enabled = cell.method != "cddm-dm-off";
      if (cell.method == "cddm-z-only") k.directions = DirectionMode::z_only;
      // Methods share the noise draw of a (phantom, t0) cell so ablations are paired.
      const auto t0_index = static_cast<std::uint64_t>(
          std::find(spec.t0_values.begin(), spec.t0_values.end(), cell.t0) - spec.t0_values.begin());
      Rng rng = master.split(cell.phantom * 1000 + t0_index);
      std::optional<Volume> init;
      if (k.initializer == Initializer::admm) init = initial[cell.phantom];
      auto res = cddm_reconstruct(y, projector, pair, k, sched, rng, &gt, std::nullopt, init);
      out = std::move(res.volume);
      trace = std::move(res.trace);
    }
    if (!all_finite(out.data)) throw std::runtime_error("non-finite reconstruction");
    cell.metrics = plane_metrics(out, gt);
    const auto dir = out_dir / "cells" / cell_name(cell, spec);
    std::filesystem::create_directories(dir);
    write_centre_slices(dir, "recon", out);
    if (spec.write_volumes) save_raw(out, dir / "recon.raw");
    if (!trace.steps.empty()) write_trace_csv(trace, dir / "trace.csv");
    cell.ok = true;
  };

  std::atomic<std::size_t> next{0};
  std::mutex log_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < report.cells.size(); i = next++) {
      auto& cell = report.cells[i];
      try {
        run_cell(cell);
      } catch (const std::exception& e) {
        cell.ok = false;
        cell.error = e.what();
      }
      if (log) {
        std::lock_guard lk(log_mu);
        *log << "[" << (cell.ok ? "done" : "FAIL") << "] " << cell_name(cell, spec);
        if (cell.ok) *log << "  axial PSNR " << std::fixed << std::setprecision(2) << cell.metrics.psnr[0];
        else *log << "  " << cell.error;
        *log << std::defaultfloat << std::endl;
      }
    }
  };
  const std::size_t nthreads = std::min(spec.threads, report.cells.size());
  if (nthreads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t i = 0; i < nthreads; ++i) pool.emplace_back(worker);
  }

  for (std::size_t p = 0; p < spec.phantoms.size(); ++p) {
    const auto dir = out_dir / "cells" / ("truth_p" + std::to_string(p));
    std::filesystem::create_directories(dir);
    write_centre_slices(dir, "truth", truth[p]);
  }
  write_metrics_csv(report, out_dir / "metrics.csv");
  if (spec.t0_values.size() > 1 || needs_nets) write_sweep_csv(report, out_dir / "sweep_t0.csv");
  {
    std::ofstream js(out_dir / "metrics.json");
    js << report_json(report).dump(2) << '\n';
  }
  nlohmann::json manifest;
  std::size_t failed = 0;
  for (const auto& cell : report.cells) {
    manifest[cell.ok ? "completed" : "failed"].push_back(cell_name(cell, spec));
    failed += cell.ok ? 0 : 1;
  }
  {
    std::ofstream ms(out_dir / "manifest.json");
    ms << manifest.dump(2) << '\n';
  }
  if (failed > 0) throw std::runtime_error(std::to_string(failed) + " experiment cell(s) failed; see manifest.json");
  return report;
}

}  // namespace cddm

#endif
