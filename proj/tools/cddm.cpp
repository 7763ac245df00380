// Command-line front end: phantom, project, recon-admm, train, train-dm,
// recon-cddm, eval, sweep.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "cddm/cddm.hpp"

namespace fs = std::filesystem;
using namespace cddm;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::size_t threads = 0;
};

Config load_config(const Common& c) {
  Config cfg = c.config.empty() ? Config{} : Config::load(c.config);
  if (c.seed) {
    cfg.set("experiment.seed", static_cast<double>(*c.seed));
    cfg.set("cddm.seed", static_cast<double>(*c.seed));
  }
  if (c.threads > 0) cfg.set("experiment.threads", static_cast<double>(c.threads));
  return cfg;
}

void add_common(CLI::App* app, Common& c, bool out_required) {
  app->add_option("--config", c.config, "config file")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "master seed");
  auto* o = app->add_option("--out", c.out, "output path");
  if (out_required) o->required();
  app->add_option("--threads", c.threads, "worker threads");
}

void print_metrics(const PlaneMetrics& m, std::ostream& os) {
  os << "plane,psnr,ssim\n";
  for (Plane p : {Plane::axial, Plane::coronal, Plane::sagittal}) {
    const auto i = static_cast<std::size_t>(p);
    os << plane_name(p) << ',' << fmt_num(m.psnr[i]) << ',' << fmt_num(m.ssim[i]) << '\n';
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse-view CT reconstruction with conditional diffusion and specialized ADMM"};
  app.require_subcommand(1);

  Common c;
  std::string kind = "shepp3d", in_path, truth_path, base_ckpt, dm_ckpt;
  std::vector<std::size_t> dims{8, 32, 32};
  std::size_t views = 0;

  auto* ph = app.add_subcommand("phantom", "write a synthetic volume");
  add_common(ph, c, true);
  ph->add_option("--kind", kind)->check(CLI::IsMember({"shepp3d", "blobs", "shells"}));
  ph->add_option("--dims", dims, "nz ny nx")->expected(3);

  auto* pr = app.add_subcommand("project", "forward-project a volume");
  add_common(pr, c, true);
  pr->add_option("--in", in_path)->required()->check(CLI::ExistingFile);
  pr->add_option("--views", views, "number of views (default from config)");

  auto* ra = app.add_subcommand("recon-admm", "specialized ADMM reconstruction (low-quality profile)");
  add_common(ra, c, true);
  ra->add_option("--in", in_path, "sinogram")->required()->check(CLI::ExistingFile);
  ra->add_option("--dims", dims, "nz ny nx")->expected(3);

  auto* tr = app.add_subcommand("train", "train the base noise predictor");
  add_common(tr, c, true);

  auto* td = app.add_subcommand("train-dm", "DM fine-tune a base checkpoint");
  add_common(td, c, true);
  td->add_option("--base", base_ckpt)->required()->check(CLI::ExistingFile);

  auto* rc = app.add_subcommand("recon-cddm", "diffusion reconstruction");
  add_common(rc, c, true);
  rc->add_option("--in", in_path, "sinogram")->required()->check(CLI::ExistingFile);
  rc->add_option("--dims", dims, "nz ny nx")->expected(3);
  rc->add_option("--base", base_ckpt)->required()->check(CLI::ExistingFile);
  rc->add_option("--dm", dm_ckpt)->check(CLI::ExistingFile);
  rc->add_option("--truth", truth_path)->check(CLI::ExistingFile);

  auto* ev = app.add_subcommand("eval", "per-plane PSNR/SSIM of a volume against a reference");
  add_common(ev, c, false);
  ev->add_option("--in", in_path)->required()->check(CLI::ExistingFile);
  ev->add_option("--truth", truth_path)->required()->check(CLI::ExistingFile);

  auto* sw = app.add_subcommand("sweep", "run the configured experiment matrix");
  add_common(sw, c, true);

  CLI11_PARSE(app, argc, argv);

  try {
    const Config cfg = load_config(c);
    const Schedule sched = schedule_from(cfg);
    const Dims3 d3{dims[0], dims[1], dims[2]};
    const bool dims_given = (ph->count("--dims") + ra->count("--dims") + rc->count("--dims")) > 0;
    const Dims3 vol_dims = dims_given ? d3 : dims_from(cfg);

    if (*ph) {
      const std::uint64_t seed = c.seed.value_or(0);
      save_raw(make_phantom({parse_phantom_kind(kind), d3, seed}), c.out);
    } else if (*pr) {
      const Volume v = load_raw(in_path);
      Geometry g = geometry_from(cfg, v.dims);
      if (views > 0) g.angles = equispaced_angles(views);
      save_sinogram(RadonProjector(g).forward(v), c.out);
    } else if (*ra) {
      const Sinogram y = load_sinogram(in_path);
      Geometry g = geometry_from(cfg, vol_dims);
      g.angles = y.view_angles;
      const RadonProjector proj(g);
      const CddmConfig k = cddm_from(cfg);
      save_raw(specialized_admm3d(proj, y, k.low_quality, proj.adjoint(y)), c.out);
    } else if (*tr) {
      std::vector<LossRecord> trace;
      auto net = train_base_net(cfg, sched, vol_dims, &trace);
      net->save(c.out, sched.hash());
      write_loss_csv(trace, c.out + ".loss.csv");
    } else if (*td) {
      const std::string h = sched.hash();
      const Net base = Net::load(base_ckpt, &h);
      std::vector<LossRecord> trace;
      auto net = train_dm_net(cfg, sched, vol_dims, base, &trace);
      net->save(c.out, h);
      write_loss_csv(trace, c.out + ".loss.csv");
    } else if (*rc) {
      const Sinogram y = load_sinogram(in_path);
      Geometry g = geometry_from(cfg, vol_dims);
      g.angles = y.view_angles;
      auto proj = std::make_shared<const RadonProjector>(g);
      const std::string h = sched.hash();
      auto base = std::make_shared<const Net>(Net::load(base_ckpt, &h));
      auto dm = dm_ckpt.empty() ? base : std::make_shared<const Net>(Net::load(dm_ckpt, &h));
      CddmConfig k = cddm_from(cfg);
      if (dm_ckpt.empty()) k.dm_enabled = false;
      std::optional<Volume> truth;
      if (!truth_path.empty()) truth = load_raw(truth_path);
      Rng rng(k.seed);
      auto res = cddm_reconstruct(y, proj, {provider_from(base), provider_from(dm)}, k, sched, rng,
                                  truth ? &*truth : nullptr);
      save_raw(res.volume, c.out);
      write_trace_csv(res.trace, c.out + ".trace.csv");
      if (truth) print_metrics(plane_metrics(res.volume, *truth), std::cout);
    } else if (*ev) {
      const auto m = plane_metrics(load_raw(in_path), load_raw(truth_path));
      if (c.out.empty()) {
        print_metrics(m, std::cout);
      } else {
        std::ofstream os(c.out);
        print_metrics(m, os);
      }
    } else if (*sw) {
      run_experiment(cfg, c.out, &std::cerr);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
