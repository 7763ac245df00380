#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cddm/cddm.hpp"

namespace fs = std::filesystem;
using namespace cddm;

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / "cddm_harness_tests" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

// Brute-force SSIM: explicit 2D Gaussian window at every valid position.
double ssim_reference(const std::vector<double>& a, const std::vector<double>& b, std::size_t h, std::size_t w,
                      std::size_t n = 11, double sigma = 1.5, double range = 1.0) {
  std::vector<double> g(n * n);
  double gs = 0.0;
  const double c = 0.5 * static_cast<double>(n - 1);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double di = static_cast<double>(i) - c, dj = static_cast<double>(j) - c;
      g[i * n + j] = std::exp(-(di * di + dj * dj) / (2 * sigma * sigma));
      gs += g[i * n + j];
    }
  const double c1 = std::pow(0.01 * range, 2), c2 = std::pow(0.03 * range, 2);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t y = 0; y + n <= h; ++y)
    for (std::size_t x = 0; x + n <= w; ++x) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double wt = g[i * n + j] / gs;
          const double va = a[(y + i) * w + x + j], vb = b[(y + i) * w + x + j];
          ma += wt * va;
          mb += wt * vb;
          saa += wt * va * va;
          sbb += wt * vb * vb;
          sab += wt * va * vb;
        }
      saa -= ma * ma;
      sbb -= mb * mb;
      sab -= ma * mb;
      total += (2 * ma * mb + c1) * (2 * sab + c2) / ((ma * ma + mb * mb + c1) * (saa + sbb + c2));
      ++count;
    }
  return total / static_cast<double>(count);
}

Volume transpose_xy(const Volume& v) {
  Volume t({v.nz(), v.nx(), v.ny()});
  for (std::size_t z = 0; z < v.nz(); ++z)
    for (std::size_t y = 0; y < v.ny(); ++y)
      for (std::size_t x = 0; x < v.nx(); ++x) t.at(z, x, y) = v.at(z, y, x);
  return t;
}

}  // namespace

TEST(Psnr, Examples) {
  const std::vector<double> a(16, 1.0), b(16, 0.0);
  EXPECT_DOUBLE_EQ(psnr(a, b, 1.0).db, 0.0);
  const auto same = psnr(a, a, 1.0);
  EXPECT_TRUE(same.identical);
  EXPECT_TRUE(std::isinf(same.db));
  std::vector<double> c(16, 0.3), d(16, 0.4);
  EXPECT_NEAR(psnr(d, c, 1.0).db, 20.0, 1e-9);
  EXPECT_THROW(psnr(Volume({1, 2, 2}), Volume({1, 2, 3})), std::invalid_argument);
  EXPECT_THROW(psnr(a, b, 0.0), std::invalid_argument);
}

TEST(Ssim, IdenticalAndSymmetric) {
  Rng rng(1);
  std::vector<double> a(32 * 32), b(32 * 32);
  for (auto& v : a) v = rng.uniform();
  for (auto& v : b) v = rng.uniform();
  EXPECT_EQ(ssim(a, a, 32, 32), 1.0);
  EXPECT_NEAR(ssim(a, b, 32, 32), ssim(b, a, 32, 32), 1e-12);
}

TEST(Ssim, MatchesBruteForce) {
  const std::vector<double> c(20 * 24, 0.2), c5(20 * 24, 0.7);
  EXPECT_NEAR(ssim(c, c5, 20, 24), ssim_reference(c, c5, 20, 24), 1e-9);
  Rng rng(2);
  std::vector<double> a(20 * 24), b(20 * 24);
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = rng.uniform();
    b[i] = 0.7 * a[i] + 0.3 * rng.uniform();
  }
  EXPECT_NEAR(ssim(a, b, 20, 24), ssim_reference(a, b, 20, 24), 1e-9);
}

TEST(Ssim, SmallerThanWindowThrows) {
  const std::vector<double> a(10 * 10, 0.0);
  EXPECT_THROW(ssim(a, a, 10, 10), std::invalid_argument);
}

TEST(PlaneMetrics, IdenticalVolumes) {
  const Volume v = make_phantom({PhantomKind::blobs, {16, 16, 16}, 3});
  const PlaneMetrics m = plane_metrics(v, v);
  for (std::size_t p = 0; p < 3; ++p) {
    EXPECT_EQ(m.ssim[p], 1.0);
    EXPECT_TRUE(std::isinf(m.psnr[p]));
    EXPECT_EQ(m.identical_slices[p], 16u);
  }
}

TEST(PlaneMetrics, SingleSliceErrorHitsAxialHardest) {
  const Volume ref = make_phantom({PhantomKind::shepp3d, {8, 32, 32}, 4});
  Volume x = ref;
  Rng rng(5);
  for (double& v : x.slice(3)) v += 0.05 * rng.normal();
  const PlaneMetrics m = plane_metrics(x, ref);
  EXPECT_LT(m.psnr[0], m.psnr[1]);
  EXPECT_LT(m.psnr[0], m.psnr[2]);
  EXPECT_EQ(m.identical_slices[0], 7u);
  EXPECT_EQ(m.identical_slices[1], 0u);
}

TEST(PlaneMetrics, TransposeInvariance) {
  const Volume ref = make_phantom({PhantomKind::shells, {8, 24, 20}, 6});
  Volume x = ref;
  Rng rng(7);
  for (auto& v : x.data) v += 0.03 * rng.normal();
  const PlaneMetrics a = plane_metrics(x, ref);
  const PlaneMetrics b = plane_metrics(transpose_xy(x), transpose_xy(ref));
  EXPECT_NEAR(a.psnr[0], b.psnr[0], 1e-10);
  EXPECT_NEAR(a.ssim[0], b.ssim[0], 1e-10);
  // coronal and sagittal swap roles
  EXPECT_NEAR(a.psnr[1], b.psnr[2], 1e-10);
  EXPECT_NEAR(a.ssim[1], b.ssim[2], 1e-10);
  for (std::size_t p = 0; p < 3; ++p) {
    EXPECT_GE(a.ssim[p], -1.0);
    EXPECT_LE(a.ssim[p], 1.0);
  }
  EXPECT_EQ(a.ssim_window[1], 7u);  // thin planes use the largest odd window that fits
}

TEST(Phantom, DeterministicBoundedDistinct) {
  for (auto kind : {PhantomKind::shepp3d, PhantomKind::blobs, PhantomKind::shells}) {
    const Volume a = make_phantom({kind, {8, 32, 32}, 10});
    const Volume b = make_phantom({kind, {8, 32, 32}, 10});
    const Volume c = make_phantom({kind, {8, 32, 32}, 11});
    EXPECT_EQ(a.data, b.data);
    EXPECT_NE(a.data, c.data);
    double lo = 1.0, hi = 0.0;
    for (double v : a.data) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    EXPECT_GE(lo, 0.0);
    EXPECT_LE(hi, 1.0);
    EXPECT_GT(hi, 0.1) << phantom_kind_name(kind);
  }
  EXPECT_THROW(parse_phantom_kind("cube"), std::invalid_argument);
  EXPECT_THROW(make_phantom({PhantomKind::blobs, {0, 4, 4}, 1}), std::invalid_argument);
}

TEST(Config, ParsesSectionsAndTypes) {
  const Config c = Config::parse(R"(
# comment
top = 3
[admm.consistency]
rho1 = 0.01   # trailing
K = 10
[experiment]
methods = ["admm", "cddm-dm-on"]
t0 = [0.3, 0.5]
name = "run # one"
flag = true
empty = []
)");
  EXPECT_EQ(c.get_size("top", 0), 3u);
  EXPECT_DOUBLE_EQ(c.get_double("admm.consistency.rho1", 0), 0.01);
  EXPECT_EQ(c.get_strings("experiment.methods", {}), (std::vector<std::string>{"admm", "cddm-dm-on"}));
  EXPECT_EQ(c.get_doubles("experiment.t0", {}), (std::vector<double>{0.3, 0.5}));
  EXPECT_EQ(c.get_string("experiment.name", ""), "run # one");
  EXPECT_TRUE(c.get_bool("experiment.flag", false));
  EXPECT_TRUE(c.get_strings("experiment.empty", {"x"}).empty());
  EXPECT_EQ(c.get_double("missing.key", 2.5), 2.5);
  EXPECT_THROW(c.get_string("top", ""), ConfigError);
  EXPECT_THROW(Config::parse("[a]\nK = -1\n").get_size("a.K", 0), ConfigError);
}

TEST(Config, ErrorsNameTheLine) {
  try {
    Config::parse("a = 1\nb 2\n", "cfg");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("cfg:2"), std::string::npos);
  }
  EXPECT_THROW(Config::parse("x = 1.5.2"), ConfigError);
  EXPECT_THROW(Config::parse("[open"), ConfigError);
}

TEST(Config, ProfilesMapOntoSolverParameters) {
  const Config c = Config::parse("[admm.low_quality]\nrho1 = 3\nK = 7\n[cddm]\ndirections = \"z-only\"\nt0 = 0.3\n");
  const CddmConfig k = cddm_from(c);
  EXPECT_EQ(k.low_quality.rho1, 3.0);
  EXPECT_EQ(k.low_quality.K, 7u);
  EXPECT_EQ(k.low_quality.lambda, 1.2);
  EXPECT_EQ(k.consistency.rho2, 10.0);
  EXPECT_EQ(k.directions, DirectionMode::z_only);
  EXPECT_EQ(k.t0, 0.3);
  EXPECT_THROW(cddm_from(Config::parse("[cddm]\ndirections = \"xy\"\n")), ConfigError);
}

TEST(Io, Pgm16Header) {
  const auto dir = fresh_dir("pgm");
  const std::vector<double> img{0.0, 0.5, 1.0, 2.0, -1.0, 0.25};
  write_pgm16(dir / "a.pgm", img, 2, 3);
  const std::string s = slurp(dir / "a.pgm");
  ASSERT_EQ(s.substr(0, 13), std::string("P5\n3 2\n65535\n"));
  const auto* px = reinterpret_cast<const unsigned char*>(s.data()) + 13;
  EXPECT_EQ(px[4] * 256 + px[5], 65535);  // 1.0
  EXPECT_EQ(px[6] * 256 + px[7], 65535);  // clipped 2.0
  EXPECT_EQ(px[8] * 256 + px[9], 0);      // clipped -1.0
  EXPECT_EQ(px[2] * 256 + px[3], 32768);  // 0.5
}

TEST(Io, SinogramRoundTrip) {
  const auto dir = fresh_dir("sino");
  Sinogram s(2, {0.1, 0.9, 2.0}, 5);
  Rng rng(8);
  for (auto& v : s.data) v = static_cast<double>(static_cast<float>(rng.normal()));
  save_sinogram(s, dir / "s.raw");
  const Sinogram b = load_sinogram(dir / "s.raw");
  EXPECT_EQ(b.data, s.data);
  EXPECT_EQ(b.n_det, 5u);
  ASSERT_EQ(b.view_angles.size(), 3u);
  EXPECT_DOUBLE_EQ(b.view_angles[2], 2.0);
}

namespace {

const char* kSolverOnly = R"(
[experiment]
methods = ["admm", "standard-admm"]
phantoms = ["shepp3d", "blobs"]
dims = [4, 16, 16]
seed = 3
[admm.low_quality]
K = 8
)";

// Tiny networks saved once and reused by the diffusion experiments.
Config diffusion_config(const fs::path& dir, const std::string& extra) {
  const auto sched = Schedule::linear(1000);
  const auto base = dir / "base.ckpt", dm = dir / "dm.ckpt";
  if (!fs::exists(base)) {
    Net(NetConfig{4, 2, 8}, 1).save(base, sched.hash());
    Net(NetConfig{4, 2, 8}, 2).save(dm, sched.hash());
  }
  std::string text = "[checkpoints]\nbase = \"" + base.string() + "\"\ndm = \"" + dm.string() + "\"\n" +
                     "[network]\nchannels = 4\nblocks = 2\nemb_dim = 8\n"
                     "[admm.low_quality]\nK = 5\n[admm.consistency]\nK = 2\n[cddm]\ninfer_steps = 10\n" + extra;
  return Config::parse(text);
}

}  // namespace

TEST(Experiment, EmptyMethodListFailsBeforeCompute) {
  const auto dir = fresh_dir("empty");
  EXPECT_THROW(run_experiment(Config::parse("[experiment]\nmethods = []\n"), dir / "out"), ConfigError);
  EXPECT_FALSE(fs::exists(dir / "out"));
  EXPECT_THROW(run_experiment(Config::parse("[experiment]\nmethods = [\"magic\"]\n"), dir / "out"), ConfigError);
}

TEST(Experiment, SolverOnlyMatrixIsCompleteAndReproducible) {
  const auto dir = fresh_dir("solver");
  const auto report = run_experiment(Config::parse(kSolverOnly), dir / "a");
  EXPECT_EQ(report.cells.size(), 4u);
  const std::string csv = slurp(dir / "a" / "metrics.csv");
  EXPECT_EQ(count_lines(csv), 1u + 2 * 2 * 3);
  EXPECT_EQ(csv.find("nan"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "a" / "metrics.json"));
  EXPECT_TRUE(fs::exists(dir / "a" / "manifest.json"));
  EXPECT_TRUE(fs::exists(dir / "a" / "cells" / "admm_p0_shepp3d" / "recon_axial.pgm"));
  EXPECT_TRUE(fs::exists(dir / "a" / "cells" / "admm_p1_blobs" / "recon.raw"));

  Config threaded = Config::parse(kSolverOnly);
  threaded.set("experiment.threads", 3.0);
  run_experiment(threaded, dir / "b");
  EXPECT_EQ(slurp(dir / "b" / "metrics.csv"), csv);
}

TEST(Experiment, SweepEmitsEveryCellAndIsReproducible) {
  const auto dir = fresh_dir("sweep");
  const Config c = diffusion_config(dir, R"(
[experiment]
methods = ["admm", "cddm-dm-off", "cddm-dm-on"]
phantoms = ["shepp3d"]
phantom_seeds = [100, 101]
dims = [4, 16, 16]
t0 = [0.3, 0.5, 0.7]
seed = 5
)");
  const auto report = run_experiment(c, dir / "a");
  EXPECT_EQ(report.cells.size(), 2u + 2 * 2 * 3);
  const std::string csv = slurp(dir / "a" / "metrics.csv");
  EXPECT_EQ(count_lines(csv), 1u + report.cells.size() * 3);
  EXPECT_EQ(csv.find("nan"), std::string::npos);
  const std::string sweep = slurp(dir / "a" / "sweep_t0.csv");
  EXPECT_EQ(count_lines(sweep), 1u + 3 * 2);
  EXPECT_EQ(sweep.find("nan"), std::string::npos);

  Config threaded = c;
  threaded.set("experiment.threads", 2.0);
  run_experiment(threaded, dir / "b");
  EXPECT_EQ(slurp(dir / "b" / "metrics.csv"), csv);
  EXPECT_EQ(slurp(dir / "b" / "sweep_t0.csv"), sweep);
}

TEST(Experiment, FailedCellsAreReportedWithPartialArtifacts) {
  const auto dir = fresh_dir("fail");
  // t0 = 0.01 is below one step interval, so those cells fail
  const Config c = diffusion_config(dir, R"(
[experiment]
methods = ["admm", "cddm-dm-on"]
phantoms = ["blobs"]
dims = [4, 16, 16]
t0 = [0.01, 0.5]
)");
  EXPECT_THROW(run_experiment(c, dir / "out"), std::runtime_error);
  const auto manifest = nlohmann::json::parse(slurp(dir / "out" / "manifest.json"));
  EXPECT_EQ(manifest["completed"].size(), 2u);
  EXPECT_EQ(manifest["failed"].size(), 1u);
  EXPECT_EQ(count_lines(slurp(dir / "out" / "metrics.csv")), 1u + 2 * 3);
}

TEST(Experiment, MissingCheckpointWithWrongScheduleIsRejected) {
  const auto dir = fresh_dir("hash");
  Net(NetConfig{4, 2, 8}, 1).save(dir / "base.ckpt", Schedule::linear(500).hash());
  Net(NetConfig{4, 2, 8}, 1).save(dir / "dm.ckpt", Schedule::linear(500).hash());
  const Config c = Config::parse("[checkpoints]\nbase = \"" + (dir / "base.ckpt").string() + "\"\ndm = \"" +
                                 (dir / "dm.ckpt").string() +
                                 "\"\n[experiment]\nmethods = [\"cddm-dm-on\"]\ndims = [2, 16, 16]\n");
  EXPECT_THROW(run_experiment(c, dir / "out"), std::runtime_error);
}
