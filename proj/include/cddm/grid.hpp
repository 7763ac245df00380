// grid.hpp
//
// Dense scalar grids (volumes and sinograms), a counter-based random number
// generator, and the raw+JSON volume format shared by the rest of the library.

#ifndef CDDM_GRID_HPP
#define CDDM_GRID_HPP

#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace cddm {

using Dims3 = std::array<std::size_t, 3>;    // (nz, ny, nx)
using Spacing3 = std::array<double, 3>;      // (sz, sy, sx) in mm

/// Dense z-major volume: element (z, y, x) lives at (z * ny + y) * nx + x.
struct Volume {
  Dims3 dims{0, 0, 0};
  Spacing3 spacing{1.0, 1.0, 1.0};
  std::vector<double> data;

  Volume() = default;
  explicit Volume(Dims3 d, Spacing3 s = {1.0, 1.0, 1.0}, double fill = 0.0)
      : dims(d), spacing(s), data(d[0] * d[1] * d[2], fill) {}

  std::size_t nz() const { return dims[0]; }
  std::size_t ny() const { return dims[1]; }
  std::size_t nx() const { return dims[2]; }
  std::size_t size() const { return data.size(); }
  std::size_t slice_size() const { return dims[1] * dims[2]; }

  std::size_t index(std::size_t z, std::size_t y, std::size_t x) const {
    return (z * dims[1] + y) * dims[2] + x;
  }
  double& at(std::size_t z, std::size_t y, std::size_t x) { return data[index(z, y, x)]; }
  double at(std::size_t z, std::size_t y, std::size_t x) const { return data[index(z, y, x)]; }

  std::span<double> slice(std::size_t z) { return {data.data() + z * slice_size(), slice_size()}; }
  std::span<const double> slice(std::size_t z) const {
    return {data.data() + z * slice_size(), slice_size()};
  }

  /// A zero volume with the same shape and spacing.
  Volume zeros_like() const { return Volume(dims, spacing); }

  bool same_shape(const Volume& o) const { return dims == o.dims; }
};

/// Per-slice projection data, z-major: element (z, view, det).
struct Sinogram {
  std::size_t nz = 0;
  std::size_t n_views = 0;
  std::size_t n_det = 0;
  std::vector<double> view_angles;
  std::vector<double> data;

  Sinogram() = default;
  Sinogram(std::size_t z, std::vector<double> angles, std::size_t det)
      : nz(z), n_views(angles.size()), n_det(det), view_angles(std::move(angles)),
        data(nz * n_views * n_det, 0.0) {}

  std::size_t size() const { return data.size(); }
  std::size_t slice_size() const { return n_views * n_det; }
  double& at(std::size_t z, std::size_t v, std::size_t d) { return data[(z * n_views + v) * n_det + d]; }
  double at(std::size_t z, std::size_t v, std::size_t d) const {
    return data[(z * n_views + v) * n_det + d];
  }
  std::span<double> slice(std::size_t z) { return {data.data() + z * slice_size(), slice_size()}; }
  std::span<const double> slice(std::size_t z) const {
    return {data.data() + z * slice_size(), slice_size()};
  }
};

inline void check_view_angles(std::span<const double> angles) {
  for (std::size_t i = 0; i < angles.size(); ++i) {
    if (!(angles[i] >= 0.0 && angles[i] < std::numbers::pi))
      throw std::invalid_argument("view angle outside [0, pi)");
    if (i > 0 && !(angles[i] > angles[i - 1]))
      throw std::invalid_argument("view angles must be strictly increasing");
  }
}

/// Equispaced angles k*pi/n, k = 0..n-1.
inline std::vector<double> equispaced_angles(std::size_t n) {
  std::vector<double> a(n);
  for (std::size_t k = 0; k < n; ++k) a[k] = std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
  return a;
}

// ---------------------------------------------------------------------------
// Flat-array helpers

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw std::invalid_argument("dot: length mismatch (" + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()) + ")");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// y += alpha * x
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("axpy: length mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline bool all_finite(std::span<const double> a) {
  for (double v : a)
    if (!std::isfinite(v)) return false;
  return true;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("max_abs_diff: length mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// ---------------------------------------------------------------------------
// Rng
//
// SplitMix64 used as a counter-based generator: draw i of a stream with seed s
// is mix(s + (i + 1) * 0x9E3779B97F4A7C15). Streams are split by hashing the
// parent seed with a stream id, so workers never share state. Normals come from
// the Box-Muller transform over pairs of 53-bit uniforms in (0, 1].

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  static constexpr std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t next_u64() {
    ++counter_;
    return mix(seed_ + counter_ * 0x9E3779B97F4A7C15ULL);
  }

  /// Uniform in (0, 1].
  double uniform() { return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53; }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: n == 0");
    // Lemire's multiply-shift; the bias is < n / 2^64 and irrelevant here.
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double th = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(th);
    has_spare_ = true;
    return r * std::cos(th);
  }

  /// Independent child stream.
  Rng split(std::uint64_t stream) const {
    return Rng(mix(seed_ ^ mix(stream + 0x632BE59BD9B4E019ULL)));
  }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

inline std::vector<double> randn(Rng& rng, std::size_t n) {
  std::vector<double> out(n);
  for (auto& v : out) v = rng.normal();
  return out;
}

inline Volume randn_like(Rng& rng, const Volume& like) {
  Volume v = like.zeros_like();
  for (auto& x : v.data) x = rng.normal();
  return v;
}

// ---------------------------------------------------------------------------
// Raw volume I/O: little-endian float32 payload at `path`, JSON sidecar at
// `path + ".json"`.

/// Payload length disagrees with the sidecar dims.
class SizeMismatchError : public std::runtime_error {
 public:
  SizeMismatchError(std::uintmax_t expected, std::uintmax_t actual)
      : std::runtime_error("raw volume size mismatch: expected " + std::to_string(expected) +
                           " bytes, found " + std::to_string(actual)),
        expected_bytes(expected), actual_bytes(actual) {}
  std::uintmax_t expected_bytes;
  std::uintmax_t actual_bytes;
};

inline std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".json");
}

namespace detail {

inline void write_f32_le(std::ostream& os, std::span<const double> values) {
  std::vector<unsigned char> buf(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(values[i]));
    for (int b = 0; b < 4; ++b) buf[i * 4 + b] = static_cast<unsigned char>(bits >> (8 * b));
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

inline std::vector<double> read_f32_le(std::istream& is, std::size_t count) {
  std::vector<unsigned char> buf(count * 4);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(is.gcount()) != buf.size())
    throw std::runtime_error("short read on f32 payload");
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(buf[i * 4 + b]) << (8 * b);
    out[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
  return out;
}

}  // namespace detail

/// Rounds every value to the nearest float32, i.e. to what save_raw stores.
inline Volume quantize_f32(Volume v) {
  for (auto& x : v.data) x = static_cast<double>(static_cast<float>(x));
  return v;
}

inline void save_raw(const Volume& v, const std::filesystem::path& path) {
  if (v.data.size() != v.nz() * v.ny() * v.nx()) throw std::invalid_argument("save_raw: inconsistent volume");
  {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    detail::write_f32_le(os, v.data);
  }
  nlohmann::json header = {{"dims", {v.dims[0], v.dims[1], v.dims[2]}},
                           {"spacing", {v.spacing[0], v.spacing[1], v.spacing[2]}},
                           {"dtype", "f32"},
                           {"order", "zyx"}};
  std::ofstream hs(sidecar_path(path));
  if (!hs) throw std::runtime_error("cannot open sidecar for " + path.string());
  hs << header.dump() << '\n';
}

inline Volume load_raw(const std::filesystem::path& path) {
  std::ifstream hs(sidecar_path(path));
  if (!hs) throw std::runtime_error("missing sidecar " + sidecar_path(path).string());
  const auto header = nlohmann::json::parse(hs);
  if (header.at("dtype").get<std::string>() != "f32")
    throw std::runtime_error("unsupported dtype " + header.at("dtype").get<std::string>());
  if (header.value("order", std::string("zyx")) != "zyx")
    throw std::runtime_error("unsupported axis order");
  const auto d = header.at("dims").get<std::array<std::size_t, 3>>();
  const auto s = header.at("spacing").get<std::array<double, 3>>();

  const std::uintmax_t expected = static_cast<std::uintmax_t>(d[0] * d[1] * d[2]) * 4;
  const std::uintmax_t actual = std::filesystem::file_size(path);
  if (expected != actual) throw SizeMismatchError(expected, actual);

  std::ifstream is(path, std::ios::binary);
  Volume v(d, s);
  v.data = detail::read_f32_le(is, v.size());
  if (!all_finite(v.data)) throw std::runtime_error("non-finite value in " + path.string());
  return v;
}

}  // namespace cddm

#endif
