// denoiser.hpp
//
// A compact conditional noise-prediction network eps(x_t, t, c) over 2D slices,
// its reverse-mode gradients, and the two training procedures: plain noise
// regression and the discrepancy-mitigation (DM) fine-tune, where a second
// label learns to predict noise plus the error introduced by data consistency.
//
// Layout (C channels, E-dim embedding, B residual blocks):
//
//   emb = MLP(sinusoid(t)) + label_embedding[c]
//   h   = conv_in(x)
//   h   = h + conv2(silu(conv1(silu(h)) + proj_b(emb)))      (B times)
//   out = conv_out(silu(h))
//
// All convolutions are 3x3 with zero padding. The network is templated on its
// scalar type so gradient checks can run in double while training runs in float.

#ifndef CDDM_DENOISER_HPP
#define CDDM_DENOISER_HPP

#include <cblas.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffusion.hpp"
#include "grid.hpp"
#include "operators.hpp"
#include "solvers.hpp"

namespace cddm {

/// c1 marks authentic noisy images, c2 images that went through data consistency.
enum class Label : int { c1 = 0, c2 = 1 };

namespace nn {

inline void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, float alpha, const float* a,
                 std::size_t lda, const float* b, std::size_t ldb, float beta, float* c, std::size_t ldc) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb),
              beta, c, static_cast<int>(ldc));
}

inline void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, double alpha, const double* a,
                 std::size_t lda, const double* b, std::size_t ldb, double beta, double* c, std::size_t ldc) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb),
              beta, c, static_cast<int>(ldc));
}

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}
template <typename T>
T silu(T x) {
  return x * sigmoid(x);
}
template <typename T>
T silu_grad(T x) {
  const T s = sigmoid(x);
  return s * (T(1) + x * (T(1) - s));
}

// col[(ci*9 + ky*3 + kx), y*w + x] = in[ci, y + ky - 1, x + kx - 1] (zero outside)
template <typename T>
void im2col3x3(const T* in, std::size_t cin, std::size_t h, std::size_t w, T* col) {
  const std::size_t hw = h * w;
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        T* dst = col + (ci * 9 + static_cast<std::size_t>(ky * 3 + kx)) * hw;
        const T* src = in + ci * hw;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y) + ky - 1;
          T* row = dst + y * w;
          if (sy < 0 || sy >= static_cast<long>(h)) {
            std::fill(row, row + w, T(0));
            continue;
          }
          const T* srow = src + static_cast<std::size_t>(sy) * w;
          for (std::size_t x = 0; x < w; ++x) {
            const long sx = static_cast<long>(x) + kx - 1;
            row[x] = (sx < 0 || sx >= static_cast<long>(w)) ? T(0) : srow[sx];
          }
        }
      }
}

// Adjoint of im2col3x3, accumulating into `in`.
template <typename T>
void col2im3x3(const T* col, std::size_t cin, std::size_t h, std::size_t w, T* in) {
  const std::size_t hw = h * w;
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const T* src = col + (ci * 9 + static_cast<std::size_t>(ky * 3 + kx)) * hw;
        T* dst = in + ci * hw;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y) + ky - 1;
          if (sy < 0 || sy >= static_cast<long>(h)) continue;
          T* drow = dst + static_cast<std::size_t>(sy) * w;
          const T* row = src + y * w;
          for (std::size_t x = 0; x < w; ++x) {
            const long sx = static_cast<long>(x) + kx - 1;
            if (sx >= 0 && sx < static_cast<long>(w)) drow[sx] += row[x];
          }
        }
      }
}

template <typename T>
struct Workspace {
  std::vector<T> col, dcol, tmp;
  void reserve(std::size_t col_size) {
    if (col.size() < col_size) {
      col.resize(col_size);
      dcol.resize(col_size);
    }
  }
};

// out[cout, hw] = W[cout, cin*9] * im2col(in) + b
template <typename T>
void conv_forward(const T* wgt, const T* bias, const T* in, std::size_t cin, std::size_t cout, std::size_t h,
                  std::size_t w, T* out, Workspace<T>& ws) {
  const std::size_t hw = h * w;
  ws.reserve(cin * 9 * hw);
  im2col3x3(in, cin, h, w, ws.col.data());
  gemm(false, false, cout, hw, cin * 9, T(1), wgt, cin * 9, ws.col.data(), hw, T(0), out, hw);
  for (std::size_t co = 0; co < cout; ++co) {
    T* o = out + co * hw;
    for (std::size_t p = 0; p < hw; ++p) o[p] += bias[co];
  }
}

// Accumulates dW, db and (if din != nullptr) din.
template <typename T>
void conv_backward(const T* wgt, const T* in, std::size_t cin, std::size_t cout, std::size_t h, std::size_t w,
                   const T* dout, T* dw, T* db, T* din, Workspace<T>& ws) {
  const std::size_t hw = h * w;
  ws.reserve(cin * 9 * hw);
  im2col3x3(in, cin, h, w, ws.col.data());
  gemm(false, true, cout, cin * 9, hw, T(1), dout, hw, ws.col.data(), hw, T(1), dw, cin * 9);
  for (std::size_t co = 0; co < cout; ++co) {
    T s = 0;
    const T* d = dout + co * hw;
    for (std::size_t p = 0; p < hw; ++p) s += d[p];
    db[co] += s;
  }
  if (din) {
    gemm(true, false, cin * 9, hw, cout, T(1), wgt, cin * 9, dout, hw, T(0), ws.dcol.data(), hw);
    col2im3x3(ws.dcol.data(), cin, h, w, din);
  }
}

}  // namespace nn

struct NetConfig {
  std::size_t channels = 32;
  std::size_t blocks = 4;
  std::size_t emb_dim = 32;
};

/// One named parameter tensor inside the flat parameter vector.
struct ParamInfo {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
};

/// Activations recorded by a forward pass, consumed by backward().
template <typename T>
struct Tape {
  bool recorded = false;
  std::size_t h = 0, w = 0, t = 0;
  Label label = Label::c1;
  std::vector<T> x, emb0, u1, a1, emb;
  std::vector<std::vector<T>> hs;  // block inputs, then the final hidden state
  std::vector<std::vector<T>> c1;  // pre-activations of each block's first conv
};

template <typename T>
class EpsNet {
 public:
  using scalar_type = T;

  EpsNet() = default;

  EpsNet(NetConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg.channels == 0 || cfg.emb_dim < 2 || cfg.emb_dim % 2 != 0)
      throw std::invalid_argument("EpsNet: need channels >= 1 and an even emb_dim >= 2");
    build_layout();
    init(seed);
  }

  const NetConfig& config() const { return cfg_; }
  const std::vector<ParamInfo>& layout() const { return layout_; }
  std::vector<T>& params() { return params_; }
  const std::vector<T>& params() const { return params_; }
  std::size_t num_params() const { return params_.size(); }

  const ParamInfo& info(const std::string& name) const {
    for (const auto& p : layout_)
      if (p.name == name) return p;
    throw std::out_of_range("no parameter named " + name);
  }

  /// Sinusoidal embedding of the timestep.
  std::vector<T> time_embedding(std::size_t t) const {
    const std::size_t half = cfg_.emb_dim / 2;
    std::vector<T> e(cfg_.emb_dim);
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      e[i] = static_cast<T>(std::sin(static_cast<double>(t) * freq));
      e[i + half] = static_cast<T>(std::cos(static_cast<double>(t) * freq));
    }
    return e;
  }

  /// Predicts the noise of one h x w slice. Records activations when `tape` is given.
  std::vector<T> forward(std::span<const T> x, std::size_t h, std::size_t w, std::size_t t, Label label,
                         Tape<T>* tape = nullptr) const {
    if (x.size() != h * w || h == 0 || w == 0) throw std::invalid_argument("EpsNet::forward: shape mismatch");
    const std::size_t C = cfg_.channels, E = cfg_.emb_dim, hw = h * w;
    nn::Workspace<T> ws;

    // conditioning
    const std::vector<T> emb0 = time_embedding(t);
    std::vector<T> u1(E), a1(E), emb(E);
    linear(p(o_.t1_w), p(o_.t1_b), emb0.data(), E, E, u1.data());
    for (std::size_t i = 0; i < E; ++i) a1[i] = nn::silu(u1[i]);
    linear(p(o_.t2_w), p(o_.t2_b), a1.data(), E, E, emb.data());
    const T* lab = p(o_.label) + static_cast<std::size_t>(label) * E;
    for (std::size_t i = 0; i < E; ++i) emb[i] += lab[i];

    std::vector<T> hcur(C * hw), act(C * hw), c1(C * hw), c2(C * hw), shift(C);
    nn::conv_forward(p(o_.in_w), p(o_.in_b), x.data(), 1, C, h, w, hcur.data(), ws);
    if (tape) {
      *tape = Tape<T>{};
      tape->h = h;
      tape->w = w;
      tape->t = t;
      tape->label = label;
      tape->x.assign(x.begin(), x.end());
      tape->emb0 = emb0;
      tape->u1 = u1;
      tape->a1 = a1;
      tape->emb = emb;
    }
    for (std::size_t b = 0; b < cfg_.blocks; ++b) {
      if (tape) tape->hs.push_back(hcur);
      for (std::size_t i = 0; i < C * hw; ++i) act[i] = nn::silu(hcur[i]);
      nn::conv_forward(p(o_.c1_w[b]), p(o_.c1_b[b]), act.data(), C, C, h, w, c1.data(), ws);
      linear(p(o_.proj_w[b]), p(o_.proj_b[b]), emb.data(), E, C, shift.data());
      for (std::size_t co = 0; co < C; ++co)
        for (std::size_t q = 0; q < hw; ++q) c1[co * hw + q] += shift[co];
      if (tape) tape->c1.push_back(c1);
      for (std::size_t i = 0; i < C * hw; ++i) act[i] = nn::silu(c1[i]);
      nn::conv_forward(p(o_.c2_w[b]), p(o_.c2_b[b]), act.data(), C, C, h, w, c2.data(), ws);
      for (std::size_t i = 0; i < C * hw; ++i) hcur[i] += c2[i];
    }
    if (tape) tape->hs.push_back(hcur);
    for (std::size_t i = 0; i < C * hw; ++i) act[i] = nn::silu(hcur[i]);
    std::vector<T> out(hw);
    nn::conv_forward(p(o_.out_w), p(o_.out_b), act.data(), C, 1, h, w, out.data(), ws);
    if (tape) tape->recorded = true;
    return out;
  }

  /// Reverse-mode pass: accumulates dLoss/dparams into `grad` given dLoss/dout.
  void backward(const Tape<T>& tape, std::span<const T> dout, std::vector<T>& grad) const {
    if (!tape.recorded) throw std::logic_error("EpsNet::backward called without a recorded forward pass");
    const std::size_t h = tape.h, w = tape.w, hw = h * w, C = cfg_.channels, E = cfg_.emb_dim;
    if (dout.size() != hw) throw std::invalid_argument("EpsNet::backward: adjoint shape mismatch");
    if (grad.size() != params_.size()) grad.assign(params_.size(), T(0));
    nn::Workspace<T> ws;
    auto g = [&grad](std::size_t off) { return grad.data() + off; };

    std::vector<T> act(C * hw), dact(C * hw), dh(C * hw), dc1(C * hw), demb(E, T(0)), dshift(C);

    // output conv
    const auto& hfin = tape.hs.back();
    for (std::size_t i = 0; i < C * hw; ++i) act[i] = nn::silu(hfin[i]);
    std::fill(dact.begin(), dact.end(), T(0));
    nn::conv_backward(p(o_.out_w), act.data(), C, 1, h, w, dout.data(), g(o_.out_w), g(o_.out_b), dact.data(), ws);
    for (std::size_t i = 0; i < C * hw; ++i) dh[i] = dact[i] * nn::silu_grad(hfin[i]);

    for (std::size_t bb = cfg_.blocks; bb-- > 0;) {
      const auto& c1 = tape.c1[bb];
      const auto& hin = tape.hs[bb];
      // second conv: input silu(c1), output gradient dh
      for (std::size_t i = 0; i < C * hw; ++i) act[i] = nn::silu(c1[i]);
      std::fill(dact.begin(), dact.end(), T(0));
      nn::conv_backward(p(o_.c2_w[bb]), act.data(), C, C, h, w, dh.data(), g(o_.c2_w[bb]), g(o_.c2_b[bb]),
                        dact.data(), ws);
      for (std::size_t i = 0; i < C * hw; ++i) dc1[i] = dact[i] * nn::silu_grad(c1[i]);
      // embedding projection
      for (std::size_t co = 0; co < C; ++co) {
        T s = 0;
        for (std::size_t q = 0; q < hw; ++q) s += dc1[co * hw + q];
        dshift[co] = s;
      }
      linear_backward(p(o_.proj_w[bb]), tape.emb.data(), E, C, dshift.data(), g(o_.proj_w[bb]), g(o_.proj_b[bb]),
                      demb.data());
      // first conv: input silu(hin)
      for (std::size_t i = 0; i < C * hw; ++i) act[i] = nn::silu(hin[i]);
      std::fill(dact.begin(), dact.end(), T(0));
      nn::conv_backward(p(o_.c1_w[bb]), act.data(), C, C, h, w, dc1.data(), g(o_.c1_w[bb]), g(o_.c1_b[bb]),
                        dact.data(), ws);
      for (std::size_t i = 0; i < C * hw; ++i) dh[i] += dact[i] * nn::silu_grad(hin[i]);
    }
    nn::conv_backward(p(o_.in_w), tape.x.data(), 1, C, h, w, dh.data(), g(o_.in_w), g(o_.in_b),
                      static_cast<T*>(nullptr), ws);

    // conditioning path
    T* dlab = g(o_.label) + static_cast<std::size_t>(tape.label) * E;
    for (std::size_t i = 0; i < E; ++i) dlab[i] += demb[i];
    std::vector<T> da1(E, T(0));
    linear_backward(p(o_.t2_w), tape.a1.data(), E, E, demb.data(), g(o_.t2_w), g(o_.t2_b), da1.data());
    for (std::size_t i = 0; i < E; ++i) da1[i] *= nn::silu_grad(tape.u1[i]);
    linear_backward(p(o_.t1_w), tape.emb0.data(), E, E, da1.data(), g(o_.t1_w), g(o_.t1_b),
                    static_cast<T*>(nullptr));
  }

  /// Copies the c1 label embedding into the c2 slot.
  void copy_label_embedding(Label from, Label to) {
    const std::size_t E = cfg_.emb_dim;
    std::copy_n(params_.data() + o_.label + static_cast<std::size_t>(from) * E, E,
                params_.data() + o_.label + static_cast<std::size_t>(to) * E);
  }

  /// Noise prediction for every slice of a volume.
  Volume predict(const Volume& x, std::size_t t, Label label) const {
    Volume out = x.zeros_like();
    std::vector<T> buf(x.slice_size());
    for (std::size_t z = 0; z < x.nz(); ++z) {
      const auto sl = x.slice(z);
      std::transform(sl.begin(), sl.end(), buf.begin(), [](double v) { return static_cast<T>(v); });
      const auto o = forward(buf, x.ny(), x.nx(), t, label);
      auto dst = out.slice(z);
      std::transform(o.begin(), o.end(), dst.begin(), [](T v) { return static_cast<double>(v); });
    }
    return out;
  }

  /// Same layout with a different scalar type.
  template <typename U>
  EpsNet<U> cast() const {
    EpsNet<U> o;
    o.cfg_ = cfg_;
    o.layout_ = layout_;
    o.o_ = o_;
    o.params_.assign(params_.begin(), params_.end());
    return o;
  }

  // ---- checkpoints: little-endian f32 blob + JSON manifest -----------------

  void save(const std::filesystem::path& blob, const std::string& schedule_hash) const {
    {
      std::ofstream os(blob, std::ios::binary);
      if (!os) throw std::runtime_error("cannot write " + blob.string());
      std::vector<double> tmp(params_.begin(), params_.end());
      detail::write_f32_le(os, tmp);
    }
    nlohmann::json m;
    m["format"] = "cddm-epsnet-v1";
    m["dtype"] = "f32";
    m["config"] = {{"channels", cfg_.channels}, {"blocks", cfg_.blocks}, {"emb_dim", cfg_.emb_dim}};
    m["schedule_hash"] = schedule_hash;
    m["labels"] = {"c1", "c2"};
    m["num_params"] = params_.size();
    for (const auto& pi : layout_) m["layers"].push_back({{"name", pi.name}, {"shape", pi.shape}});
    std::ofstream ms(sidecar_path(blob));
    ms << m.dump(2) << '\n';
  }

  static EpsNet load(const std::filesystem::path& blob, const std::string* expected_schedule_hash = nullptr) {
    std::ifstream ms(sidecar_path(blob));
    if (!ms) throw std::runtime_error("missing manifest for " + blob.string());
    const auto m = nlohmann::json::parse(ms);
    if (m.at("format") != "cddm-epsnet-v1") throw std::runtime_error("unknown checkpoint format");
    if (expected_schedule_hash && m.at("schedule_hash").get<std::string>() != *expected_schedule_hash)
      throw std::runtime_error("checkpoint was trained with a different noise schedule");
    NetConfig cfg{m["config"]["channels"], m["config"]["blocks"], m["config"]["emb_dim"]};
    EpsNet net(cfg, 0);
    std::size_t i = 0;
    for (const auto& layer : m.at("layers")) {
      if (i >= net.layout_.size() || layer.at("name") != net.layout_[i].name ||
          layer.at("shape").get<std::vector<std::size_t>>() != net.layout_[i].shape)
        throw std::runtime_error("checkpoint layer table does not match the network layout");
      ++i;
    }
    const std::uintmax_t expected = net.params_.size() * 4;
    const std::uintmax_t actual = std::filesystem::file_size(blob);
    if (expected != actual) throw SizeMismatchError(expected, actual);
    std::ifstream is(blob, std::ios::binary);
    const auto vals = detail::read_f32_le(is, net.params_.size());
    std::transform(vals.begin(), vals.end(), net.params_.begin(), [](double v) { return static_cast<T>(v); });
    return net;
  }

 private:
  template <typename U>
  friend class EpsNet;

  struct Offsets {
    std::size_t in_w = 0, in_b = 0, t1_w = 0, t1_b = 0, t2_w = 0, t2_b = 0, label = 0, out_w = 0, out_b = 0;
    std::vector<std::size_t> proj_w, proj_b, c1_w, c1_b, c2_w, c2_b;
  };

  const T* p(std::size_t off) const { return params_.data() + off; }

  std::size_t add(const std::string& name, std::vector<std::size_t> shape) {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    const std::size_t off = layout_.empty() ? 0 : layout_.back().offset + layout_.back().size;
    layout_.push_back({name, std::move(shape), off, n});
    return off;
  }

  void build_layout() {
    const std::size_t C = cfg_.channels, E = cfg_.emb_dim;
    layout_.clear();
    o_ = Offsets{};
    o_.in_w = add("in.weight", {C, 1, 3, 3});
    o_.in_b = add("in.bias", {C});
    o_.t1_w = add("time.0.weight", {E, E});
    o_.t1_b = add("time.0.bias", {E});
    o_.t2_w = add("time.1.weight", {E, E});
    o_.t2_b = add("time.1.bias", {E});
    o_.label = add("label.embedding", {2, E});
    for (std::size_t b = 0; b < cfg_.blocks; ++b) {
      const std::string pre = "block" + std::to_string(b) + ".";
      o_.c1_w.push_back(add(pre + "conv1.weight", {C, C, 3, 3}));
      o_.c1_b.push_back(add(pre + "conv1.bias", {C}));
      o_.proj_w.push_back(add(pre + "emb.weight", {C, E}));
      o_.proj_b.push_back(add(pre + "emb.bias", {C}));
      o_.c2_w.push_back(add(pre + "conv2.weight", {C, C, 3, 3}));
      o_.c2_b.push_back(add(pre + "conv2.bias", {C}));
    }
    o_.out_w = add("out.weight", {1, C, 3, 3});
    o_.out_b = add("out.bias", {1});
    params_.assign(layout_.back().offset + layout_.back().size, T(0));
  }

  void init(std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t C = cfg_.channels, E = cfg_.emb_dim;
    auto fill = [&](std::size_t off, std::size_t n, double std_dev) {
      for (std::size_t i = 0; i < n; ++i) params_[off + i] = static_cast<T>(std_dev * rng.normal());
    };
    fill(o_.in_w, C * 9, std::sqrt(2.0 / 9.0));
    fill(o_.t1_w, E * E, std::sqrt(1.0 / static_cast<double>(E)));
    fill(o_.t2_w, E * E, std::sqrt(1.0 / static_cast<double>(E)));
    fill(o_.label, 2 * E, 0.5);
    for (std::size_t b = 0; b < cfg_.blocks; ++b) {
      fill(o_.c1_w[b], C * C * 9, std::sqrt(2.0 / (9.0 * static_cast<double>(C))));
      fill(o_.proj_w[b], C * E, std::sqrt(1.0 / static_cast<double>(E)));
      fill(o_.c2_w[b], C * C * 9, 0.2 * std::sqrt(2.0 / (9.0 * static_cast<double>(C))));
    }
    fill(o_.out_w, C * 9, std::sqrt(1.0 / (9.0 * static_cast<double>(C))));
  }

  // y[out] = W[out, in] x + b
  static void linear(const T* wgt, const T* bias, const T* x, std::size_t in, std::size_t out, T* y) {
    for (std::size_t o = 0; o < out; ++o) {
      T s = bias[o];
      const T* row = wgt + o * in;
      for (std::size_t i = 0; i < in; ++i) s += row[i] * x[i];
      y[o] = s;
    }
  }

  static void linear_backward(const T* wgt, const T* x, std::size_t in, std::size_t out, const T* dy, T* dw, T* db,
                              T* dx) {
    for (std::size_t o = 0; o < out; ++o) {
      db[o] += dy[o];
      T* row = dw + o * in;
      for (std::size_t i = 0; i < in; ++i) row[i] += dy[o] * x[i];
      if (dx) {
        const T* wrow = wgt + o * in;
        for (std::size_t i = 0; i < in; ++i) dx[i] += wrow[i] * dy[o];
      }
    }
  }

  NetConfig cfg_;
  std::vector<ParamInfo> layout_;
  Offsets o_;
  std::vector<T> params_;
};

using Net = EpsNet<float>;

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t steps = 1000;
  std::size_t batch = 4;
  double lr = 1e-3;
  double lambda_max = 1.0;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  double ema_decay = 0.0;  // 0 disables the running average
  bool augment = true;     // random dihedral flips of training slices
  std::size_t t_fixed = 0; // nonzero pins every draw to this timestep

  void validate() const {
    if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
    if (!(lambda_max > 0.0)) throw std::invalid_argument("lambda_max must be positive");
    if (batch == 0) throw std::invalid_argument("batch must be >= 1");
    if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw std::invalid_argument("ema_decay must lie in [0, 1)");
  }
};

struct LossRecord {
  std::size_t step = 0;
  double loss_standard = 0.0;
  double loss_dm = 0.0;
};

inline void write_loss_csv(const std::vector<LossRecord>& trace, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "step,loss_standard,loss_dm\n" << std::setprecision(9);
  for (const auto& r : trace) os << r.step << ',' << r.loss_standard << ',' << r.loss_dm << '\n';
}

/// Momentum-free adaptive step (RMS-normalised, bias-corrected second moment)
/// with global gradient-norm clipping.
template <typename T>
class AdaptiveStep {
 public:
  explicit AdaptiveStep(std::size_t n, double lr, double clip, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), clip_(clip), beta2_(beta2), eps_(eps), v_(n, 0.0) {}

  /// Returns the pre-clipping gradient norm.
  double apply(std::vector<T>& params, const std::vector<T>& grad) {
    double norm_sq = 0.0;
    for (T g : grad) norm_sq += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(norm_sq);
    if (!std::isfinite(norm)) throw std::runtime_error("non-finite gradient");
    const double scale = (clip_ > 0.0 && norm > clip_) ? clip_ / norm : 1.0;
    ++t_;
    const double bc = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = scale * static_cast<double>(grad[i]);
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g * g;
      params[i] -= static_cast<T>(lr_ * g / (std::sqrt(v_[i] / bc) + eps_));
    }
    return norm;
  }

 private:
  double lr_, clip_, beta2_, eps_;
  std::vector<double> v_;
  std::size_t t_ = 0;
};

namespace detail {

// One of the eight symmetries of the square, applied to an n x n slice.
inline std::vector<double> dihedral(std::span<const double> img, std::size_t h, std::size_t w, unsigned k) {
  if (k == 0) return {img.begin(), img.end()};
  std::vector<double> out(img.size());
  const bool can_transpose = h == w;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      std::size_t sy = y, sx = x;
      if ((k & 4) && can_transpose) std::swap(sy, sx);
      if (k & 1) sx = w - 1 - sx;
      if (k & 2) sy = h - 1 - sy;
      out[y * w + x] = img[sy * w + sx];
    }
  return out;
}

template <typename T>
double mse_and_adjoint(std::span<const T> out, std::span<const double> target, double norm, std::vector<T>& dout) {
  double loss = 0.0;
  dout.resize(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double d = static_cast<double>(out[i]) - target[i];
    loss += d * d;
    dout[i] = static_cast<T>(2.0 * d / norm);
  }
  return loss / static_cast<double>(out.size());
}

template <typename T>
std::vector<T> to_scalar(std::span<const double> v) {
  return std::vector<T>(v.begin(), v.end());
}

}  // namespace detail

/// Clean training slices (each nz == 1, all the same in-plane size).
struct SliceDataset {
  std::vector<Volume> slices;

  std::size_t size() const { return slices.size(); }
  bool empty() const { return slices.empty(); }

  /// Adds every axial slice of a volume.
  void add_volume(const Volume& v) {
    for (std::size_t z = 0; z < v.nz(); ++z) {
      Volume s({1, v.ny(), v.nx()}, v.spacing);
      std::copy(v.slice(z).begin(), v.slice(z).end(), s.data.begin());
      slices.push_back(std::move(s));
    }
  }
};

namespace detail {

inline Volume draw_slice(const SliceDataset& ds, Rng& rng, bool augment) {
  const Volume& src = ds.slices[rng.below(ds.size())];
  Volume s = src;
  if (augment) s.data = dihedral(src.data, src.ny(), src.nx(), static_cast<unsigned>(rng.below(8)));
  return s;
}

template <typename T>
void ema_update(std::vector<T>& ema, const std::vector<T>& p, double decay) {
  for (std::size_t i = 0; i < p.size(); ++i)
    ema[i] = static_cast<T>(decay * static_cast<double>(ema[i]) + (1.0 - decay) * static_cast<double>(p[i]));
}

}  // namespace detail

template <typename T>
struct TrainResult {
  EpsNet<T> net;
  std::vector<LossRecord> trace;
};

/// Noise regression E||eps - eps_theta(x_t, t, c1)||^2 with t uniform on [1, T].
template <typename T>
TrainResult<T> train_standard(EpsNet<T> net, const SliceDataset& data, const Schedule& sched,
                              const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train_standard: empty dataset");
  Rng rng(cfg.seed);
  AdaptiveStep<T> opt(net.num_params(), cfg.lr, cfg.grad_clip);
  std::vector<T> ema = net.params();
  std::vector<T> grad(net.num_params());
  std::vector<T> dout;
  Tape<T> tape;
  TrainResult<T> res;
  res.trace.reserve(cfg.steps);

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    std::fill(grad.begin(), grad.end(), T(0));
    double loss = 0.0;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const Volume x0 = detail::draw_slice(data, rng, cfg.augment);
      const std::size_t t = cfg.t_fixed ? cfg.t_fixed : 1 + rng.below(sched.T());
      const Volume eps = randn_like(rng, x0);
      const Volume xt = q_sample(x0, t, eps, sched);
      const auto out = net.forward(detail::to_scalar<T>(xt.data), x0.ny(), x0.nx(), t, Label::c1, &tape);
      loss += detail::mse_and_adjoint<T>(out, eps.data, static_cast<double>(out.size() * cfg.batch), dout);
      net.backward(tape, dout, grad);
    }
    loss /= static_cast<double>(cfg.batch);
    if (!std::isfinite(loss)) throw std::runtime_error("train_standard: non-finite loss at step " + std::to_string(step));
    opt.apply(net.params(), grad);
    if (cfg.ema_decay > 0.0) detail::ema_update(ema, net.params(), cfg.ema_decay);
    res.trace.push_back({step, loss, 0.0});
  }
  if (cfg.ema_decay > 0.0) net.params() = ema;
  res.net = std::move(net);
  return res;
}

/// Maps a predicted clean slice and its measurement to the data-consistent slice.
using Consistency2D = std::function<Volume(const Volume& x0_hat, const Sinogram& y)>;

/// Quantities of one DM sample, given the c1 noise prediction eps_hat on x_t.
struct DmSample {
  std::size_t t = 0;
  double lambda_alpha = 0.0;
  Volume x_t, x0_hat, x0_recon, x_t_recon, delta, target;
};

/// x0_hat from eps_hat, data consistency, renoising with the same eps, and the
/// DM regression target eps + lambda_alpha * (x0_recon - x0).
inline DmSample dm_sample(const Volume& x0, const Volume& eps, std::size_t t, const Volume& eps_hat,
                          const Schedule& sched, const Sinogram& y, const Consistency2D& consistency,
                          double lambda_max) {
  DmSample s;
  s.t = t;
  s.lambda_alpha = dm_coefficient(sched, t, lambda_max);
  s.x_t = q_sample(x0, t, eps, sched);
  s.x0_hat = predict_x0(s.x_t, t, eps_hat, sched);
  s.x0_recon = consistency(s.x0_hat, y);
  if (!all_finite(s.x0_recon.data)) throw std::runtime_error("data consistency produced non-finite values");
  s.x_t_recon = q_sample(s.x0_recon, t, eps, sched);
  s.delta = s.x0_recon;
  axpy(-1.0, x0.data, s.delta.data);
  s.target = eps;
  axpy(s.lambda_alpha, s.delta.data, s.target.data);
  return s;
}

inline double mean_sq_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("mean_sq_diff: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

/// Default training-time consistency: the x/y split ADMM against y.
inline Consistency2D admm2d_consistency(std::shared_ptr<const RadonProjector> projector, AdmmParams params) {
  return [projector, params](const Volume& x0_hat, const Sinogram& y) {
    return specialized_admm2d(*projector, y, params, x0_hat);
  };
}

/// DM fine-tune. Each step takes a standard-loss step on (x_t, c1), then a DM
/// step on (x_t_recon, c2) towards eps + lambda_alpha * delta, with the same
/// noise draw for both. The c2 embedding starts as a copy of c1.
template <typename T>
TrainResult<T> train_dm(EpsNet<T> net, const SliceDataset& data, const Schedule& sched,
                        std::shared_ptr<const RadonProjector> projector, const Consistency2D& consistency,
                        const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train_dm: empty dataset");
  if (projector->geometry().nz != 1) throw std::invalid_argument("train_dm: projector must be single-slice");
  net.copy_label_embedding(Label::c1, Label::c2);

  Rng rng(cfg.seed);
  AdaptiveStep<T> opt(net.num_params(), cfg.lr, cfg.grad_clip);
  std::vector<T> ema = net.params();
  std::vector<T> grad(net.num_params());
  std::vector<T> dout;
  std::vector<Tape<T>> tapes(cfg.batch);
  TrainResult<T> res;

  struct Draw {
    Volume x0, eps;
    std::size_t t;
  };
  std::vector<Draw> draws(cfg.batch);
  std::vector<Volume> eps_hat(cfg.batch);

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    // standard-loss step on authentic noisy images
    std::fill(grad.begin(), grad.end(), T(0));
    double loss_std = 0.0;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      auto& d = draws[b];
      d.x0 = detail::draw_slice(data, rng, cfg.augment);
      d.t = cfg.t_fixed ? cfg.t_fixed : 1 + rng.below(sched.T());
      d.eps = randn_like(rng, d.x0);
      const Volume xt = q_sample(d.x0, d.t, d.eps, sched);
      const auto out = net.forward(detail::to_scalar<T>(xt.data), d.x0.ny(), d.x0.nx(), d.t, Label::c1, &tapes[b]);
      eps_hat[b] = d.x0.zeros_like();
      std::transform(out.begin(), out.end(), eps_hat[b].data.begin(), [](T v) { return static_cast<double>(v); });
      loss_std += detail::mse_and_adjoint<T>(out, d.eps.data, static_cast<double>(out.size() * cfg.batch), dout);
      net.backward(tapes[b], dout, grad);
    }
    loss_std /= static_cast<double>(cfg.batch);
    if (!std::isfinite(loss_std)) throw std::runtime_error("train_dm: non-finite standard loss at step " + std::to_string(step));
    opt.apply(net.params(), grad);

    // DM step on reconstructed images
    std::fill(grad.begin(), grad.end(), T(0));
    double loss_dm = 0.0;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const auto& d = draws[b];
      const Sinogram y = projector->forward(d.x0);
      DmSample s;
      try {
        s = dm_sample(d.x0, d.eps, d.t, eps_hat[b], sched, y, consistency, cfg.lambda_max);
      } catch (const std::exception& e) {
        throw std::runtime_error("train_dm: consistency failed at step " + std::to_string(step) + " (t = " +
                                 std::to_string(d.t) + "): " + e.what());
      }
      const auto out = net.forward(detail::to_scalar<T>(s.x_t_recon.data), d.x0.ny(), d.x0.nx(), d.t, Label::c2,
                                   &tapes[b]);
      loss_dm += detail::mse_and_adjoint<T>(out, s.target.data, static_cast<double>(out.size() * cfg.batch), dout);
      net.backward(tapes[b], dout, grad);
    }
    loss_dm /= static_cast<double>(cfg.batch);
    if (!std::isfinite(loss_dm)) throw std::runtime_error("train_dm: non-finite DM loss at step " + std::to_string(step));
    opt.apply(net.params(), grad);
    if (cfg.ema_decay > 0.0) detail::ema_update(ema, net.params(), cfg.ema_decay);
    res.trace.push_back({step, loss_std, loss_dm});
  }
  if (cfg.ema_decay > 0.0) net.params() = ema;
  res.net = std::move(net);
  return res;
}

}  // namespace cddm

#endif
