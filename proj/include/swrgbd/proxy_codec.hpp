#pragma once

// Differentiable image-codec proxy: blockwise orthonormal DCT, a flat
// quantization step delta, and a log2(1 + |c|/delta) code-length model.
//
// noisy mode (training): quantization is relaxed to additive uniform noise
// U(-delta/2, delta/2) on the DCT coefficients, which keeps the
// reconstruction differentiable (identity gradient) while its expectation
// tracks the unquantized coefficients; the rate stays differentiable a.e.
// hard mode (deployment/fallback): coefficients round to the nearest
// multiple of delta, rate uses the rounded indices, nothing is
// differentiable but everything is deterministic.
//
// Samples are internally mapped [0,1] -> [0,255] before the DCT so delta
// lives on the usual 8-bit quantizer scale.

#include "swrgbd/tensor.hpp"

#include <random>

namespace swrgbd {

enum class ProxyMode { noisy, hard };

struct ProxyConfig {
  int block = 8;
  double delta = 4.0;
  ProxyMode mode = ProxyMode::noisy;

  void validate() const {
    require(block > 0, "proxy: block size must be positive");
    require(delta > 0, "proxy: delta must be positive");
  }
};

template <typename S>
struct RateEstimate {
  Tensor<S> bits;                   // scalar; differentiable in noisy mode
  std::vector<double> per_channel;  // sums to bits
};

// Maps the RD weight gamma to the training-time quantization step.
inline double delta_schedule(double gamma) {
  require(gamma > 0, "delta_schedule: gamma must be positive");
  return std::clamp(2.0 * std::sqrt(gamma), 0.25, 64.0);
}

namespace detail {

template <typename S>
Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> dct_matrix(int b) {
  Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> m(b, b);
  const double norm0 = std::sqrt(1.0 / b), norm = std::sqrt(2.0 / b);
  for (int k = 0; k < b; ++k)
    for (int n = 0; n < b; ++n)
      m(k, n) = S((k == 0 ? norm0 : norm) * std::cos(M_PI * (2 * n + 1) * k / (2.0 * b)));
  return m;
}

}  // namespace detail

// Orthonormal type-II 2-D DCT of a (B,B) tensor; linear, so the backward
// pass is the transposed transform.
template <typename S>
Tensor<S> dct2(const Tensor<S>& x) {
  require(x.rank() == 2 && x.dim(0) == x.dim(1), "dct2: want a square (B,B) tensor");
  const int b = x.dim(0);
  const auto m = detail::dct_matrix<S>(b);
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  auto xn = x.node();
  Tensor<S> out = make_op<S>(x.shape(), {x}, [xn, m, b](TensorNode<S>& self) {
    Eigen::Map<const Mat> g(self.grad.data(), b, b);
    xn->accum_grad_alloc();
    Eigen::Map<Mat>(xn->grad.data(), b, b) += m.transpose() * g * m;
  });
  Eigen::Map<const Mat> in(x.data(), b, b);
  Eigen::Map<Mat>(out.data(), b, b) = m * in * m.transpose();
  return out;
}

template <typename S>
Tensor<S> idct2(const Tensor<S>& x) {
  require(x.rank() == 2 && x.dim(0) == x.dim(1), "idct2: want a square (B,B) tensor");
  const int b = x.dim(0);
  const auto m = detail::dct_matrix<S>(b);
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  auto xn = x.node();
  Tensor<S> out = make_op<S>(x.shape(), {x}, [xn, m, b](TensorNode<S>& self) {
    Eigen::Map<const Mat> g(self.grad.data(), b, b);
    xn->accum_grad_alloc();
    Eigen::Map<Mat>(xn->grad.data(), b, b) += m * g * m.transpose();
  });
  Eigen::Map<const Mat> in(x.data(), b, b);
  Eigen::Map<Mat>(out.data(), b, b) = m.transpose() * in * m;
  return out;
}

namespace detail {

// Iterates the block grid of a (K,H,W) tensor. Border blocks gather with
// replicate padding (clamped indices); each true pixel belongs to exactly
// one block, so scatters write each pixel once.
template <typename S, typename Fn>
void for_each_block(int channels, int h, int w, int b, Fn&& fn) {
  const int by = (h + b - 1) / b, bx = (w + b - 1) / b;
  for (int c = 0; c < channels; ++c)
    for (int y = 0; y < by; ++y)
      for (int x = 0; x < bx; ++x) fn(c, y * b, x * b);
}

template <typename S>
void gather_block(const S* plane, int h, int w, int y0, int x0, int b, S scale,
                  Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>& blk) {
  blk.resize(b, b);
  for (int y = 0; y < b; ++y) {
    const int iy = std::min(y0 + y, h - 1);
    for (int x = 0; x < b; ++x) blk(y, x) = scale * plane[(int64_t)iy * w + std::min(x0 + x, w - 1)];
  }
}

}  // namespace detail

// Differentiable code-length estimate sum log2(1 + |C|/delta) over all
// blockwise DCT coefficients of all channels, on the 255 sample scale.
template <typename S>
Tensor<S> proxy_rate(const Tensor<S>& codes, const ProxyConfig& cfg,
                     std::vector<double>* per_channel = nullptr) {
  cfg.validate();
  require(codes.rank() == 3, "proxy_rate: want (K,H,W) codes");
  const int k = codes.dim(0), h = codes.dim(1), w = codes.dim(2);
  const int b = cfg.block;
  const S delta = S(cfg.delta);
  const auto m = detail::dct_matrix<S>(b);
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

  if (per_channel) per_channel->assign(k, 0.0);
  double total = 0;
  {
    Mat blk, coef;
    detail::for_each_block<S>(k, h, w, b, [&](int c, int y0, int x0) {
      detail::gather_block(codes.data() + (int64_t)c * h * w, h, w, y0, x0, b, S(255), blk);
      coef = m * blk * m.transpose();
      double s = 0;
      for (int i = 0; i < b * b; ++i)
        s += std::log2(1.0 + std::abs((double)coef.data()[i]) / cfg.delta);
      total += s;
      if (per_channel) (*per_channel)[c] += s;
    });
  }

  auto cn = codes.node();
  Tensor<S> out = make_op<S>({1}, {codes}, [cn, m, k, h, w, b, delta](TensorNode<S>& self) {
    const S g = self.grad(0);
    const S inv_ln2 = S(1.0 / M_LN2);
    cn->accum_grad_alloc();
    Mat blk, coef, dcoef, dblk;
    detail::for_each_block<S>(k, h, w, b, [&](int c, int y0, int x0) {
      detail::gather_block(cn->value.data() + (int64_t)c * h * w, h, w, y0, x0, b, S(255), blk);
      coef = m * blk * m.transpose();
      dcoef.resize(b, b);
      for (int i = 0; i < b * b; ++i) {
        const S v = coef.data()[i];
        const S sign = v > S(0) ? S(1) : (v < S(0) ? S(-1) : S(0));
        dcoef.data()[i] = g * inv_ln2 * sign / (delta + std::abs(v));
      }
      dblk = m.transpose() * dcoef * m;
      S* gp = cn->grad.data() + (int64_t)c * h * w;
      for (int y = 0; y < b; ++y) {
        const int iy = std::min(y0 + y, h - 1);
        for (int x = 0; x < b; ++x)
          gp[(int64_t)iy * w + std::min(x0 + x, w - 1)] += S(255) * dblk(y, x);
      }
    });
  });
  out.at(0) = S(total);
  return out;
}

// Encode/decode through the proxy. noisy: reconstruction = codes + spatial
// image of the coefficient noise (identity gradient); hard: deterministic
// round-to-nearest in the DCT domain, no gradient.
template <typename S>
std::pair<Tensor<S>, RateEstimate<S>> proxy_encode_decode(const Tensor<S>& codes,
                                                          const ProxyConfig& cfg,
                                                          std::mt19937* rng = nullptr) {
  cfg.validate();
  require(codes.rank() == 3, "proxy_encode_decode: want (K,H,W) codes");
  const int k = codes.dim(0), h = codes.dim(1), w = codes.dim(2);
  const int b = cfg.block;
  const auto m = detail::dct_matrix<S>(b);
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

  RateEstimate<S> rate;
  Tensor<S> recon;
  if (cfg.mode == ProxyMode::noisy) {
    require(rng != nullptr, "proxy_encode_decode: noisy mode needs an RNG");
    rate.bits = proxy_rate(codes, cfg, &rate.per_channel);
    Tensor<S> noise_img = Tensor<S>::zeros(codes.shape());
    std::uniform_real_distribution<double> u(-cfg.delta / 2, cfg.delta / 2);
    Mat n, sp;
    detail::for_each_block<S>(k, h, w, b, [&](int c, int y0, int x0) {
      n.resize(b, b);
      for (int i = 0; i < b * b; ++i) n.data()[i] = S(u(*rng));
      sp = m.transpose() * n * m;  // coefficient noise as a pixel image
      S* p = noise_img.data() + (int64_t)c * h * w;
      for (int y = 0; y < b && y0 + y < h; ++y)
        for (int x = 0; x < b && x0 + x < w; ++x)
          p[(int64_t)(y0 + y) * w + x0 + x] = sp(y, x) / S(255);
    });
    recon = add(codes, noise_img);
  } else {
    recon = Tensor<S>::uninit(codes.shape());
    rate.per_channel.assign(k, 0.0);
    double total = 0;
    Mat blk, coef;
    detail::for_each_block<S>(k, h, w, b, [&](int c, int y0, int x0) {
      detail::gather_block(codes.data() + (int64_t)c * h * w, h, w, y0, x0, b, S(255), blk);
      coef = m * blk * m.transpose();
      double s = 0;
      for (int i = 0; i < b * b; ++i) {
        const double q = std::round((double)coef.data()[i] / cfg.delta);
        s += std::log2(1.0 + std::abs(q));
        coef.data()[i] = S(q * cfg.delta);
      }
      total += s;
      rate.per_channel[c] += s;
      blk = m.transpose() * coef * m;
      S* p = recon.data() + (int64_t)c * h * w;
      for (int y = 0; y < b && y0 + y < h; ++y)
        for (int x = 0; x < b && x0 + x < w; ++x)
          p[(int64_t)(y0 + y) * w + x0 + x] = blk(y, x) / S(255);
    });
    rate.bits = Tensor<S>::scalar_tensor(S(total));
  }
  return {std::move(recon), std::move(rate)};
}

}  // namespace swrgbd
