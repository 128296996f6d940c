#pragma once

// 2-D convolution, transposed convolution, bilinear sampling and reflect
// padding on NCHW tensors. Convolutions run as im2col + Eigen GEMM; the
// transposed convolution is the exact adjoint of the strided convolution,
// so its gradient is the convolution itself and finite-difference checks
// close on both.
//
// Padding is "same": stride 1 keeps H,W; stride 2 gives ceil(H/2) with
// half-kernel padding split as (total/2, total - total/2).

#include "swrgbd/tensor.hpp"

namespace swrgbd {

struct ConvGeom {
  int in_c, in_h, in_w;
  int k, stride;
  int out_h, out_w;
  int pad_top, pad_left;

  static ConvGeom same(int c, int h, int w, int k, int stride) {
    ConvGeom g;
    g.in_c = c;
    g.in_h = h;
    g.in_w = w;
    g.k = k;
    g.stride = stride;
    g.out_h = (h + stride - 1) / stride;
    g.out_w = (w + stride - 1) / stride;
    int pad_h = std::max((g.out_h - 1) * stride + k - h, 0);
    int pad_w = std::max((g.out_w - 1) * stride + k - w, 0);
    g.pad_top = pad_h / 2;
    g.pad_left = pad_w / 2;
    return g;
  }
};

namespace detail {

template <typename S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// cols is (C*K*K) x (out_h*out_w), row-major so each (r, oy) span is a
// contiguous run of out_w elements; row r = (c*K + ky)*K + kx.
template <typename S>
void im2col(const S* img, const ConvGeom& g, MatRM<S>& cols) {
  cols.resize((int64_t)g.in_c * g.k * g.k, (int64_t)g.out_h * g.out_w);
  for (int c = 0; c < g.in_c; ++c) {
    const S* plane = img + (int64_t)c * g.in_h * g.in_w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const int64_t r = ((int64_t)c * g.k + ky) * g.k + kx;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad_top + ky;
          S* dst = cols.data() + r * cols.cols() + (int64_t)oy * g.out_w;
          if (iy < 0 || iy >= g.in_h) {
            std::fill(dst, dst + g.out_w, S(0));
            continue;
          }
          const S* src = plane + (int64_t)iy * g.in_w;
          if (g.stride == 1) {
            // Contiguous span with zero fill outside [0, in_w).
            const int lead = std::min(std::max(g.pad_left - kx, 0), g.out_w);
            const int body_end =
                std::min(std::max(g.in_w + g.pad_left - kx, 0), g.out_w);
            std::fill(dst, dst + lead, S(0));
            for (int ox = lead; ox < body_end; ++ox) dst[ox] = src[ox - g.pad_left + kx];
            std::fill(dst + body_end, dst + g.out_w, S(0));
          } else {
            for (int ox = 0; ox < g.out_w; ++ox) {
              const int ix = ox * g.stride - g.pad_left + kx;
              dst[ox] = (ix >= 0 && ix < g.in_w) ? src[ix] : S(0);
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds columns back into the image.
template <typename S>
void col2im(const MatRM<S>& cols, const ConvGeom& g, S* img) {
  for (int c = 0; c < g.in_c; ++c) {
    S* plane = img + (int64_t)c * g.in_h * g.in_w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const int64_t r = ((int64_t)c * g.k + ky) * g.k + kx;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad_top + ky;
          if (iy < 0 || iy >= g.in_h) continue;
          S* dst = plane + (int64_t)iy * g.in_w;
          const S* src = cols.data() + r * cols.cols() + (int64_t)oy * g.out_w;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride - g.pad_left + kx;
            if (ix >= 0 && ix < g.in_w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

// out(O x P) = W(O x CKK) * cols, one sample.
template <typename S>
void conv_fwd_one(const S* img, const S* w, const S* b, int out_c, const ConvGeom& g,
                  S* out) {
  MatRM<S> cols;
  im2col(img, g, cols);
  const int64_t p = (int64_t)g.out_h * g.out_w;
  Eigen::Map<const MatRM<S>> W(w, out_c, cols.rows());
  Eigen::Map<MatRM<S>> O(out, out_c, p);
  O.noalias() = W * cols;
  if (b)
    for (int oc = 0; oc < out_c; ++oc) O.row(oc).array() += b[oc];
}

}  // namespace detail

inline void check_conv_args(int k, int stride) {
  require(k == 1 || k == 3 || k == 5, "conv2d: kernel size " + std::to_string(k) +
                                          " unsupported (want 1, 3 or 5)");
  require(stride == 1 || stride == 2,
          "conv2d: stride " + std::to_string(stride) + " unsupported (want 1 or 2)");
}

// input (N,C,H,W), weight (O,I,K,K), bias (O). Same-padding, stride 1 or 2.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& weight, const Tensor<S>& bias,
                 int stride) {
  require(input.rank() == 4, "conv2d: input must be NCHW, got " + shape_str(input.shape()));
  require(weight.rank() == 4, "conv2d: weight must be OIKK, got " + shape_str(weight.shape()));
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int oc = weight.dim(0), ic = weight.dim(1), k = weight.dim(2);
  check_conv_args(k, stride);
  require(weight.dim(3) == k, "conv2d: non-square kernel " + shape_str(weight.shape()));
  require(ic == c, "conv2d: input channels (axis 1 = " + std::to_string(c) +
                       ") != weight input channels (" + std::to_string(ic) + ")");
  require(bias.rank() == 1 && bias.dim(0) == oc,
          "conv2d: bias shape " + shape_str(bias.shape()) + " != (O=" +
              std::to_string(oc) + ") on axis 0");

  const ConvGeom g = ConvGeom::same(c, h, w, k, stride);
  Tensor<S> out = make_op<S>(
      {n, oc, g.out_h, g.out_w}, {input, weight, bias},
      [in = input.node(), wn = weight.node(), bn = bias.node(), n, oc, g](TensorNode<S>& self) {
        const int64_t p = (int64_t)g.out_h * g.out_w;
        const int64_t ckk = (int64_t)g.in_c * g.k * g.k;
        const int64_t in_sz = (int64_t)g.in_c * g.in_h * g.in_w;
        if (in->requires_grad) in->accum_grad_alloc();
        if (wn->requires_grad) wn->accum_grad_alloc();
        if (bn->requires_grad) bn->accum_grad_alloc();
        Eigen::Map<const detail::MatRM<S>> W(wn->value.data(), oc, ckk);
        detail::MatRM<S> cols, gcols;
        for (int s = 0; s < n; ++s) {
          Eigen::Map<const detail::MatRM<S>> G(self.grad.data() + (int64_t)s * oc * p, oc, p);
          if (bn->requires_grad)
            for (int o = 0; o < oc; ++o) bn->grad(o) += G.row(o).sum();
          if (wn->requires_grad) {
            detail::im2col(in->value.data() + s * in_sz, g, cols);
            Eigen::Map<detail::MatRM<S>> GW(wn->grad.data(), oc, ckk);
            GW.noalias() += G * cols.transpose();
          }
          if (in->requires_grad) {
            gcols.resize(ckk, p);
            gcols.noalias() = W.transpose() * G;
            detail::col2im(gcols, g, in->grad.data() + s * in_sz);
          }
        }
      });
  const int64_t in_sz = (int64_t)c * h * w;
  const int64_t out_sz = (int64_t)oc * g.out_h * g.out_w;
  for (int s = 0; s < n; ++s)
    detail::conv_fwd_one(input.data() + s * in_sz, weight.data(), bias.data(), oc, g,
                         out.data() + s * out_sz);
  return out;
}

// Transposed convolution, the adjoint of conv2d at stride 2. input (N,I,h,w),
// weight (I,O,K,K), bias (O); output (N,O,2h,2w).
template <typename S>
Tensor<S> conv2d_transposed(const Tensor<S>& input, const Tensor<S>& weight,
                            const Tensor<S>& bias, int stride) {
  require(stride == 2, "conv2d_transposed: only stride 2 is supported");
  require(input.rank() == 4,
          "conv2d_transposed: input must be NCHW, got " + shape_str(input.shape()));
  const int n = input.dim(0), ic = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int wi = weight.dim(0), oc = weight.dim(1), k = weight.dim(2);
  require(k == 5 && weight.dim(3) == 5,
          "conv2d_transposed: only 5x5 kernels are supported, got " +
              shape_str(weight.shape()));
  require(wi == ic, "conv2d_transposed: input channels (axis 1 = " + std::to_string(ic) +
                        ") != weight input channels (" + std::to_string(wi) + ")");
  require(bias.rank() == 1 && bias.dim(0) == oc,
          "conv2d_transposed: bias shape " + shape_str(bias.shape()) + " != (O=" +
              std::to_string(oc) + ")");

  const int oh = 2 * h, ow = 2 * w;
  // Geometry of the conv this op is the adjoint of: (O, oh, ow) -> (I, h, w).
  const ConvGeom g = ConvGeom::same(oc, oh, ow, k, 2);
  const int64_t p = (int64_t)h * w;
  const int64_t okk = (int64_t)oc * k * k;
  Tensor<S> out = make_op<S>(
      {n, oc, oh, ow}, {input, weight, bias},
      [in = input.node(), wn = weight.node(), bn = bias.node(), n, ic, oc, g, p,
       okk](TensorNode<S>& self) {
        const int64_t in_sz = (int64_t)ic * p;
        const int64_t out_sz = (int64_t)oc * g.in_h * g.in_w;
        if (in->requires_grad) in->accum_grad_alloc();
        if (wn->requires_grad) wn->accum_grad_alloc();
        if (bn->requires_grad) bn->accum_grad_alloc();
        Eigen::Map<const detail::MatRM<S>> A(wn->value.data(), ic, okk);
        detail::MatRM<S> cols;
        for (int s = 0; s < n; ++s) {
          const S* gout = self.grad.data() + s * out_sz;
          if (bn->requires_grad) {
            Eigen::Map<const detail::MatRM<S>> G(gout, oc, (int64_t)g.in_h * g.in_w);
            for (int o = 0; o < oc; ++o) bn->grad(o) += G.row(o).sum();
          }
          if (in->requires_grad || wn->requires_grad) detail::im2col(gout, g, cols);
          if (in->requires_grad) {
            Eigen::Map<detail::MatRM<S>> GI(in->grad.data() + s * in_sz, ic, p);
            GI.noalias() += A * cols;
          }
          if (wn->requires_grad) {
            Eigen::Map<const detail::MatRM<S>> X(in->value.data() + s * in_sz, ic, p);
            Eigen::Map<detail::MatRM<S>> GA(wn->grad.data(), ic, okk);
            GA.noalias() += X * cols.transpose();
          }
        }
      });
  const int64_t in_sz = (int64_t)ic * p;
  const int64_t out_sz = (int64_t)oc * oh * ow;
  detail::MatRM<S> gcols((int64_t)oc * k * k, p);
  Eigen::Map<const detail::MatRM<S>> A(weight.data(), ic, okk);
  for (int s = 0; s < n; ++s) {
    Eigen::Map<const detail::MatRM<S>> X(input.data() + s * in_sz, ic, p);
    gcols.noalias() = A.transpose() * X;
    S* o = out.data() + s * out_sz;
    std::fill(o, o + out_sz, S(0));
    detail::col2im(gcols, g, o);
    for (int c = 0; c < oc; ++c)
      Eigen::Map<ArrayX<S>>(o + (int64_t)c * oh * ow, (int64_t)oh * ow) += bias.at(c);
  }
  return out;
}

// Bilinear lookup of image (C,H,W) at coords (2,Ho,Wo): channel 0 = x (column),
// channel 1 = y (row), pixel units. Out-of-range coordinates clamp to the
// border (with zero coordinate gradient there). Exact at integer coordinates.
template <typename S>
Tensor<S> bilinear_sample(const Tensor<S>& image, const Tensor<S>& coords) {
  require(image.rank() == 3, "bilinear_sample: image must be (C,H,W), got " +
                                 shape_str(image.shape()));
  require(coords.rank() == 3 && coords.dim(0) == 2,
          "bilinear_sample: coords must be (2,H,W), got " + shape_str(coords.shape()));
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const int oh = coords.dim(1), ow = coords.dim(2);
  const int64_t p = (int64_t)oh * ow;

  struct Samp {
    int x0, y0;
    S wx, wy;
    S gx_on, gy_on;  // 0 where the coordinate was clamped
  };
  auto samples = std::make_shared<std::vector<Samp>>(p);
  for (int64_t i = 0; i < p; ++i) {
    S x = coords.at(i), y = coords.at(p + i);
    Samp& sp = (*samples)[i];
    sp.gx_on = (x >= S(0) && x <= S(w - 1)) ? S(1) : S(0);
    sp.gy_on = (y >= S(0) && y <= S(h - 1)) ? S(1) : S(0);
    x = std::min(std::max(x, S(0)), S(w - 1));
    y = std::min(std::max(y, S(0)), S(h - 1));
    sp.x0 = std::min((int)std::floor(x), w - 1);
    sp.y0 = std::min((int)std::floor(y), h - 1);
    sp.wx = x - S(sp.x0);
    sp.wy = y - S(sp.y0);
  }
  auto in = image.node();
  auto cn = coords.node();
  Tensor<S> out = make_op<S>(
      {c, oh, ow}, {image, coords}, [in, cn, samples, c, h, w, p](TensorNode<S>& self) {
        if (in->requires_grad) in->accum_grad_alloc();
        if (cn->requires_grad) cn->accum_grad_alloc();
        const int64_t ip = (int64_t)h * w;
        for (int64_t i = 0; i < p; ++i) {
          const Samp& sp = (*samples)[i];
          const int x1 = std::min(sp.x0 + 1, w - 1), y1 = std::min(sp.y0 + 1, h - 1);
          const S wx = sp.wx, wy = sp.wy;
          for (int ch = 0; ch < c; ++ch) {
            const S g = self.grad((int64_t)ch * p + i);
            if (g == S(0)) continue;
            const S* img = in->value.data() + (int64_t)ch * ip;
            const S v00 = img[(int64_t)sp.y0 * w + sp.x0], v01 = img[(int64_t)sp.y0 * w + x1];
            const S v10 = img[(int64_t)y1 * w + sp.x0], v11 = img[(int64_t)y1 * w + x1];
            if (in->requires_grad) {
              S* gi = in->grad.data() + (int64_t)ch * ip;
              gi[(int64_t)sp.y0 * w + sp.x0] += g * (1 - wy) * (1 - wx);
              gi[(int64_t)sp.y0 * w + x1] += g * (1 - wy) * wx;
              gi[(int64_t)y1 * w + sp.x0] += g * wy * (1 - wx);
              gi[(int64_t)y1 * w + x1] += g * wy * wx;
            }
            if (cn->requires_grad) {
              cn->grad(i) += g * sp.gx_on * ((1 - wy) * (v01 - v00) + wy * (v11 - v10));
              cn->grad(p + i) += g * sp.gy_on * ((1 - wx) * (v10 - v00) + wx * (v11 - v01));
            }
          }
        }
      });
  const int64_t ip = (int64_t)h * w;
  for (int64_t i = 0; i < p; ++i) {
    const Samp& sp = (*samples)[i];
    const int x1 = std::min(sp.x0 + 1, w - 1), y1 = std::min(sp.y0 + 1, h - 1);
    for (int ch = 0; ch < c; ++ch) {
      const S* img = image.data() + (int64_t)ch * ip;
      const S v0 = img[(int64_t)sp.y0 * w + sp.x0] * (1 - sp.wx) + img[(int64_t)sp.y0 * w + x1] * sp.wx;
      const S v1 = img[(int64_t)y1 * w + sp.x0] * (1 - sp.wx) + img[(int64_t)y1 * w + x1] * sp.wx;
      out.at((int64_t)ch * p + i) = v0 * (1 - sp.wy) + v1 * sp.wy;
    }
  }
  return out;
}

// Reflect padding (no edge repeat) on the spatial axes of (C,H,W)/(N,C,H,W).
template <typename S>
Tensor<S> pad_reflect(const Tensor<S>& x, int left, int right, int top, int bottom) {
  const int r = x.rank();
  require(r == 3 || r == 4, "pad_reflect: want rank 3 or 4, got " + shape_str(x.shape()));
  const int h = x.dim(r - 2), w = x.dim(r - 1);
  require(left < w && right < w && top < h && bottom < h,
          "pad_reflect: padding must be smaller than the image");
  if (left == 0 && right == 0 && top == 0 && bottom == 0) return x;
  int64_t maps = 1;
  for (int i = 0; i < r - 2; ++i) maps *= x.dim(i);
  const int oh = h + top + bottom, ow = w + left + right;
  auto reflect = [](int i, int n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
    return i;
  };
  auto xi = std::make_shared<std::vector<int>>(ow);
  auto yi = std::make_shared<std::vector<int>>(oh);
  for (int i = 0; i < ow; ++i) (*xi)[i] = reflect(i - left, w);
  for (int i = 0; i < oh; ++i) (*yi)[i] = reflect(i - top, h);
  Shape so = x.shape();
  so[r - 2] = oh;
  so[r - 1] = ow;
  auto xn = x.node();
  Tensor<S> out = make_op<S>(so, {x}, [xn, xi, yi, maps, h, w, oh, ow](TensorNode<S>& self) {
    xn->accum_grad_alloc();
    for (int64_t m = 0; m < maps; ++m) {
      S* g = xn->grad.data() + m * h * w;
      const S* go = self.grad.data() + (int64_t)m * oh * ow;
      for (int y = 0; y < oh; ++y)
        for (int x2 = 0; x2 < ow; ++x2)
          g[(int64_t)(*yi)[y] * w + (*xi)[x2]] += go[(int64_t)y * ow + x2];
    }
  });
  for (int64_t m = 0; m < maps; ++m) {
    const S* src = x.data() + m * h * w;
    S* dst = out.data() + (int64_t)m * oh * ow;
    for (int y = 0; y < oh; ++y)
      for (int x2 = 0; x2 < ow; ++x2)
        dst[(int64_t)y * ow + x2] = src[(int64_t)(*yi)[y] * w + (*xi)[x2]];
  }
  return out;
}

// Crop of the spatial axes, gradient scattered back.
template <typename S>
Tensor<S> crop(const Tensor<S>& x, int x0, int y0, int cw, int ch) {
  const int r = x.rank();
  require(r == 3 || r == 4, "crop: want rank 3 or 4, got " + shape_str(x.shape()));
  const int h = x.dim(r - 2), w = x.dim(r - 1);
  require(x0 >= 0 && y0 >= 0 && x0 + cw <= w && y0 + ch <= h, "crop: window out of bounds");
  if (x0 == 0 && y0 == 0 && cw == w && ch == h) return x;
  int64_t maps = 1;
  for (int i = 0; i < r - 2; ++i) maps *= x.dim(i);
  Shape so = x.shape();
  so[r - 2] = ch;
  so[r - 1] = cw;
  auto xn = x.node();
  Tensor<S> out = make_op<S>(so, {x}, [xn, maps, h, w, x0, y0, cw, ch](TensorNode<S>& self) {
    xn->accum_grad_alloc();
    for (int64_t m = 0; m < maps; ++m)
      for (int y = 0; y < ch; ++y)
        Eigen::Map<ArrayX<S>>(xn->grad.data() + (m * h + y0 + y) * w + x0, cw) +=
            Eigen::Map<const ArrayX<S>>(self.grad.data() + (m * ch + y) * cw, cw);
  });
  for (int64_t m = 0; m < maps; ++m)
    for (int y = 0; y < ch; ++y)
      Eigen::Map<ArrayX<S>>(out.data() + (m * ch + y) * cw, cw) =
          Eigen::Map<const ArrayX<S>>(x.data() + (m * h + y0 + y) * w + x0, cw);
  return out;
}

}  // namespace swrgbd
