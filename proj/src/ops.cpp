#include "sunet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace sunet {

namespace {

std::string pair_str(const Pair& p) { return std::to_string(p.h) + "x" + std::to_string(p.w); }

struct Geometry {
  Pair kernel, stride, dilation, padding;
};

// Unfolds an image (C, H, W) into (C·kh·kw, Ho·Wo) under `g`.
template <typename Scalar>
void im2col(const Scalar* img, Index channels, Index height, Index width, const Geometry& g, Index out_h,
            Index out_w, Scalar* cols) {
  const Index plane = out_h * out_w;
  for (Index c = 0; c < channels; ++c) {
    const Scalar* src = img + c * height * width;
    for (Index ki = 0; ki < g.kernel.h; ++ki) {
      for (Index kj = 0; kj < g.kernel.w; ++kj) {
        Scalar* row = cols + ((c * g.kernel.h + ki) * g.kernel.w + kj) * plane;
        for (Index oh = 0; oh < out_h; ++oh) {
          const Index ih = oh * g.stride.h - g.padding.h + ki * g.dilation.h;
          Scalar* dst = row + oh * out_w;
          if (ih < 0 || ih >= height) {
            std::fill(dst, dst + out_w, Scalar(0));
            continue;
          }
          const Scalar* line = src + ih * width;
          for (Index ow = 0; ow < out_w; ++ow) {
            const Index iw = ow * g.stride.w - g.padding.w + kj * g.dilation.w;
            dst[ow] = (iw >= 0 && iw < width) ? line[iw] : Scalar(0);
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates columns back into the image.
template <typename Scalar>
void col2im(const Scalar* cols, Index channels, Index height, Index width, const Geometry& g, Index out_h,
            Index out_w, Scalar* img) {
  const Index plane = out_h * out_w;
  for (Index c = 0; c < channels; ++c) {
    Scalar* dst = img + c * height * width;
    for (Index ki = 0; ki < g.kernel.h; ++ki) {
      for (Index kj = 0; kj < g.kernel.w; ++kj) {
        const Scalar* row = cols + ((c * g.kernel.h + ki) * g.kernel.w + kj) * plane;
        for (Index oh = 0; oh < out_h; ++oh) {
          const Index ih = oh * g.stride.h - g.padding.h + ki * g.dilation.h;
          if (ih < 0 || ih >= height) continue;
          Scalar* line = dst + ih * width;
          const Scalar* src = row + oh * out_w;
          for (Index ow = 0; ow < out_w; ++ow) {
            const Index iw = ow * g.stride.w - g.padding.w + kj * g.dilation.w;
            if (iw >= 0 && iw < width) line[iw] += src[ow];
          }
        }
      }
    }
  }
}

bool is_pointwise(const ConvAttrs& a) {
  return a.kernel == Pair{1, 1} && a.stride == Pair{1, 1} && a.padding == Pair{0, 0};
}

Geometry geometry_of(const ConvAttrs& a) { return {a.kernel, a.stride, a.dilation, a.padding}; }

void expect_shape(const Shape& got, const Shape& want, const char* what) {
  if (!(got == want)) {
    throw ShapeError(std::string(what) + ": expected " + to_string(want) + ", got " + to_string(got));
  }
}

template <typename Scalar>
void check_bias(const Tensor<Scalar>* bias, const ConvAttrs& attrs, const char* op) {
  if (attrs.bias && bias == nullptr) throw ShapeError(std::string(op) + ": bias flag set but no bias given");
  if (bias != nullptr) expect_shape(bias->shape(), Shape{1, attrs.out_channels, 1, 1}, op);
}

}  // namespace

// ---------------------------------------------------------------------------

void ConvAttrs::validate() const {
  if (kernel.h < 1 || kernel.w < 1) throw ShapeError("conv: kernel must be >= 1, got " + pair_str(kernel));
  if (stride.h < 1 || stride.w < 1) throw ShapeError("conv: stride must be >= 1, got " + pair_str(stride));
  if (dilation.h < 1 || dilation.w < 1) throw ShapeError("conv: dilation must be >= 1, got " + pair_str(dilation));
  if (padding.h < 0 || padding.w < 0) throw ShapeError("conv: negative padding " + pair_str(padding));
  if (output_padding.h < 0 || output_padding.w < 0 || output_padding.h >= stride.h ||
      output_padding.w >= stride.w) {
    throw ShapeError("conv: output_padding " + pair_str(output_padding) + " must be below stride " +
                     pair_str(stride));
  }
  if (in_channels < 1 || out_channels < 1) throw ShapeError("conv: channel counts must be positive");
}

Shape ConvAttrs::weight_shape(bool transposed) const {
  return transposed ? Shape{in_channels, out_channels, kernel.h, kernel.w}
                    : Shape{out_channels, in_channels, kernel.h, kernel.w};
}

void AvgPoolAttrs::validate() const {
  if (window.h < 1 || window.w < 1 || stride.h < 1 || stride.w < 1 || dilation.h < 1 || dilation.w < 1 ||
      pad_end.h < 0 || pad_end.w < 0) {
    throw ShapeError("avg_pool2d: invalid attributes");
  }
}

Index same_padding(Index kernel, Index dilation) { return dilation * (kernel - 1) / 2; }

Index conv_out_size(Index in, Index kernel, Index stride, Index dilation, Index pad) {
  const Index span = in + 2 * pad - dilation * (kernel - 1) - 1;
  if (span < 0) return 0;
  return span / stride + 1;
}

Index conv_transpose_out_size(Index in, Index kernel, Index stride, Index dilation, Index pad,
                              Index output_padding) {
  return (in - 1) * stride - 2 * pad + dilation * (kernel - 1) + 1 + output_padding;
}

Index pool_out_size(Index in, Index window, Index stride, Index dilation, Index pad_end) {
  const Index span = in + pad_end - dilation * (window - 1) - 1;
  if (span < 0) return 0;
  return span / stride + 1;
}

template <typename Scalar>
BNState<Scalar> BNState<Scalar>::identity(Index channels) {
  BNState st;
  st.gamma = VectorX<Scalar>::Ones(channels);
  st.beta = VectorX<Scalar>::Zero(channels);
  st.running_mean = VectorX<Scalar>::Zero(channels);
  st.running_var = VectorX<Scalar>::Ones(channels);
  return st;
}

template <typename Scalar>
void BNState<Scalar>::validate() const {
  const Index c = gamma.size();
  if (beta.size() != c || running_mean.size() != c || running_var.size() != c) {
    throw ShapeError("batchnorm: parameter/statistic lengths disagree");
  }
  if (!(decay > 0 && decay < 1)) throw std::invalid_argument("batchnorm: decay must lie in (0,1)");
  if (!(eps > 0)) throw std::invalid_argument("batchnorm: eps must be positive");
  if ((running_var.array() < 0).any()) throw std::invalid_argument("batchnorm: negative running variance");
}

// ---- convolution -------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const std::type_identity_t<Tensor<Scalar>>* bias,
                      const ConvAttrs& attrs) {
  attrs.validate();
  const Shape& xs = x.shape();
  if (xs.c != attrs.in_channels) {
    throw ShapeError("conv2d: input has " + std::to_string(xs.c) + " channels, attrs expect " +
                     std::to_string(attrs.in_channels));
  }
  expect_shape(w.shape(), attrs.weight_shape(false), "conv2d weight");
  check_bias(bias, attrs, "conv2d bias");

  const Index oh = conv_out_size(xs.h, attrs.kernel.h, attrs.stride.h, attrs.dilation.h, attrs.padding.h);
  const Index ow = conv_out_size(xs.w, attrs.kernel.w, attrs.stride.w, attrs.dilation.w, attrs.padding.w);
  if (oh < 1 || ow < 1) {
    throw ShapeError("conv2d: non-positive output size for input " + to_string(xs));
  }

  Tensor<Scalar> out(Shape{xs.n, attrs.out_channels, oh, ow});
  const Index k = attrs.in_channels * attrs.kernel.h * attrs.kernel.w;
  const Index plane = oh * ow;
  Eigen::Map<const RowMatrixX<Scalar>> wm(w.data(), attrs.out_channels, k);
  const bool pointwise = is_pointwise(attrs);
  RowMatrixX<Scalar> cols(pointwise ? 0 : k, pointwise ? 0 : plane);
  const Geometry g = geometry_of(attrs);

  for (Index n = 0; n < xs.n; ++n) {
    const Scalar* xn = x.data() + n * xs.c * xs.plane();
    Eigen::Map<RowMatrixX<Scalar>> y(out.data() + n * attrs.out_channels * plane, attrs.out_channels, plane);
    if (pointwise) {
      y.noalias() = wm * Eigen::Map<const RowMatrixX<Scalar>>(xn, k, plane);
    } else {
      im2col(xn, xs.c, xs.h, xs.w, g, oh, ow, cols.data());
      y.noalias() = wm * cols;
    }
    if (bias != nullptr) y.colwise() += bias->vec();
  }
  check_finite(out, "conv2d");
  return out;
}

template <typename Scalar>
ConvGrads<Scalar> conv2d_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const ConvAttrs& attrs,
                                  const Tensor<Scalar>& grad_out) {
  const Shape& xs = x.shape();
  const Shape& gs = grad_out.shape();
  const Index k = attrs.in_channels * attrs.kernel.h * attrs.kernel.w;
  const Index plane = gs.h * gs.w;
  expect_shape(gs,
               Shape{xs.n, attrs.out_channels,
                     conv_out_size(xs.h, attrs.kernel.h, attrs.stride.h, attrs.dilation.h, attrs.padding.h),
                     conv_out_size(xs.w, attrs.kernel.w, attrs.stride.w, attrs.dilation.w, attrs.padding.w)},
               "conv2d_backward grad");

  ConvGrads<Scalar> g{Tensor<Scalar>(xs), Tensor<Scalar>(w.shape()), Tensor<Scalar>()};
  if (attrs.bias) g.bias = Tensor<Scalar>(Shape{1, attrs.out_channels, 1, 1});

  Eigen::Map<const RowMatrixX<Scalar>> wm(w.data(), attrs.out_channels, k);
  Eigen::Map<RowMatrixX<Scalar>> dw(g.weight.data(), attrs.out_channels, k);
  const bool pointwise = is_pointwise(attrs);
  RowMatrixX<Scalar> cols(pointwise ? 0 : k, pointwise ? 0 : plane);
  RowMatrixX<Scalar> dcols(pointwise ? 0 : k, pointwise ? 0 : plane);
  const Geometry geo = geometry_of(attrs);

  for (Index n = 0; n < xs.n; ++n) {
    const Scalar* xn = x.data() + n * xs.c * xs.plane();
    Scalar* dxn = g.input.data() + n * xs.c * xs.plane();
    Eigen::Map<const RowMatrixX<Scalar>> dy(grad_out.data() + n * attrs.out_channels * plane, attrs.out_channels,
                                            plane);
    if (pointwise) {
      Eigen::Map<const RowMatrixX<Scalar>> xm(xn, k, plane);
      dw.noalias() += dy * xm.transpose();
      Eigen::Map<RowMatrixX<Scalar>>(dxn, k, plane).noalias() = wm.transpose() * dy;
    } else {
      im2col(xn, xs.c, xs.h, xs.w, geo, gs.h, gs.w, cols.data());
      dw.noalias() += dy * cols.transpose();
      dcols.noalias() = wm.transpose() * dy;
      col2im(dcols.data(), xs.c, xs.h, xs.w, geo, gs.h, gs.w, dxn);
    }
    if (attrs.bias) g.bias.vec() += dy.rowwise().sum();
  }
  return g;
}

template <typename Scalar>
Tensor<Scalar> conv2d_transpose(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const std::type_identity_t<Tensor<Scalar>>* bias,
                                const ConvAttrs& attrs) {
  attrs.validate();
  const Shape& xs = x.shape();
  if (xs.c != attrs.in_channels) {
    throw ShapeError("conv2d_transpose: input has " + std::to_string(xs.c) + " channels, attrs expect " +
                     std::to_string(attrs.in_channels));
  }
  expect_shape(w.shape(), attrs.weight_shape(true), "conv2d_transpose weight");
  check_bias(bias, attrs, "conv2d_transpose bias");

  const Index oh = conv_transpose_out_size(xs.h, attrs.kernel.h, attrs.stride.h, attrs.dilation.h,
                                           attrs.padding.h, attrs.output_padding.h);
  const Index ow = conv_transpose_out_size(xs.w, attrs.kernel.w, attrs.stride.w, attrs.dilation.w,
                                           attrs.padding.w, attrs.output_padding.w);
  if (oh < 1 || ow < 1) throw ShapeError("conv2d_transpose: negative output size for input " + to_string(xs));

  const Index cout = attrs.out_channels;
  const Index kk = cout * attrs.kernel.h * attrs.kernel.w;
  Tensor<Scalar> out(Shape{xs.n, cout, oh, ow});
  Eigen::Map<const RowMatrixX<Scalar>> wm(w.data(), attrs.in_channels, kk);
  RowMatrixX<Scalar> cols(kk, xs.plane());
  const Geometry g = geometry_of(attrs);

  for (Index n = 0; n < xs.n; ++n) {
    Eigen::Map<const RowMatrixX<Scalar>> xm(x.data() + n * xs.c * xs.plane(), xs.c, xs.plane());
    cols.noalias() = wm.transpose() * xm;
    col2im(cols.data(), cout, oh, ow, g, xs.h, xs.w, out.data() + n * cout * oh * ow);
    if (bias != nullptr) {
      Eigen::Map<RowMatrixX<Scalar>> y(out.data() + n * cout * oh * ow, cout, oh * ow);
      y.colwise() += bias->vec();
    }
  }
  check_finite(out, "conv2d_transpose");
  return out;
}

template <typename Scalar>
ConvGrads<Scalar> conv2d_transpose_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& w,
                                            const ConvAttrs& attrs, const Tensor<Scalar>& grad_out) {
  const Shape& xs = x.shape();
  const Shape& gs = grad_out.shape();
  const Index cout = attrs.out_channels;
  const Index kk = cout * attrs.kernel.h * attrs.kernel.w;
  if (gs.n != xs.n || gs.c != cout) throw ShapeError("conv2d_transpose_backward: gradient shape mismatch");

  ConvGrads<Scalar> g{Tensor<Scalar>(xs), Tensor<Scalar>(w.shape()), Tensor<Scalar>()};
  if (attrs.bias) g.bias = Tensor<Scalar>(Shape{1, cout, 1, 1});

  Eigen::Map<const RowMatrixX<Scalar>> wm(w.data(), attrs.in_channels, kk);
  Eigen::Map<RowMatrixX<Scalar>> dw(g.weight.data(), attrs.in_channels, kk);
  RowMatrixX<Scalar> cols(kk, xs.plane());
  const Geometry geo = geometry_of(attrs);

  for (Index n = 0; n < xs.n; ++n) {
    const Scalar* dyn = grad_out.data() + n * cout * gs.plane();
    im2col(dyn, cout, gs.h, gs.w, geo, xs.h, xs.w, cols.data());
    Eigen::Map<const RowMatrixX<Scalar>> xm(x.data() + n * xs.c * xs.plane(), xs.c, xs.plane());
    Eigen::Map<RowMatrixX<Scalar>>(g.input.data() + n * xs.c * xs.plane(), xs.c, xs.plane()).noalias() =
        wm * cols;
    dw.noalias() += xm * cols.transpose();
    if (attrs.bias) {
      g.bias.vec() += Eigen::Map<const RowMatrixX<Scalar>>(dyn, cout, gs.plane()).rowwise().sum();
    }
  }
  return g;
}

// ---- batchnorm ---------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> batchnorm(const Tensor<Scalar>& x, BNState<Scalar>& st, BNCache<Scalar>* cache) {
  st.validate();
  const Shape& s = x.shape();
  if (s.c != st.channels()) {
    throw ShapeError("batchnorm: input has " + std::to_string(s.c) + " channels, state has " +
                     std::to_string(st.channels()));
  }
  const Index count = s.n * s.plane();
  VectorX<Scalar> mean(s.c);
  VectorX<Scalar> inv_std(s.c);

  if (st.mode == BNMode::Train) {
    if (count == 0) throw ShapeError("batchnorm: empty batch·spatial reduction in train mode");
    for (Index c = 0; c < s.c; ++c) {
      double sum = 0.0;
      for (Index n = 0; n < s.n; ++n) {
        const Scalar* p = x.data() + x.offset(n, c, 0, 0);
        for (Index i = 0; i < s.plane(); ++i) sum += p[i];
      }
      const double m = sum / static_cast<double>(count);
      double sq = 0.0;
      for (Index n = 0; n < s.n; ++n) {
        const Scalar* p = x.data() + x.offset(n, c, 0, 0);
        for (Index i = 0; i < s.plane(); ++i) {
          const double d = p[i] - m;
          sq += d * d;
        }
      }
      const double var = sq / static_cast<double>(count);
      const double unbiased = count > 1 ? sq / static_cast<double>(count - 1) : var;
      mean[c] = static_cast<Scalar>(m);
      inv_std[c] = static_cast<Scalar>(1.0 / std::sqrt(var + static_cast<double>(st.eps)));
      st.running_mean[c] = st.decay * st.running_mean[c] + (Scalar(1) - st.decay) * static_cast<Scalar>(m);
      st.running_var[c] = st.decay * st.running_var[c] + (Scalar(1) - st.decay) * static_cast<Scalar>(unbiased);
    }
  } else {
    mean = st.running_mean;
    inv_std = (st.running_var.array() + st.eps).rsqrt().matrix();
  }

  Tensor<Scalar> out(s);
  for (Index n = 0; n < s.n; ++n) {
    for (Index c = 0; c < s.c; ++c) {
      const Scalar scale = st.gamma[c] * inv_std[c];
      const Scalar shift = st.beta[c] - mean[c] * scale;
      const Scalar* src = x.data() + x.offset(n, c, 0, 0);
      Scalar* dst = out.data() + out.offset(n, c, 0, 0);
      for (Index i = 0; i < s.plane(); ++i) dst[i] = src[i] * scale + shift;
    }
  }
  if (cache != nullptr) {
    cache->mean = std::move(mean);
    cache->inv_std = std::move(inv_std);
    cache->mode = st.mode;
  }
  check_finite(out, "batchnorm");
  return out;
}

template <typename Scalar>
BNGrads<Scalar> batchnorm_backward(const Tensor<Scalar>& x, const BNState<Scalar>& st,
                                   const BNCache<Scalar>& cache, const Tensor<Scalar>& grad_out) {
  const Shape& s = x.shape();
  expect_shape(grad_out.shape(), s, "batchnorm_backward grad");
  const Index count = s.n * s.plane();
  BNGrads<Scalar> g{Tensor<Scalar>(s), VectorX<Scalar>::Zero(s.c), VectorX<Scalar>::Zero(s.c)};

  for (Index c = 0; c < s.c; ++c) {
    const double m = cache.mean[c];
    const double is = cache.inv_std[c];
    double sum_dy = 0.0;
    double sum_dy_xhat = 0.0;
    for (Index n = 0; n < s.n; ++n) {
      const Scalar* xp = x.data() + x.offset(n, c, 0, 0);
      const Scalar* dp = grad_out.data() + grad_out.offset(n, c, 0, 0);
      for (Index i = 0; i < s.plane(); ++i) {
        sum_dy += dp[i];
        sum_dy_xhat += dp[i] * (xp[i] - m) * is;
      }
    }
    g.beta[c] = static_cast<Scalar>(sum_dy);
    g.gamma[c] = static_cast<Scalar>(sum_dy_xhat);
    const double gamma = st.gamma[c];
    for (Index n = 0; n < s.n; ++n) {
      const Scalar* xp = x.data() + x.offset(n, c, 0, 0);
      const Scalar* dp = grad_out.data() + grad_out.offset(n, c, 0, 0);
      Scalar* out = g.input.data() + g.input.offset(n, c, 0, 0);
      if (cache.mode == BNMode::Train) {
        const double k = gamma * is / static_cast<double>(count);
        for (Index i = 0; i < s.plane(); ++i) {
          const double xhat = (xp[i] - m) * is;
          out[i] = static_cast<Scalar>(
              k * (static_cast<double>(count) * dp[i] - sum_dy - xhat * sum_dy_xhat));
        }
      } else {
        for (Index i = 0; i < s.plane(); ++i) out[i] = static_cast<Scalar>(dp[i] * gamma * is);
      }
    }
  }
  return g;
}

// ---- relu --------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  Tensor<Scalar> out(x.shape(), x.vec().cwiseMax(Scalar(0)));
  check_finite(out, "relu");
  return out;
}

template <typename Scalar>
Tensor<Scalar> relu_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& grad_out) {
  expect_shape(grad_out.shape(), x.shape(), "relu_backward grad");
  return Tensor<Scalar>(x.shape(), (x.vec().array() > Scalar(0)).select(grad_out.vec(), Scalar(0)).matrix());
}

// ---- pooling -----------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> avg_pool2d(const Tensor<Scalar>& x, const AvgPoolAttrs& a) {
  a.validate();
  const Shape& s = x.shape();
  const Index oh = pool_out_size(s.h, a.window.h, a.stride.h, a.dilation.h, a.pad_end.h);
  const Index ow = pool_out_size(s.w, a.window.w, a.stride.w, a.dilation.w, a.pad_end.w);
  if (oh < 1 || ow < 1) throw ShapeError("avg_pool2d: non-positive output size for input " + to_string(s));
  Tensor<Scalar> out(Shape{s.n, s.c, oh, ow});
  for (Index n = 0; n < s.n; ++n) {
    for (Index c = 0; c < s.c; ++c) {
      auto src = x.plane(n, c);
      auto dst = out.plane(n, c);
      for (Index i = 0; i < oh; ++i) {
        for (Index j = 0; j < ow; ++j) {
          double sum = 0.0;
          Index taps = 0;
          for (Index ki = 0; ki < a.window.h; ++ki) {
            const Index y = i * a.stride.h + ki * a.dilation.h;
            if (y >= s.h) continue;
            for (Index kj = 0; kj < a.window.w; ++kj) {
              const Index xw = j * a.stride.w + kj * a.dilation.w;
              if (xw >= s.w) continue;
              sum += src(y, xw);
              ++taps;
            }
          }
          dst(i, j) = static_cast<Scalar>(sum / static_cast<double>(taps));
        }
      }
    }
  }
  check_finite(out, "avg_pool2d");
  return out;
}

template <typename Scalar>
Tensor<Scalar> avg_pool2d_backward(const Tensor<Scalar>& x, const AvgPoolAttrs& a, const Tensor<Scalar>& grad_out) {
  const Shape& s = x.shape();
  const Shape& gs = grad_out.shape();
  Tensor<Scalar> dx(s);
  for (Index n = 0; n < s.n; ++n) {
    for (Index c = 0; c < s.c; ++c) {
      auto dst = dx.plane(n, c);
      auto dy = grad_out.plane(n, c);
      for (Index i = 0; i < gs.h; ++i) {
        for (Index j = 0; j < gs.w; ++j) {
          Index taps = 0;
          for (Index ki = 0; ki < a.window.h; ++ki) {
            if (i * a.stride.h + ki * a.dilation.h >= s.h) continue;
            for (Index kj = 0; kj < a.window.w; ++kj) {
              if (j * a.stride.w + kj * a.dilation.w < s.w) ++taps;
            }
          }
          const Scalar share = dy(i, j) / static_cast<Scalar>(taps);
          for (Index ki = 0; ki < a.window.h; ++ki) {
            const Index y = i * a.stride.h + ki * a.dilation.h;
            if (y >= s.h) continue;
            for (Index kj = 0; kj < a.window.w; ++kj) {
              const Index xw = j * a.stride.w + kj * a.dilation.w;
              if (xw < s.w) dst(y, xw) += share;
            }
          }
        }
      }
    }
  }
  return dx;
}

template <typename Scalar>
Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& x) {
  const Shape& s = x.shape();
  if (s.plane() == 0) throw ShapeError("global_avg_pool: empty spatial extent");
  Tensor<Scalar> out(Shape{s.n, s.c, 1, 1});
  for (Index n = 0; n < s.n; ++n) {
    for (Index c = 0; c < s.c; ++c) {
      const Scalar* p = x.data() + x.offset(n, c, 0, 0);
      double sum = 0.0;
      for (Index i = 0; i < s.plane(); ++i) sum += p[i];
      out(n, c, 0, 0) = static_cast<Scalar>(sum / static_cast<double>(s.plane()));
    }
  }
  check_finite(out, "global_avg_pool");
  return out;
}

template <typename Scalar>
Tensor<Scalar> global_avg_pool_backward(const Shape& s, const Tensor<Scalar>& grad_out) {
  Tensor<Scalar> dx(s);
  const Scalar inv = Scalar(1) / static_cast<Scalar>(s.plane());
  for (Index n = 0; n < s.n; ++n) {
    for (Index c = 0; c < s.c; ++c) dx.plane(n, c).setConstant(grad_out(n, c, 0, 0) * inv);
  }
  return dx;
}

// ---- bilinear ----------------------------------------------------------------

namespace {

struct AxisTaps {
  std::vector<Index> lo, hi;
  std::vector<double> w_hi;
};

AxisTaps axis_taps(Index in, Index out) {
  AxisTaps t;
  t.lo.resize(static_cast<std::size_t>(out));
  t.hi.resize(static_cast<std::size_t>(out));
  t.w_hi.resize(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (Index o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    Index lo = static_cast<Index>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const auto k = static_cast<std::size_t>(o);
    t.lo[k] = lo;
    t.hi[k] = std::min(lo + 1, in - 1);
    t.w_hi[k] = src - static_cast<double>(lo);
  }
  return t;
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> bilinear_upsample(const Tensor<Scalar>& x, Index out_h, Index out_w) {
  const Shape& s = x.shape();
  if (out_h < 1 || out_w < 1 || s.h < 1 || s.w < 1) throw ShapeError("bilinear_upsample: empty extent");
  if (out_h == s.h && out_w == s.w) return Tensor<Scalar>(s, x.vec());
  const AxisTaps ty = axis_taps(s.h, out_h);
  const AxisTaps tx = axis_taps(s.w, out_w);
  Tensor<Scalar> out(Shape{s.n, s.c, out_h, out_w});
  for (Index n = 0; n < s.n; ++n) {
    for (Index c = 0; c < s.c; ++c) {
      auto src = x.plane(n, c);
      auto dst = out.plane(n, c);
      for (Index i = 0; i < out_h; ++i) {
        const auto ki = static_cast<std::size_t>(i);
        const double wy = ty.w_hi[ki];
        for (Index j = 0; j < out_w; ++j) {
          const auto kj = static_cast<std::size_t>(j);
          const double wx = tx.w_hi[kj];
          const double top = (1 - wx) * src(ty.lo[ki], tx.lo[kj]) + wx * src(ty.lo[ki], tx.hi[kj]);
          const double bot = (1 - wx) * src(ty.hi[ki], tx.lo[kj]) + wx * src(ty.hi[ki], tx.hi[kj]);
          dst(i, j) = static_cast<Scalar>((1 - wy) * top + wy * bot);
        }
      }
    }
  }
  check_finite(out, "bilinear_upsample");
  return out;
}

template <typename Scalar>
Tensor<Scalar> bilinear_upsample_backward(const Shape& s, const Tensor<Scalar>& grad_out) {
  const Shape& gs = grad_out.shape();
  if (gs.h == s.h && gs.w == s.w) return Tensor<Scalar>(s, grad_out.vec());
  const AxisTaps ty = axis_taps(s.h, gs.h);
  const AxisTaps tx = axis_taps(s.w, gs.w);
  Tensor<Scalar> dx(s);
  for (Index n = 0; n < s.n; ++n) {
    for (Index c = 0; c < s.c; ++c) {
      auto dy = grad_out.plane(n, c);
      auto dst = dx.plane(n, c);
      for (Index i = 0; i < gs.h; ++i) {
        const auto ki = static_cast<std::size_t>(i);
        const double wy = ty.w_hi[ki];
        for (Index j = 0; j < gs.w; ++j) {
          const auto kj = static_cast<std::size_t>(j);
          const double wx = tx.w_hi[kj];
          const double g = dy(i, j);
          dst(ty.lo[ki], tx.lo[kj]) += static_cast<Scalar>((1 - wy) * (1 - wx) * g);
          dst(ty.lo[ki], tx.hi[kj]) += static_cast<Scalar>((1 - wy) * wx * g);
          dst(ty.hi[ki], tx.lo[kj]) += static_cast<Scalar>(wy * (1 - wx) * g);
          dst(ty.hi[ki], tx.hi[kj]) += static_cast<Scalar>(wy * wx * g);
        }
      }
    }
  }
  return dx;
}

template <typename Scalar>
Tensor<Scalar> phase_mask(const Tensor<Scalar>& x, Index period) {
  if (period < 1) throw std::invalid_argument("phase_mask: period must be >= 1");
  Tensor<Scalar> out(x.shape(), x.vec());
  if (period == 1) return out;
  const Shape& s = x.shape();
  for (Index n = 0; n < s.n; ++n) {
    for (Index c = 0; c < s.c; ++c) {
      auto p = out.plane(n, c);
      for (Index i = 0; i < s.h; ++i) {
        for (Index j = 0; j < s.w; ++j) {
          if (i % period != 0 || j % period != 0) p(i, j) = Scalar(0);
        }
      }
    }
  }
  return out;
}

// ---- linear / structural -------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const std::type_identity_t<Tensor<Scalar>>* bias) {
  const Shape& s = x.shape();
  const Index features = s.c * s.plane();
  const Shape& ws = w.shape();
  if (ws.c * ws.h * ws.w != features) {
    throw ShapeError("linear: input has " + std::to_string(features) + " features, weight expects " +
                     std::to_string(ws.c * ws.h * ws.w));
  }
  if (bias != nullptr) expect_shape(bias->shape(), Shape{1, ws.n, 1, 1}, "linear bias");
  Tensor<Scalar> out(Shape{s.n, ws.n, 1, 1});
  Eigen::Map<const RowMatrixX<Scalar>> xm(x.data(), s.n, features);
  Eigen::Map<const RowMatrixX<Scalar>> wm(w.data(), ws.n, features);
  Eigen::Map<RowMatrixX<Scalar>> y(out.data(), s.n, ws.n);
  y.noalias() = xm * wm.transpose();
  if (bias != nullptr) y.rowwise() += bias->vec().transpose();
  check_finite(out, "linear");
  return out;
}

template <typename Scalar>
ConvGrads<Scalar> linear_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& w, bool has_bias,
                                  const Tensor<Scalar>& grad_out) {
  const Shape& s = x.shape();
  const Index features = s.c * s.plane();
  const Index outs = w.shape().n;
  ConvGrads<Scalar> g{Tensor<Scalar>(s), Tensor<Scalar>(w.shape()), Tensor<Scalar>()};
  Eigen::Map<const RowMatrixX<Scalar>> xm(x.data(), s.n, features);
  Eigen::Map<const RowMatrixX<Scalar>> wm(w.data(), outs, features);
  Eigen::Map<const RowMatrixX<Scalar>> dy(grad_out.data(), s.n, outs);
  Eigen::Map<RowMatrixX<Scalar>>(g.input.data(), s.n, features).noalias() = dy * wm;
  Eigen::Map<RowMatrixX<Scalar>>(g.weight.data(), outs, features).noalias() = dy.transpose() * xm;
  if (has_bias) g.bias = Tensor<Scalar>(Shape{1, outs, 1, 1}, dy.colwise().sum().transpose().eval());
  return g;
}

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  expect_shape(b.shape(), a.shape(), "add");
  Tensor<Scalar> out(a.shape(), a.vec() + b.vec());
  check_finite(out, "add");
  return out;
}

template <typename Scalar>
Tensor<Scalar> concat_channels(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
    throw ShapeError("concat_channels: " + to_string(sa) + " vs " + to_string(sb));
  }
  Tensor<Scalar> out(Shape{sa.n, sa.c + sb.c, sa.h, sa.w});
  const Index pa = sa.c * sa.plane();
  const Index pb = sb.c * sb.plane();
  for (Index n = 0; n < sa.n; ++n) {
    std::copy_n(a.data() + n * pa, pa, out.data() + n * (pa + pb));
    std::copy_n(b.data() + n * pb, pb, out.data() + n * (pa + pb) + pa);
  }
  return out;
}

template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> concat_channels_backward(Index channels_a, const Tensor<Scalar>& grad_out) {
  const Shape& s = grad_out.shape();
  if (channels_a < 0 || channels_a > s.c) throw ShapeError("concat_channels_backward: bad split");
  Tensor<Scalar> ga(Shape{s.n, channels_a, s.h, s.w});
  Tensor<Scalar> gb(Shape{s.n, s.c - channels_a, s.h, s.w});
  const Index pa = channels_a * s.plane();
  const Index pb = (s.c - channels_a) * s.plane();
  for (Index n = 0; n < s.n; ++n) {
    std::copy_n(grad_out.data() + n * (pa + pb), pa, ga.data() + n * pa);
    std::copy_n(grad_out.data() + n * (pa + pb) + pa, pb, gb.data() + n * pb);
  }
  return {std::move(ga), std::move(gb)};
}

// ---- loss and label helpers ----------------------------------------------------

template <typename Scalar>
CrossEntropyResult<Scalar> softmax_cross_entropy(const Tensor<Scalar>& logits, const LabelMap& labels,
                                                 std::int32_t ignore_index) {
  const Shape& s = logits.shape();
  if (labels.n != s.n || labels.h != s.h || labels.w != s.w) {
    throw ShapeError("softmax_cross_entropy: labels " + std::to_string(labels.n) + "x" + std::to_string(labels.h) +
                     "x" + std::to_string(labels.w) + " vs logits " + to_string(s));
  }
  CrossEntropyResult<Scalar> r;
  r.grad = Tensor<Scalar>(s);
  const Index k = s.c;
  std::vector<double> p(static_cast<std::size_t>(k));
  double total = 0.0;
  for (Index n = 0; n < s.n; ++n) {
    for (Index y = 0; y < s.h; ++y) {
      for (Index x = 0; x < s.w; ++x) {
        const std::int32_t t = labels.at(n, y, x);
        if (t == ignore_index) continue;
        if (t < 0 || t >= k) {
          throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(t) + " outside [0," +
                                  std::to_string(k) + ")");
        }
        ++r.counted;
      }
    }
  }
  if (r.counted == 0) {
    r.all_ignored = true;
    return r;
  }
  const double inv = 1.0 / static_cast<double>(r.counted);
  for (Index n = 0; n < s.n; ++n) {
    for (Index y = 0; y < s.h; ++y) {
      for (Index x = 0; x < s.w; ++x) {
        const std::int32_t t = labels.at(n, y, x);
        if (t == ignore_index) continue;
        double m = -std::numeric_limits<double>::infinity();
        for (Index c = 0; c < k; ++c) m = std::max(m, static_cast<double>(logits(n, c, y, x)));
        double z = 0.0;
        for (Index c = 0; c < k; ++c) {
          p[static_cast<std::size_t>(c)] = std::exp(static_cast<double>(logits(n, c, y, x)) - m);
          z += p[static_cast<std::size_t>(c)];
        }
        total += std::log(z) + m - static_cast<double>(logits(n, t, y, x));
        for (Index c = 0; c < k; ++c) {
          const double q = p[static_cast<std::size_t>(c)] / z - (c == t ? 1.0 : 0.0);
          r.grad(n, c, y, x) = static_cast<Scalar>(q * inv);
        }
      }
    }
  }
  r.loss = total * inv;
  if (validation_enabled() && !std::isfinite(r.loss)) throw NumericError("softmax_cross_entropy: non-finite loss");
  return r;
}

template <typename Scalar>
Tensor<Scalar> softmax_channels(const Tensor<Scalar>& logits) {
  const Shape& s = logits.shape();
  Tensor<Scalar> out(s);
  for (Index n = 0; n < s.n; ++n) {
    for (Index i = 0; i < s.plane(); ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (Index c = 0; c < s.c; ++c) m = std::max(m, static_cast<double>(logits.data()[logits.offset(n, c, 0, 0) + i]));
      double z = 0.0;
      for (Index c = 0; c < s.c; ++c) z += std::exp(static_cast<double>(logits.data()[logits.offset(n, c, 0, 0) + i]) - m);
      for (Index c = 0; c < s.c; ++c) {
        const Index o = logits.offset(n, c, 0, 0) + i;
        out.data()[o] = static_cast<Scalar>(std::exp(static_cast<double>(logits.data()[o]) - m) / z);
      }
    }
  }
  return out;
}

template <typename Scalar>
LabelMap argmax_channels(const Tensor<Scalar>& scores) {
  const Shape& s = scores.shape();
  LabelMap out(s.n, s.h, s.w);
  for (Index n = 0; n < s.n; ++n) {
    for (Index y = 0; y < s.h; ++y) {
      for (Index x = 0; x < s.w; ++x) {
        Index best = 0;
        for (Index c = 1; c < s.c; ++c) {
          if (scores(n, c, y, x) > scores(n, best, y, x)) best = c;
        }
        out.at(n, y, x) = static_cast<std::int32_t>(best);
      }
    }
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> flip_horizontal(const Tensor<Scalar>& x) {
  Tensor<Scalar> out(x.shape());
  const Shape& s = x.shape();
  for (Index n = 0; n < s.n; ++n) {
    for (Index c = 0; c < s.c; ++c) out.plane(n, c) = x.plane(n, c).rowwise().reverse();
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> subsample(const Tensor<Scalar>& x, Index step, Index phase) {
  if (step < 1 || phase < 0 || phase >= step) throw std::invalid_argument("subsample: bad step/phase");
  const Shape& s = x.shape();
  const Index oh = s.h > phase ? (s.h - phase + step - 1) / step : 0;
  const Index ow = s.w > phase ? (s.w - phase + step - 1) / step : 0;
  Tensor<Scalar> out(Shape{s.n, s.c, oh, ow});
  for (Index n = 0; n < s.n; ++n) {
    for (Index c = 0; c < s.c; ++c) {
      for (Index i = 0; i < oh; ++i) {
        for (Index j = 0; j < ow; ++j) out(n, c, i, j) = x(n, c, phase + i * step, phase + j * step);
      }
    }
  }
  return out;
}

// ---- explicit instantiations ---------------------------------------------------

#define SUNET_INSTANTIATE_OPS(S)                                                                              \
  template struct BNState<S>;                                                                                 \
  template Tensor<S> conv2d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>*, const ConvAttrs&);          \
  template ConvGrads<S> conv2d_backward(const Tensor<S>&, const Tensor<S>&, const ConvAttrs&, const Tensor<S>&); \
  template Tensor<S> conv2d_transpose(const Tensor<S>&, const Tensor<S>&, const Tensor<S>*, const ConvAttrs&); \
  template ConvGrads<S> conv2d_transpose_backward(const Tensor<S>&, const Tensor<S>&, const ConvAttrs&,       \
                                                  const Tensor<S>&);                                          \
  template Tensor<S> batchnorm(const Tensor<S>&, BNState<S>&, BNCache<S>*);                                   \
  template BNGrads<S> batchnorm_backward(const Tensor<S>&, const BNState<S>&, const BNCache<S>&,              \
                                         const Tensor<S>&);                                                   \
  template Tensor<S> relu(const Tensor<S>&);                                                                  \
  template Tensor<S> relu_backward(const Tensor<S>&, const Tensor<S>&);                                       \
  template Tensor<S> avg_pool2d(const Tensor<S>&, const AvgPoolAttrs&);                                       \
  template Tensor<S> avg_pool2d_backward(const Tensor<S>&, const AvgPoolAttrs&, const Tensor<S>&);            \
  template Tensor<S> global_avg_pool(const Tensor<S>&);                                                       \
  template Tensor<S> global_avg_pool_backward(const Shape&, const Tensor<S>&);                                \
  template Tensor<S> bilinear_upsample(const Tensor<S>&, Index, Index);                                       \
  template Tensor<S> bilinear_upsample_backward(const Shape&, const Tensor<S>&);                              \
  template Tensor<S> phase_mask(const Tensor<S>&, Index);                                                     \
  template Tensor<S> linear(const Tensor<S>&, const Tensor<S>&, const Tensor<S>*);                            \
  template ConvGrads<S> linear_backward(const Tensor<S>&, const Tensor<S>&, bool, const Tensor<S>&);          \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                                                 \
  template Tensor<S> concat_channels(const Tensor<S>&, const Tensor<S>&);                                     \
  template std::pair<Tensor<S>, Tensor<S>> concat_channels_backward(Index, const Tensor<S>&);                 \
  template CrossEntropyResult<S> softmax_cross_entropy(const Tensor<S>&, const LabelMap&, std::int32_t);      \
  template Tensor<S> softmax_channels(const Tensor<S>&);                                                      \
  template LabelMap argmax_channels(const Tensor<S>&);                                                        \
  template Tensor<S> flip_horizontal(const Tensor<S>&);                                                       \
  template Tensor<S> subsample(const Tensor<S>&, Index, Index);

SUNET_INSTANTIATE_OPS(float)
SUNET_INSTANTIATE_OPS(double)

#undef SUNET_INSTANTIATE_OPS

}  // namespace sunet
