#include "gepd/nn/conv.hpp"

#include <stdexcept>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "gepd/nn/init.hpp"

namespace gepd::nn {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMatrix>;
using ConstRowMap = Eigen::Map<const RowMatrix>;

struct ConvDims {
  std::size_t n, c_in, h, w, c_out, ho, wo, cin_g, cout_g, k, p;
};

ConvDims check_dims(const Tensor& x, const Tensor& w, const ConvGeometry& g) {
  if (x.rank() != 4 || w.rank() != 4) {
    throw std::invalid_argument(fmt::format("conv2d: expected rank-4 input and weight, got {} and {}",
                                            shape_string(x.shape()), shape_string(w.shape())));
  }
  ConvDims d{};
  d.n = x.dim(0);
  d.c_in = x.dim(1);
  d.h = x.dim(2);
  d.w = x.dim(3);
  d.c_out = w.dim(0);
  if (g.groups == 0 || d.c_in % g.groups != 0 || d.c_out % g.groups != 0) {
    throw std::invalid_argument(fmt::format(
        "conv2d: channels in={} out={} not divisible by groups={}", d.c_in, d.c_out, g.groups));
  }
  d.cin_g = d.c_in / g.groups;
  d.cout_g = d.c_out / g.groups;
  if (w.dim(1) != d.cin_g || w.dim(2) != g.kernel_h || w.dim(3) != g.kernel_w) {
    throw std::invalid_argument(fmt::format("conv2d: weight shape {} does not match geometry",
                                            shape_string(w.shape())));
  }
  d.ho = g.out_h(d.h);
  d.wo = g.out_w(d.w);
  d.k = d.cin_g * g.kernel_h * g.kernel_w;
  d.p = d.ho * d.wo;
  return d;
}

// Unfolds one (sample, group) slice into a K x P matrix.
void im2col(const double* x, const ConvDims& d, const ConvGeometry& g, RowMatrix& col) {
  col.setZero(static_cast<Eigen::Index>(d.k), static_cast<Eigen::Index>(d.p));
  std::size_t row = 0;
  for (std::size_t c = 0; c < d.cin_g; ++c) {
    const double* plane = x + c * d.h * d.w;
    for (std::size_t i = 0; i < g.kernel_h; ++i) {
      for (std::size_t j = 0; j < g.kernel_w; ++j, ++row) {
        double* dst = col.data() + row * d.p;
        for (std::size_t oh = 0; oh < d.ho; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride_h + i * g.dilation_h) -
                          static_cast<std::ptrdiff_t>(g.pad_top);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(d.h)) continue;
          const double* src = plane + static_cast<std::size_t>(ih) * d.w;
          for (std::size_t ow = 0; ow < d.wo; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride_w + j * g.dilation_w) -
                            static_cast<std::ptrdiff_t>(g.pad_left);
            if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(d.w)) {
              dst[oh * d.wo + ow] = src[iw];
            }
          }
        }
      }
    }
  }
}

void col2im(const RowMatrix& col, const ConvDims& d, const ConvGeometry& g, double* x) {
  std::size_t row = 0;
  for (std::size_t c = 0; c < d.cin_g; ++c) {
    double* plane = x + c * d.h * d.w;
    for (std::size_t i = 0; i < g.kernel_h; ++i) {
      for (std::size_t j = 0; j < g.kernel_w; ++j, ++row) {
        const double* src = col.data() + row * d.p;
        for (std::size_t oh = 0; oh < d.ho; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride_h + i * g.dilation_h) -
                          static_cast<std::ptrdiff_t>(g.pad_top);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(d.h)) continue;
          double* dst = plane + static_cast<std::size_t>(ih) * d.w;
          for (std::size_t ow = 0; ow < d.wo; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride_w + j * g.dilation_w) -
                            static_cast<std::ptrdiff_t>(g.pad_left);
            if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(d.w)) dst[iw] += src[oh * d.wo + ow];
          }
        }
      }
    }
  }
}

std::size_t out_extent(std::size_t in, std::size_t pad_a, std::size_t pad_b, std::size_t kernel,
                       std::size_t dilation, std::size_t stride, const char* axis) {
  const std::size_t padded = in + pad_a + pad_b;
  const std::size_t footprint = dilation * (kernel - 1) + 1;
  if (kernel == 0 || stride == 0 || dilation == 0) {
    throw std::invalid_argument("conv2d: kernel, stride and dilation must be positive");
  }
  if (footprint > padded) {
    throw std::invalid_argument(fmt::format(
        "conv2d: dilated kernel footprint {} exceeds padded {} extent {}", footprint, axis, padded));
  }
  return (padded - footprint) / stride + 1;
}

}  // namespace

ConvGeometry ConvGeometry::same(std::size_t kernel_h, std::size_t kernel_w, std::size_t dilation_h,
                                std::size_t dilation_w, std::size_t groups) {
  ConvGeometry g;
  g.kernel_h = kernel_h;
  g.kernel_w = kernel_w;
  g.dilation_h = dilation_h;
  g.dilation_w = dilation_w;
  g.groups = groups;
  const std::size_t total_h = dilation_h * (kernel_h - 1);
  const std::size_t total_w = dilation_w * (kernel_w - 1);
  g.pad_top = total_h / 2;
  g.pad_bottom = total_h - g.pad_top;
  g.pad_left = total_w / 2;
  g.pad_right = total_w - g.pad_left;
  return g;
}

std::size_t ConvGeometry::out_h(std::size_t in_h) const {
  return out_extent(in_h, pad_top, pad_bottom, kernel_h, dilation_h, stride_h, "height");
}

std::size_t ConvGeometry::out_w(std::size_t in_w) const {
  return out_extent(in_w, pad_left, pad_right, kernel_w, dilation_w, stride_w, "width");
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor* bias, const ConvGeometry& g) {
  const ConvDims d = check_dims(input, weight, g);
  Tensor out({d.n, d.c_out, d.ho, d.wo});
  RowMatrix col;
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t grp = 0; grp < g.groups; ++grp) {
      im2col(input.data() + (n * d.c_in + grp * d.cin_g) * d.h * d.w, d, g, col);
      ConstRowMap w(weight.data() + grp * d.cout_g * d.k, static_cast<Eigen::Index>(d.cout_g),
                    static_cast<Eigen::Index>(d.k));
      RowMap y(out.data() + (n * d.c_out + grp * d.cout_g) * d.p,
               static_cast<Eigen::Index>(d.cout_g), static_cast<Eigen::Index>(d.p));
      y.noalias() = w * col;
    }
    if (bias != nullptr) {
      for (std::size_t o = 0; o < d.c_out; ++o) {
        double* y = out.data() + (n * d.c_out + o) * d.p;
        for (std::size_t p = 0; p < d.p; ++p) y[p] += (*bias)[o];
      }
    }
  }
  return out;
}

void conv2d_backward(const Tensor& input, const Tensor& weight, const Tensor& grad_output,
                     const ConvGeometry& g, Tensor* grad_input, Tensor* grad_weight,
                     Tensor* grad_bias) {
  const ConvDims d = check_dims(input, weight, g);
  if (grad_output.shape() != Shape{d.n, d.c_out, d.ho, d.wo}) {
    throw std::invalid_argument("conv2d_backward: gradient shape mismatch");
  }
  if (grad_input != nullptr) *grad_input = Tensor(input.shape());
  RowMatrix col;
  RowMatrix dcol;
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t grp = 0; grp < g.groups; ++grp) {
      const std::size_t in_offset = (n * d.c_in + grp * d.cin_g) * d.h * d.w;
      ConstRowMap dy(grad_output.data() + (n * d.c_out + grp * d.cout_g) * d.p,
                     static_cast<Eigen::Index>(d.cout_g), static_cast<Eigen::Index>(d.p));
      ConstRowMap w(weight.data() + grp * d.cout_g * d.k, static_cast<Eigen::Index>(d.cout_g),
                    static_cast<Eigen::Index>(d.k));
      if (grad_weight != nullptr) {
        im2col(input.data() + in_offset, d, g, col);
        RowMap dw(grad_weight->data() + grp * d.cout_g * d.k, static_cast<Eigen::Index>(d.cout_g),
                  static_cast<Eigen::Index>(d.k));
        dw.noalias() += dy * col.transpose();
      }
      if (grad_input != nullptr) {
        dcol.noalias() = w.transpose() * dy;
        col2im(dcol, d, g, grad_input->data() + in_offset);
      }
    }
    if (grad_bias != nullptr) {
      for (std::size_t o = 0; o < d.c_out; ++o) {
        const double* dy = grad_output.data() + (n * d.c_out + o) * d.p;
        double s = 0.0;
        for (std::size_t p = 0; p < d.p; ++p) s += dy[p];
        (*grad_bias)[o] += s;
      }
    }
  }
}

Conv2d::Conv2d(std::size_t in_channels, std::size_t out_channels, ConvGeometry geometry, bool bias,
               std::mt19937_64& rng)
    : geometry_(geometry), has_bias_(bias) {
  if (geometry.groups == 0 || in_channels % geometry.groups != 0 ||
      out_channels % geometry.groups != 0) {
    throw std::invalid_argument(fmt::format("Conv2d: channels in={} out={} not divisible by groups={}",
                                            in_channels, out_channels, geometry.groups));
  }
  const std::size_t cin_g = in_channels / geometry.groups;
  weight_ = Parameter("weight", Tensor({out_channels, cin_g, geometry.kernel_h, geometry.kernel_w}));
  kaiming_normal(weight_.value, cin_g * geometry.kernel_h * geometry.kernel_w, rng);
  bias_ = Parameter("bias", Tensor({out_channels}), false);
}

Tensor Conv2d::forward(const Tensor& input) {
  input_ = input;
  return conv2d(input, weight_.value, has_bias_ ? &bias_.value : nullptr, geometry_);
}

Tensor Conv2d::backward(const Tensor& grad_output) {
  Tensor grad_input;
  conv2d_backward(input_, weight_.value, grad_output, geometry_, &grad_input, &weight_.grad,
                  has_bias_ ? &bias_.grad : nullptr);
  return grad_input;
}

void Conv2d::collect_parameters(std::vector<Parameter*>& out) {
  out.push_back(&weight_);
  if (has_bias_) out.push_back(&bias_);
}

ConvTranspose1d::ConvTranspose1d(std::size_t in_channels, std::size_t out_channels,
                                 std::size_t kernel, std::size_t stride, std::size_t padding,
                                 std::size_t output_padding, std::mt19937_64& rng)
    : in_channels_(in_channels),
      out_channels_(out_channels),
      kernel_(kernel),
      stride_(stride),
      padding_(padding),
      output_padding_(output_padding) {
  if (kernel == 0 || stride == 0 || output_padding >= stride) {
    throw std::invalid_argument("ConvTranspose1d: invalid kernel/stride/output_padding");
  }
  weight_ = Parameter("weight", Tensor({in_channels, out_channels, kernel}));
  kaiming_normal(weight_.value, in_channels * kernel / stride, rng);
  bias_ = Parameter("bias", Tensor({out_channels}), false);
}

std::size_t ConvTranspose1d::out_w(std::size_t in_w) const {
  const std::size_t full = (in_w - 1) * stride_ + kernel_ + output_padding_;
  if (in_w == 0 || full <= 2 * padding_) throw std::invalid_argument("ConvTranspose1d: input too short");
  return full - 2 * padding_;
}

Tensor ConvTranspose1d::forward(const Tensor& input) {
  if (input.rank() != 4 || input.dim(1) != in_channels_) {
    throw std::invalid_argument(fmt::format("ConvTranspose1d: bad input shape {}",
                                            shape_string(input.shape())));
  }
  input_ = input;
  const std::size_t n = input.dim(0), h = input.dim(2), win = input.dim(3);
  const std::size_t wout = out_w(win);
  Tensor out({n, out_channels_, h, wout});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t co = 0; co < out_channels_; ++co) {
      for (std::size_t r = 0; r < h; ++r) {
        double* y = &out.at(b, co, r, 0);
        for (std::size_t q = 0; q < wout; ++q) y[q] = bias_.value[co];
        for (std::size_t ci = 0; ci < in_channels_; ++ci) {
          const double* x = input.data() + ((b * in_channels_ + ci) * h + r) * win;
          const double* w = weight_.value.data() + (ci * out_channels_ + co) * kernel_;
          for (std::size_t i = 0; i < win; ++i) {
            for (std::size_t j = 0; j < kernel_; ++j) {
              const auto q = static_cast<std::ptrdiff_t>(i * stride_ + j) -
                             static_cast<std::ptrdiff_t>(padding_);
              if (q >= 0 && q < static_cast<std::ptrdiff_t>(wout)) y[q] += x[i] * w[j];
            }
          }
        }
      }
    }
  }
  return out;
}

Tensor ConvTranspose1d::backward(const Tensor& grad_output) {
  const std::size_t n = input_.dim(0), h = input_.dim(2), win = input_.dim(3);
  const std::size_t wout = grad_output.dim(3);
  Tensor grad_input(input_.shape());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t co = 0; co < out_channels_; ++co) {
      for (std::size_t r = 0; r < h; ++r) {
        const double* dy = grad_output.data() + ((b * out_channels_ + co) * h + r) * wout;
        double s = 0.0;
        for (std::size_t q = 0; q < wout; ++q) s += dy[q];
        bias_.grad[co] += s;
        for (std::size_t ci = 0; ci < in_channels_; ++ci) {
          const double* x = input_.data() + ((b * in_channels_ + ci) * h + r) * win;
          double* dx = &grad_input.at(b, ci, r, 0);
          const double* w = weight_.value.data() + (ci * out_channels_ + co) * kernel_;
          double* dw = weight_.grad.data() + (ci * out_channels_ + co) * kernel_;
          for (std::size_t i = 0; i < win; ++i) {
            for (std::size_t j = 0; j < kernel_; ++j) {
              const auto q = static_cast<std::ptrdiff_t>(i * stride_ + j) -
                             static_cast<std::ptrdiff_t>(padding_);
              if (q >= 0 && q < static_cast<std::ptrdiff_t>(wout)) {
                dx[i] += dy[q] * w[j];
                dw[j] += dy[q] * x[i];
              }
            }
          }
        }
      }
    }
  }
  return grad_input;
}

void ConvTranspose1d::collect_parameters(std::vector<Parameter*>& out) {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

}  // namespace gepd::nn
