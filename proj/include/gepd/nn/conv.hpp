#pragma once

#include <cstddef>
#include <random>

#include "gepd/nn/module.hpp"

namespace gepd::nn {

// Geometry of a grouped, dilated, strided 2-d convolution over (N, C, H, W).
// Weights are laid out (C_out, C_in / groups, kernel_h, kernel_w).
struct ConvGeometry {
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t stride_h = 1;
  std::size_t stride_w = 1;
  std::size_t dilation_h = 1;
  std::size_t dilation_w = 1;
  std::size_t pad_top = 0;
  std::size_t pad_bottom = 0;
  std::size_t pad_left = 0;
  std::size_t pad_right = 0;
  std::size_t groups = 1;

  // Unit-stride padding that preserves the spatial size. For even footprints
  // the extra element goes to the bottom/right.
  static ConvGeometry same(std::size_t kernel_h, std::size_t kernel_w, std::size_t dilation_h = 1,
                           std::size_t dilation_w = 1, std::size_t groups = 1);

  std::size_t out_h(std::size_t in_h) const;
  std::size_t out_w(std::size_t in_w) const;
};

// Plain functional forms; the layers below are thin wrappers.
//
// y[n, o, p, q] = b[o] + sum_{c in group(o), i, j}
//     x[n, c, p*sh + i*dh - pt, q*sw + j*dw - pl] * w[o, c - group_start, i, j]
//
// Grouped convolution never mixes channels across groups; with groups == C_in
// it is the depthwise case. Throws std::invalid_argument when channel counts
// are not divisible by groups or the dilated footprint exceeds the padded input.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor* bias, const ConvGeometry& g);

// Writes the input gradient into *grad_input (if non-null) and accumulates
// into *grad_weight / *grad_bias (if non-null).
void conv2d_backward(const Tensor& input, const Tensor& weight, const Tensor& grad_output,
                     const ConvGeometry& g, Tensor* grad_input, Tensor* grad_weight,
                     Tensor* grad_bias);

class Conv2d : public Module {
 public:
  Conv2d(std::size_t in_channels, std::size_t out_channels, ConvGeometry geometry, bool bias,
         std::mt19937_64& rng);

  Tensor forward(const Tensor& input) override;
  Tensor backward(const Tensor& grad_output) override;
  void collect_parameters(std::vector<Parameter*>& out) override;

  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }
  const ConvGeometry& geometry() const { return geometry_; }

 private:
  ConvGeometry geometry_;
  Parameter weight_;
  Parameter bias_;
  bool has_bias_;
  Tensor input_;
};

// Transposed convolution along the width axis only (kernel 1 x k):
// out_w = (in_w - 1) * stride - 2 * padding + kernel + output_padding.
// Weights are (C_in, C_out, kernel).
class ConvTranspose1d : public Module {
 public:
  ConvTranspose1d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                  std::size_t stride, std::size_t padding, std::size_t output_padding,
                  std::mt19937_64& rng);

  Tensor forward(const Tensor& input) override;
  Tensor backward(const Tensor& grad_output) override;
  void collect_parameters(std::vector<Parameter*>& out) override;

  std::size_t out_w(std::size_t in_w) const;

 private:
  std::size_t in_channels_, out_channels_, kernel_, stride_, padding_, output_padding_;
  Parameter weight_;
  Parameter bias_;
  Tensor input_;
};

}  // namespace gepd::nn
