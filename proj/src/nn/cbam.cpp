#include "gepd/nn/cbam.hpp"

#include <algorithm>
#include <stdexcept>

#include <fmt/format.h>

namespace gepd::nn {

namespace {

ConvGeometry spatial_geometry(std::size_t kernel, bool flat) {
  return ConvGeometry::same(flat ? 1 : kernel, kernel);
}

}  // namespace

Cbam::Cbam(std::size_t channels, std::size_t reduction, std::size_t spatial_kernel, bool flat,
           std::mt19937_64& rng)
    : channels_(channels),
      fc1_(channels, std::max<std::size_t>(1, channels / std::max<std::size_t>(1, reduction)), rng),
      fc2_(std::max<std::size_t>(1, channels / std::max<std::size_t>(1, reduction)), channels, rng),
      spatial_(2, 1, spatial_geometry(spatial_kernel, flat), true, rng) {}

Tensor Cbam::forward(const Tensor& input) {
  if (input.rank() != 4 || input.dim(1) != channels_) {
    throw std::invalid_argument(fmt::format("Cbam: expected (N, {}, H, W), got {}", channels_,
                                            shape_string(input.shape())));
  }
  input_ = input;
  const std::size_t n = input.dim(0), c = channels_, plane = input.dim(2) * input.dim(3);

  Tensor desc({2 * n, c});
  hw_argmax_.assign(n * c, 0);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* x = input.data() + (b * c + ch) * plane;
      double s = 0.0;
      std::size_t arg = 0;
      for (std::size_t p = 0; p < plane; ++p) {
        s += x[p];
        if (x[p] > x[arg]) arg = p;
      }
      desc[b * c + ch] = s / static_cast<double>(plane);
      desc[(n + b) * c + ch] = x[arg];
      hw_argmax_[b * c + ch] = arg;
    }
  }
  hidden_pre_ = fc1_.forward(desc);
  Tensor hidden = hidden_pre_;
  for (double& v : hidden.values()) v = std::max(v, 0.0);
  const Tensor mlp = fc2_.forward(hidden);

  ca_ = Tensor({n, c});
  x1_ = Tensor(input.shape());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double gate = sigmoid(mlp[b * c + ch] + mlp[(n + b) * c + ch]);
      ca_[b * c + ch] = gate;
      const std::size_t off = (b * c + ch) * plane;
      for (std::size_t p = 0; p < plane; ++p) x1_[off + p] = input[off + p] * gate;
    }
  }

  Tensor smap({n, 2, input.dim(2), input.dim(3)});
  c_argmax_.assign(n * plane, 0);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < plane; ++p) {
      double s = 0.0;
      std::size_t arg = 0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double v = x1_[(b * c + ch) * plane + p];
        s += v;
        if (v > x1_[(b * c + arg) * plane + p]) arg = ch;
      }
      smap[(b * 2) * plane + p] = s / static_cast<double>(c);
      smap[(b * 2 + 1) * plane + p] = x1_[(b * c + arg) * plane + p];
      c_argmax_[b * plane + p] = arg;
    }
  }
  const Tensor logits = spatial_.forward(smap);
  sa_ = Tensor(logits.shape());
  for (std::size_t i = 0; i < logits.size(); ++i) sa_[i] = sigmoid(logits[i]);

  Tensor out(input.shape());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * plane;
      for (std::size_t p = 0; p < plane; ++p) out[off + p] = x1_[off + p] * sa_[b * plane + p];
    }
  }
  return out;
}

Tensor Cbam::backward(const Tensor& grad_output) {
  const std::size_t n = input_.dim(0), c = channels_, plane = input_.dim(2) * input_.dim(3);

  Tensor g_x1(input_.shape());
  Tensor g_logit_s(sa_.shape());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < plane; ++p) {
      double s = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t i = (b * c + ch) * plane + p;
        s += grad_output[i] * x1_[i];
        g_x1[i] = grad_output[i] * sa_[b * plane + p];
      }
      const double gate = sa_[b * plane + p];
      g_logit_s[b * plane + p] = s * gate * (1.0 - gate);
    }
  }
  const Tensor g_smap = spatial_.backward(g_logit_s);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < plane; ++p) {
      const double g_mean = g_smap[(b * 2) * plane + p] / static_cast<double>(c);
      for (std::size_t ch = 0; ch < c; ++ch) g_x1[(b * c + ch) * plane + p] += g_mean;
      g_x1[(b * c + c_argmax_[b * plane + p]) * plane + p] += g_smap[(b * 2 + 1) * plane + p];
    }
  }

  Tensor grad_input(input_.shape());
  Tensor g_mlp({2 * n, c});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * plane;
      const double gate = ca_[b * c + ch];
      double s = 0.0;
      for (std::size_t p = 0; p < plane; ++p) {
        s += g_x1[off + p] * input_[off + p];
        grad_input[off + p] = g_x1[off + p] * gate;
      }
      const double g_logit = s * gate * (1.0 - gate);
      g_mlp[b * c + ch] = g_logit;
      g_mlp[(n + b) * c + ch] = g_logit;
    }
  }
  Tensor g_hidden = fc2_.backward(g_mlp);
  for (std::size_t i = 0; i < g_hidden.size(); ++i) {
    if (hidden_pre_[i] <= 0.0) g_hidden[i] = 0.0;
  }
  const Tensor g_desc = fc1_.backward(g_hidden);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * plane;
      const double g_avg = g_desc[b * c + ch] / static_cast<double>(plane);
      for (std::size_t p = 0; p < plane; ++p) grad_input[off + p] += g_avg;
      grad_input[off + hw_argmax_[b * c + ch]] += g_desc[(n + b) * c + ch];
    }
  }
  return grad_input;
}

void Cbam::collect_parameters(std::vector<Parameter*>& out) {
  fc1_.collect_parameters(out);
  fc2_.collect_parameters(out);
  spatial_.collect_parameters(out);
}

}  // namespace gepd::nn
