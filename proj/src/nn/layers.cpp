#include "gepd/nn/layers.hpp"

#include <cmath>
#include <stdexcept>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "gepd/nn/init.hpp"

namespace gepd::nn {

namespace {
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMatrix>;
using ConstRowMap = Eigen::Map<const RowMatrix>;

Eigen::Index idx(std::size_t v) { return static_cast<Eigen::Index>(v); }
}  // namespace

Linear::Linear(std::size_t in_features, std::size_t out_features, std::mt19937_64& rng)
    : in_(in_features), out_(out_features) {
  weight_ = Parameter("weight", Tensor({out_features, in_features}));
  kaiming_normal(weight_.value, in_features, rng);
  bias_ = Parameter("bias", Tensor({out_features}), false);
}

Tensor Linear::forward(const Tensor& input) {
  if (input.rank() != 2 || input.dim(1) != in_) {
    throw std::invalid_argument(fmt::format("Linear: expected (N, {}), got {}", in_,
                                            shape_string(input.shape())));
  }
  input_ = input;
  const std::size_t n = input.dim(0);
  Tensor out({n, out_});
  ConstRowMap x(input.data(), idx(n), idx(in_));
  ConstRowMap w(weight_.value.data(), idx(out_), idx(in_));
  RowMap y(out.data(), idx(n), idx(out_));
  y.noalias() = x * w.transpose();
  Eigen::Map<const Eigen::RowVectorXd> b(bias_.value.data(), idx(out_));
  y.rowwise() += b;
  return out;
}

Tensor Linear::backward(const Tensor& grad_output) {
  const std::size_t n = input_.dim(0);
  ConstRowMap x(input_.data(), idx(n), idx(in_));
  ConstRowMap w(weight_.value.data(), idx(out_), idx(in_));
  ConstRowMap dy(grad_output.data(), idx(n), idx(out_));
  RowMap dw(weight_.grad.data(), idx(out_), idx(in_));
  dw.noalias() += dy.transpose() * x;
  Eigen::Map<Eigen::RowVectorXd> db(bias_.grad.data(), idx(out_));
  db += dy.colwise().sum();
  Tensor grad_input({n, in_});
  RowMap dx(grad_input.data(), idx(n), idx(in_));
  dx.noalias() = dy * w;
  return grad_input;
}

void Linear::collect_parameters(std::vector<Parameter*>& out) {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

BatchNorm2d::BatchNorm2d(std::size_t channels, double momentum, double eps)
    : channels_(channels),
      momentum_(momentum),
      eps_(eps),
      gamma_("gamma", Tensor({channels}, 1.0), false),
      beta_("beta", Tensor({channels}), false),
      running_mean_({channels}),
      running_var_({channels}, 1.0) {}

Tensor BatchNorm2d::forward(const Tensor& input) {
  if (input.rank() != 4 || input.dim(1) != channels_) {
    throw std::invalid_argument(fmt::format("BatchNorm2d: expected (N, {}, H, W), got {}", channels_,
                                            shape_string(input.shape())));
  }
  const std::size_t n = input.dim(0), plane = input.dim(2) * input.dim(3);
  const double count = static_cast<double>(n * plane);
  last_training_ = training_;
  normalized_ = Tensor(input.shape());
  inv_std_ = Tensor({channels_});
  Tensor out(input.shape());
  for (std::size_t c = 0; c < channels_; ++c) {
    double mean = running_mean_[c];
    double var = running_var_[c];
    if (training_) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const double* x = input.data() + (b * channels_ + c) * plane;
        for (std::size_t p = 0; p < plane; ++p) s += x[p];
      }
      mean = s / count;
      double ss = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const double* x = input.data() + (b * channels_ + c) * plane;
        for (std::size_t p = 0; p < plane; ++p) ss += (x[p] - mean) * (x[p] - mean);
      }
      var = ss / count;
      const double unbiased = count > 1 ? ss / (count - 1) : var;
      running_mean_[c] = (1 - momentum_) * running_mean_[c] + momentum_ * mean;
      running_var_[c] = (1 - momentum_) * running_var_[c] + momentum_ * unbiased;
    }
    const double inv_std = 1.0 / std::sqrt(var + eps_);
    inv_std_[c] = inv_std;
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t off = (b * channels_ + c) * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        const double xh = (input[off + p] - mean) * inv_std;
        normalized_[off + p] = xh;
        out[off + p] = gamma_.value[c] * xh + beta_.value[c];
      }
    }
  }
  return out;
}

Tensor BatchNorm2d::backward(const Tensor& grad_output) {
  const std::size_t n = grad_output.dim(0), plane = grad_output.dim(2) * grad_output.dim(3);
  const double count = static_cast<double>(n * plane);
  Tensor grad_input(grad_output.shape());
  for (std::size_t c = 0; c < channels_; ++c) {
    double sum_dy = 0.0, sum_dy_xh = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t off = (b * channels_ + c) * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        sum_dy += grad_output[off + p];
        sum_dy_xh += grad_output[off + p] * normalized_[off + p];
      }
    }
    gamma_.grad[c] += sum_dy_xh;
    beta_.grad[c] += sum_dy;
    const double g = gamma_.value[c] * inv_std_[c];
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t off = (b * channels_ + c) * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        if (last_training_) {
          grad_input[off + p] =
              g * (grad_output[off + p] - sum_dy / count - normalized_[off + p] * sum_dy_xh / count);
        } else {
          grad_input[off + p] = g * grad_output[off + p];
        }
      }
    }
  }
  return grad_input;
}

void BatchNorm2d::collect_parameters(std::vector<Parameter*>& out) {
  out.push_back(&gamma_);
  out.push_back(&beta_);
}

void BatchNorm2d::collect_buffers(std::vector<Tensor*>& out) {
  out.push_back(&running_mean_);
  out.push_back(&running_var_);
}

Tensor Elu::forward(const Tensor& input) {
  input_ = input;
  Tensor out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) {
    const double x = input[i];
    out[i] = x > 0 ? x : alpha_ * std::expm1(x);
  }
  return out;
}

Tensor Elu::backward(const Tensor& grad_output) {
  Tensor g(grad_output.shape());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double x = input_[i];
    g[i] = grad_output[i] * (x > 0 ? 1.0 : alpha_ * std::exp(x));
  }
  return g;
}

Tensor LeakyRelu::forward(const Tensor& input) {
  input_ = input;
  Tensor out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > 0 ? input[i] : slope_ * input[i];
  return out;
}

Tensor LeakyRelu::backward(const Tensor& grad_output) {
  Tensor g(grad_output.shape());
  for (std::size_t i = 0; i < g.size(); ++i) {
    g[i] = input_[i] > 0 ? grad_output[i] : slope_ * grad_output[i];
  }
  return g;
}

Tensor ScaledTanh::forward(const Tensor& input) {
  output_ = Tensor(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) output_[i] = scale_ * std::tanh(input[i]);
  return output_;
}

Tensor ScaledTanh::backward(const Tensor& grad_output) {
  Tensor g(grad_output.shape());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double t = output_[i] / scale_;
    g[i] = grad_output[i] * scale_ * (1.0 - t * t);
  }
  return g;
}

Tensor AvgPoolWidth::forward(const Tensor& input) {
  if (input.rank() != 4 || input.dim(3) < kernel_) {
    throw std::invalid_argument(fmt::format("AvgPoolWidth: input {} shorter than pool {}",
                                            shape_string(input.shape()), kernel_));
  }
  input_shape_ = input.shape();
  const std::size_t rows = input.dim(0) * input.dim(1) * input.dim(2);
  const std::size_t w = input.dim(3), wo = w / kernel_;
  Tensor out({input.dim(0), input.dim(1), input.dim(2), wo});
  const double inv = 1.0 / static_cast<double>(kernel_);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t q = 0; q < wo; ++q) {
      double s = 0.0;
      for (std::size_t k = 0; k < kernel_; ++k) s += input[r * w + q * kernel_ + k];
      out[r * wo + q] = s * inv;
    }
  }
  return out;
}

Tensor AvgPoolWidth::backward(const Tensor& grad_output) {
  Tensor g(input_shape_);
  const std::size_t w = input_shape_[3], wo = grad_output.dim(3);
  const std::size_t rows = g.size() / w;
  const double inv = 1.0 / static_cast<double>(kernel_);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t q = 0; q < wo; ++q) {
      for (std::size_t k = 0; k < kernel_; ++k) g[r * w + q * kernel_ + k] = grad_output[r * wo + q] * inv;
    }
  }
  return g;
}

Dropout::Dropout(double rate, std::uint64_t seed) : rate_(rate), rng_(seed) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("Dropout: rate must lie in [0, 1)");
}

Tensor Dropout::forward(const Tensor& input) {
  applied_ = training_ && rate_ > 0.0;
  if (!applied_) return input;
  mask_ = Tensor(input.shape());
  std::bernoulli_distribution keep(1.0 - rate_);
  const double scale = 1.0 / (1.0 - rate_);
  Tensor out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) {
    mask_[i] = keep(rng_) ? scale : 0.0;
    out[i] = input[i] * mask_[i];
  }
  return out;
}

Tensor Dropout::backward(const Tensor& grad_output) {
  if (!applied_) return grad_output;
  Tensor g(grad_output.shape());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = grad_output[i] * mask_[i];
  return g;
}

Tensor Reshape::forward(const Tensor& input) {
  input_shape_ = input.shape();
  Shape shape{input.dim(0)};
  shape.insert(shape.end(), target_.begin(), target_.end());
  return input.reshaped(std::move(shape));
}

Tensor Reshape::backward(const Tensor& grad_output) { return grad_output.reshaped(input_shape_); }

Tensor Flatten::forward(const Tensor& input) {
  input_shape_ = input.shape();
  const std::size_t n = input.dim(0);
  return input.reshaped({n, n == 0 ? 0 : input.size() / n});
}

Tensor Flatten::backward(const Tensor& grad_output) { return grad_output.reshaped(input_shape_); }

}  // namespace gepd::nn
