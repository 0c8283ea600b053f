#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>

#include "gepd/nn/module.hpp"

namespace gepd::nn {

// y = x W^T + b over (N, in_features).
class Linear : public Module {
 public:
  Linear(std::size_t in_features, std::size_t out_features, std::mt19937_64& rng);

  Tensor forward(const Tensor& input) override;
  Tensor backward(const Tensor& grad_output) override;
  void collect_parameters(std::vector<Parameter*>& out) override;

  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }

 private:
  std::size_t in_, out_;
  Parameter weight_;
  Parameter bias_;
  Tensor input_;
};

// Per-channel normalisation over (N, H, W) with running statistics for eval.
class BatchNorm2d : public Module {
 public:
  explicit BatchNorm2d(std::size_t channels, double momentum = 0.1, double eps = 1e-5);

  Tensor forward(const Tensor& input) override;
  Tensor backward(const Tensor& grad_output) override;
  void collect_parameters(std::vector<Parameter*>& out) override;
  void collect_buffers(std::vector<Tensor*>& out) override;

 private:
  std::size_t channels_;
  double momentum_, eps_;
  Parameter gamma_;
  Parameter beta_;
  Tensor running_mean_;
  Tensor running_var_;
  Tensor normalized_;
  Tensor inv_std_;
  bool last_training_ = true;
};

class Elu : public Module {
 public:
  explicit Elu(double alpha = 1.0) : alpha_(alpha) {}
  Tensor forward(const Tensor& input) override;
  Tensor backward(const Tensor& grad_output) override;

 private:
  double alpha_;
  Tensor input_;
};

class LeakyRelu : public Module {
 public:
  explicit LeakyRelu(double slope = 0.2) : slope_(slope) {}
  Tensor forward(const Tensor& input) override;
  Tensor backward(const Tensor& grad_output) override;

 private:
  double slope_;
  Tensor input_;
};

// y = scale * tanh(x)
class ScaledTanh : public Module {
 public:
  explicit ScaledTanh(double scale = 1.0) : scale_(scale) {}
  Tensor forward(const Tensor& input) override;
  Tensor backward(const Tensor& grad_output) override;

 private:
  double scale_;
  Tensor output_;
};

// Non-overlapping 1 x k average pooling along width; trailing remainder dropped.
class AvgPoolWidth : public Module {
 public:
  explicit AvgPoolWidth(std::size_t kernel) : kernel_(kernel) {}
  Tensor forward(const Tensor& input) override;
  Tensor backward(const Tensor& grad_output) override;

 private:
  std::size_t kernel_;
  Shape input_shape_;
};

// Inverted dropout; identity in eval mode.
class Dropout : public Module {
 public:
  Dropout(double rate, std::uint64_t seed);
  Tensor forward(const Tensor& input) override;
  Tensor backward(const Tensor& grad_output) override;
  void reseed(std::uint64_t seed) { rng_.seed(seed); }

 private:
  double rate_;
  std::mt19937_64 rng_;
  Tensor mask_;
  bool applied_ = false;
};

// Reshapes (N, ...) to (N, target...).
class Reshape : public Module {
 public:
  explicit Reshape(Shape target) : target_(std::move(target)) {}
  Tensor forward(const Tensor& input) override;
  Tensor backward(const Tensor& grad_output) override;

 private:
  Shape target_;
  Shape input_shape_;
};

// (N, ...) -> (N, prod(...)).
class Flatten : public Module {
 public:
  Tensor forward(const Tensor& input) override;
  Tensor backward(const Tensor& grad_output) override;

 private:
  Shape input_shape_;
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace gepd::nn
