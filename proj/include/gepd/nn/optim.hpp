#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "gepd/nn/module.hpp"

namespace gepd::nn {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamOptions options);

  void step();
  void zero_grad();
  void set_lr(double lr) { options_.lr = lr; }
  double lr() const { return options_.lr; }

 private:
  std::vector<Parameter*> params_;
  AdamOptions options_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::size_t t_ = 0;
};

// eta_end + 0.5 * (eta_start - eta_end) * (1 + cos(pi * t / total))
double cosine_annealing_lr(double t, double total, double lr_start, double lr_end);

// Adds l1 * sum|w| + l2 * sum w^2 over weight parameters to the gradients and
// returns the penalty value.
double apply_weight_penalty(std::span<Parameter* const> params, double l1, double l2);

double weight_l1_norm(std::span<Parameter* const> params);

// Clamps every parameter entry into [-bound, bound].
void clip_parameters(std::span<Parameter* const> params, double bound);

struct LossResult {
  double value = 0.0;
  Tensor grad;
};

// Mean softmax cross-entropy over a batch of logits (N, K).
LossResult softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

// Mean smooth-L1 (Huber with beta) over all elements.
LossResult smooth_l1(const Tensor& prediction, const Tensor& target, double beta = 1.0);

// Row-wise softmax of (N, K).
Tensor softmax(const Tensor& logits);

}  // namespace gepd::nn
