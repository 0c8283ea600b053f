#include "gepd/nn/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace gepd::nn {

Adam::Adam(std::vector<Parameter*> params, AdamOptions options)
    : params_(std::move(params)), options_(options) {
  for (Parameter* p : params_) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Parameter& p = *params_[k];
    Tensor& m = m_[k];
    Tensor& v = v_[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = options_.beta1 * m[i] + (1.0 - options_.beta1) * g;
      v[i] = options_.beta2 * v[i] + (1.0 - options_.beta2) * g * g;
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      p.value[i] -= options_.lr * m_hat / (std::sqrt(v_hat) + options_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (Parameter* p : params_) p->grad.fill(0.0);
}

double cosine_annealing_lr(double t, double total, double lr_start, double lr_end) {
  if (total <= 0) throw std::invalid_argument("cosine_annealing_lr: total must be positive");
  return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + std::cos(std::numbers::pi * t / total));
}

double apply_weight_penalty(std::span<Parameter* const> params, double l1, double l2) {
  double penalty = 0.0;
  for (Parameter* p : params) {
    if (!p->is_weight) continue;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double w = p->value[i];
      penalty += l1 * std::abs(w) + l2 * w * w;
      p->grad[i] += l1 * (w > 0 ? 1.0 : (w < 0 ? -1.0 : 0.0)) + 2.0 * l2 * w;
    }
  }
  return penalty;
}

double weight_l1_norm(std::span<Parameter* const> params) {
  double s = 0.0;
  for (Parameter* p : params) {
    if (!p->is_weight) continue;
    for (double w : p->value.values()) s += std::abs(w);
  }
  return s;
}

void clip_parameters(std::span<Parameter* const> params, double bound) {
  for (Parameter* p : params) {
    for (double& w : p->value.values()) w = std::clamp(w, -bound, bound);
  }
}

Tensor softmax(const Tensor& logits) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  Tensor out(logits.shape());
  for (std::size_t r = 0; r < n; ++r) {
    const double* z = logits.data() + r * k;
    const double mx = *std::max_element(z, z + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += (out[r * k + j] = std::exp(z[j] - mx));
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] /= s;
  }
  return out;
}

LossResult softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size() || labels.empty()) {
    throw std::invalid_argument("softmax_cross_entropy: logits/labels mismatch");
  }
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  LossResult r;
  r.grad = softmax(logits);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    if (labels[i] < 0 || y >= k) throw std::invalid_argument("softmax_cross_entropy: label out of range");
    r.value -= std::log(std::max(r.grad[i * k + y], 1e-300));
    r.grad[i * k + y] -= 1.0;
  }
  r.value *= inv_n;
  r.grad *= inv_n;
  return r;
}

LossResult smooth_l1(const Tensor& prediction, const Tensor& target, double beta) {
  if (prediction.shape() != target.shape() || prediction.empty()) {
    throw std::invalid_argument("smooth_l1: shape mismatch");
  }
  LossResult r;
  r.grad = Tensor(prediction.shape());
  const double inv_n = 1.0 / static_cast<double>(prediction.size());
  for (std::size_t i = 0; i < prediction.size(); ++i) {
    const double d = prediction[i] - target[i];
    const double a = std::abs(d);
    if (a < beta) {
      r.value += 0.5 * d * d / beta;
      r.grad[i] = d / beta * inv_n;
    } else {
      r.value += a - 0.5 * beta;
      r.grad[i] = (d > 0 ? 1.0 : -1.0) * inv_n;
    }
  }
  r.value *= inv_n;
  return r;
}

}  // namespace gepd::nn
