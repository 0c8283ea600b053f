#include "gepd/nn/lstm.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

namespace gepd::nn {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMatrix>;
using ConstRowMap = Eigen::Map<const RowMatrix>;

Eigen::Index idx(std::size_t v) { return static_cast<Eigen::Index>(v); }

void uniform_fill(Tensor& t, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& v : t.values()) v = dist(rng);
}

Eigen::MatrixXd sigmoid(const Eigen::MatrixXd& z) {
  return z.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
}

}  // namespace

Lstm::Lstm(std::size_t input_size, std::size_t hidden_size, bool reverse, std::mt19937_64& rng)
    : input_size_(input_size), hidden_(hidden_size), reverse_(reverse) {
  if (input_size == 0 || hidden_size == 0) throw std::invalid_argument("Lstm: sizes must be positive");
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden_size));
  w_ih_ = Parameter("w_ih", Tensor({4 * hidden_size, input_size}));
  w_hh_ = Parameter("w_hh", Tensor({4 * hidden_size, hidden_size}));
  bias_ = Parameter("bias", Tensor({4 * hidden_size}), false);
  uniform_fill(w_ih_.value, bound, rng);
  uniform_fill(w_hh_.value, bound, rng);
  uniform_fill(bias_.value, bound, rng);
}

Tensor Lstm::forward(const Tensor& input) {
  if (input.rank() != 3 || input.dim(2) != input_size_) {
    throw std::invalid_argument(fmt::format("Lstm: expected (N, T, {}), got {}", input_size_,
                                            shape_string(input.shape())));
  }
  batch_ = input.dim(0);
  steps_ = input.dim(1);
  const auto hn = idx(hidden_);
  const auto bn = idx(batch_);
  ConstRowMap w_ih(w_ih_.value.data(), 4 * hn, idx(input_size_));
  ConstRowMap w_hh(w_hh_.value.data(), 4 * hn, hn);
  Eigen::Map<const Eigen::VectorXd> bias(bias_.value.data(), 4 * hn);

  x_.assign(steps_, Eigen::MatrixXd());
  gates_.assign(steps_, Eigen::MatrixXd());
  c_.assign(steps_, Eigen::MatrixXd());
  tanh_c_.assign(steps_, Eigen::MatrixXd());
  h_.assign(steps_, Eigen::MatrixXd());

  Tensor out({batch_, steps_, hidden_});
  Eigen::MatrixXd h_prev = Eigen::MatrixXd::Zero(hn, bn);
  Eigen::MatrixXd c_prev = Eigen::MatrixXd::Zero(hn, bn);
  for (std::size_t s = 0; s < steps_; ++s) {
    const std::size_t t = reverse_ ? steps_ - 1 - s : s;
    Eigen::MatrixXd& x = x_[s];
    x.resize(idx(input_size_), bn);
    for (std::size_t b = 0; b < batch_; ++b) {
      const double* src = input.data() + (b * steps_ + t) * input_size_;
      for (std::size_t k = 0; k < input_size_; ++k) x(idx(k), idx(b)) = src[k];
    }
    Eigen::MatrixXd z = w_ih * x + w_hh * h_prev;
    z.colwise() += bias;
    Eigen::MatrixXd& g = gates_[s];
    g.resize(4 * hn, bn);
    g.topRows(hn) = sigmoid(z.topRows(hn));
    g.middleRows(hn, hn) = sigmoid(z.middleRows(hn, hn));
    g.middleRows(2 * hn, hn) = z.middleRows(2 * hn, hn).array().tanh().matrix();
    g.bottomRows(hn) = sigmoid(z.bottomRows(hn));
    c_[s] = g.middleRows(hn, hn).cwiseProduct(c_prev) + g.topRows(hn).cwiseProduct(g.middleRows(2 * hn, hn));
    tanh_c_[s] = c_[s].array().tanh().matrix();
    h_[s] = g.bottomRows(hn).cwiseProduct(tanh_c_[s]);
    for (std::size_t b = 0; b < batch_; ++b) {
      double* dst = out.data() + (b * steps_ + t) * hidden_;
      for (std::size_t k = 0; k < hidden_; ++k) dst[k] = h_[s](idx(k), idx(b));
    }
    h_prev = h_[s];
    c_prev = c_[s];
  }
  return out;
}

Tensor Lstm::backward(const Tensor& grad_output) {
  const auto hn = idx(hidden_);
  const auto bn = idx(batch_);
  ConstRowMap w_ih(w_ih_.value.data(), 4 * hn, idx(input_size_));
  ConstRowMap w_hh(w_hh_.value.data(), 4 * hn, hn);
  RowMap dw_ih(w_ih_.grad.data(), 4 * hn, idx(input_size_));
  RowMap dw_hh(w_hh_.grad.data(), 4 * hn, hn);
  Eigen::Map<Eigen::VectorXd> db(bias_.grad.data(), 4 * hn);

  Tensor grad_input({batch_, steps_, input_size_});
  Eigen::MatrixXd dh_next = Eigen::MatrixXd::Zero(hn, bn);
  Eigen::MatrixXd dc_next = Eigen::MatrixXd::Zero(hn, bn);
  Eigen::MatrixXd dh(hn, bn);
  Eigen::MatrixXd dz(4 * hn, bn);
  const Eigen::MatrixXd zeros = Eigen::MatrixXd::Zero(hn, bn);
  for (std::size_t s = steps_; s-- > 0;) {
    const std::size_t t = reverse_ ? steps_ - 1 - s : s;
    for (std::size_t b = 0; b < batch_; ++b) {
      const double* src = grad_output.data() + (b * steps_ + t) * hidden_;
      for (std::size_t k = 0; k < hidden_; ++k) dh(idx(k), idx(b)) = src[k];
    }
    dh += dh_next;
    const Eigen::MatrixXd& g = gates_[s];
    const auto gi = g.topRows(hn).array();
    const auto gf = g.middleRows(hn, hn).array();
    const auto gg = g.middleRows(2 * hn, hn).array();
    const auto go = g.bottomRows(hn).array();
    const auto tc = tanh_c_[s].array();
    const Eigen::MatrixXd& c_prev = s > 0 ? c_[s - 1] : zeros;
    const Eigen::MatrixXd& h_prev = s > 0 ? h_[s - 1] : zeros;

    const Eigen::ArrayXXd dc = dh.array() * go * (1.0 - tc * tc) + dc_next.array();
    dz.topRows(hn) = (dc * gg * gi * (1.0 - gi)).matrix();
    dz.middleRows(hn, hn) = (dc * c_prev.array() * gf * (1.0 - gf)).matrix();
    dz.middleRows(2 * hn, hn) = (dc * gi * (1.0 - gg * gg)).matrix();
    dz.bottomRows(hn) = (dh.array() * tc * go * (1.0 - go)).matrix();
    dc_next = (dc * gf).matrix();

    dw_ih.noalias() += dz * x_[s].transpose();
    dw_hh.noalias() += dz * h_prev.transpose();
    db += dz.rowwise().sum();
    const Eigen::MatrixXd dx = w_ih.transpose() * dz;
    dh_next.noalias() = w_hh.transpose() * dz;
    for (std::size_t b = 0; b < batch_; ++b) {
      double* dst = grad_input.data() + (b * steps_ + t) * input_size_;
      for (std::size_t k = 0; k < input_size_; ++k) dst[k] = dx(idx(k), idx(b));
    }
  }
  return grad_input;
}

void Lstm::collect_parameters(std::vector<Parameter*>& out) {
  out.push_back(&w_ih_);
  out.push_back(&w_hh_);
  out.push_back(&bias_);
}

BiLstm::BiLstm(std::size_t input_size, std::size_t hidden_size, std::mt19937_64& rng)
    : forward_(input_size, hidden_size, false, rng),
      reverse_(input_size, hidden_size, true, rng),
      hidden_(hidden_size) {}

Tensor BiLstm::forward(const Tensor& input) {
  const Tensor a = forward_.forward(input);
  const Tensor b = reverse_.forward(input);
  const std::size_t rows = input.dim(0) * input.dim(1);
  Tensor out({input.dim(0), input.dim(1), 2 * hidden_});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.data() + r * hidden_, hidden_, out.data() + r * 2 * hidden_);
    std::copy_n(b.data() + r * hidden_, hidden_, out.data() + r * 2 * hidden_ + hidden_);
  }
  return out;
}

Tensor BiLstm::backward(const Tensor& grad_output) {
  const std::size_t n = grad_output.dim(0), t = grad_output.dim(1), rows = n * t;
  Tensor ga({n, t, hidden_});
  Tensor gb({n, t, hidden_});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(grad_output.data() + r * 2 * hidden_, hidden_, ga.data() + r * hidden_);
    std::copy_n(grad_output.data() + r * 2 * hidden_ + hidden_, hidden_, gb.data() + r * hidden_);
  }
  Tensor g = forward_.backward(ga);
  g += reverse_.backward(gb);
  return g;
}

void BiLstm::collect_parameters(std::vector<Parameter*>& out) {
  forward_.collect_parameters(out);
  reverse_.collect_parameters(out);
}

TimeDistributedLinear::TimeDistributedLinear(std::size_t in_features, std::size_t out_features,
                                             std::mt19937_64& rng) {
  weight_ = Parameter("weight", Tensor({out_features, in_features}));
  uniform_fill(weight_.value, 1.0 / std::sqrt(static_cast<double>(in_features)), rng);
  bias_ = Parameter("bias", Tensor({out_features}), false);
}

Tensor TimeDistributedLinear::forward(const Tensor& input) {
  const std::size_t in = weight_.value.dim(1), out_f = weight_.value.dim(0);
  if (input.rank() != 3 || input.dim(2) != in) {
    throw std::invalid_argument(fmt::format("TimeDistributedLinear: expected (N, T, {}), got {}", in,
                                            shape_string(input.shape())));
  }
  input_ = input;
  const std::size_t rows = input.dim(0) * input.dim(1);
  Tensor out({input.dim(0), input.dim(1), out_f});
  ConstRowMap x(input.data(), idx(rows), idx(in));
  ConstRowMap w(weight_.value.data(), idx(out_f), idx(in));
  RowMap y(out.data(), idx(rows), idx(out_f));
  y.noalias() = x * w.transpose();
  y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias_.value.data(), idx(out_f));
  return out;
}

Tensor TimeDistributedLinear::backward(const Tensor& grad_output) {
  const std::size_t in = weight_.value.dim(1), out_f = weight_.value.dim(0);
  const std::size_t rows = input_.dim(0) * input_.dim(1);
  ConstRowMap x(input_.data(), idx(rows), idx(in));
  ConstRowMap w(weight_.value.data(), idx(out_f), idx(in));
  ConstRowMap dy(grad_output.data(), idx(rows), idx(out_f));
  RowMap(weight_.grad.data(), idx(out_f), idx(in)).noalias() += dy.transpose() * x;
  Eigen::Map<Eigen::RowVectorXd>(bias_.grad.data(), idx(out_f)) += dy.colwise().sum();
  Tensor grad_input(input_.shape());
  RowMap(grad_input.data(), idx(rows), idx(in)).noalias() = dy * w;
  return grad_input;
}

void TimeDistributedLinear::collect_parameters(std::vector<Parameter*>& out) {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

}  // namespace gepd::nn
