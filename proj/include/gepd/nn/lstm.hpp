#pragma once

#include <cstddef>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "gepd/nn/module.hpp"

namespace gepd::nn {

// Single-layer LSTM over (N, T, input) producing (N, T, hidden). Gate order
// is (input, forget, cell, output) with one shared bias vector. A reversed
// layer consumes the sequence from the last step and writes each output at
// the time index of the input it just consumed.
class Lstm : public Module {
 public:
  Lstm(std::size_t input_size, std::size_t hidden_size, bool reverse, std::mt19937_64& rng);

  Tensor forward(const Tensor& input) override;
  Tensor backward(const Tensor& grad_output) override;
  void collect_parameters(std::vector<Parameter*>& out) override;

  std::size_t hidden_size() const { return hidden_; }

 private:
  std::size_t input_size_, hidden_;
  bool reverse_;
  Parameter w_ih_;
  Parameter w_hh_;
  Parameter bias_;

  std::size_t batch_ = 0, steps_ = 0;
  std::vector<Eigen::MatrixXd> x_;      // per step, input x batch
  std::vector<Eigen::MatrixXd> gates_;  // per step, 4H x batch (activated)
  std::vector<Eigen::MatrixXd> c_;      // per step, H x batch
  std::vector<Eigen::MatrixXd> tanh_c_;
  std::vector<Eigen::MatrixXd> h_;
};

// Forward and reverse LSTMs run side by side; outputs are concatenated on the
// feature axis as (forward, reverse).
class BiLstm : public Module {
 public:
  BiLstm(std::size_t input_size, std::size_t hidden_size, std::mt19937_64& rng);

  Tensor forward(const Tensor& input) override;
  Tensor backward(const Tensor& grad_output) override;
  void collect_parameters(std::vector<Parameter*>& out) override;

 private:
  Lstm forward_;
  Lstm reverse_;
  std::size_t hidden_;
};

// Applies a Linear layer independently at every time step of (N, T, F).
class TimeDistributedLinear : public Module {
 public:
  TimeDistributedLinear(std::size_t in_features, std::size_t out_features, std::mt19937_64& rng);

  Tensor forward(const Tensor& input) override;
  Tensor backward(const Tensor& grad_output) override;
  void collect_parameters(std::vector<Parameter*>& out) override;

 private:
  Parameter weight_;
  Parameter bias_;
  Tensor input_;
};

}  // namespace gepd::nn
