#pragma once

#include <cstddef>
#include <random>

#include "gepd/nn/conv.hpp"
#include "gepd/nn/layers.hpp"

namespace gepd::nn {

// Convolutional block attention: channel attention followed by spatial
// attention, both multiplicative with sigmoid gates.
//
//   ca = sigmoid(mlp(avgpool_hw(x)) + mlp(maxpool_hw(x)))      (N, C)
//   x1 = x * ca
//   sa = sigmoid(conv([mean_c(x1); max_c(x1)]))                 (N, 1, H, W)
//   y  = x1 * sa
//
// The MLP is shared between the two pooled descriptors. The spatial kernel is
// 1 x k when the input height is 1 and k x k otherwise.
class Cbam : public Module {
 public:
  Cbam(std::size_t channels, std::size_t reduction, std::size_t spatial_kernel, bool flat,
       std::mt19937_64& rng);

  Tensor forward(const Tensor& input) override;
  Tensor backward(const Tensor& grad_output) override;
  void collect_parameters(std::vector<Parameter*>& out) override;

  Linear& mlp_out() { return fc2_; }
  Conv2d& spatial_conv() { return spatial_; }
  const Tensor& channel_gate() const { return ca_; }
  const Tensor& spatial_gate() const { return sa_; }

 private:
  std::size_t channels_;
  Linear fc1_;
  Linear fc2_;
  Conv2d spatial_;

  Tensor input_;
  Tensor hidden_pre_;  // fc1 output before ReLU, (2N, hidden)
  std::vector<std::size_t> hw_argmax_;
  std::vector<std::size_t> c_argmax_;
  Tensor ca_;
  Tensor x1_;
  Tensor sa_;
};

}  // namespace gepd::nn
