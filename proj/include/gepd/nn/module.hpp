#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "gepd/tensor.hpp"

namespace gepd::nn {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  // Weight tensors take part in L1/L2 penalties; biases and norm affines do not.
  bool is_weight = true;

  Parameter() = default;
  Parameter(std::string n, Tensor v, bool weight = true)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()), is_weight(weight) {}
};

// A differentiable layer. forward() caches whatever backward() needs, so a
// backward call always refers to the most recent forward call. Parameter
// gradients accumulate until zero_grad().
class Module {
 public:
  virtual ~Module() = default;

  virtual Tensor forward(const Tensor& input) = 0;
  // Returns the gradient with respect to the input of the last forward call.
  virtual Tensor backward(const Tensor& grad_output) = 0;

  virtual void collect_parameters(std::vector<Parameter*>& /*out*/) {}
  // Non-trainable state that must be checkpointed (e.g. running statistics).
  virtual void collect_buffers(std::vector<Tensor*>& /*out*/) {}
  virtual void set_training(bool training) { training_ = training; }
  bool training() const { return training_; }

  std::vector<Parameter*> parameters();
  // Parameters followed by buffers, in a stable traversal order.
  std::vector<Tensor*> state();
  void zero_grad();

 protected:
  bool training_ = true;
};

class Sequential : public Module {
 public:
  Sequential() = default;

  template <typename Layer, typename... Args>
  Layer& emplace(Args&&... args) {
    auto layer = std::make_unique<Layer>(std::forward<Args>(args)...);
    Layer& ref = *layer;
    layers_.push_back(std::move(layer));
    return ref;
  }
  void push(std::unique_ptr<Module> layer) { layers_.push_back(std::move(layer)); }

  Tensor forward(const Tensor& input) override;
  Tensor backward(const Tensor& grad_output) override;
  void collect_parameters(std::vector<Parameter*>& out) override;
  void collect_buffers(std::vector<Tensor*>& out) override;
  void set_training(bool training) override;

  std::size_t size() const { return layers_.size(); }
  Module& layer(std::size_t i) { return *layers_.at(i); }

 private:
  std::vector<std::unique_ptr<Module>> layers_;
};

// Copies tensor values between two modules of identical architecture.
void copy_state(Module& from, Module& to);

}  // namespace gepd::nn
