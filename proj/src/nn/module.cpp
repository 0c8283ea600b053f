#include "gepd/nn/module.hpp"

#include <stdexcept>

namespace gepd::nn {

std::vector<Parameter*> Module::parameters() {
  std::vector<Parameter*> out;
  collect_parameters(out);
  return out;
}

std::vector<Tensor*> Module::state() {
  std::vector<Tensor*> out;
  for (Parameter* p : parameters()) out.push_back(&p->value);
  collect_buffers(out);
  return out;
}

void Module::zero_grad() {
  for (Parameter* p : parameters()) p->grad.fill(0.0);
}

Tensor Sequential::forward(const Tensor& input) {
  Tensor x = input;
  for (auto& layer : layers_) x = layer->forward(x);
  return x;
}

Tensor Sequential::backward(const Tensor& grad_output) {
  Tensor g = grad_output;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
  return g;
}

void Sequential::collect_parameters(std::vector<Parameter*>& out) {
  for (auto& layer : layers_) layer->collect_parameters(out);
}

void Sequential::collect_buffers(std::vector<Tensor*>& out) {
  for (auto& layer : layers_) layer->collect_buffers(out);
}

void Sequential::set_training(bool training) {
  Module::set_training(training);
  for (auto& layer : layers_) layer->set_training(training);
}

void copy_state(Module& from, Module& to) {
  auto src = from.state();
  auto dst = to.state();
  if (src.size() != dst.size()) throw std::invalid_argument("copy_state: architecture mismatch");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i]->shape() != dst[i]->shape()) {
      throw std::invalid_argument("copy_state: tensor shape mismatch");
    }
    *dst[i] = *src[i];
  }
}

}  // namespace gepd::nn
