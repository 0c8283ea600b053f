#pragma once

#include <cstddef>
#include <random>

#include "gepd/tensor.hpp"

namespace gepd::nn {

// He/Kaiming normal initialisation: N(0, gain^2 / fan_in), gain = sqrt(2).
void kaiming_normal(Tensor& weight, std::size_t fan_in, std::mt19937_64& rng);

void normal_fill(Tensor& t, double mean, double stddev, std::mt19937_64& rng);

}  // namespace gepd::nn
