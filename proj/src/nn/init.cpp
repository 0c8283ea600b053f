#include "gepd/nn/init.hpp"

#include <cmath>

namespace gepd::nn {

void kaiming_normal(Tensor& weight, std::size_t fan_in, std::mt19937_64& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in == 0 ? 1 : fan_in));
  normal_fill(weight, 0.0, stddev, rng);
}

void normal_fill(Tensor& t, double mean, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(mean, stddev);
  for (double& v : t.values()) v = dist(rng);
}

}  // namespace gepd::nn
