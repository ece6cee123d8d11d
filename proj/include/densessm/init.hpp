#pragma once

#include <random>

#include "densessm/tensor.hpp"

namespace densessm {

template <class T>
Tensor<T> random_normal(Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor<T> out(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : out.mutable_data()) v = static_cast<T>(dist(rng));
  return out;
}

template <class T>
Tensor<T> random_uniform(Shape shape, double lo, double hi, std::mt19937_64& rng) {
  Tensor<T> out(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : out.mutable_data()) v = static_cast<T>(dist(rng));
  return out;
}

}  // namespace densessm
