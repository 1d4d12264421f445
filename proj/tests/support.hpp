#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>

#include "baton/nn.hpp"

namespace testing {

template <typename T = double>
baton::nn::Mat<T> randn(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  baton::nn::Mat<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(scale * n(rng));
  return m;
}

template <typename A, typename B>
double max_abs(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  return static_cast<double>((a - b).cwiseAbs().maxCoeff());
}

}  // namespace testing
