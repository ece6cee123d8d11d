#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "densessm/model.hpp"

namespace densessm {

namespace {

using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr double kRidge = 1e-6;

Tensor<double> flatten_positions(const Tensor<double>& t) {
  const std::size_t d = t.dim(t.rank() - 1);
  return t.reshape({t.numel() / d, d});
}

}  // namespace

ProbeFit probe_r2(const Tensor<double>& features, const Tensor<double>& targets) {
  if (features.rank() != 2 || targets.rank() != 2 || features.dim(0) != targets.dim(0)) {
    throw DimensionError("probe expects features [N, p] and targets [N, q], got " + shape_str(features.shape()) +
                         " and " + shape_str(targets.shape()));
  }
  const auto n = static_cast<Eigen::Index>(features.dim(0));
  const auto p = static_cast<Eigen::Index>(features.dim(1));
  const auto q = static_cast<Eigen::Index>(targets.dim(1));
  if (n <= p + 1) {
    throw ArgumentError("probe needs more samples (" + std::to_string(n) + ") than regressors (" +
                        std::to_string(p + 1) + ")");
  }
  MatrixRM x(n, p + 1);
  x.leftCols(p) = Eigen::Map<const MatrixRM>(features.ptr(), n, p);
  x.col(p).setOnes();
  const Eigen::Map<const MatrixRM> y(targets.ptr(), n, q);

  ProbeFit fit;
  Eigen::ColPivHouseholderQR<MatrixRM> qr(x);
  MatrixRM beta;
  if (qr.rank() == p + 1) {
    beta = qr.solve(y);
  } else {
    fit.ridge = true;
    MatrixRM gram = x.transpose() * x;
    gram.diagonal().array() += kRidge;
    beta = gram.ldlt().solve(x.transpose() * y);
  }
  const MatrixRM resid = y - x * beta;

  double sum = 0.0;
  Eigen::Index counted = 0;
  for (Eigen::Index j = 0; j < q; ++j) {
    const double mean = y.col(j).mean();
    const double ss_tot = (y.col(j).array() - mean).square().sum();
    if (ss_tot <= 0.0) continue;  // constant column: nothing to explain
    const double ss_res = resid.col(j).squaredNorm();
    sum += std::clamp(1.0 - ss_res / ss_tot, 0.0, 1.0);
    ++counted;
  }
  fit.r2 = counted ? sum / static_cast<double>(counted) : 1.0;
  return fit;
}

template <class T>
ProbeFit degradation_probe(const Model<T>& model, const Tokens& tokens, std::size_t source, std::size_t target) {
  const std::size_t layers = model.config().n_layers;
  if (source > target || target >= layers) {
    throw ArgumentError("probe needs source <= target < n_layers, got source " + std::to_string(source) +
                        ", target " + std::to_string(target));
  }
  NoGradGuard no_grad;
  ForwardTrace<T> trace;
  model.forward_train(tokens, &trace);
  return probe_r2(flatten_positions(tensor_cast<double>(trace.layer_outputs[target])),
                  flatten_positions(tensor_cast<double>(trace.layer_outputs[source])));
}

template <class T>
std::vector<std::vector<double>> probe_matrix(const Model<T>& model, const Tokens& tokens, bool* any_ridge) {
  NoGradGuard no_grad;
  ForwardTrace<T> trace;
  model.forward_train(tokens, &trace);
  const std::size_t layers = trace.layer_outputs.size();
  std::vector<Tensor<double>> states;
  for (const auto& t : trace.layer_outputs) states.push_back(flatten_positions(tensor_cast<double>(t)));

  std::vector<std::vector<double>> r2(layers, std::vector<double>(layers, std::numeric_limits<double>::quiet_NaN()));
  if (any_ridge) *any_ridge = false;
  for (std::size_t target = 0; target < layers; ++target) {
    for (std::size_t source = 0; source <= target; ++source) {
      const ProbeFit fit = probe_r2(states[target], states[source]);
      r2[target][source] = fit.r2;
      if (any_ridge && fit.ridge) *any_ridge = true;
    }
  }
  return r2;
}

template ProbeFit degradation_probe<float>(const Model<float>&, const Tokens&, std::size_t, std::size_t);
template ProbeFit degradation_probe<double>(const Model<double>&, const Tokens&, std::size_t, std::size_t);
template std::vector<std::vector<double>> probe_matrix<float>(const Model<float>&, const Tokens&, bool*);
template std::vector<std::vector<double>> probe_matrix<double>(const Model<double>&, const Tokens&, bool*);

}  // namespace densessm
