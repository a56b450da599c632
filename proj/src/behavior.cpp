#include "pruneq/behavior.hpp"

#include <algorithm>
#include <array>

namespace pruneq {

namespace {
// Floor keeping importance ratios finite when logits are far apart.
constexpr double kMinProb = 1e-12;
}  // namespace

BehaviorModel::BehaviorModel(Network linear) : linear_(std::move(linear)) {
  if (linear_.layer_count() != 1) throw ShapeError("behavior model must be a single linear layer");
}

BehaviorModel BehaviorModel::zeros(Index state_dim, int action_count) {
  const std::array<Index, 2> dims{state_dim, action_count};
  return BehaviorModel(Network::zeros(dims));
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix p = logits;
  for (Index i = 0; i < p.rows(); ++i) {
    const double top = p.row(i).maxCoeff();
    p.row(i) = (p.row(i).array() - top).exp().matrix();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

Matrix BehaviorModel::predict_probs(const Matrix& states) const {
  Matrix p = softmax_rows(forward(linear_, states));
  for (Index i = 0; i < p.rows(); ++i) {
    p.row(i) = p.row(i).cwiseMax(kMinProb);
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

Vector BehaviorModel::action_probs(const Eigen::Ref<const Vector>& state) const {
  return predict_probs(Matrix(state.transpose())).row(0).transpose();
}

}  // namespace pruneq
