#pragma once

#include "pruneq/nn.hpp"

namespace pruneq {

/// Multinomial logistic (softmax) regression of the logged action on the state.
/// Stored as a single linear layer state_dim -> |A|.
class BehaviorModel {
 public:
  BehaviorModel() = default;
  explicit BehaviorModel(Network linear);
  static BehaviorModel zeros(Index state_dim, int action_count);

  /// One row of action probabilities per input row; strictly positive.
  Matrix predict_probs(const Matrix& states) const;
  Vector action_probs(const Eigen::Ref<const Vector>& state) const;

  Index state_dim() const { return linear_.input_dim(); }
  int action_count() const { return static_cast<int>(linear_.output_dim()); }
  const Network& network() const { return linear_; }
  Network& network() { return linear_; }

 private:
  Network linear_;
};

/// Row-wise softmax of a logit matrix.
Matrix softmax_rows(const Matrix& logits);

}  // namespace pruneq
