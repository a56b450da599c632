#pragma once

// Softmax policies, policy softening and the Dirichlet reward-weight prior
// with single-iteration particle-filter posterior sampling.

#include <cstdint>

#include "pruneq/nn.hpp"

namespace pruneq {

/// p_a proportional to exp(beta * q_a), computed with max subtraction.
Vector softmax_probs(const Eigen::Ref<const Vector>& q_values, double beta);

/// Probability-weighted mean of q_values under softmax_probs.
double softmax_value(const Eigen::Ref<const Vector>& q_values, double beta);

/// log(sum exp q), stable.
double logsumexp(const Eigen::Ref<const Vector>& q_values);

/// Draws an index from a normalized probability vector.
int sample_categorical(const Eigen::Ref<const Vector>& probs, Rng& rng);

struct SoftmaxPolicy {
  double beta = 1.0;

  Vector probs(const Eigen::Ref<const Vector>& q_values) const { return softmax_probs(q_values, beta); }
  int sample(const Eigen::Ref<const Vector>& q_values, Rng& rng) const {
    return sample_categorical(probs(q_values), rng);
  }
};

/// Dirichlet prior over the reward-weight simplex.
class WeightPrior {
 public:
  explicit WeightPrior(Vector concentration);

  /// Concentration 1 for the main channel and `intermediate` for the rest.
  static WeightPrior main_and_intermediate(int channels, double main = 1.0, double intermediate = 10.0);

  const Vector& concentration() const { return concentration_; }
  int channels() const { return static_cast<int>(concentration_.size()); }
  Vector mean() const { return concentration_ / concentration_.sum(); }

 private:
  Vector concentration_;
};

/// A point on the simplex: nonnegative, sums to one.
using WeightSample = Vector;

/// Dirichlet draw via normalized Gamma variates.
WeightSample sample_weight(const WeightPrior& prior, Rng& rng);

struct PosteriorDiagnostics {
  std::int64_t draws = 0;
  std::int64_t zero_likelihood_fallbacks = 0;
};

/// Samples w from P(w | s, a) proportional to P(w) * pi_beta(a | s; w^T Q) with one
/// particle-filter pass: particle_count prior draws, likelihood weights,
/// one multinomial resample. q_matrix is |A| x d (the Q-matrix at s).
/// If every likelihood underflows, falls back to a fresh prior draw.
WeightSample posterior_sample_weight(const WeightPrior& prior, const Eigen::Ref<const Matrix>& q_matrix, int action,
                                     double beta, int particle_count, Rng& rng,
                                     PosteriorDiagnostics* diagnostics = nullptr);

/// (1 - eps) on `action`, eps / (|A| - 1) on every other action.
Vector soften(int action, double epsilon, int action_count);

}  // namespace pruneq
