#include "pruneq/policies.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <vector>

namespace pruneq {

namespace {

void require_finite(const Eigen::Ref<const Vector>& q, const char* where) {
  if (q.size() == 0) throw InvalidArgument(std::string(where) + ": empty Q-value vector");
  if (!q.allFinite()) throw NumericalError(std::string(where) + ": non-finite Q-value");
}

}  // namespace

Vector softmax_probs(const Eigen::Ref<const Vector>& q_values, double beta) {
  require_finite(q_values, "softmax_probs");
  if (!(beta > 0) || !std::isfinite(beta)) throw InvalidArgument("softmax_probs: beta must be positive and finite");
  const double top = q_values.maxCoeff();
  Vector p = ((q_values.array() - top) * beta).exp().matrix();
  p /= p.sum();
  return p;
}

double softmax_value(const Eigen::Ref<const Vector>& q_values, double beta) {
  return softmax_probs(q_values, beta).dot(q_values);
}

double logsumexp(const Eigen::Ref<const Vector>& q_values) {
  require_finite(q_values, "logsumexp");
  const double top = q_values.maxCoeff();
  return top + std::log((q_values.array() - top).exp().sum());
}

int sample_categorical(const Eigen::Ref<const Vector>& probs, Rng& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double u = unif(rng) * probs.sum();
  double acc = 0.0;
  for (Index i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return static_cast<int>(i);
  }
  // Rounding left u at the top edge: return the last index with mass.
  for (Index i = probs.size(); i-- > 0;)
    if (probs[i] > 0) return static_cast<int>(i);
  return static_cast<int>(probs.size()) - 1;
}

WeightPrior::WeightPrior(Vector concentration) : concentration_(std::move(concentration)) {
  if (concentration_.size() == 0) throw InvalidArgument("weight prior needs at least one channel");
  for (Index i = 0; i < concentration_.size(); ++i)
    if (!(concentration_[i] > 0) || !std::isfinite(concentration_[i]))
      throw InvalidArgument("Dirichlet concentrations must be positive");
}

WeightPrior WeightPrior::main_and_intermediate(int channels, double main, double intermediate) {
  Vector c = Vector::Constant(channels, intermediate);
  c[0] = main;
  return WeightPrior(std::move(c));
}

namespace {

// One Gamma distribution per channel, reused across draws so the normal
// variates behind them are not thrown away.
class DirichletSampler {
 public:
  explicit DirichletSampler(const Vector& alpha) {
    gammas_.reserve(static_cast<std::size_t>(alpha.size()));
    for (Index i = 0; i < alpha.size(); ++i) gammas_.emplace_back(alpha[i], 1.0);
  }

  template <typename Row>
  void draw(Row&& out, Rng& rng) {
    if (gammas_.size() == 1) {
      out[0] = 1.0;
      return;
    }
    for (;;) {
      double total = 0;
      for (std::size_t i = 0; i < gammas_.size(); ++i) {
        out[static_cast<Index>(i)] = gammas_[i](rng);
        total += out[static_cast<Index>(i)];
      }
      // Tiny concentrations can underflow every Gamma draw; redraw.
      if (total > 0 && std::isfinite(total)) {
        out /= total;
        return;
      }
    }
  }

 private:
  std::vector<std::gamma_distribution<double>> gammas_;
};

}  // namespace

WeightSample sample_weight(const WeightPrior& prior, Rng& rng) {
  Vector w(prior.channels());
  DirichletSampler(prior.concentration()).draw(w, rng);
  return w;
}

WeightSample posterior_sample_weight(const WeightPrior& prior, const Eigen::Ref<const Matrix>& q_matrix, int action,
                                     double beta, int particle_count, Rng& rng, PosteriorDiagnostics* diagnostics) {
  if (q_matrix.cols() != prior.channels())
    throw ShapeError("posterior_sample_weight: Q-matrix has " + std::to_string(q_matrix.cols()) +
                     " channels, prior has " + std::to_string(prior.channels()));
  if (action < 0 || action >= q_matrix.rows()) throw InvalidArgument("posterior_sample_weight: action out of range");
  if (particle_count < 1) throw InvalidArgument("posterior_sample_weight: particle_count must be >= 1");
  if (!q_matrix.allFinite()) throw NumericalError("posterior_sample_weight: non-finite Q-matrix");
  if (diagnostics) ++diagnostics->draws;

  const int d = prior.channels();
  Matrix particles(particle_count, d);
  DirichletSampler sampler(prior.concentration());
  for (int k = 0; k < particle_count; ++k) sampler.draw(particles.row(k), rng);
  // Row k: beta * (w_k^T Q(s, .)), shifted so the row maximum is zero.
  Matrix scores = beta * (particles * q_matrix.transpose());
  const Vector row_max = scores.rowwise().maxCoeff();
  scores = (scores.colwise() - row_max).array().exp().matrix();
  const Vector likelihood = scores.col(action).cwiseQuotient(scores.rowwise().sum());
  const double total = likelihood.sum();
  if (!(total > std::numeric_limits<double>::min()) || !std::isfinite(total)) {
    if (diagnostics) ++diagnostics->zero_likelihood_fallbacks;
    return sample_weight(prior, rng);
  }
  const int chosen = sample_categorical(likelihood / total, rng);
  return particles.row(chosen).transpose();
}

Vector soften(int action, double epsilon, int action_count) {
  if (action_count < 2) throw InvalidArgument("soften: need at least two actions");
  if (!(epsilon >= 0 && epsilon <= 1)) throw InvalidArgument("soften: epsilon must be in [0, 1]");
  if (action < 0 || action >= action_count) throw InvalidArgument("soften: action out of range");
  Vector p = Vector::Constant(action_count, epsilon / (action_count - 1));
  p[action] = 1.0 - epsilon;
  return p;
}

}  // namespace pruneq
