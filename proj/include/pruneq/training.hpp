#pragma once

// Training loops over a fixed transition set: scalar double Q-learning (with
// optional CQL penalty and per-transition next-state action restrictions)
// and vector-valued phase-1 training.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pruneq/multiobjective.hpp"
#include "pruneq/qlearning.hpp"

namespace pruneq {

struct TrainingPoint {
  std::int64_t update = 0;
  double loss = 0;    // mean over the updates since the previous point
  double mean_q = 0;  // mean Q(s, a) of the sampled batches, main channel
  std::optional<double> eval_return;
  std::optional<double> best_return;  // running maximum of eval_return
};

struct TrainingLog {
  std::vector<TrainingPoint> points;
  std::optional<double> best_return;
  std::int64_t fallbacks = 0;

  /// update_index,loss,mean_q,eval_return,best_return
  std::string csv() const;
};

/// Returns the evaluation return of a greedy policy for the current network.
using PolicyEvaluator = std::function<double(const Network& q_net)>;

struct ScalarTrainingSpec {
  std::span<const Transition> data;
  /// One next-state action set per transition; empty means unrestricted.
  std::vector<ActionSet> next_allowed;
  double cql_alpha = 0.0;
  std::int64_t log_every = 1000;
  std::int64_t eval_every = 0;  // 0 disables evaluation
  PolicyEvaluator evaluate;
};

/// config.total_updates steps of uniform minibatch updates; the target
/// network syncs every config.target_update_period updates.
TrainingLog train_scalar(QAgent& agent, const ScalarTrainingSpec& spec, const TrainerConfig& config, Rng& rng);

struct VectorTrainingSpec {
  std::span<const Transition> data;
  double cql_alpha = 0.0;
  std::int64_t log_every = 1000;
};

TrainingLog train_vector(VectorQNetwork& online, VectorQNetwork& target, Optimizer& optimizer,
                         const VectorTrainingSpec& spec, const WeightPrior& prior, const TrainerConfig& config,
                         Rng& rng, PosteriorDiagnostics* diagnostics = nullptr);

/// Permitted set of each transition's next state (full set for terminal rows).
std::vector<ActionSet> next_allowed_from_table(std::span<const Transition> data, const PruneTable& table,
                                               std::int64_t* fallbacks = nullptr);
/// bcq_mask of the behavior model at each next state.
std::vector<ActionSet> next_allowed_from_behavior(std::span<const Transition> data, const BehaviorModel& behavior,
                                                  double threshold);

}  // namespace pruneq
