#pragma once

// Phase 2: double Q-learning on the main reward with the next-state argmax
// restricted to the permitted actions of a PruneTable.

#include <cstdint>
#include <vector>

#include "pruneq/multiobjective.hpp"
#include "pruneq/qlearning.hpp"

namespace pruneq {

struct PrunedTrainer {
  QAgent agent;
  PruneTable table;
  TrainerConfig config;
  std::int64_t fallbacks = 0;

  /// Fresh He-uniform networks with |A| outputs.
  static PrunedTrainer create(Index state_dim, PruneTable table, const TrainerConfig& config, Rng& rng);

  /// Permitted set for each next state of the batch (full set for unseen keys).
  std::vector<ActionSet> next_allowed(const Batch& batch);
};

double pruned_target(const Transition& t, PrunedTrainer& trainer);

/// pruned_cql_update with alpha = 0.
UpdateStats pruned_update(const Batch& batch, PrunedTrainer& trainer);
UpdateStats pruned_cql_update(const Batch& batch, PrunedTrainer& trainer, double alpha);

/// Argmax of Q(s, .) over the permitted set of s, ties to the lowest index.
int greedy_action(const Network& q_net, const Eigen::Ref<const Vector>& state, const PruneTable& table,
                  std::int64_t* fallbacks = nullptr);

}  // namespace pruneq
