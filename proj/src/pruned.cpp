#include "pruneq/pruned.hpp"

#include <array>

namespace pruneq {

PrunedTrainer PrunedTrainer::create(Index state_dim, PruneTable table, const TrainerConfig& config, Rng& rng) {
  config.validate();
  if (table.action_count() < 1) throw InvalidArgument("PrunedTrainer: prune table has no action count");
  PrunedTrainer trainer;
  trainer.agent = QAgent::create(state_dim, table.action_count(), config, rng);
  trainer.table = std::move(table);
  trainer.config = config;
  return trainer;
}

std::vector<ActionSet> PrunedTrainer::next_allowed(const Batch& batch) {
  std::vector<ActionSet> allowed(static_cast<std::size_t>(batch.size()));
  for (Index i = 0; i < batch.size(); ++i) {
    // Terminal rows never bootstrap; skip the lookup so they do not count as fallbacks.
    if (batch.terminal[static_cast<std::size_t>(i)]) {
      allowed[static_cast<std::size_t>(i)] = ActionSet::full(table.action_count());
      continue;
    }
    allowed[static_cast<std::size_t>(i)] = table.allowed(batch.next_states.row(i).transpose(), &fallbacks);
  }
  return allowed;
}

double pruned_target(const Transition& t, PrunedTrainer& trainer) {
  const std::array<Transition, 1> one{t};
  const Batch b = make_batch(one);
  const auto allowed = trainer.next_allowed(b);
  return double_q_targets(b, trainer.agent.online, trainer.agent.target, trainer.config.gamma, allowed)[0];
}

UpdateStats pruned_update(const Batch& batch, PrunedTrainer& trainer) { return pruned_cql_update(batch, trainer, 0.0); }

UpdateStats pruned_cql_update(const Batch& batch, PrunedTrainer& trainer, double alpha) {
  if (alpha < 0) throw InvalidArgument("pruned_cql_update: alpha must be >= 0");
  const auto allowed = trainer.next_allowed(batch);
  return td_update(batch, trainer.agent.online, trainer.agent.target, trainer.agent.optimizer, trainer.config,
                   allowed, alpha);
}

int greedy_action(const Network& q_net, const Eigen::Ref<const Vector>& state, const PruneTable& table,
                  std::int64_t* fallbacks) {
  return greedy_action(q_net, state, table.allowed(state, fallbacks));
}

}  // namespace pruneq
