#pragma once

// Scalar-reward Q-learning scaffolding: transitions, replay, double-Q targets,
// the CQL penalty and discrete BCQ.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "pruneq/action_set.hpp"
#include "pruneq/behavior.hpp"
#include "pruneq/nn.hpp"

namespace pruneq {

/// One environment step. reward(0) is the main sparse reward.
struct Transition {
  Vector state;
  int action = 0;
  Vector next_state;
  Vector reward;
  bool terminal = false;
  std::int64_t trajectory = 0;
  int step = 0;

  friend bool operator==(const Transition& a, const Transition& b) {
    return a.action == b.action && a.terminal == b.terminal && a.trajectory == b.trajectory && a.step == b.step &&
           a.state == b.state && a.next_state == b.next_state && a.reward == b.reward;
  }
};

/// Transitions stacked row-wise for network evaluation.
struct Batch {
  Matrix states;
  Matrix next_states;
  Matrix rewards;
  std::vector<int> actions;
  std::vector<std::uint8_t> terminal;
  std::vector<std::int64_t> trajectory;

  Index size() const { return states.rows(); }
};

Batch make_batch(std::span<const Transition> transitions);
Batch make_batch(std::span<const Transition> transitions, std::span<const std::size_t> indices);

/// Uniform with-replacement sampling over stored transitions; FIFO once full.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity, std::uint64_t seed = 0);

  void add(Transition t);
  void add(std::span<const Transition> ts);
  std::size_t size() const { return store_.size(); }
  std::size_t capacity() const { return capacity_; }
  const std::vector<Transition>& transitions() const { return store_; }

  Batch sample(std::size_t batch_size);
  std::vector<std::size_t> sample_indices(std::size_t batch_size);

 private:
  std::size_t capacity_;
  std::size_t next_ = 0;
  std::vector<Transition> store_;
  Rng rng_;
};

struct TrainerConfig {
  double gamma = 1.0;
  std::size_t batch_size = 256;
  double learning_rate = 1e-4;
  std::int64_t target_update_period = 1000;
  std::int64_t total_updates = 100000;
  double cql_alpha = 0.0;
  double beta = 40.0;
  int particle_count = 32;
  double clip_norm = 10.0;
  Index hidden_width = 64;
  int hidden_layers = 2;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Online and target networks plus their optimizer; syncs the target every
/// target_update_period calls to finish_update.
struct QAgent {
  Network online;
  Network target;
  Optimizer optimizer;
  std::int64_t updates = 0;

  static QAgent create(Index state_dim, Index output_dim, const TrainerConfig& config, Rng& rng);
  void finish_update(const TrainerConfig& config);
};

/// Per-update diagnostics. loss is the pre-step objective value.
struct UpdateStats {
  double loss = 0;
  double td_loss = 0;
  double penalty = 0;
  double mean_q = 0;
};

/// Double-Q target r0 + gamma * Q'(s', argmax_{a' in allowed} Q(s', a')); terminal -> r0.
double dqn_target(const Transition& t, const Network& q_net, const Network& target_net, double gamma);

/// Argmax over the allowed actions, ties to the lowest index. Empty allowed = all.
int restricted_argmax(const Eigen::Ref<const RowVector>& q_row, const ActionSet& allowed);

/// Batch targets from reward column 0. `allowed`, when non-empty, holds one
/// next-state action set per batch row.
Vector double_q_targets(const Batch& batch, const Network& q_net, const Network& target_net, double gamma,
                        std::span<const ActionSet> allowed = {});

/// One optimizer step on mean (Q(s,a) - y)^2 + cql_alpha * mean CQL penalty.
UpdateStats td_update(const Batch& batch, Network& q_net, const Network& target_net, Optimizer& optimizer,
                      const TrainerConfig& config, std::span<const ActionSet> allowed, double cql_alpha);

/// Plain double Q-learning on the main channel (CQL penalty when config.cql_alpha > 0).
double q_learning_update(const Batch& batch, Network& q_net, const Network& target_net, Optimizer& optimizer,
                         const TrainerConfig& config);

/// logsumexp(q) - q[taken_action].
double cql_penalty(const Eigen::Ref<const Vector>& q_values, int taken_action);

/// Actions whose probability relative to the most likely one exceeds t; the
/// argmax is always kept.
ActionSet bcq_mask(const Eigen::Ref<const Vector>& behavior_probs, double threshold);

/// Double-Q update whose next-state argmax ranges over bcq_mask(behavior(s'), t).
double bcq_update(const Batch& batch, Network& q_net, const Network& target_net, const BehaviorModel& behavior,
                  Optimizer& optimizer, const TrainerConfig& config, double threshold);

/// Greedy action under Q over the allowed set.
int greedy_action(const Network& q_net, const Eigen::Ref<const Vector>& state, const ActionSet& allowed);

}  // namespace pruneq
