#pragma once

// Phase 1: vector-valued Q-learning with posterior-sampled reward weights
// (MQL), its conservative offline variant (MCQL), and the pruning function.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pruneq/action_set.hpp"
#include "pruneq/nn.hpp"
#include "pruneq/policies.hpp"
#include "pruneq/qlearning.hpp"

namespace pruneq {

/// A dense network with |A| * d outputs read as an |A| x d Q-matrix
/// (output index a * d + c). Channel 0 is the main reward.
struct VectorQNetwork {
  Network net;
  int action_count = 0;
  int channel_count = 0;

  VectorQNetwork() = default;
  VectorQNetwork(Network network, int actions, int channels);
  static VectorQNetwork create(Index state_dim, int actions, int channels, const TrainerConfig& config, Rng& rng);

  /// Q-matrix |A| x d at one state.
  Matrix q_matrix(const Eigen::Ref<const Vector>& state) const;
  /// Raw outputs, one row of |A| * d per input row.
  Matrix forward_flat(const Matrix& states) const { return forward(net, states); }
};

/// Row `row` of a flat output matrix viewed as |A| x d.
inline Eigen::Map<const Matrix> q_matrix_view(const Matrix& flat, Index row, int actions, int channels) {
  return Eigen::Map<const Matrix>(flat.row(row).data(), actions, channels);
}

/// Canonical state identifier: coordinates rounded to 6 decimals, hashed
/// (FNV-1a over the rounded integers).
using StateKey = std::uint64_t;
StateKey state_key(const Eigen::Ref<const Vector>& state);
std::string format_state_key(StateKey key);
StateKey parse_state_key(const std::string& text);

/// Per-state permitted action sets.
class PruneTable {
 public:
  PruneTable() = default;
  PruneTable(int action_count, double beta, int m, std::string checkpoint = {});

  void insert(StateKey key, ActionSet actions);
  const ActionSet* find(StateKey key) const;
  /// Table entry for the state, or the full action set (counting the fallback).
  ActionSet allowed(const Eigen::Ref<const Vector>& state, std::int64_t* fallbacks = nullptr) const;

  int action_count() const { return action_count_; }
  double beta() const { return beta_; }
  int m() const { return m_; }
  const std::string& checkpoint() const { return checkpoint_; }
  std::size_t size() const { return entries_.size(); }
  const std::map<StateKey, ActionSet>& entries() const { return entries_; }

  /// Every listed state permits every action.
  static PruneTable full(std::span<const Vector> states, int action_count);

  friend bool operator==(const PruneTable&, const PruneTable&) = default;

 private:
  int action_count_ = 0;
  double beta_ = 0;
  int m_ = 0;
  std::string checkpoint_;
  std::map<StateKey, ActionSet> entries_;
};

/// JSONL, one line per state: {"state_key", "actions", "beta", "m", "checkpoint"}.
void save_prune_table(const std::string& path, const PruneTable& table);
PruneTable load_prune_table(const std::string& path, int action_count);

struct VectorTargetOptions {
  double beta = 40.0;
  double gamma = 1.0;
  int particle_count = 32;
};

/// r + gamma * sum_a' pi_beta(a' | s'; w^T Q(s')) Q'(s', a') with w drawn from
/// the posterior at (s, a) under the online network; terminal -> r.
Vector mql_target(const Transition& t, const VectorQNetwork& online, const VectorQNetwork& target,
                  const WeightPrior& prior, const VectorTargetOptions& options, Rng& rng,
                  PosteriorDiagnostics* diagnostics = nullptr);

/// Batch form. online_at_states is online.forward_flat(batch.states).
Matrix mql_targets(const Batch& batch, const Matrix& online_at_states, const VectorQNetwork& online,
                   const VectorQNetwork& target, const WeightPrior& prior, const VectorTargetOptions& options,
                   Rng& rng, PosteriorDiagnostics* diagnostics = nullptr);

/// One optimizer step on mean sum_c (Q_c(s,a) - y_c)^2 with weights redrawn per
/// transition, plus (alpha / d) * sum_c CQL penalty of channel c.
UpdateStats vector_td_update(const Batch& batch, VectorQNetwork& online, const VectorQNetwork& target,
                             const WeightPrior& prior, Optimizer& optimizer, const TrainerConfig& config,
                             double cql_alpha, Rng& rng, PosteriorDiagnostics* diagnostics = nullptr);

double mql_update(const Batch& batch, VectorQNetwork& online, const VectorQNetwork& target, const WeightPrior& prior,
                  Optimizer& optimizer, const TrainerConfig& config, Rng& rng);
double mcql_update(const Batch& batch, VectorQNetwork& online, const VectorQNetwork& target, const WeightPrior& prior,
                   Optimizer& optimizer, const TrainerConfig& config, Rng& rng);

/// Draws m prior weights; for each samples one action from pi_beta(. | s; w^T Q);
/// returns the union.
ActionSet prune(const VectorQNetwork& net, const Eigen::Ref<const Vector>& state, const WeightPrior& prior,
                double beta, int m, Rng& rng);
ActionSet prune_from_q_matrix(const Eigen::Ref<const Matrix>& q_matrix, const WeightPrior& prior, double beta, int m,
                              Rng& rng);

/// One prune per distinct state key. A single base seed is drawn from `rng`
/// and each key samples from its own derived stream, so the table does not
/// depend on state order. m <= 0 selects the default 3 * |A|.
PruneTable build_prune_table(const VectorQNetwork& net, std::span<const Vector> states, const WeightPrior& prior,
                             double beta, int m, Rng& rng, std::string checkpoint = {});

inline int default_prune_samples(int action_count) { return 3 * action_count; }

}  // namespace pruneq
