#pragma once

// Policy evaluation: weighted importance sampling, mortality separation by
// Q-quartile, pruning size/recall, behavior overlap, survival by Q
// percentile and simulator rollouts.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "pruneq/dataset.hpp"
#include "pruneq/environments.hpp"
#include "pruneq/multiobjective.hpp"

namespace pruneq {

/// Action distribution at a state.
using ActionProbs = std::function<Vector(const Eigen::Ref<const Vector>& state)>;
/// Deterministic action at a state.
using StatePolicy = std::function<int(const Eigen::Ref<const Vector>& state)>;

/// Deterministic policy softened to 1 - epsilon on its action and
/// epsilon / (|A| - 1) elsewhere.
struct SoftenedPolicy {
  StatePolicy base;
  double epsilon = 0.01;
  int action_count = 0;

  Vector probs(const Eigen::Ref<const Vector>& state) const;
  ActionProbs as_probs() const;
};

/// Greedy policy of a Q-network, optionally restricted by a prune table.
StatePolicy greedy_policy(const Network& q_net, const PruneTable* table = nullptr);

struct WisOptions {
  double gamma = 1.0;
  /// Per-step ratio cap; 0 disables clipping.
  double clip = 0.0;
};

struct WisResult {
  double value = 0;
  double effective_sample_size = 0;
  double max_ratio = 0;  // largest trajectory weight relative to the mean weight
  std::size_t clipped_steps = 0;
  std::size_t trajectories = 0;
};

/// Per-trajectory WIS of the channel-0 return. Weights are accumulated in log
/// space and rescaled by their maximum, which the self-normalization cancels.
WisResult wis(const TransitionDataset& data, const ActionProbs& eval_policy, const ActionProbs& behavior,
              const WisOptions& options = {});
WisResult wis(const TransitionDataset& data, const SoftenedPolicy& eval_policy, const BehaviorModel& behavior,
              const WisOptions& options = {});

/// Q(s, a) of every transition in dataset order.
std::vector<double> taken_action_values(const TransitionDataset& data, const Network& q_net);

/// Mortality (%) in the bottom Q quartile minus the top quartile, over the
/// (s, a) pairs of labeled trajectories. Pairs are ranked by (Q, trajectory,
/// step); both quartiles hold floor(n / 4) pairs. `q_values` has one entry
/// per transition of `data`.
double delta_mr(const TransitionDataset& data, const std::vector<double>& q_values);
double delta_mr(const TransitionDataset& data, const Network& q_net);

struct PruneStats {
  double mean_size = 0;
  double recall = 0;  // fraction in [0, 1]
  std::int64_t fallbacks = 0;
};

PruneStats prune_stats(const PruneTable& table, const TransitionDataset& data);

/// Percentage of transitions whose logged action equals the policy's action.
double behavior_overlap(const StatePolicy& policy, const TransitionDataset& data);

struct PercentileCurve {
  std::vector<int> bin;
  std::vector<double> survival_rate;  // percent
  std::vector<std::size_t> count;
  double spearman = 0;  // rank correlation of bin index and survival rate
  bool coarse = false;  // fewer than 100 labeled trajectories
};

/// Labeled trajectories ranked by mean Q over their (s, a) pairs and cut into
/// 100 equal-count bins (one bin per trajectory when fewer than 100).
PercentileCurve survival_percentile_curve(const TransitionDataset& data, const std::vector<double>& q_values);

/// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

struct ReturnEstimate {
  double mean = 0;
  double stderr_ = 0;
  std::size_t episodes = 0;
};

/// Unmasked, noise-free channel-0 return over fresh episodes, each from its
/// own stream derived from one draw of `rng`.
ReturnEstimate rollout_return(const SepsisPolicy& policy, const SepsisSimulator& sim, std::size_t n_episodes,
                              const EpisodeConfig& config, Rng& rng);

/// Greedy action for every sepsis state index, for fast rollouts.
std::vector<int> tabulate_sepsis_policy(const Network& q_net, const PruneTable* table = nullptr);
SepsisPolicy table_policy(std::vector<int> actions);

/// Feature vectors of every sepsis state, indexed by SepsisState::index().
const std::vector<Vector>& sepsis_state_features();

struct EvaluationReport {
  std::string policy;
  std::uint64_t seed = 0;
  std::optional<double> wis_value;
  std::optional<double> wis_ess;
  std::optional<double> delta_mr;
  std::optional<double> mean_prune_size;
  std::optional<double> prune_recall;
  std::optional<double> behavior_overlap;
  std::optional<double> rollout_mean;
  std::optional<double> rollout_stderr;
  std::optional<PercentileCurve> percentile_curve;
  std::vector<std::size_t> action_histogram;  // greedy actions over the evaluation states
  nlohmann::json provenance;  // config hash, checkpoints

  nlohmann::json to_json() const;
};

/// Count of each action chosen by `policy` over the states of `data`.
std::vector<std::size_t> action_histogram(const StatePolicy& policy, const TransitionDataset& data);
/// Count of each logged action.
std::vector<std::size_t> logged_action_histogram(const TransitionDataset& data);

/// Mean and standard error of each metric over a set of reports.
nlohmann::json aggregate_reports(const std::vector<EvaluationReport>& reports);

/// Scalar metric columns of a report list as CSV.
std::string reports_csv(const std::vector<EvaluationReport>& reports);

/// Mean and standard error (sample sd / sqrt n; 0 for n < 2).
std::pair<double, double> mean_stderr(const std::vector<double>& values);

}  // namespace pruneq
