#pragma once

// Experiment configuration and the stage functions shared by the CLI and the
// acceptance suite: data generation, phase 1, pruning, phase 2, baselines
// and evaluation.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "pruneq/dataset.hpp"
#include "pruneq/environments.hpp"
#include "pruneq/evaluation.hpp"
#include "pruneq/multiobjective.hpp"
#include "pruneq/pruned.hpp"
#include "pruneq/training.hpp"

namespace pruneq {

struct StageSettings {
  std::int64_t total_updates = 200000;
  std::int64_t target_update_period = 10000;
  std::size_t batch_size = 32;
  double alpha = 0.0;  // CQL weight
};

struct ExperimentConfig {
  std::string mode = "off_policy";  // or "offline"

  // env
  SepsisTransitionTable table;
  EpisodeConfig episode;

  // dataset
  BehaviorSpec behavior;
  std::size_t trajectories = 5000;
  std::array<double, 3> split_fractions{0.8, 0.05, 0.15};

  // network and optimizer, shared by all stages
  Index hidden_width = 64;
  int hidden_layers = 2;
  double learning_rate = 1e-4;
  double clip_norm = 10.0;
  double gamma = 1.0;

  // phase 1
  StageSettings phase1;
  double phase1_beta = 40.0;
  Vector prior = WeightPrior::main_and_intermediate(kSepsisChannels).concentration();
  int particle_count = 32;

  // prune
  double prune_beta = 40.0;
  int prune_m = 0;  // 0 selects 3 |A|

  // phase 2
  StageSettings phase2;
  bool warm_start = false;

  // baselines
  StageSettings dqn;
  StageSettings cql{200000, 10000, 32, 0.001};
  StageSettings bcq;
  std::vector<double> bcq_thresholds{0.05, 0.1, 0.3};
  /// The dqn baseline learns from r0 + reward_scale * sum of the intermediate
  /// channels; 0 keeps the sparse reward only.
  double reward_scale = 0.0;

  // eval
  std::vector<std::string> metrics{"rollout"};
  std::size_t eval_episodes = 500;
  std::int64_t eval_every = 10000;
  double softening = 0.01;

  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};

  nlohmann::json resolved;  // fully merged config as parsed
  std::string hash;         // hex FNV-1a of resolved.dump()

  TrainerConfig trainer(const StageSettings& stage, double beta = 40.0) const;
  bool offline() const { return mode == "offline"; }
  bool wants(const std::string& metric) const;
};

/// Reads a JSON config. "include" (a path or list of paths, relative to the
/// including file) is merged first and overridden by the including file;
/// "env.transition_table" may be a path or an inline object. Unknown keys and
/// ill-typed values throw ConfigError.
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
ExperimentConfig parse_experiment_config(const nlohmann::json& config, const std::filesystem::path& base_dir = ".");
/// Applies dotted overrides such as "phase1.total_updates=1000".
nlohmann::json apply_overrides(nlohmann::json config, const std::vector<std::string>& overrides);
/// Resolves includes and a transition-table path into a single JSON document.
nlohmann::json resolve_config_json(const std::filesystem::path& path);

std::string hex64(std::uint64_t value);

// ---------------------------------------------------------------- stages

struct DataBundle {
  TransitionDataset all;
  TransitionDataset train;
  TransitionDataset validation;
  TransitionDataset test;
};

/// Generates the logged dataset for one seed. Off-policy mode trains on
/// everything (train = all); offline mode splits by trajectory.
DataBundle make_data(const ExperimentConfig& config, std::uint64_t seed);
DataBundle split_data(const ExperimentConfig& config, TransitionDataset all, std::uint64_t seed);

struct Phase1Result {
  VectorQNetwork net;
  TrainingLog log;
  PosteriorDiagnostics diagnostics;
};

Phase1Result run_phase1(const ExperimentConfig& config, const TransitionDataset& train, std::uint64_t seed);

/// States to prune: every distinct s and s' in the data plus, for the sepsis
/// environment, every simulator state.
std::vector<Vector> prune_states(const TransitionDataset& data);

PruneTable run_prune(const ExperimentConfig& config, const VectorQNetwork& net, const TransitionDataset& data,
                     std::uint64_t seed, const std::string& checkpoint_id = {});

struct ScalarResult {
  Network net;
  TrainingLog log;
  std::int64_t fallbacks = 0;
};

/// Off-policy mode evaluates greedy rollouts every eval_every updates.
ScalarResult run_phase2(const ExperimentConfig& config, const TransitionDataset& train, const PruneTable& table,
                        std::uint64_t seed, const VectorQNetwork* warm_start = nullptr);

/// method is "dqn", "cql" or "bcq"; bcq needs a behavior model and threshold.
ScalarResult run_baseline(const ExperimentConfig& config, const std::string& method, const TransitionDataset& train,
                          std::uint64_t seed, const BehaviorModel* behavior = nullptr, double threshold = 0.0);

/// bcq_mask of the behavior model at every state, as a PruneTable, so the
/// greedy BCQ policy can be evaluated like a pruned one.
PruneTable behavior_table(const BehaviorModel& behavior, std::span<const Vector> states, double threshold);

BehaviorFit run_behavior_fit(const TransitionDataset& train, const TransitionDataset& validation);

/// Transitions with reward[0] replaced by r0 + scale * sum_{c >= 1} r_c.
std::vector<Transition> scalarize_rewards(std::span<const Transition> data, double scale);

/// Greedy rollout return of a Q-network (optionally pruned) on fresh episodes.
ReturnEstimate evaluate_rollouts(const ExperimentConfig& config, const Network& q_net, const PruneTable* table,
                                 std::uint64_t seed);

/// Metrics selected by config.metrics for one trained policy.
EvaluationReport evaluate_policy(const ExperimentConfig& config, const std::string& name, const Network& q_net,
                                 const PruneTable* table, const DataBundle& data, const BehaviorModel* behavior,
                                 std::uint64_t seed);

/// Stage seed from the experiment seed (seed ladder).
std::uint64_t stage_seed(std::uint64_t seed, std::string_view stage);

}  // namespace pruneq
