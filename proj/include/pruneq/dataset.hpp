#pragma once

// Offline transition datasets: container, JSONL format, trajectory-level
// splits, behavior-policy fitting and synthetic generation.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "pruneq/behavior.hpp"
#include "pruneq/environments.hpp"
#include "pruneq/qlearning.hpp"

namespace pruneq {

/// Outcome label of a trajectory from its channel-0 terminal reward.
enum class Outcome { kUnlabeled, kSurvival, kDeath };

/// Transitions grouped by trajectory, each trajectory contiguous and ordered by step.
class TransitionDataset {
 public:
  TransitionDataset() = default;
  TransitionDataset(Index state_dim, int action_count, int channel_count);

  /// Appends one transition. It continues the last trajectory when the ids
  /// match, otherwise starts a new one. Throws SchemaError on dimension
  /// mismatch, out-of-range actions or out-of-order steps.
  void add(Transition t);
  void add_trajectory(std::span<const Transition> trajectory);

  Index state_dim() const { return state_dim_; }
  int action_count() const { return action_count_; }
  int channel_count() const { return channel_count_; }
  bool empty() const { return transitions_.empty(); }
  std::size_t size() const { return transitions_.size(); }
  std::size_t trajectory_count() const { return starts_.size(); }

  const std::vector<Transition>& transitions() const { return transitions_; }
  std::span<const Transition> trajectory(std::size_t k) const;
  /// Death iff the last transition is terminal with negative main reward;
  /// survival iff terminal with positive main reward; otherwise unlabeled.
  Outcome outcome(std::size_t k) const;

  std::string split_tag;
  nlohmann::json generator;  // how the data was produced; written to the meta line

  friend bool operator==(const TransitionDataset& a, const TransitionDataset& b) {
    return a.state_dim_ == b.state_dim_ && a.action_count_ == b.action_count_ &&
           a.channel_count_ == b.channel_count_ && a.transitions_ == b.transitions_ && a.generator == b.generator;
  }

 private:
  Index state_dim_ = 0;
  int action_count_ = 0;
  int channel_count_ = 0;
  std::vector<Transition> transitions_;
  std::vector<std::size_t> starts_;
};

/// JSONL. An optional first line {"meta": {"state_dim", "action_count",
/// "channel_count", "generator"}} fixes the dimensions; every other line is
/// {"traj", "step", "s", "a", "s2", "r", "terminal"}.
void save_dataset(const TransitionDataset& dataset, const std::string& path);
TransitionDataset load_dataset(const std::string& path);
TransitionDataset parse_dataset(std::istream& in, const std::string& name = "<stream>");

/// Trajectory-level random partition. Split sizes use largest-remainder
/// rounding (ties to the earlier split).
std::array<TransitionDataset, 3> split(const TransitionDataset& dataset,
                                       std::array<double, 3> fractions = {0.8, 0.05, 0.15}, std::uint64_t seed = 0);

/// Split sizes for n trajectories (exposed for tests).
std::array<std::size_t, 3> split_sizes(std::size_t n, std::array<double, 3> fractions);

struct BehaviorFitOptions {
  double learning_rate = 0.1;
  int epochs = 500;
  int patience = 20;
  double l2 = 0.0;
};

struct BehaviorFit {
  BehaviorModel model;
  double train_loss = 0;
  double validation_loss = 0;
  double train_accuracy = 0;
  double validation_accuracy = 0;
  int epochs_run = 0;
  std::vector<double> train_loss_history;
};

/// Full-batch gradient descent on mean cross-entropy. With a validation set,
/// stops after `patience` consecutive epochs of rising validation loss and
/// returns the parameters with the lowest validation loss. Starts from the
/// intercept-only fit (log action frequencies, floored at 1e-4).
BehaviorFit fit_behavior(const TransitionDataset& train, const TransitionDataset* validation = nullptr,
                         const BehaviorFitOptions& options = {});

/// Mean cross-entropy and top-1 accuracy of a model on a dataset.
std::pair<double, double> behavior_loss_accuracy(const BehaviorModel& model, const TransitionDataset& data);

/// Logged-data generator: "uniform", or "heuristic" mixed with uniform
/// actions at rate epsilon.
struct BehaviorSpec {
  std::string kind = "uniform";
  double epsilon = 0.0;

  SepsisPolicy policy() const;
  nlohmann::json to_json() const;
};

/// Rolls out n trajectories (ids 0..n-1, each from its own derived stream),
/// then applies terminal masking and intermediate-reward noise per the
/// episode config.
TransitionDataset generate_offline_dataset(const SepsisSimulator& sim, const BehaviorSpec& behavior,
                                           std::size_t n_trajectories, const EpisodeConfig& config, Rng& rng);

}  // namespace pruneq
