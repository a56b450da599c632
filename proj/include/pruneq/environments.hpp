#pragma once

// Simulated MDPs with vector rewards: the sepsis treatment simulator, small
// deterministic MDPs with exact value iteration, terminal-reward masking and
// intermediate-reward noise.

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "pruneq/nn.hpp"
#include "pruneq/qlearning.hpp"

namespace pruneq {

// ---------------------------------------------------------------- sepsis

enum class TerminalKind { kNone, kDischarge, kDeath, kTimeout };

std::string to_string(TerminalKind kind);

/// Discrete patient state. Levels: heart rate and blood pressure 0=low,
/// 1=normal, 2=high; oxygen 0=low, 1=normal; glucose 0..4 from very low to
/// very high with 2 normal. Treatment flags record the previous action.
struct SepsisState {
  int heart_rate = 1;
  int blood_pressure = 1;
  int oxygen = 1;
  int glucose = 2;
  bool diabetic = false;
  bool antibiotics = false;
  bool vasopressors = false;
  bool ventilation = false;

  static constexpr int kCount = 3 * 3 * 2 * 5 * 2 * 8;
  static constexpr int kFeatureDim = 3 + 3 + 2 + 5 + 1 + 3;
  static constexpr int kVitals = 4;

  int index() const;
  static SepsisState from_index(int index);
  /// One-hot vitals, diabetic flag, treatment flags.
  Vector features() const;
  std::array<bool, kVitals> normal_vitals() const;
  int abnormal_count() const;

  friend bool operator==(const SepsisState&, const SepsisState&) = default;
};

/// Action bits: 1 = antibiotics, 2 = vasopressors, 4 = ventilation.
inline constexpr int kSepsisActions = 8;
inline constexpr int kSepsisChannels = 5;

/// Treatment effect probabilities. "withdrawn" means on at the previous step
/// and off now. Vitals not driven by an active treatment drift one level up
/// or down with the fluctuation probabilities.
struct SepsisTransitionTable {
  double antibiotics_hr_high_to_normal = 0.5;
  double antibiotics_bp_high_to_normal = 0.5;
  double antibiotics_withdrawn_hr_normal_to_high = 0.1;
  double antibiotics_withdrawn_bp_normal_to_high = 0.1;
  double ventilation_o2_low_to_normal = 0.7;
  double ventilation_withdrawn_o2_normal_to_low = 0.1;
  double vasopressors_bp_low_to_normal = 0.7;
  double vasopressors_bp_normal_to_high = 0.7;
  double vasopressors_diabetic_bp_up = 0.5;
  double vasopressors_diabetic_glucose_up = 0.5;
  double vasopressors_withdrawn_bp_down = 0.1;
  double vasopressors_withdrawn_bp_down_diabetic = 0.05;
  double fluctuation_prob = 0.1;
  double glucose_fluctuation_diabetic = 0.3;
  double glucose_fluctuation_non_diabetic = 0.1;

  void validate() const;
};

nlohmann::json to_json(const SepsisTransitionTable& table);
/// Unknown keys are rejected; missing keys keep their defaults.
SepsisTransitionTable transition_table_from_json(const nlohmann::json& j);
SepsisTransitionTable load_transition_table(const std::string& path);

struct EpisodeConfig {
  int max_steps = 20;
  double terminal_reward_mask_prob = 0.9;
  double noise_std = 0.0;
  double diabetic_prob = 0.2;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SepsisStep {
  SepsisState next;
  Vector reward;  // length 5: main, then heart rate, blood pressure, oxygen, glucose
  TerminalKind terminal = TerminalKind::kNone;
};

class SepsisSimulator {
 public:
  explicit SepsisSimulator(SepsisTransitionTable table = {});

  SepsisStep step(const SepsisState& state, int action, Rng& rng) const;
  /// Treatments off, 1 or 2 abnormal vitals chosen uniformly.
  SepsisState initial_state(Rng& rng, double diabetic_prob) const;
  const SepsisTransitionTable& table() const { return table_; }

 private:
  SepsisTransitionTable table_;
};

/// Policies act on the full discrete state and may randomize.
using SepsisPolicy = std::function<int(const SepsisState&, Rng&)>;

struct Episode {
  std::vector<Transition> transitions;
  TerminalKind outcome = TerminalKind::kNone;
  std::vector<int> state_indices;  // state index of each transition's s, plus the final s'
};

/// Runs one episode of at most max_steps. A timeout ends the episode without
/// a terminal flag. No masking or noise is applied here.
Episode rollout(const SepsisPolicy& policy, const SepsisSimulator& sim, const EpisodeConfig& config,
                std::int64_t trajectory_id, Rng& rng);

/// Zeroes the channel-0 terminal reward of each trajectory with probability
/// mask_prob (one Bernoulli draw per trajectory, keyed on its id). Returns the
/// number of masked trajectories.
std::size_t mask_terminal_rewards(std::vector<Episode>& episodes, double mask_prob, Rng& rng);

/// Adds iid N(0, noise_std) to reward channels 1..d-1, keyed per trajectory id.
void inject_noise(std::vector<Episode>& episodes, double noise_std, Rng& rng);

SepsisPolicy uniform_policy();
/// Rule-based treatment: antibiotics for high heart rate or blood pressure,
/// vasopressors for low blood pressure, ventilation for low oxygen.
SepsisPolicy heuristic_policy();
/// With probability epsilon a uniform action, otherwise `base`.
SepsisPolicy epsilon_mixture(SepsisPolicy base, double epsilon, int action_count = kSepsisActions);

// ---------------------------------------------------------------- small MDPs

/// Deterministic finite MDP with vector rewards, for exact value-iteration oracles.
class ChainMDP {
 public:
  ChainMDP(int states, int actions, int channels, double gamma);

  void set(int state, int action, int next, Vector reward, bool terminal = false);

  int state_count() const { return states_; }
  int action_count() const { return actions_; }
  int channel_count() const { return channels_; }
  double gamma() const { return gamma_; }
  int next(int s, int a) const { return next_[idx(s, a)]; }
  const Vector& reward(int s, int a) const { return reward_[idx(s, a)]; }
  bool terminal(int s, int a) const { return terminal_[idx(s, a)] != 0; }

  /// One-hot state encoding.
  Vector features(int state) const;
  /// One transition per (s, a) pair with one-hot states.
  std::vector<Transition> transitions() const;

  /// n states in a line; action 0 moves left, 1 moves right; stepping right
  /// from the last state ends the episode with `terminal_reward` (single channel).
  static ChainMDP line(int n, double gamma, double terminal_reward);

 private:
  std::size_t idx(int s, int a) const;
  int states_, actions_, channels_;
  double gamma_;
  std::vector<int> next_;
  std::vector<Vector> reward_;
  std::vector<std::uint8_t> terminal_;
};

/// Exact Q* for the scalarized reward w^T r, iterated to sup-norm change < tolerance.
Matrix chain_value_iteration(const ChainMDP& mdp, const Vector& w, double tolerance = 1e-10,
                             int max_iterations = 1000000);

}  // namespace pruneq
