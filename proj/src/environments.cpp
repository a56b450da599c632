#include "pruneq/environments.hpp"

#include <cmath>
#include <fstream>

#include "pruneq/seeding.hpp"

namespace pruneq {

std::string to_string(TerminalKind kind) {
  switch (kind) {
    case TerminalKind::kNone: return "none";
    case TerminalKind::kDischarge: return "discharge";
    case TerminalKind::kDeath: return "death";
    case TerminalKind::kTimeout: return "timeout";
  }
  return "unknown";
}

// ---------------------------------------------------------------- state

int SepsisState::index() const {
  int i = heart_rate;
  i = i * 3 + blood_pressure;
  i = i * 2 + oxygen;
  i = i * 5 + glucose;
  i = i * 2 + (diabetic ? 1 : 0);
  i = i * 8 + (antibiotics ? 1 : 0) + (vasopressors ? 2 : 0) + (ventilation ? 4 : 0);
  return i;
}

SepsisState SepsisState::from_index(int index) {
  if (index < 0 || index >= kCount) throw InvalidArgument("sepsis state index out of range");
  SepsisState s;
  const int treat = index % 8;
  index /= 8;
  s.antibiotics = (treat & 1) != 0;
  s.vasopressors = (treat & 2) != 0;
  s.ventilation = (treat & 4) != 0;
  s.diabetic = index % 2 == 1;
  index /= 2;
  s.glucose = index % 5;
  index /= 5;
  s.oxygen = index % 2;
  index /= 2;
  s.blood_pressure = index % 3;
  s.heart_rate = index / 3;
  return s;
}

Vector SepsisState::features() const {
  Vector f = Vector::Zero(kFeatureDim);
  f[heart_rate] = 1;
  f[3 + blood_pressure] = 1;
  f[6 + oxygen] = 1;
  f[8 + glucose] = 1;
  f[13] = diabetic ? 1 : 0;
  f[14] = antibiotics ? 1 : 0;
  f[15] = vasopressors ? 1 : 0;
  f[16] = ventilation ? 1 : 0;
  return f;
}

std::array<bool, SepsisState::kVitals> SepsisState::normal_vitals() const {
  return {heart_rate == 1, blood_pressure == 1, oxygen == 1, glucose == 2};
}

int SepsisState::abnormal_count() const {
  int n = 0;
  for (bool ok : normal_vitals()) n += ok ? 0 : 1;
  return n;
}

// ---------------------------------------------------------------- table

namespace {

#define PRUNEQ_TABLE_FIELDS(X)                      \
  X(antibiotics_hr_high_to_normal)                  \
  X(antibiotics_bp_high_to_normal)                  \
  X(antibiotics_withdrawn_hr_normal_to_high)        \
  X(antibiotics_withdrawn_bp_normal_to_high)        \
  X(ventilation_o2_low_to_normal)                   \
  X(ventilation_withdrawn_o2_normal_to_low)         \
  X(vasopressors_bp_low_to_normal)                  \
  X(vasopressors_bp_normal_to_high)                 \
  X(vasopressors_diabetic_bp_up)                    \
  X(vasopressors_diabetic_glucose_up)               \
  X(vasopressors_withdrawn_bp_down)                 \
  X(vasopressors_withdrawn_bp_down_diabetic)        \
  X(fluctuation_prob)                               \
  X(glucose_fluctuation_diabetic)                   \
  X(glucose_fluctuation_non_diabetic)

}  // namespace

void SepsisTransitionTable::validate() const {
#define PRUNEQ_CHECK(name) \
  if (!(name >= 0 && name <= 1)) throw ConfigError("transition table: " #name " must lie in [0, 1]");
  PRUNEQ_TABLE_FIELDS(PRUNEQ_CHECK)
#undef PRUNEQ_CHECK
}

nlohmann::json to_json(const SepsisTransitionTable& table) {
  nlohmann::json j;
#define PRUNEQ_PUT(name) j[#name] = table.name;
  PRUNEQ_TABLE_FIELDS(PRUNEQ_PUT)
#undef PRUNEQ_PUT
  return j;
}

SepsisTransitionTable transition_table_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("transition table must be a JSON object");
  SepsisTransitionTable t;
  for (const auto& [key, value] : j.items()) {
    bool known = false;
#define PRUNEQ_GET(name)                                                              \
  if (key == #name) {                                                                 \
    if (!value.is_number()) throw ConfigError("transition table: " #name " must be a number"); \
    t.name = value.get<double>();                                                     \
    known = true;                                                                     \
  }
    PRUNEQ_TABLE_FIELDS(PRUNEQ_GET)
#undef PRUNEQ_GET
    if (!known) throw ConfigError("transition table: unknown key '" + key + "'");
  }
  t.validate();
  return t;
}

SepsisTransitionTable load_transition_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open transition table " + path);
  try {
    return transition_table_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("transition table " + path + ": " + e.what());
  }
}

void EpisodeConfig::validate() const {
  if (max_steps < 0) throw ConfigError("max_steps must be >= 0");
  if (!(terminal_reward_mask_prob >= 0 && terminal_reward_mask_prob <= 1))
    throw ConfigError("terminal_reward_mask_prob must lie in [0, 1]");
  if (!(noise_std >= 0)) throw ConfigError("noise_std must be >= 0");
  if (!(diabetic_prob >= 0 && diabetic_prob <= 1)) throw ConfigError("diabetic_prob must lie in [0, 1]");
}

// ---------------------------------------------------------------- dynamics

SepsisSimulator::SepsisSimulator(SepsisTransitionTable table) : table_(table) { table_.validate(); }

SepsisStep SepsisSimulator::step(const SepsisState& state, int action, Rng& rng) const {
  if (action < 0 || action >= kSepsisActions) throw InvalidArgument("sepsis action out of range");
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  auto chance = [&](double p) { return unif(rng) < p; };
  const auto& t = table_;

  const bool abx = (action & 1) != 0, vaso = (action & 2) != 0, vent = (action & 4) != 0;
  SepsisState s = state;

  bool hr_driven = false, bp_driven = false, o2_driven = false, glucose_driven = false;

  if (abx) {
    hr_driven = bp_driven = true;
    if (s.heart_rate == 2 && chance(t.antibiotics_hr_high_to_normal)) s.heart_rate = 1;
    if (s.blood_pressure == 2 && chance(t.antibiotics_bp_high_to_normal)) s.blood_pressure = 1;
  } else if (state.antibiotics) {
    if (s.heart_rate == 1 && chance(t.antibiotics_withdrawn_hr_normal_to_high)) s.heart_rate = 2;
    if (s.blood_pressure == 1 && chance(t.antibiotics_withdrawn_bp_normal_to_high)) s.blood_pressure = 2;
  }

  if (vent) {
    o2_driven = true;
    if (s.oxygen == 0 && chance(t.ventilation_o2_low_to_normal)) s.oxygen = 1;
  } else if (state.ventilation) {
    if (s.oxygen == 1 && chance(t.ventilation_withdrawn_o2_normal_to_low)) s.oxygen = 0;
  }

  if (vaso) {
    bp_driven = true;
    if (!s.diabetic) {
      if (s.blood_pressure == 0) {
        if (chance(t.vasopressors_bp_low_to_normal)) s.blood_pressure = 1;
      } else if (s.blood_pressure == 1) {
        if (chance(t.vasopressors_bp_normal_to_high)) s.blood_pressure = 2;
      }
    } else {
      glucose_driven = true;
      if (s.blood_pressure < 2 && chance(t.vasopressors_diabetic_bp_up)) ++s.blood_pressure;
      if (s.glucose < 4 && chance(t.vasopressors_diabetic_glucose_up)) ++s.glucose;
    }
  } else if (state.vasopressors) {
    const double p = s.diabetic ? t.vasopressors_withdrawn_bp_down_diabetic : t.vasopressors_withdrawn_bp_down;
    if (s.blood_pressure > 0 && chance(p)) --s.blood_pressure;
  }

  auto fluctuate = [&](int& level, int top, double p) {
    if (!chance(p)) return;
    if (chance(0.5)) {
      if (level < top) ++level;
    } else if (level > 0) {
      --level;
    }
  };
  if (!hr_driven) fluctuate(s.heart_rate, 2, t.fluctuation_prob);
  if (!bp_driven) fluctuate(s.blood_pressure, 2, t.fluctuation_prob);
  if (!o2_driven) fluctuate(s.oxygen, 1, t.fluctuation_prob);
  if (!glucose_driven)
    fluctuate(s.glucose, 4, s.diabetic ? t.glucose_fluctuation_diabetic : t.glucose_fluctuation_non_diabetic);

  s.antibiotics = abx;
  s.vasopressors = vaso;
  s.ventilation = vent;

  SepsisStep out;
  out.reward = Vector::Zero(kSepsisChannels);
  const auto before = state.normal_vitals();
  const auto after = s.normal_vitals();
  for (int v = 0; v < SepsisState::kVitals; ++v) {
    if (!before[v] && after[v]) out.reward[v + 1] = 1;
    if (before[v] && !after[v]) out.reward[v + 1] = -1;
  }
  if (s.abnormal_count() >= 3) {
    out.terminal = TerminalKind::kDeath;
    out.reward[0] = -100;
  } else if (s.abnormal_count() == 0 && action == 0) {
    out.terminal = TerminalKind::kDischarge;
    out.reward[0] = 100;
  }
  out.next = s;
  return out;
}

SepsisState SepsisSimulator::initial_state(Rng& rng, double diabetic_prob) const {
  // All vital combinations with one or two abnormal values.
  static const std::vector<SepsisState> candidates = [] {
    std::vector<SepsisState> out;
    for (int hr = 0; hr < 3; ++hr)
      for (int bp = 0; bp < 3; ++bp)
        for (int o2 = 0; o2 < 2; ++o2)
          for (int g = 0; g < 5; ++g) {
            SepsisState s;
            s.heart_rate = hr;
            s.blood_pressure = bp;
            s.oxygen = o2;
            s.glucose = g;
            const int n = s.abnormal_count();
            if (n >= 1 && n <= 2) out.push_back(s);
          }
    return out;
  }();
  std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
  SepsisState s = candidates[pick(rng)];
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  s.diabetic = unif(rng) < diabetic_prob;
  return s;
}

Episode rollout(const SepsisPolicy& policy, const SepsisSimulator& sim, const EpisodeConfig& config,
                std::int64_t trajectory_id, Rng& rng) {
  Episode ep;
  if (config.max_steps <= 0) return ep;
  SepsisState s = sim.initial_state(rng, config.diabetic_prob);
  for (int step = 0; step < config.max_steps; ++step) {
    const int a = policy(s, rng);
    const SepsisStep res = sim.step(s, a, rng);
    Transition t;
    t.state = s.features();
    t.action = a;
    t.next_state = res.next.features();
    t.reward = res.reward;
    t.terminal = res.terminal != TerminalKind::kNone;
    t.trajectory = trajectory_id;
    t.step = step;
    ep.transitions.push_back(std::move(t));
    ep.state_indices.push_back(s.index());
    s = res.next;
    if (res.terminal != TerminalKind::kNone) {
      ep.outcome = res.terminal;
      break;
    }
  }
  ep.state_indices.push_back(s.index());
  if (ep.outcome == TerminalKind::kNone) ep.outcome = TerminalKind::kTimeout;
  return ep;
}

std::size_t mask_terminal_rewards(std::vector<Episode>& episodes, double mask_prob, Rng& rng) {
  if (!(mask_prob >= 0 && mask_prob <= 1)) throw InvalidArgument("mask_prob must lie in [0, 1]");
  const std::uint64_t base = rng();
  std::size_t masked = 0;
  for (auto& ep : episodes) {
    if (ep.transitions.empty()) continue;
    Rng local(derive_seed(base, static_cast<std::uint64_t>(ep.transitions.front().trajectory)));
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    if (!(unif(local) < mask_prob)) continue;
    ++masked;
    auto& last = ep.transitions.back();
    if (last.terminal) last.reward[0] = 0.0;
  }
  return masked;
}

void inject_noise(std::vector<Episode>& episodes, double noise_std, Rng& rng) {
  if (!(noise_std >= 0)) throw InvalidArgument("noise_std must be >= 0");
  const std::uint64_t base = rng();
  if (noise_std == 0) return;
  for (auto& ep : episodes) {
    if (ep.transitions.empty()) continue;
    Rng local(derive_seed(base, static_cast<std::uint64_t>(ep.transitions.front().trajectory)));
    std::normal_distribution<double> noise(0.0, noise_std);
    for (auto& t : ep.transitions)
      for (Index c = 1; c < t.reward.size(); ++c) t.reward[c] += noise(local);
  }
}

SepsisPolicy uniform_policy() {
  return [](const SepsisState&, Rng& rng) {
    std::uniform_int_distribution<int> pick(0, kSepsisActions - 1);
    return pick(rng);
  };
}

SepsisPolicy heuristic_policy() {
  return [](const SepsisState& s, Rng&) {
    int a = 0;
    if (s.heart_rate == 2 || s.blood_pressure == 2) a |= 1;
    if (s.blood_pressure == 0) a |= 2;
    if (s.oxygen == 0) a |= 4;
    return a;
  };
}

SepsisPolicy epsilon_mixture(SepsisPolicy base, double epsilon, int action_count) {
  if (!(epsilon >= 0 && epsilon <= 1)) throw InvalidArgument("epsilon must lie in [0, 1]");
  return [base = std::move(base), epsilon, action_count](const SepsisState& s, Rng& rng) {
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    if (unif(rng) < epsilon) {
      std::uniform_int_distribution<int> pick(0, action_count - 1);
      return pick(rng);
    }
    return base(s, rng);
  };
}

// ---------------------------------------------------------------- ChainMDP

ChainMDP::ChainMDP(int states, int actions, int channels, double gamma)
    : states_(states), actions_(actions), channels_(channels), gamma_(gamma) {
  if (states < 1 || actions < 1 || channels < 1) throw InvalidArgument("ChainMDP: sizes must be positive");
  if (static_cast<long>(states) * actions >= 10000) throw InvalidArgument("ChainMDP: too many state-action pairs");
  if (!(gamma >= 0 && gamma <= 1)) throw InvalidArgument("ChainMDP: gamma must lie in [0, 1]");
  const auto n = static_cast<std::size_t>(states * actions);
  next_.assign(n, 0);
  reward_.assign(n, Vector::Zero(channels));
  terminal_.assign(n, 0);
}

std::size_t ChainMDP::idx(int s, int a) const {
  if (s < 0 || s >= states_ || a < 0 || a >= actions_) throw InvalidArgument("ChainMDP: index out of range");
  return static_cast<std::size_t>(s * actions_ + a);
}

void ChainMDP::set(int state, int action, int next, Vector reward, bool terminal) {
  if (next < 0 || next >= states_) throw InvalidArgument("ChainMDP: next state out of range");
  if (reward.size() != channels_) throw ShapeError("ChainMDP: reward length must equal channel count");
  const auto i = idx(state, action);
  next_[i] = next;
  reward_[i] = std::move(reward);
  terminal_[i] = terminal ? 1 : 0;
}

Vector ChainMDP::features(int state) const {
  Vector f = Vector::Zero(states_);
  f[state] = 1;
  return f;
}

std::vector<Transition> ChainMDP::transitions() const {
  std::vector<Transition> out;
  for (int s = 0; s < states_; ++s)
    for (int a = 0; a < actions_; ++a) {
      Transition t;
      t.state = features(s);
      t.action = a;
      t.next_state = features(next(s, a));
      t.reward = reward(s, a);
      t.terminal = terminal(s, a);
      t.trajectory = s * actions_ + a;
      out.push_back(std::move(t));
    }
  return out;
}

ChainMDP ChainMDP::line(int n, double gamma, double terminal_reward) {
  ChainMDP mdp(n, 2, 1, gamma);
  for (int s = 0; s < n; ++s) {
    mdp.set(s, 0, std::max(0, s - 1), Vector::Zero(1));
    if (s + 1 < n) {
      mdp.set(s, 1, s + 1, Vector::Zero(1));
    } else {
      mdp.set(s, 1, s, Vector::Constant(1, terminal_reward), true);
    }
  }
  return mdp;
}

Matrix chain_value_iteration(const ChainMDP& mdp, const Vector& w, double tolerance, int max_iterations) {
  if (w.size() != mdp.channel_count()) throw ShapeError("chain_value_iteration: weight length != channel count");
  const int S = mdp.state_count(), A = mdp.action_count();
  Matrix r(S, A);
  for (int s = 0; s < S; ++s)
    for (int a = 0; a < A; ++a) r(s, a) = mdp.reward(s, a).dot(w);
  Matrix q = Matrix::Zero(S, A);
  for (int it = 0; it < max_iterations; ++it) {
    const Vector v = q.rowwise().maxCoeff();
    Matrix next = r;
    for (int s = 0; s < S; ++s)
      for (int a = 0; a < A; ++a)
        if (!mdp.terminal(s, a)) next(s, a) += mdp.gamma() * v[mdp.next(s, a)];
    if (!next.allFinite()) break;
    const double delta = (next - q).cwiseAbs().maxCoeff();
    q = std::move(next);
    if (delta < tolerance) return q;
  }
  throw NumericalError("chain_value_iteration did not converge; check gamma and terminal structure");
}

}  // namespace pruneq
