#include "pruneq/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <tuple>

#include "pruneq/seeding.hpp"

namespace pruneq {

TransitionDataset::TransitionDataset(Index state_dim, int action_count, int channel_count)
    : state_dim_(state_dim), action_count_(action_count), channel_count_(channel_count) {
  if (state_dim < 1 || action_count < 1 || channel_count < 1)
    throw SchemaError("dataset dimensions must be positive");
}

void TransitionDataset::add(Transition t) {
  if (state_dim_ == 0) throw SchemaError("dataset dimensions are not set");
  if (t.state.size() != state_dim_ || t.next_state.size() != state_dim_)
    throw SchemaError("state has " + std::to_string(t.state.size()) + " coordinates, dataset expects " +
                      std::to_string(state_dim_));
  if (t.reward.size() != channel_count_)
    throw SchemaError("reward has " + std::to_string(t.reward.size()) + " channels, dataset expects " +
                      std::to_string(channel_count_));
  if (t.action < 0 || t.action >= action_count_)
    throw SchemaError("action " + std::to_string(t.action) + " outside [0, " + std::to_string(action_count_) + ")");
  const bool continues = !transitions_.empty() && transitions_.back().trajectory == t.trajectory;
  if (continues) {
    const auto& prev = transitions_.back();
    if (prev.terminal) throw SchemaError("transition after a terminal step in trajectory " + std::to_string(t.trajectory));
    if (t.step <= prev.step) throw SchemaError("steps out of order in trajectory " + std::to_string(t.trajectory));
  } else {
    starts_.push_back(transitions_.size());
  }
  transitions_.push_back(std::move(t));
}

void TransitionDataset::add_trajectory(std::span<const Transition> trajectory) {
  for (const auto& t : trajectory) add(t);
}

std::span<const Transition> TransitionDataset::trajectory(std::size_t k) const {
  const std::size_t begin = starts_.at(k);
  const std::size_t end = k + 1 < starts_.size() ? starts_[k + 1] : transitions_.size();
  return {transitions_.data() + begin, end - begin};
}

Outcome TransitionDataset::outcome(std::size_t k) const {
  const auto traj = trajectory(k);
  const auto& last = traj.back();
  if (!last.terminal) return Outcome::kUnlabeled;
  if (last.reward[0] < 0) return Outcome::kDeath;
  if (last.reward[0] > 0) return Outcome::kSurvival;
  return Outcome::kUnlabeled;
}

// ---------------------------------------------------------------- JSONL

namespace {

std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

Vector from_std(const std::vector<double>& v) { return Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size())); }

}  // namespace

void save_dataset(const TransitionDataset& dataset, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  if (dataset.state_dim() > 0) {
    nlohmann::json meta{{"state_dim", dataset.state_dim()},
                        {"action_count", dataset.action_count()},
                        {"channel_count", dataset.channel_count()},
                        {"generator", dataset.generator}};
    out << nlohmann::json{{"meta", meta}}.dump() << '\n';
  }
  for (const auto& t : dataset.transitions()) {
    nlohmann::json j{{"traj", t.trajectory}, {"step", t.step},       {"s", to_std(t.state)},
                     {"a", t.action},        {"s2", to_std(t.next_state)}, {"r", to_std(t.reward)},
                     {"terminal", t.terminal}};
    out << j.dump() << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

TransitionDataset parse_dataset(std::istream& in, const std::string& name) {
  TransitionDataset dataset;
  std::vector<Transition> pending;  // records seen before the dimensions are known
  bool have_meta = false;
  int max_action = -1;
  std::string text;
  std::size_t line_no = 0;
  while (std::getline(in, text)) {
    ++line_no;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = name + ":" + std::to_string(line_no) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(where + "malformed JSON (" + e.what() + ")");
    }
    try {
      if (j.contains("meta")) {
        if (line_no != 1 || have_meta) throw ParseError("meta record must be the first line");
        const auto& m = j.at("meta");
        dataset = TransitionDataset(m.at("state_dim").get<Index>(), m.at("action_count").get<int>(),
                                    m.at("channel_count").get<int>());
        if (m.contains("generator")) dataset.generator = m.at("generator");
        have_meta = true;
        continue;
      }
      for (const char* key : {"traj", "step", "s", "a", "s2", "r", "terminal"})
        if (!j.contains(key)) throw ParseError(std::string("missing field '") + key + "'");
      Transition t;
      t.trajectory = j.at("traj").get<std::int64_t>();
      t.step = j.at("step").get<int>();
      t.state = from_std(j.at("s").get<std::vector<double>>());
      t.action = j.at("a").get<int>();
      t.next_state = from_std(j.at("s2").get<std::vector<double>>());
      t.reward = from_std(j.at("r").get<std::vector<double>>());
      t.terminal = j.at("terminal").get<bool>();
      if (t.action < 0) throw SchemaError("negative action");
      if (have_meta) {
        dataset.add(std::move(t));
      } else {
        max_action = std::max(max_action, t.action);
        pending.push_back(std::move(t));
      }
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(where + e.what());
    } catch (const SchemaError& e) {
      throw SchemaError(where + e.what());
    } catch (const ParseError& e) {
      throw ParseError(where + e.what());
    }
  }
  if (!have_meta && !pending.empty()) {
    dataset = TransitionDataset(pending.front().state.size(), max_action + 1,
                                static_cast<int>(pending.front().reward.size()));
    for (auto& t : pending) dataset.add(std::move(t));
  }
  return dataset;
}

TransitionDataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingPrerequisite("dataset not found: " + path + " (run gen-data first)");
  return parse_dataset(in, path);
}

// ---------------------------------------------------------------- split

std::array<std::size_t, 3> split_sizes(std::size_t n, std::array<double, 3> fractions) {
  double total = 0;
  for (double f : fractions) {
    if (!(f >= 0)) throw InvalidArgument("split fractions must be nonnegative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw InvalidArgument("split fractions must sum to 1");
  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> remainder{};
  std::size_t assigned = 0;
  for (int i = 0; i < 3; ++i) {
    const double exact = fractions[i] * static_cast<double>(n);
    sizes[i] = static_cast<std::size_t>(std::floor(exact));
    remainder[i] = exact - std::floor(exact);
    assigned += sizes[i];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return remainder[a] > remainder[b]; });
  for (int k = 0; assigned < n; k = (k + 1) % 3) {
    if (fractions[order[k]] == 0) continue;
    ++sizes[order[k]];
    ++assigned;
  }
  return sizes;
}

std::array<TransitionDataset, 3> split(const TransitionDataset& dataset, std::array<double, 3> fractions,
                                       std::uint64_t seed) {
  const std::size_t n = dataset.trajectory_count();
  const auto sizes = split_sizes(n, fractions);
  const auto nonzero = static_cast<std::size_t>(std::count_if(fractions.begin(), fractions.end(),
                                                              [](double f) { return f > 0; }));
  if (n < nonzero)
    throw InvalidArgument("split: " + std::to_string(n) + " trajectories cannot fill " + std::to_string(nonzero) +
                          " splits");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  static const std::array<const char*, 3> tags{"train", "validation", "test"};
  std::array<TransitionDataset, 3> parts;
  std::size_t cursor = 0;
  for (int p = 0; p < 3; ++p) {
    std::vector<std::size_t> chosen(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                                    order.begin() + static_cast<std::ptrdiff_t>(cursor + sizes[p]));
    cursor += sizes[p];
    // Keep the original trajectory order inside each split.
    std::sort(chosen.begin(), chosen.end());
    if (dataset.state_dim() > 0)
      parts[p] = TransitionDataset(dataset.state_dim(), dataset.action_count(), dataset.channel_count());
    parts[p].generator = dataset.generator;
    parts[p].split_tag = tags[p];
    for (std::size_t k : chosen) parts[p].add_trajectory(dataset.trajectory(k));
  }
  return parts;
}

// ---------------------------------------------------------------- behavior

namespace {

struct Design {
  Matrix x;
  std::vector<int> y;
};

Design design_matrix(const TransitionDataset& data) {
  Design d;
  d.x.resize(static_cast<Index>(data.size()), data.state_dim());
  d.y.reserve(data.size());
  Index i = 0;
  for (const auto& t : data.transitions()) {
    d.x.row(i++) = t.state.transpose();
    d.y.push_back(t.action);
  }
  return d;
}

std::pair<double, double> loss_accuracy(const BehaviorModel& model, const Design& d) {
  if (d.y.empty()) return {0.0, 0.0};
  const Matrix p = model.predict_probs(d.x);
  double loss = 0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < d.y.size(); ++i) {
    const auto row = p.row(static_cast<Index>(i));
    loss -= std::log(row[d.y[i]]);
    Index best = 0;
    row.maxCoeff(&best);
    if (best == d.y[i]) ++hits;
  }
  const double n = static_cast<double>(d.y.size());
  return {loss / n, static_cast<double>(hits) / n};
}

}  // namespace

std::pair<double, double> behavior_loss_accuracy(const BehaviorModel& model, const TransitionDataset& data) {
  return loss_accuracy(model, design_matrix(data));
}

constexpr double kMinActionFrequency = 1e-4;

BehaviorFit fit_behavior(const TransitionDataset& train, const TransitionDataset* validation,
                         const BehaviorFitOptions& options) {
  if (train.empty()) throw InvalidArgument("fit_behavior: empty training set");
  if (!(options.learning_rate > 0) || options.epochs < 0 || options.patience < 1 || options.l2 < 0)
    throw InvalidArgument("fit_behavior: bad options");
  const Design tr = design_matrix(train);
  const bool use_val = validation && !validation->empty();
  Design va;
  if (use_val) va = design_matrix(*validation);

  BehaviorFit fit;
  fit.model = BehaviorModel::zeros(train.state_dim(), train.action_count());
  // Start from the intercept-only fit: log action frequencies, floored.
  {
    Vector freq = Vector::Zero(train.action_count());
    for (int a : tr.y) freq[a] += 1;
    freq /= static_cast<double>(tr.y.size());
    auto& bias = fit.model.network().layers()[0].bias;
    for (Index a = 0; a < freq.size(); ++a) bias[a] = std::log(std::max(freq[a], kMinActionFrequency));
  }
  BehaviorModel best = fit.model;
  double best_val = use_val ? loss_accuracy(fit.model, va).first : 0.0;
  double prev_val = best_val;
  int rising = 0;
  const double inv_n = 1.0 / static_cast<double>(tr.y.size());
  Matrix onehot = Matrix::Zero(tr.x.rows(), train.action_count());
  for (std::size_t i = 0; i < tr.y.size(); ++i) onehot(static_cast<Index>(i), tr.y[i]) = 1.0;

  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    auto& layer = fit.model.network().layers()[0];
    const Matrix p = fit.model.predict_probs(tr.x);
    fit.train_loss_history.push_back(-(onehot.array() * p.array().log()).sum() * inv_n);
    const Matrix g = (p - onehot) * inv_n;
    Matrix gw = tr.x.transpose() * g;
    if (options.l2 > 0) gw += options.l2 * layer.weight;
    layer.weight -= options.learning_rate * gw;
    layer.bias -= options.learning_rate * g.colwise().sum();
    fit.epochs_run = epoch + 1;
    if (use_val) {
      const double val = loss_accuracy(fit.model, va).first;
      if (val < best_val) {
        best_val = val;
        best = fit.model;
      }
      rising = val > prev_val ? rising + 1 : 0;
      prev_val = val;
      if (rising >= options.patience) break;
    }
  }
  if (use_val) fit.model = best;
  std::tie(fit.train_loss, fit.train_accuracy) = loss_accuracy(fit.model, tr);
  if (use_val) std::tie(fit.validation_loss, fit.validation_accuracy) = loss_accuracy(fit.model, va);
  return fit;
}

// ---------------------------------------------------------------- generation

SepsisPolicy BehaviorSpec::policy() const {
  if (!(epsilon >= 0 && epsilon <= 1)) throw ConfigError("behavior epsilon must lie in [0, 1]");
  if (kind == "uniform") return uniform_policy();
  if (kind == "heuristic") return epsilon > 0 ? epsilon_mixture(heuristic_policy(), epsilon) : heuristic_policy();
  throw ConfigError("unknown behavior policy '" + kind + "' (expected uniform or heuristic)");
}

nlohmann::json BehaviorSpec::to_json() const { return {{"kind", kind}, {"epsilon", epsilon}}; }

TransitionDataset generate_offline_dataset(const SepsisSimulator& sim, const BehaviorSpec& behavior,
                                           std::size_t n_trajectories, const EpisodeConfig& config, Rng& rng) {
  config.validate();
  const SepsisPolicy policy = behavior.policy();
  const std::uint64_t rollout_base = rng();
  std::vector<Episode> episodes;
  episodes.reserve(n_trajectories);
  for (std::size_t k = 0; k < n_trajectories; ++k) {
    Rng local(derive_seed(rollout_base, static_cast<std::uint64_t>(k)));
    episodes.push_back(rollout(policy, sim, config, static_cast<std::int64_t>(k), local));
  }
  const std::size_t masked = mask_terminal_rewards(episodes, config.terminal_reward_mask_prob, rng);
  inject_noise(episodes, config.noise_std, rng);

  TransitionDataset data(SepsisState::kFeatureDim, kSepsisActions, kSepsisChannels);
  data.generator = {{"environment", "sepsis"},
                    {"behavior", behavior.to_json()},
                    {"trajectories", n_trajectories},
                    {"max_steps", config.max_steps},
                    {"mask_prob", config.terminal_reward_mask_prob},
                    {"masked_trajectories", masked},
                    {"noise_std", config.noise_std},
                    {"diabetic_prob", config.diabetic_prob}};
  for (const auto& ep : episodes) data.add_trajectory(ep.transitions);
  return data;
}

}  // namespace pruneq
