#include "pruneq/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "pruneq/pruned.hpp"
#include "pruneq/seeding.hpp"

namespace pruneq {

Vector SoftenedPolicy::probs(const Eigen::Ref<const Vector>& state) const {
  return soften(base(state), epsilon, action_count);
}

ActionProbs SoftenedPolicy::as_probs() const {
  return [self = *this](const Eigen::Ref<const Vector>& s) { return self.probs(s); };
}

StatePolicy greedy_policy(const Network& q_net, const PruneTable* table) {
  return [&q_net, table](const Eigen::Ref<const Vector>& s) {
    return table ? greedy_action(q_net, s, *table) : greedy_action(q_net, s, ActionSet{});
  };
}

// ---------------------------------------------------------------- WIS

WisResult wis(const TransitionDataset& data, const ActionProbs& eval_policy, const ActionProbs& behavior,
              const WisOptions& options) {
  if (options.clip < 0) throw InvalidArgument("wis: clip must be >= 0");
  const std::size_t n = data.trajectory_count();
  if (n == 0) throw InvalidArgument("wis: empty dataset");
  const double log_clip = options.clip > 0 ? std::log(options.clip) : std::numeric_limits<double>::infinity();
  std::vector<double> log_w(n), returns(n);
  WisResult result;
  result.trajectories = n;
  for (std::size_t k = 0; k < n; ++k) {
    double lw = 0, g = 0, discount = 1;
    for (const auto& t : data.trajectory(k)) {
      const double pe = eval_policy(t.state)[t.action];
      const double pb = behavior(t.state)[t.action];
      if (!(pb > 0)) throw NumericalError("wis: behavior probability of a logged action is zero");
      double step = std::log(pe) - std::log(pb);
      if (step > log_clip) {
        step = log_clip;
        ++result.clipped_steps;
      }
      lw += step;
      g += discount * t.reward[0];
      discount *= options.gamma;
    }
    log_w[k] = lw;
    returns[k] = g;
  }
  const double top = *std::max_element(log_w.begin(), log_w.end());
  if (!std::isfinite(top)) throw NumericalError("wis: every trajectory has zero weight; estimate undefined");
  double sum_w = 0, sum_w2 = 0, sum_wg = 0, max_w = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const double w = std::exp(log_w[k] - top);
    sum_w += w;
    sum_w2 += w * w;
    sum_wg += w * returns[k];
    max_w = std::max(max_w, w);
  }
  result.value = sum_wg / sum_w;
  result.effective_sample_size = sum_w * sum_w / sum_w2;
  result.max_ratio = max_w / (sum_w / static_cast<double>(n));
  return result;
}

WisResult wis(const TransitionDataset& data, const SoftenedPolicy& eval_policy, const BehaviorModel& behavior,
              const WisOptions& options) {
  return wis(
      data, eval_policy.as_probs(), [&behavior](const Eigen::Ref<const Vector>& s) { return behavior.action_probs(s); },
      options);
}

// ---------------------------------------------------------------- Q-based metrics

std::vector<double> taken_action_values(const TransitionDataset& data, const Network& q_net) {
  std::vector<double> out;
  out.reserve(data.size());
  constexpr std::size_t kChunk = 4096;
  const auto& ts = data.transitions();
  for (std::size_t begin = 0; begin < ts.size(); begin += kChunk) {
    const std::size_t end = std::min(ts.size(), begin + kChunk);
    Matrix x(static_cast<Index>(end - begin), data.state_dim());
    for (std::size_t i = begin; i < end; ++i) x.row(static_cast<Index>(i - begin)) = ts[i].state.transpose();
    const Matrix q = forward(q_net, x);
    for (std::size_t i = begin; i < end; ++i) out.push_back(q(static_cast<Index>(i - begin), ts[i].action));
  }
  return out;
}

namespace {

struct LabeledPair {
  double q;
  std::int64_t trajectory;
  int step;
  bool death;
};

}  // namespace

double delta_mr(const TransitionDataset& data, const std::vector<double>& q_values) {
  if (q_values.size() != data.size()) throw ShapeError("delta_mr: one Q-value per transition required");
  std::vector<LabeledPair> pairs;
  std::size_t offset = 0;
  for (std::size_t k = 0; k < data.trajectory_count(); ++k) {
    const auto traj = data.trajectory(k);
    const Outcome outcome = data.outcome(k);
    if (outcome != Outcome::kUnlabeled)
      for (std::size_t i = 0; i < traj.size(); ++i) {
        if (!std::isfinite(q_values[offset + i])) throw NumericalError("delta_mr: non-finite Q-value");
        pairs.push_back({q_values[offset + i], traj[i].trajectory, traj[i].step, outcome == Outcome::kDeath});
      }
    offset += traj.size();
  }
  if (pairs.size() < 4)
    throw InvalidArgument("delta_mr: need at least 4 labeled state-action pairs, have " + std::to_string(pairs.size()));
  std::sort(pairs.begin(), pairs.end(), [](const LabeledPair& a, const LabeledPair& b) {
    if (a.q != b.q) return a.q < b.q;
    if (a.trajectory != b.trajectory) return a.trajectory < b.trajectory;
    return a.step < b.step;
  });
  const std::size_t quarter = pairs.size() / 4;
  std::size_t low_deaths = 0, high_deaths = 0;
  for (std::size_t i = 0; i < quarter; ++i) {
    low_deaths += pairs[i].death;
    high_deaths += pairs[pairs.size() - 1 - i].death;
  }
  return 100.0 * (static_cast<double>(low_deaths) - static_cast<double>(high_deaths)) / static_cast<double>(quarter);
}

double delta_mr(const TransitionDataset& data, const Network& q_net) {
  return delta_mr(data, taken_action_values(data, q_net));
}

PruneStats prune_stats(const PruneTable& table, const TransitionDataset& data) {
  PruneStats stats;
  if (data.empty()) return stats;
  double size = 0;
  std::size_t hits = 0;
  for (const auto& t : data.transitions()) {
    const ActionSet allowed = table.allowed(t.state, &stats.fallbacks);
    size += allowed.size();
    hits += allowed.contains(t.action);
  }
  const double n = static_cast<double>(data.size());
  stats.mean_size = size / n;
  stats.recall = static_cast<double>(hits) / n;
  return stats;
}

double behavior_overlap(const StatePolicy& policy, const TransitionDataset& data) {
  if (data.empty()) return 0.0;
  std::size_t same = 0;
  for (const auto& t : data.transitions()) same += policy(t.state) == t.action;
  return 100.0 * static_cast<double>(same) / static_cast<double>(data.size());
}

std::vector<std::size_t> action_histogram(const StatePolicy& policy, const TransitionDataset& data) {
  std::vector<std::size_t> counts(static_cast<std::size_t>(data.action_count()), 0);
  for (const auto& t : data.transitions()) ++counts.at(static_cast<std::size_t>(policy(t.state)));
  return counts;
}

std::vector<std::size_t> logged_action_histogram(const TransitionDataset& data) {
  std::vector<std::size_t> counts(static_cast<std::size_t>(data.action_count()), 0);
  for (const auto& t : data.transitions()) ++counts[static_cast<std::size_t>(t.action)];
  return counts;
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j);
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ShapeError("spearman: length mismatch");
  if (x.size() < 2) return 0.0;
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const Eigen::Map<const Vector> a(rx.data(), static_cast<Index>(rx.size())), b(ry.data(), static_cast<Index>(ry.size()));
  const Vector ca = a.array() - a.mean(), cb = b.array() - b.mean();
  const double denom = std::sqrt(ca.squaredNorm() * cb.squaredNorm());
  return denom > 0 ? ca.dot(cb) / denom : 0.0;
}

PercentileCurve survival_percentile_curve(const TransitionDataset& data, const std::vector<double>& q_values) {
  if (q_values.size() != data.size()) throw ShapeError("survival_percentile_curve: one Q-value per transition required");
  struct Row {
    double mean_q;
    std::int64_t trajectory;
    bool survived;
  };
  std::vector<Row> rows;
  std::size_t offset = 0;
  for (std::size_t k = 0; k < data.trajectory_count(); ++k) {
    const auto traj = data.trajectory(k);
    const Outcome outcome = data.outcome(k);
    if (outcome != Outcome::kUnlabeled) {
      double sum = 0;
      for (std::size_t i = 0; i < traj.size(); ++i) sum += q_values[offset + i];
      rows.push_back({sum / static_cast<double>(traj.size()), traj.front().trajectory, outcome == Outcome::kSurvival});
    }
    offset += traj.size();
  }
  PercentileCurve curve;
  if (rows.empty()) return curve;
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    return a.mean_q != b.mean_q ? a.mean_q < b.mean_q : a.trajectory < b.trajectory;
  });
  const std::size_t n = rows.size();
  const std::size_t bins = std::min<std::size_t>(100, n);
  curve.coarse = n < 100;
  std::vector<std::size_t> survived(bins, 0);
  curve.count.assign(bins, 0);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t b = r * bins / n;
    ++curve.count[b];
    survived[b] += rows[r].survived;
  }
  std::vector<double> bin_index;
  for (std::size_t b = 0; b < bins; ++b) {
    curve.bin.push_back(static_cast<int>(b));
    curve.survival_rate.push_back(100.0 * static_cast<double>(survived[b]) / static_cast<double>(curve.count[b]));
    bin_index.push_back(static_cast<double>(b));
  }
  curve.spearman = spearman(bin_index, curve.survival_rate);
  return curve;
}

// ---------------------------------------------------------------- rollouts

ReturnEstimate rollout_return(const SepsisPolicy& policy, const SepsisSimulator& sim, std::size_t n_episodes,
                              const EpisodeConfig& config, Rng& rng) {
  if (n_episodes == 0) throw InvalidArgument("rollout_return: need at least one episode");
  const std::uint64_t base = rng();
  std::vector<double> returns;
  returns.reserve(n_episodes);
  for (std::size_t k = 0; k < n_episodes; ++k) {
    Rng local(derive_seed(base, static_cast<std::uint64_t>(k)));
    const Episode ep = rollout(policy, sim, config, static_cast<std::int64_t>(k), local);
    double g = 0;
    for (const auto& t : ep.transitions) g += t.reward[0];
    returns.push_back(g);
  }
  const auto [mean, se] = mean_stderr(returns);
  return {mean, se, n_episodes};
}

const std::vector<Vector>& sepsis_state_features() {
  static const std::vector<Vector> features = [] {
    std::vector<Vector> out;
    out.reserve(SepsisState::kCount);
    for (int i = 0; i < SepsisState::kCount; ++i) out.push_back(SepsisState::from_index(i).features());
    return out;
  }();
  return features;
}

std::vector<int> tabulate_sepsis_policy(const Network& q_net, const PruneTable* table) {
  const auto& features = sepsis_state_features();
  Matrix x(SepsisState::kCount, SepsisState::kFeatureDim);
  for (int i = 0; i < SepsisState::kCount; ++i) x.row(i) = features[static_cast<std::size_t>(i)].transpose();
  const Matrix q = forward(q_net, x);
  std::vector<int> actions(SepsisState::kCount);
  for (int i = 0; i < SepsisState::kCount; ++i) {
    const ActionSet allowed = table ? table->allowed(features[static_cast<std::size_t>(i)]) : ActionSet{};
    actions[static_cast<std::size_t>(i)] = restricted_argmax(q.row(i), allowed);
  }
  return actions;
}

SepsisPolicy table_policy(std::vector<int> actions) {
  if (actions.size() != static_cast<std::size_t>(SepsisState::kCount))
    throw ShapeError("table_policy: need one action per sepsis state");
  return [actions = std::move(actions)](const SepsisState& s, Rng&) {
    return actions[static_cast<std::size_t>(s.index())];
  };
}

// ---------------------------------------------------------------- reports

std::pair<double, double> mean_stderr(const std::vector<double>& values) {
  if (values.empty()) return {0.0, 0.0};
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() < 2) return {mean, 0.0};
  double ss = 0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / (n - 1) / n)};
}

namespace {

const std::vector<std::pair<const char*, std::optional<double> EvaluationReport::*>>& metric_fields() {
  static const std::vector<std::pair<const char*, std::optional<double> EvaluationReport::*>> fields{
      {"wis", &EvaluationReport::wis_value},
      {"wis_ess", &EvaluationReport::wis_ess},
      {"delta_mr", &EvaluationReport::delta_mr},
      {"mean_prune_size", &EvaluationReport::mean_prune_size},
      {"prune_recall", &EvaluationReport::prune_recall},
      {"behavior_overlap", &EvaluationReport::behavior_overlap},
      {"rollout_mean", &EvaluationReport::rollout_mean},
      {"rollout_stderr", &EvaluationReport::rollout_stderr},
  };
  return fields;
}

}  // namespace

nlohmann::json EvaluationReport::to_json() const {
  nlohmann::json j{{"policy", policy}, {"seed", seed}};
  for (const auto& [name, field] : metric_fields())
    if ((this->*field).has_value()) j[name] = *(this->*field);
  if (percentile_curve) {
    j["percentile_curve"] = {{"bin", percentile_curve->bin},
                             {"survival_rate", percentile_curve->survival_rate},
                             {"count", percentile_curve->count},
                             {"spearman", percentile_curve->spearman},
                             {"coarse", percentile_curve->coarse}};
  }
  if (!action_histogram.empty()) j["action_histogram"] = action_histogram;
  if (!provenance.is_null()) j["provenance"] = provenance;
  return j;
}

nlohmann::json aggregate_reports(const std::vector<EvaluationReport>& reports) {
  nlohmann::json out = nlohmann::json::object();
  std::vector<std::uint64_t> seeds;
  for (const auto& r : reports) seeds.push_back(r.seed);
  out["seeds"] = seeds;
  for (const auto& [name, field] : metric_fields()) {
    std::vector<double> values;
    for (const auto& r : reports)
      if ((r.*field).has_value()) values.push_back(*(r.*field));
    if (values.empty()) continue;
    const auto [mean, se] = mean_stderr(values);
    out[name] = {{"mean", mean}, {"stderr", se}, {"n", values.size()}};
  }
  return out;
}

std::string reports_csv(const std::vector<EvaluationReport>& reports) {
  std::ostringstream out;
  out.precision(17);
  out << "policy,seed";
  for (const auto& [name, field] : metric_fields()) out << ',' << name;
  out << '\n';
  for (const auto& r : reports) {
    out << r.policy << ',' << r.seed;
    for (const auto& [name, field] : metric_fields()) {
      out << ',';
      if ((r.*field).has_value()) out << *(r.*field);
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace pruneq
