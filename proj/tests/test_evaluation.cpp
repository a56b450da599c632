#include "doctest.h"

#include <cmath>

#include "pruneq/dataset.hpp"
#include "pruneq/evaluation.hpp"
#include "tabular.hpp"

using namespace pruneq;

namespace {

// One-step trajectories on a single state: the two-action bandit.
TransitionDataset bandit(int n, const Vector& behavior, const Vector& win_prob, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  TransitionDataset d(1, 2, 1);
  for (int k = 0; k < n; ++k) {
    Transition t;
    t.trajectory = k;
    t.state = Vector::Ones(1);
    t.next_state = Vector::Ones(1);
    t.action = u(rng) < behavior[0] ? 0 : 1;
    t.reward = Vector::Constant(1, u(rng) < win_prob[t.action] ? 100.0 : -100.0);
    t.terminal = true;
    d.add(t);
  }
  return d;
}

// Trajectories of random length ending in death or survival; state carries
// the trajectory id so Q can be written as a function of it.
TransitionDataset outcomes(int n, std::uint64_t seed, double death_rate = 0.3, double unlabeled = 0.0) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  std::uniform_int_distribution<int> len(1, 6);
  TransitionDataset d(2, 3, 1);
  for (int k = 0; k < n; ++k) {
    const bool death = u(rng) < death_rate;
    const bool labeled = u(rng) >= unlabeled;
    const int steps = len(rng);
    for (int i = 0; i < steps; ++i) {
      Transition t;
      t.trajectory = k;
      t.step = i;
      t.state = Vector(2);
      t.state << k, death ? -1 : 1;
      t.next_state = t.state;
      t.action = i % 3;
      t.reward = Vector::Zero(1);
      t.terminal = labeled && i + 1 == steps;
      if (t.terminal) t.reward[0] = death ? -100 : 100;
      d.add(t);
    }
  }
  return d;
}

std::vector<double> q_by_outcome(const TransitionDataset& d) {
  std::vector<double> q;
  for (const auto& t : d.transitions()) q.push_back(t.state[1]);
  return q;
}

}  // namespace

TEST_CASE("wis: evaluation equal to behavior recovers the empirical mean return") {
  const SepsisSimulator sim;
  EpisodeConfig cfg;
  Rng rng(1);
  const TransitionDataset d = generate_offline_dataset(sim, {"heuristic", 0.5}, 3000, cfg, rng);
  const BehaviorFit fit = fit_behavior(d);
  const ActionProbs b = [&](const Eigen::Ref<const Vector>& s) { return fit.model.action_probs(s); };
  const WisResult r = wis(d, b, b);
  double mean = 0;
  for (std::size_t k = 0; k < d.trajectory_count(); ++k)
    for (const auto& t : d.trajectory(k)) mean += t.reward[0];
  mean /= static_cast<double>(d.trajectory_count());
  CHECK(std::abs(r.value - mean) < 1e-9);
  CHECK(r.effective_sample_size == doctest::Approx(3000));
}

TEST_CASE("wis: closed-form bandit value") {
  Vector pb(2), pe(2), win(2);
  pb << 0.4, 0.6;
  pe << 0.2, 0.8;
  win << 0.6, 0.3;
  const double truth = pe[0] * (200 * win[0] - 100) + pe[1] * (200 * win[1] - 100);
  const TransitionDataset d = bandit(100000, pb, win, 2);
  const WisResult r = wis(d, [&](const Eigen::Ref<const Vector>&) { return pe; },
                          [&](const Eigen::Ref<const Vector>&) { return pb; });
  CHECK(std::abs(r.value - truth) < 1.0);
}

TEST_CASE("wis: single trajectory, weight scaling and clipping") {
  Vector pb(2), pe(2), win(2);
  pb << 0.5, 0.5;
  pe << 0.9, 0.1;
  win << 1, 0;
  const auto e = [&](const Eigen::Ref<const Vector>&) { return pe; };
  const auto b = [&](const Eigen::Ref<const Vector>&) { return pb; };
  const TransitionDataset one = bandit(1, pb, win, 3);
  CHECK(wis(one, e, b).value == one.transitions()[0].reward[0]);

  // Scaling every behavior probability scales every weight equally.
  const TransitionDataset d = bandit(500, pb, win, 4);
  const auto b_scaled = [&](const Eigen::Ref<const Vector>&) { return Vector(pb * 0.5); };
  CHECK(wis(d, e, b).value == doctest::Approx(wis(d, e, b_scaled).value).epsilon(1e-12));

  WisOptions clip;
  clip.clip = 1.2;
  const WisResult clipped = wis(d, e, b, clip);
  CHECK(clipped.clipped_steps > 0);
  CHECK(clipped.max_ratio <= wis(d, e, b).max_ratio);
}

TEST_CASE("wis: softened greedy policy against a behavior model") {
  Network net = tabular::network(1, 2);
  net.layers()[0].weight << 0, 1;
  const SoftenedPolicy policy{greedy_policy(net), 0.01, 2};
  const Vector p = policy.probs(Vector::Ones(1));
  CHECK(p[1] == doctest::Approx(0.99));
  CHECK(p[0] == doctest::Approx(0.01));
  Vector pb(2), win(2);
  pb << 0.5, 0.5;
  win << 0.2, 0.7;
  const TransitionDataset d = bandit(20000, pb, win, 5);
  const WisResult r = wis(d, policy, BehaviorModel::zeros(1, 2));
  CHECK(r.value == doctest::Approx(0.01 * -60 + 0.99 * 40).epsilon(0.05));
}

TEST_CASE("delta_mr: perfect separation, constant Q and monotone invariance") {
  const TransitionDataset d = outcomes(4000, 6);
  const auto q = q_by_outcome(d);
  // 30% deaths all in the bottom quartile; the top quartile holds only survivors.
  CHECK(delta_mr(d, q) == 100);

  double total = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const TransitionDataset c = outcomes(10000, 100 + seed);
    total += delta_mr(c, std::vector<double>(c.size(), 3.0));
  }
  CHECK(std::abs(total / 10) < 2);

  Rng rng(7);
  std::normal_distribution<double> n(0, 1);
  std::vector<double> noisy;
  for (const auto& t : d.transitions()) noisy.push_back(t.state[1] + n(rng));
  std::vector<double> transformed;
  for (double x : noisy) transformed.push_back(std::exp(3 * x) - 7);
  CHECK(delta_mr(d, transformed) == delta_mr(d, noisy));

  CHECK_THROWS_AS(delta_mr(outcomes(1, 1, 0.5, 1.0), std::vector<double>(outcomes(1, 1, 0.5, 1.0).size(), 0.0)),
                  InvalidArgument);
  CHECK_THROWS_AS(delta_mr(d, std::vector<double>(3, 0.0)), ShapeError);
}

TEST_CASE("delta_mr: unlabeled trajectories are excluded") {
  const TransitionDataset d = outcomes(4000, 8, 0.3, 0.5);
  CHECK(delta_mr(d, q_by_outcome(d)) == 100);
}

TEST_CASE("prune_stats: full table, random singletons, monotone recall") {
  const SepsisSimulator sim;
  EpisodeConfig cfg;
  Rng rng(9);
  const TransitionDataset d = generate_offline_dataset(sim, {"uniform", 0.0}, 3000, cfg, rng);
  const auto& states = sepsis_state_features();
  const PruneTable full = PruneTable::full(states, 8);
  const PruneStats fs = prune_stats(full, d);
  CHECK(fs.mean_size == 8);
  CHECK(fs.recall == 1);
  CHECK(fs.fallbacks == 0);

  PruneTable singles(8, 40, 24), pairs(8, 40, 24);
  std::uniform_int_distribution<int> pick(0, 7);
  for (const auto& s : states) {
    const int a = pick(rng);
    singles.insert(state_key(s), ActionSet::single(a));
    pairs.insert(state_key(s), ActionSet::from_vector({a, (a + 1) % 8}));
  }
  const PruneStats ss = prune_stats(singles, d), ps = prune_stats(pairs, d);
  CHECK(std::abs(ss.recall - 0.125) < 0.015);
  CHECK(ss.recall <= ps.recall);
  CHECK(ps.recall <= fs.recall);
}

TEST_CASE("behavior_overlap: replay and chance level") {
  const TransitionDataset d = bandit(1000, Vector::Constant(2, 0.5), Vector::Constant(2, 0.5), 10);
  std::size_t i = 0;
  const auto& ts = d.transitions();
  CHECK(behavior_overlap([&](const Eigen::Ref<const Vector>&) { return ts[i++].action; }, d) == 100);

  TransitionDataset wide(1, 25, 1);
  Rng rng(11);
  std::uniform_int_distribution<int> pick(0, 24);
  for (int k = 0; k < 40000; ++k) {
    Transition t;
    t.trajectory = k;
    t.state = Vector::Ones(1);
    t.next_state = t.state;
    t.action = pick(rng);
    t.reward = Vector::Zero(1);
    t.terminal = true;
    wide.add(t);
  }
  const double overlap = behavior_overlap([&](const Eigen::Ref<const Vector>&) { return pick(rng); }, wide);
  CHECK(std::abs(overlap - 4.0) < 0.5);
}

TEST_CASE("survival_percentile_curve: step function, flat curve and rank statistic") {
  const TransitionDataset d = outcomes(5000, 12);
  const PercentileCurve step = survival_percentile_curve(d, q_by_outcome(d));
  REQUIRE(step.bin.size() == 100);
  CHECK(step.survival_rate.front() == 0);
  CHECK(step.survival_rate.back() == 100);
  for (std::size_t b = 1; b < 100; ++b) CHECK(step.survival_rate[b] >= step.survival_rate[b - 1]);
  CHECK(step.spearman > 0.8);
  CHECK(!step.coarse);

  const PercentileCurve flat = survival_percentile_curve(d, std::vector<double>(d.size(), 1.0));
  double mean = 0;
  for (double r : flat.survival_rate) mean += r;
  CHECK(mean / 100 == doctest::Approx(70).epsilon(0.05));

  const TransitionDataset small = outcomes(40, 13);
  const PercentileCurve coarse = survival_percentile_curve(small, q_by_outcome(small));
  CHECK(coarse.coarse);
  CHECK(coarse.bin.size() == 40);
}

TEST_CASE("spearman: ties and perfect orderings") {
  CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1));
  CHECK(spearman({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1));
  CHECK(spearman({1, 1, 2, 2}, {1, 1, 2, 2}) == doctest::Approx(1));
}

TEST_CASE("rollout_return: bounded, lethal policy, 1/sqrt(n) standard error") {
  const SepsisSimulator sim;
  EpisodeConfig cfg;
  Rng rng(14);
  const ReturnEstimate r = rollout_return(uniform_policy(), sim, 400, cfg, rng);
  CHECK(r.mean >= -100);
  CHECK(r.mean <= 100);
  CHECK(r.episodes == 400);

  SepsisTransitionTable t;
  t.vasopressors_diabetic_bp_up = 1;
  t.vasopressors_diabetic_glucose_up = 1;
  t.ventilation_withdrawn_o2_normal_to_low = 1;
  t.ventilation_o2_low_to_normal = 0;
  EpisodeConfig diabetic = cfg;
  diabetic.diabetic_prob = 1;
  const SepsisPolicy lethal = [](const SepsisState& s, Rng&) { return s.ventilation ? 2 : 6; };
  CHECK(rollout_return(lethal, SepsisSimulator(t), 100, diabetic, rng).mean == -100);

  double se100 = 0, se400 = 0;
  for (int rep = 0; rep < 10; ++rep) {
    se100 += rollout_return(uniform_policy(), sim, 100, cfg, rng).stderr_;
    se400 += rollout_return(uniform_policy(), sim, 400, cfg, rng).stderr_;
  }
  CHECK(se100 / se400 == doctest::Approx(2.0).epsilon(0.15));
}

TEST_CASE("tabulated greedy policy matches the network") {
  Rng rng(15);
  TrainerConfig cfg;
  cfg.hidden_width = 16;
  const QAgent agent = QAgent::create(SepsisState::kFeatureDim, 8, cfg, rng);
  const auto actions = tabulate_sepsis_policy(agent.online);
  const StatePolicy greedy = greedy_policy(agent.online);
  for (int i = 0; i < SepsisState::kCount; i += 37)
    CHECK(actions[i] == greedy(SepsisState::from_index(i).features()));
}

TEST_CASE("reports: aggregation and CSV") {
  EvaluationReport a, b;
  a.policy = b.policy = "pruned_cql";
  a.seed = 0;
  b.seed = 1;
  a.wis_value = 10;
  b.wis_value = 20;
  a.delta_mr = 5;
  const auto agg = aggregate_reports({a, b});
  CHECK(agg["wis"]["mean"] == 15);
  CHECK(agg["wis"]["stderr"].get<double>() == doctest::Approx(5));
  CHECK(agg["delta_mr"]["n"] == 1);
  const std::string csv = reports_csv({a, b});
  CHECK(csv.find("pruned_cql,0") != std::string::npos);
  CHECK(mean_stderr({1, 1, 1}).second == 0);
}
