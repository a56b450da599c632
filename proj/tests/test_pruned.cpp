#include "doctest.h"

#include "pruneq/pruned.hpp"
#include "pruneq/training.hpp"
#include "tabular.hpp"

using namespace pruneq;

namespace {

Vector vec(std::initializer_list<double> xs) {
  Vector v(static_cast<Index>(xs.size()));
  Index i = 0;
  for (double x : xs) v[i++] = x;
  return v;
}

std::vector<Transition> random_transitions(int n, int state_dim, int actions, int channels, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<int> state(0, state_dim - 1), action(0, actions - 1);
  std::normal_distribution<double> noise(0, 1);
  std::vector<Transition> out;
  for (int i = 0; i < n; ++i) {
    Transition t;
    t.state = Vector::Unit(state_dim, state(rng));
    t.next_state = Vector::Unit(state_dim, state(rng));
    t.action = action(rng);
    t.reward = Vector(channels);
    for (auto& r : t.reward) r = noise(rng);
    t.terminal = i % 7 == 0;
    out.push_back(t);
  }
  return out;
}

PruneTable table_over(int state_dim, int actions, const std::vector<ActionSet>& sets) {
  PruneTable table(actions, 40, 3 * actions);
  for (int s = 0; s < state_dim; ++s) table.insert(state_key(Vector::Unit(state_dim, s)), sets[s]);
  return table;
}

TrainerConfig small_config() {
  TrainerConfig cfg;
  cfg.hidden_width = 16;
  cfg.hidden_layers = 2;
  cfg.batch_size = 8;
  cfg.total_updates = 300;
  cfg.target_update_period = 50;
  cfg.learning_rate = 1e-3;
  cfg.gamma = 0.9;
  return cfg;
}

// Tabular trainer over 2 states and 3 actions with given online/target tables.
PrunedTrainer toy_trainer(const Matrix& q, const Matrix& qt, const std::vector<ActionSet>& sets) {
  PrunedTrainer trainer;
  trainer.agent.online = tabular::network(2, 3);
  trainer.agent.online.layers()[0].weight = q;
  trainer.agent.target = tabular::network(2, 3);
  trainer.agent.target.layers()[0].weight = qt;
  trainer.table = table_over(2, 3, sets);
  trainer.config = tabular::config(0.5, 1);
  return trainer;
}

Transition toy_transition() {
  Transition t;
  t.state = vec({1, 0});
  t.next_state = vec({0, 1});
  t.action = 0;
  t.reward = vec({2, 99});
  return t;
}

}  // namespace

TEST_CASE("pruned_target: full, singleton and restricted sets") {
  Matrix q(2, 3), qt(2, 3);
  q << 0, 0, 0, 4, 6, 9;  // unpruned argmax at the next state is action 2
  qt << 0, 0, 0, 10, 20, 30;
  const Transition t = toy_transition();
  auto full = toy_trainer(q, qt, {ActionSet::full(3), ActionSet::full(3)});
  CHECK(pruned_target(t, full) == dqn_target(t, full.agent.online, full.agent.target, 0.5));
  CHECK(pruned_target(t, full) == 2 + 0.5 * 30);
  auto single = toy_trainer(q, qt, {ActionSet::full(3), ActionSet::single(0)});
  CHECK(pruned_target(t, single) == 2 + 0.5 * 10);
  // {0, 1}: action 1 is better under Q (6 > 4) and is evaluated by Q' at 20.
  auto restricted = toy_trainer(q, qt, {ActionSet::full(3), ActionSet::from_vector({0, 1})});
  CHECK(pruned_target(t, restricted) == 2 + 0.5 * 20);
}

TEST_CASE("pruned_target: unseen next state falls back to the full set") {
  Matrix q(2, 3), qt(2, 3);
  q << 0, 0, 0, 4, 6, 9;
  qt << 0, 0, 0, 10, 20, 30;
  auto trainer = toy_trainer(q, qt, {ActionSet::full(3), ActionSet::single(0)});
  trainer.table = PruneTable(3, 40, 9);
  CHECK(pruned_target(toy_transition(), trainer) == 2 + 0.5 * 30);
  CHECK(trainer.fallbacks == 1);
}

TEST_CASE("phase 2 with a full-action table is bit-equivalent to double Q-learning") {
  const auto data = random_transitions(200, 6, 4, 3, 1);
  const auto cfg = small_config();
  std::vector<ActionSet> sets(6, ActionSet::full(4));
  const PruneTable table = table_over(6, 4, sets);

  Rng ra(3), rb(3);
  QAgent plain = QAgent::create(6, 4, cfg, ra);
  QAgent pruned = QAgent::create(6, 4, cfg, rb);
  ScalarTrainingSpec spec_plain{.data = data};
  ScalarTrainingSpec spec_pruned{.data = data, .next_allowed = next_allowed_from_table(data, table)};
  const auto log_a = train_scalar(plain, spec_plain, cfg, ra);
  const auto log_b = train_scalar(pruned, spec_pruned, cfg, rb);
  CHECK(log_a.csv() == log_b.csv());
  for (std::size_t k = 0; k < plain.online.layer_count(); ++k)
    CHECK(plain.online.layers()[k].weight == pruned.online.layers()[k].weight);
}

TEST_CASE("pruned_update: identical losses to q_learning_update on the full table") {
  const auto data = random_transitions(8, 4, 3, 2, 2);
  const Batch batch = make_batch(data);
  const auto cfg = small_config();
  Rng rng(4);
  PrunedTrainer trainer = PrunedTrainer::create(4, table_over(4, 3, std::vector<ActionSet>(4, ActionSet::full(3))),
                                                cfg, rng);
  Network q = trainer.agent.online;
  const Network target = trainer.agent.target;
  Optimizer opt = Optimizer::adam(cfg.learning_rate);
  for (int i = 0; i < 5; ++i) {
    const double expected = q_learning_update(batch, q, target, opt, cfg);
    CHECK(pruned_update(batch, trainer).loss == expected);
  }
}

TEST_CASE("pruned_cql_update: alpha zero equals pruned_update") {
  const auto data = random_transitions(8, 4, 3, 2, 5);
  const Batch batch = make_batch(data);
  const auto cfg = small_config();
  const auto sets = std::vector<ActionSet>{ActionSet::single(1), ActionSet::from_vector({0, 2}),
                                           ActionSet::full(3), ActionSet::single(2)};
  Rng ra(6), rb(6);
  PrunedTrainer a = PrunedTrainer::create(4, table_over(4, 3, sets), cfg, ra);
  PrunedTrainer b = PrunedTrainer::create(4, table_over(4, 3, sets), cfg, rb);
  for (int i = 0; i < 5; ++i) CHECK(pruned_update(batch, a).loss == pruned_cql_update(batch, b, 0.0).loss);
}

TEST_CASE("pruned_cql_update: suppresses actions absent from the data") {
  auto data = random_transitions(64, 4, 3, 2, 7);
  for (auto& t : data) t.action = 0;
  const auto sets = std::vector<ActionSet>(4, ActionSet::full(3));
  auto uncovered_mean = [&](double alpha) {
    auto cfg = small_config();
    Rng rng(8);
    PrunedTrainer trainer = PrunedTrainer::create(4, table_over(4, 3, sets), cfg, rng);
    ScalarTrainingSpec spec{.data = data, .next_allowed = next_allowed_from_table(data, trainer.table),
                            .cql_alpha = alpha};
    train_scalar(trainer.agent, spec, cfg, rng);
    const Matrix q = forward(trainer.agent.online, Matrix::Identity(4, 4));
    return q.rightCols(2).mean();
  };
  CHECK(uncovered_mean(0.001) < uncovered_mean(0.0));
}

TEST_CASE("phase 2 ignores intermediate reward channels") {
  const auto data = random_transitions(16, 4, 3, 5, 9);
  auto perturbed = data;
  for (auto& t : perturbed) t.reward.tail(4) = Vector::Constant(4, 1e3);
  const auto cfg = small_config();
  const auto sets = std::vector<ActionSet>{ActionSet::single(1), ActionSet::from_vector({0, 2}),
                                           ActionSet::full(3), ActionSet::single(2)};
  Rng ra(10), rb(10);
  PrunedTrainer a = PrunedTrainer::create(4, table_over(4, 3, sets), cfg, ra);
  PrunedTrainer b = PrunedTrainer::create(4, table_over(4, 3, sets), cfg, rb);
  for (int i = 0; i < 3; ++i) CHECK(pruned_update(make_batch(data), a).loss == pruned_update(make_batch(perturbed), b).loss);
  for (std::size_t k = 0; k < a.agent.online.layer_count(); ++k)
    CHECK(a.agent.online.layers()[k].weight == b.agent.online.layers()[k].weight);
}

TEST_CASE("greedy_action: restricted argmax and containment") {
  Network net = tabular::network(1, 4);
  net.layers()[0].weight << 9, 2, 8, 5;
  const Vector s = vec({1});
  PruneTable table(4, 40, 12);
  table.insert(state_key(s), ActionSet::from_vector({1, 3}));
  CHECK(greedy_action(net, s, table) == 3);
  PruneTable single(4, 40, 12);
  single.insert(state_key(s), ActionSet::single(1));
  CHECK(greedy_action(net, s, single) == 1);
  PruneTable full(4, 40, 12);
  full.insert(state_key(s), ActionSet::full(4));
  CHECK(greedy_action(net, s, full) == 0);

  Rng rng(11);
  const auto cfg = small_config();
  const QAgent agent = QAgent::create(5, 6, cfg, rng);
  std::uniform_int_distribution<int> bits(1, 63);
  for (int i = 0; i < 100; ++i) {
    const Vector x = Vector::Random(5);
    PruneTable t(6, 40, 18);
    ActionSet set;
    const int mask = bits(rng);
    for (int a = 0; a < 6; ++a)
      if (mask & (1 << a)) set.insert(a);
    t.insert(state_key(x), set);
    CHECK(set.contains(greedy_action(agent.online, x, t)));
  }
}
