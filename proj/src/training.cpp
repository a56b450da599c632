#include "pruneq/training.hpp"

#include <sstream>

namespace pruneq {

std::string TrainingLog::csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "update_index,loss,mean_q,eval_return,best_return\n";
  for (const auto& p : points) {
    out << p.update << ',' << p.loss << ',' << p.mean_q << ',';
    if (p.eval_return) out << *p.eval_return;
    out << ',';
    if (p.best_return) out << *p.best_return;
    out << '\n';
  }
  return out.str();
}

namespace {

std::vector<std::size_t> sample_indices(std::size_t population, std::size_t batch_size, Rng& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, population - 1);
  std::vector<std::size_t> idx(batch_size);
  for (auto& i : idx) i = pick(rng);
  return idx;
}

// Accumulates per-update stats between log points.
struct Window {
  double loss = 0, mean_q = 0;
  std::int64_t count = 0;

  void add(const UpdateStats& s) {
    loss += s.loss;
    mean_q += s.mean_q;
    ++count;
  }
  TrainingPoint flush(std::int64_t update) {
    TrainingPoint p;
    p.update = update;
    if (count > 0) {
      p.loss = loss / static_cast<double>(count);
      p.mean_q = mean_q / static_cast<double>(count);
    }
    *this = {};
    return p;
  }
};

}  // namespace

TrainingLog train_scalar(QAgent& agent, const ScalarTrainingSpec& spec, const TrainerConfig& config, Rng& rng) {
  config.validate();
  if (spec.data.empty()) throw InvalidArgument("train_scalar: no transitions");
  if (!spec.next_allowed.empty() && spec.next_allowed.size() != spec.data.size())
    throw ShapeError("train_scalar: next_allowed must have one entry per transition");
  if (spec.eval_every > 0 && !spec.evaluate) throw InvalidArgument("train_scalar: eval_every set without an evaluator");
  const std::int64_t log_every = spec.log_every > 0 ? spec.log_every : config.total_updates;

  TrainingLog log;
  Window window;
  std::vector<ActionSet> allowed;
  for (std::int64_t u = 1; u <= config.total_updates; ++u) {
    const auto idx = sample_indices(spec.data.size(), config.batch_size, rng);
    const Batch batch = make_batch(spec.data, idx);
    allowed.clear();
    if (!spec.next_allowed.empty())
      for (std::size_t i : idx) allowed.push_back(spec.next_allowed[i]);
    window.add(td_update(batch, agent.online, agent.target, agent.optimizer, config, allowed, spec.cql_alpha));
    agent.finish_update(config);

    const bool eval_now = spec.eval_every > 0 && (u % spec.eval_every == 0 || u == config.total_updates);
    if (u % log_every == 0 || eval_now || u == config.total_updates) {
      TrainingPoint p = window.flush(u);
      if (eval_now) {
        const double r = spec.evaluate(agent.online);
        p.eval_return = r;
        if (!log.best_return || r > *log.best_return) log.best_return = r;
        p.best_return = log.best_return;
      }
      log.points.push_back(p);
    }
  }
  return log;
}

TrainingLog train_vector(VectorQNetwork& online, VectorQNetwork& target, Optimizer& optimizer,
                         const VectorTrainingSpec& spec, const WeightPrior& prior, const TrainerConfig& config,
                         Rng& rng, PosteriorDiagnostics* diagnostics) {
  config.validate();
  if (spec.data.empty()) throw InvalidArgument("train_vector: no transitions");
  const std::int64_t log_every = spec.log_every > 0 ? spec.log_every : config.total_updates;
  TrainingLog log;
  Window window;
  for (std::int64_t u = 1; u <= config.total_updates; ++u) {
    const auto idx = sample_indices(spec.data.size(), config.batch_size, rng);
    const Batch batch = make_batch(spec.data, idx);
    window.add(vector_td_update(batch, online, target, prior, optimizer, config, spec.cql_alpha, rng, diagnostics));
    if (config.target_update_period > 0 && u % config.target_update_period == 0) copy_parameters(online.net, target.net);
    if (u % log_every == 0 || u == config.total_updates) log.points.push_back(window.flush(u));
  }
  return log;
}

std::vector<ActionSet> next_allowed_from_table(std::span<const Transition> data, const PruneTable& table,
                                               std::int64_t* fallbacks) {
  std::vector<ActionSet> out;
  out.reserve(data.size());
  for (const auto& t : data)
    out.push_back(t.terminal ? ActionSet::full(table.action_count()) : table.allowed(t.next_state, fallbacks));
  return out;
}

std::vector<ActionSet> next_allowed_from_behavior(std::span<const Transition> data, const BehaviorModel& behavior,
                                                  double threshold) {
  std::vector<ActionSet> out;
  out.reserve(data.size());
  if (data.empty()) return out;
  Matrix next(static_cast<Index>(data.size()), behavior.state_dim());
  for (std::size_t i = 0; i < data.size(); ++i) next.row(static_cast<Index>(i)) = data[i].next_state.transpose();
  const Matrix probs = behavior.predict_probs(next);
  for (std::size_t i = 0; i < data.size(); ++i)
    out.push_back(bcq_mask(probs.row(static_cast<Index>(i)).transpose(), threshold));
  return out;
}

}  // namespace pruneq
