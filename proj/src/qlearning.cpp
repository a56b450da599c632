#include "pruneq/qlearning.hpp"

#include <array>
#include <cmath>
#include <sstream>

#include "pruneq/policies.hpp"

namespace pruneq {

Batch make_batch(std::span<const Transition> transitions) {
  std::vector<std::size_t> all(transitions.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return make_batch(transitions, all);
}

Batch make_batch(std::span<const Transition> transitions, std::span<const std::size_t> indices) {
  Batch b;
  if (indices.empty()) return b;
  const auto& first = transitions[indices[0]];
  const Index state_dim = first.state.size();
  const Index channels = first.reward.size();
  const auto n = static_cast<Index>(indices.size());
  b.states.resize(n, state_dim);
  b.next_states.resize(n, state_dim);
  b.rewards.resize(n, channels);
  b.actions.resize(indices.size());
  b.terminal.resize(indices.size());
  b.trajectory.resize(indices.size());
  for (Index i = 0; i < n; ++i) {
    const auto& t = transitions[indices[static_cast<std::size_t>(i)]];
    if (t.state.size() != state_dim || t.next_state.size() != state_dim || t.reward.size() != channels)
      throw ShapeError("make_batch: heterogeneous transition dimensions");
    b.states.row(i) = t.state.transpose();
    b.next_states.row(i) = t.next_state.transpose();
    b.rewards.row(i) = t.reward.transpose();
    b.actions[static_cast<std::size_t>(i)] = t.action;
    b.terminal[static_cast<std::size_t>(i)] = t.terminal ? 1 : 0;
    b.trajectory[static_cast<std::size_t>(i)] = t.trajectory;
  }
  return b;
}

ReplayBuffer::ReplayBuffer(std::size_t capacity, std::uint64_t seed) : capacity_(capacity), rng_(seed) {
  if (capacity == 0) throw InvalidArgument("replay buffer capacity must be positive");
}

void ReplayBuffer::add(Transition t) {
  if (store_.size() < capacity_) {
    store_.push_back(std::move(t));
  } else {
    store_[next_] = std::move(t);
    next_ = (next_ + 1) % capacity_;
  }
}

void ReplayBuffer::add(std::span<const Transition> ts) {
  for (const auto& t : ts) add(t);
}

std::vector<std::size_t> ReplayBuffer::sample_indices(std::size_t batch_size) {
  if (store_.empty()) throw InvalidArgument("cannot sample from an empty replay buffer");
  std::uniform_int_distribution<std::size_t> pick(0, store_.size() - 1);
  std::vector<std::size_t> idx(batch_size);
  for (auto& i : idx) i = pick(rng_);
  return idx;
}

Batch ReplayBuffer::sample(std::size_t batch_size) {
  const auto idx = sample_indices(batch_size);
  return make_batch(store_, idx);
}

void TrainerConfig::validate() const {
  if (!(gamma >= 0 && gamma <= 1)) throw InvalidArgument("gamma must lie in [0, 1]");
  if (target_update_period < 1) throw InvalidArgument("target_update_period must be >= 1");
  if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
  if (!(learning_rate > 0)) throw InvalidArgument("learning_rate must be positive");
  if (cql_alpha < 0) throw InvalidArgument("cql_alpha must be >= 0");
  if (!(beta > 0)) throw InvalidArgument("beta must be positive");
  if (particle_count < 1) throw InvalidArgument("particle_count must be >= 1");
  if (hidden_width < 1 || hidden_layers < 0) throw InvalidArgument("bad hidden layer configuration");
}

QAgent QAgent::create(Index state_dim, Index output_dim, const TrainerConfig& config, Rng& rng) {
  const auto dims = mlp_dims(state_dim, config.hidden_width, config.hidden_layers, output_dim);
  QAgent agent;
  agent.online = Network::he_uniform(dims, rng);
  agent.target = agent.online;
  agent.optimizer = Optimizer::adam(config.learning_rate);
  return agent;
}

void QAgent::finish_update(const TrainerConfig& config) {
  ++updates;
  if (updates % config.target_update_period == 0) copy_parameters(online, target);
}

int restricted_argmax(const Eigen::Ref<const RowVector>& q_row, const ActionSet& allowed) {
  const auto n = static_cast<int>(q_row.size());
  if (allowed.empty()) {
    Index best = 0;
    q_row.maxCoeff(&best);  // first maximal index
    return static_cast<int>(best);
  }
  if (allowed.bound() > n) throw ShapeError("allowed action set exceeds the Q-value row");
  int best = -1;
  for (int a = 0; a < n; ++a) {
    if (!allowed.contains(a)) continue;
    if (best < 0 || q_row[a] > q_row[best]) best = a;
  }
  return best;
}

Vector double_q_targets(const Batch& batch, const Network& q_net, const Network& target_net, double gamma,
                        std::span<const ActionSet> allowed) {
  const Index n = batch.size();
  if (!allowed.empty() && static_cast<Index>(allowed.size()) != n)
    throw ShapeError("double_q_targets: one allowed set per batch row required");
  if (q_net.output_dim() != target_net.output_dim())
    throw ShapeError("double_q_targets: online and target networks differ in action count");
  Vector y = batch.rewards.col(0);
  bool any_live = false;
  for (auto t : batch.terminal) any_live = any_live || t == 0;
  if (!any_live || gamma == 0.0) return y;
  const Matrix q_next = forward(q_net, batch.next_states);
  const Matrix q_next_target = forward(target_net, batch.next_states);
  for (Index i = 0; i < n; ++i) {
    if (batch.terminal[static_cast<std::size_t>(i)]) continue;
    const ActionSet set = allowed.empty() ? ActionSet() : allowed[static_cast<std::size_t>(i)];
    const int a = restricted_argmax(q_next.row(i), set);
    y[i] += gamma * q_next_target(i, a);
  }
  return y;
}

double dqn_target(const Transition& t, const Network& q_net, const Network& target_net, double gamma) {
  const std::array<Transition, 1> one{t};
  return double_q_targets(make_batch(one), q_net, target_net, gamma)[0];
}

namespace {

[[noreturn]] void fail_non_finite(const Batch& batch, const Matrix& q) {
  std::ostringstream msg;
  msg << "non-finite loss; batch of " << batch.size() << " rows, first trajectory "
      << (batch.trajectory.empty() ? -1 : batch.trajectory.front());
  if (q.allFinite()) msg << ", Q range [" << q.minCoeff() << ", " << q.maxCoeff() << "]";
  else msg << ", Q contains non-finite values";
  throw NumericalError(msg.str());
}

}  // namespace

UpdateStats td_update(const Batch& batch, Network& q_net, const Network& target_net, Optimizer& optimizer,
                      const TrainerConfig& config, std::span<const ActionSet> allowed, double cql_alpha) {
  const Index n = batch.size();
  if (n == 0) throw InvalidArgument("td_update: empty batch");
  if (cql_alpha < 0) throw InvalidArgument("td_update: cql_alpha must be >= 0");
  const Vector y = double_q_targets(batch, q_net, target_net, config.gamma, allowed);

  ForwardTrace<double> trace;
  const Matrix q = forward(q_net, batch.states, &trace);
  Matrix grad = Matrix::Zero(q.rows(), q.cols());
  UpdateStats stats;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (Index i = 0; i < n; ++i) {
    const int a = batch.actions[static_cast<std::size_t>(i)];
    if (a < 0 || a >= q.cols()) throw ShapeError("td_update: action index out of range");
    const double diff = q(i, a) - y[i];
    stats.td_loss += diff * diff;
    grad(i, a) += 2.0 * diff * inv_n;
    if (cql_alpha > 0) {
      const Vector row = q.row(i).transpose();
      stats.penalty += cql_penalty(row, a);
      const Vector p = softmax_probs(row, 1.0);
      grad.row(i) += (cql_alpha * inv_n) * p.transpose();
      grad(i, a) -= cql_alpha * inv_n;
    }
    stats.mean_q += q(i, a);
  }
  stats.td_loss *= inv_n;
  stats.penalty *= inv_n;
  stats.mean_q *= inv_n;
  stats.loss = stats.td_loss + cql_alpha * stats.penalty;
  if (!std::isfinite(stats.loss)) fail_non_finite(batch, q);

  auto grads = backward(q_net, trace, grad);
  clip_global_norm(grads, config.clip_norm);
  optimizer.step(q_net, grads);
  return stats;
}

double q_learning_update(const Batch& batch, Network& q_net, const Network& target_net, Optimizer& optimizer,
                         const TrainerConfig& config) {
  return td_update(batch, q_net, target_net, optimizer, config, {}, config.cql_alpha).loss;
}

double cql_penalty(const Eigen::Ref<const Vector>& q_values, int taken_action) {
  if (taken_action < 0 || taken_action >= q_values.size()) throw InvalidArgument("cql_penalty: action out of range");
  return logsumexp(q_values) - q_values[taken_action];
}

ActionSet bcq_mask(const Eigen::Ref<const Vector>& behavior_probs, double threshold) {
  if (!(threshold >= 0 && threshold <= 1)) throw InvalidArgument("bcq_mask: threshold must lie in [0, 1]");
  if (behavior_probs.size() == 0 || behavior_probs.size() > kMaxActions)
    throw InvalidArgument("bcq_mask: bad action count");
  if (!behavior_probs.allFinite() || behavior_probs.minCoeff() < 0)
    throw InvalidArgument("bcq_mask: probabilities must be finite and nonnegative");
  Index top = 0;
  const double max_p = behavior_probs.maxCoeff(&top);
  if (!(max_p > 0)) throw InvalidArgument("bcq_mask: all-zero behavior probabilities");
  ActionSet set = ActionSet::single(static_cast<int>(top));
  for (Index a = 0; a < behavior_probs.size(); ++a)
    if (behavior_probs[a] / max_p > threshold) set.insert(static_cast<int>(a));
  return set;
}

double bcq_update(const Batch& batch, Network& q_net, const Network& target_net, const BehaviorModel& behavior,
                  Optimizer& optimizer, const TrainerConfig& config, double threshold) {
  if (behavior.action_count() != q_net.output_dim())
    throw ShapeError("bcq_update: behavior model and Q-network disagree on action count");
  const Matrix probs = behavior.predict_probs(batch.next_states);
  std::vector<ActionSet> allowed(static_cast<std::size_t>(batch.size()));
  for (Index i = 0; i < batch.size(); ++i)
    allowed[static_cast<std::size_t>(i)] = bcq_mask(probs.row(i).transpose(), threshold);
  return td_update(batch, q_net, target_net, optimizer, config, allowed, config.cql_alpha).loss;
}

int greedy_action(const Network& q_net, const Eigen::Ref<const Vector>& state, const ActionSet& allowed) {
  const Matrix q = forward(q_net, Matrix(state.transpose()));
  return restricted_argmax(q.row(0), allowed);
}

}  // namespace pruneq
