#include "pruneq/multiobjective.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "json.hpp"
#include "pruneq/seeding.hpp"

namespace pruneq {

VectorQNetwork::VectorQNetwork(Network network, int actions, int channels)
    : net(std::move(network)), action_count(actions), channel_count(channels) {
  if (actions < 1 || channels < 1) throw InvalidArgument("VectorQNetwork: action and channel counts must be positive");
  if (net.output_dim() != static_cast<Index>(actions) * channels)
    throw ShapeError("VectorQNetwork: output dim " + std::to_string(net.output_dim()) + " != |A| * d = " +
                     std::to_string(actions * channels));
}

VectorQNetwork VectorQNetwork::create(Index state_dim, int actions, int channels, const TrainerConfig& config,
                                      Rng& rng) {
  const auto dims = mlp_dims(state_dim, config.hidden_width, config.hidden_layers, static_cast<Index>(actions) * channels);
  return VectorQNetwork(Network::he_uniform(dims, rng), actions, channels);
}

Matrix VectorQNetwork::q_matrix(const Eigen::Ref<const Vector>& state) const {
  const Matrix flat = forward(net, Matrix(state.transpose()));
  return q_matrix_view(flat, 0, action_count, channel_count);
}

// ---------------------------------------------------------------- keys

StateKey state_key(const Eigen::Ref<const Vector>& state) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (Index i = 0; i < state.size(); ++i) {
    if (!std::isfinite(state[i])) throw NumericalError("state_key: non-finite coordinate");
    const auto q = static_cast<std::int64_t>(std::llround(state[i] * 1e6));
    auto u = static_cast<std::uint64_t>(q);
    for (int b = 0; b < 8; ++b) {
      h ^= (u >> (8 * b)) & 0xffU;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

std::string format_state_key(StateKey key) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(key));
  return buf;
}

StateKey parse_state_key(const std::string& text) {
  if (text.empty() || text.size() > 16) throw ParseError("bad state key '" + text + "'");
  std::size_t used = 0;
  const auto value = std::stoull(text, &used, 16);
  if (used != text.size()) throw ParseError("bad state key '" + text + "'");
  return value;
}

// ---------------------------------------------------------------- table

PruneTable::PruneTable(int action_count, double beta, int m, std::string checkpoint)
    : action_count_(action_count), beta_(beta), m_(m), checkpoint_(std::move(checkpoint)) {
  if (action_count < 1 || action_count > kMaxActions) throw InvalidArgument("PruneTable: bad action count");
}

void PruneTable::insert(StateKey key, ActionSet actions) {
  if (actions.empty()) throw InvalidArgument("PruneTable: permitted set must be nonempty");
  if (actions.bound() > action_count_) throw InvalidArgument("PruneTable: action index out of range");
  entries_[key] = actions;
}

const ActionSet* PruneTable::find(StateKey key) const {
  const auto it = entries_.find(key);
  return it == entries_.end() ? nullptr : &it->second;
}

ActionSet PruneTable::allowed(const Eigen::Ref<const Vector>& state, std::int64_t* fallbacks) const {
  if (const ActionSet* set = find(state_key(state))) return *set;
  if (fallbacks) ++*fallbacks;
  return ActionSet::full(action_count_);
}

PruneTable PruneTable::full(std::span<const Vector> states, int action_count) {
  PruneTable table(action_count, 0.0, 0, "full");
  for (const auto& s : states) table.insert(state_key(s), ActionSet::full(action_count));
  return table;
}

void save_prune_table(const std::string& path, const PruneTable& table) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  for (const auto& [key, set] : table.entries()) {
    nlohmann::json line;
    line["state_key"] = format_state_key(key);
    line["actions"] = set.to_vector();
    line["beta"] = table.beta();
    line["m"] = table.m();
    line["checkpoint"] = table.checkpoint();
    out << line.dump() << '\n';
  }
}

PruneTable load_prune_table(const std::string& path, int action_count) {
  std::ifstream in(path);
  if (!in) throw MissingPrerequisite("prune table not found: " + path + " (run the prune stage first)");
  PruneTable table;
  bool first = true;
  std::string text;
  std::size_t line_no = 0;
  while (std::getline(in, text)) {
    ++line_no;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path + ":" + std::to_string(line_no) + ": ";
    try {
      const auto j = nlohmann::json::parse(text);
      const double beta = j.at("beta").get<double>();
      const int m = j.at("m").get<int>();
      const auto checkpoint = j.at("checkpoint").get<std::string>();
      if (first) {
        table = PruneTable(action_count, beta, m, checkpoint);
        first = false;
      } else if (beta != table.beta() || m != table.m() || checkpoint != table.checkpoint()) {
        throw ParseError("inconsistent beta/m/checkpoint across lines");
      }
      const auto actions = j.at("actions").get<std::vector<int>>();
      for (int a : actions)
        if (a < 0 || a >= action_count) throw ParseError("action " + std::to_string(a) + " out of range");
      if (actions.empty()) throw ParseError("empty permitted set");
      table.insert(parse_state_key(j.at("state_key").get<std::string>()), ActionSet::from_vector(actions));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(where + e.what());
    } catch (const ParseError& e) {
      throw ParseError(where + e.what());
    }
  }
  if (first) table = PruneTable(action_count, 0.0, 0);
  return table;
}

// ---------------------------------------------------------------- targets

namespace {

void check_pair(const VectorQNetwork& online, const VectorQNetwork& target, const WeightPrior& prior) {
  if (online.action_count != target.action_count || online.channel_count != target.channel_count)
    throw ShapeError("online and target vector Q-networks differ in shape");
  if (online.channel_count != prior.channels())
    throw ShapeError("prior channel count does not match the vector Q-network");
}

}  // namespace

Matrix mql_targets(const Batch& batch, const Matrix& online_at_states, const VectorQNetwork& online,
                   const VectorQNetwork& target, const WeightPrior& prior, const VectorTargetOptions& options,
                   Rng& rng, PosteriorDiagnostics* diagnostics) {
  check_pair(online, target, prior);
  const int A = online.action_count, d = online.channel_count;
  if (batch.rewards.cols() != d) throw ShapeError("mql_targets: reward length != channel count");
  if (online_at_states.rows() != batch.size() || online_at_states.cols() != static_cast<Index>(A) * d)
    throw ShapeError("mql_targets: precomputed Q has the wrong shape");
  Matrix y = batch.rewards;
  bool any_live = false;
  for (auto t : batch.terminal) any_live = any_live || t == 0;
  if (!any_live || options.gamma == 0.0) return y;
  const Matrix next_online = online.forward_flat(batch.next_states);
  const Matrix next_target = target.forward_flat(batch.next_states);
  for (Index i = 0; i < batch.size(); ++i) {
    if (batch.terminal[static_cast<std::size_t>(i)]) continue;
    const int a = batch.actions[static_cast<std::size_t>(i)];
    const WeightSample w = posterior_sample_weight(prior, q_matrix_view(online_at_states, i, A, d), a, options.beta,
                                                   options.particle_count, rng, diagnostics);
    const auto q_next = q_matrix_view(next_online, i, A, d);
    const Vector pi = softmax_probs(q_next * w, options.beta);
    const auto q_next_target = q_matrix_view(next_target, i, A, d);
    y.row(i) += options.gamma * (q_next_target.transpose() * pi).transpose();
  }
  return y;
}

Vector mql_target(const Transition& t, const VectorQNetwork& online, const VectorQNetwork& target,
                  const WeightPrior& prior, const VectorTargetOptions& options, Rng& rng,
                  PosteriorDiagnostics* diagnostics) {
  const std::array<Transition, 1> one{t};
  const Batch b = make_batch(one);
  return mql_targets(b, online.forward_flat(b.states), online, target, prior, options, rng, diagnostics)
      .row(0)
      .transpose();
}

UpdateStats vector_td_update(const Batch& batch, VectorQNetwork& online, const VectorQNetwork& target,
                             const WeightPrior& prior, Optimizer& optimizer, const TrainerConfig& config,
                             double cql_alpha, Rng& rng, PosteriorDiagnostics* diagnostics) {
  const Index n = batch.size();
  if (n == 0) throw InvalidArgument("vector_td_update: empty batch");
  if (cql_alpha < 0) throw InvalidArgument("vector_td_update: cql_alpha must be >= 0");
  const int A = online.action_count, d = online.channel_count;

  ForwardTrace<double> trace;
  const Matrix q = forward(online.net, batch.states, &trace);
  const VectorTargetOptions options{config.beta, config.gamma, config.particle_count};
  const Matrix y = mql_targets(batch, q, online, target, prior, options, rng, diagnostics);

  Matrix grad = Matrix::Zero(q.rows(), q.cols());
  UpdateStats stats;
  const double inv_n = 1.0 / static_cast<double>(n);
  const double penalty_scale = cql_alpha / d;
  for (Index i = 0; i < n; ++i) {
    const int a = batch.actions[static_cast<std::size_t>(i)];
    if (a < 0 || a >= A) throw ShapeError("vector_td_update: action index out of range");
    for (int c = 0; c < d; ++c) {
      const double diff = q(i, a * d + c) - y(i, c);
      stats.td_loss += diff * diff;
      grad(i, a * d + c) += 2.0 * diff * inv_n;
    }
    stats.mean_q += q(i, a * d);
    if (cql_alpha > 0) {
      const auto qm = q_matrix_view(q, i, A, d);
      for (int c = 0; c < d; ++c) {
        const Vector column = qm.col(c);
        stats.penalty += cql_penalty(column, a) / d;
        const Vector p = softmax_probs(column, 1.0);
        for (int b = 0; b < A; ++b) grad(i, b * d + c) += penalty_scale * inv_n * p[b];
        grad(i, a * d + c) -= penalty_scale * inv_n;
      }
    }
  }
  stats.td_loss *= inv_n;
  stats.penalty *= inv_n;
  stats.mean_q *= inv_n;
  stats.loss = stats.td_loss + cql_alpha * stats.penalty;
  if (!std::isfinite(stats.loss)) {
    throw NumericalError("vector Q update: non-finite loss (batch of " + std::to_string(n) + ", first trajectory " +
                         std::to_string(batch.trajectory.empty() ? -1 : batch.trajectory.front()) + ")");
  }
  auto grads = backward(online.net, trace, grad);
  clip_global_norm(grads, config.clip_norm);
  optimizer.step(online.net, grads);
  return stats;
}

double mql_update(const Batch& batch, VectorQNetwork& online, const VectorQNetwork& target, const WeightPrior& prior,
                  Optimizer& optimizer, const TrainerConfig& config, Rng& rng) {
  return vector_td_update(batch, online, target, prior, optimizer, config, 0.0, rng).loss;
}

double mcql_update(const Batch& batch, VectorQNetwork& online, const VectorQNetwork& target, const WeightPrior& prior,
                   Optimizer& optimizer, const TrainerConfig& config, Rng& rng) {
  return vector_td_update(batch, online, target, prior, optimizer, config, config.cql_alpha, rng).loss;
}

// ---------------------------------------------------------------- pruning

ActionSet prune_from_q_matrix(const Eigen::Ref<const Matrix>& q_matrix, const WeightPrior& prior, double beta, int m,
                              Rng& rng) {
  if (m < 1) throw InvalidArgument("prune: m must be >= 1");
  if (!(beta > 0)) throw InvalidArgument("prune: beta must be positive");
  if (q_matrix.cols() != prior.channels()) throw ShapeError("prune: prior channel count mismatch");
  ActionSet set;
  for (int k = 0; k < m; ++k) {
    const WeightSample w = sample_weight(prior, rng);
    const Vector pi = softmax_probs(q_matrix * w, beta);
    set.insert(sample_categorical(pi, rng));
  }
  return set;
}

ActionSet prune(const VectorQNetwork& net, const Eigen::Ref<const Vector>& state, const WeightPrior& prior, double beta,
                int m, Rng& rng) {
  return prune_from_q_matrix(net.q_matrix(state), prior, beta, m, rng);
}

PruneTable build_prune_table(const VectorQNetwork& net, std::span<const Vector> states, const WeightPrior& prior,
                             double beta, int m, Rng& rng, std::string checkpoint) {
  if (states.empty()) throw InvalidArgument("build_prune_table: empty state set");
  if (m <= 0) m = default_prune_samples(net.action_count);
  const std::uint64_t base = rng();
  PruneTable table(net.action_count, beta, m, std::move(checkpoint));
  std::set<StateKey> seen;
  std::vector<Index> rows;
  std::vector<StateKey> keys;
  for (std::size_t i = 0; i < states.size(); ++i) {
    const StateKey key = state_key(states[i]);
    if (seen.insert(key).second) {
      rows.push_back(static_cast<Index>(i));
      keys.push_back(key);
    }
  }
  Matrix stacked(static_cast<Index>(rows.size()), net.net.input_dim());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (states[static_cast<std::size_t>(rows[r])].size() != net.net.input_dim())
      throw ShapeError("build_prune_table: state dimension mismatch");
    stacked.row(static_cast<Index>(r)) = states[static_cast<std::size_t>(rows[r])].transpose();
  }
  const Matrix flat = net.forward_flat(stacked);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    Rng local(derive_seed(base, keys[r]));
    table.insert(keys[r], prune_from_q_matrix(q_matrix_view(flat, static_cast<Index>(r), net.action_count,
                                                            net.channel_count),
                                              prior, beta, m, local));
  }
  return table;
}

}  // namespace pruneq
