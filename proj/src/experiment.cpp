#include "pruneq/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "pruneq/seeding.hpp"

namespace pruneq {

namespace fs = std::filesystem;
using nlohmann::json;

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

std::uint64_t stage_seed(std::uint64_t seed, std::string_view stage) { return derive_seed(seed, stage); }

TrainerConfig ExperimentConfig::trainer(const StageSettings& stage, double beta) const {
  TrainerConfig c;
  c.gamma = gamma;
  c.batch_size = stage.batch_size;
  c.learning_rate = learning_rate;
  c.target_update_period = stage.target_update_period;
  c.total_updates = stage.total_updates;
  c.cql_alpha = stage.alpha;
  c.beta = beta;
  c.particle_count = particle_count;
  c.clip_norm = clip_norm;
  c.hidden_width = hidden_width;
  c.hidden_layers = hidden_layers;
  return c;
}

bool ExperimentConfig::wants(const std::string& metric) const {
  return std::find(metrics.begin(), metrics.end(), metric) != metrics.end();
}

// ---------------------------------------------------------------- parsing

namespace {

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

// Inlines a transition-table path found under env.transition_table.
void inline_table(json& j, const fs::path& base_dir) {
  if (!j.is_object() || !j.contains("env") || !j["env"].is_object()) return;
  auto& env = j["env"];
  if (env.contains("transition_table") && env["transition_table"].is_string())
    env["transition_table"] = read_json_file(base_dir / env["transition_table"].get<std::string>());
}

json resolve(const fs::path& path, int depth) {
  if (depth > 16) throw ConfigError("config include chain too deep at " + path.string());
  json j = read_json_file(path);
  if (!j.is_object()) throw ConfigError(path.string() + ": top level must be an object");
  const fs::path dir = path.parent_path();
  inline_table(j, dir);
  if (!j.contains("include")) return j;
  json includes = j["include"];
  j.erase("include");
  if (includes.is_string()) includes = json::array({includes});
  if (!includes.is_array()) throw ConfigError(path.string() + ": include must be a path or a list of paths");
  json merged = json::object();
  for (const auto& inc : includes) {
    if (!inc.is_string()) throw ConfigError(path.string() + ": include entries must be strings");
    merged.merge_patch(resolve(dir / inc.get<std::string>(), depth + 1));
  }
  merged.merge_patch(j);
  return merged;
}

void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError("unknown config key '" + (where.empty() ? key : where + "." + key) + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + where + "." + key + "' has the wrong type");
  }
}

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

void read_stage(const json& j, const std::string& where, StageSettings& s) {
  read(j, "total_updates", s.total_updates, where);
  read(j, "target_update_period", s.target_update_period, where);
  read(j, "batch_size", s.batch_size, where);
  read(j, "alpha", s.alpha, where);
  require(s.total_updates > 0, where + ".total_updates must be positive");
  require(s.target_update_period > 0, where + ".target_update_period must be positive");
  require(s.batch_size > 0, where + ".batch_size must be positive");
  require(s.alpha >= 0, where + ".alpha must be >= 0");
}

}  // namespace

json resolve_config_json(const fs::path& path) { return resolve(path, 0); }

json apply_overrides(json config, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + o + "' is not key=value");
    const std::string path = o.substr(0, eq);
    const std::string text = o.substr(eq + 1);
    json value;
    try {
      value = json::parse(text);
    } catch (const json::exception&) {
      value = text;
    }
    json* node = &config;
    std::size_t start = 0;
    for (;;) {
      const auto dot = path.find('.', start);
      const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (key.empty()) throw ConfigError("override '" + o + "' has an empty key");
      if (dot == std::string::npos) {
        (*node)[key] = value;
        break;
      }
      if (!node->contains(key)) (*node)[key] = json::object();
      node = &(*node)[key];
      start = dot + 1;
    }
  }
  return config;
}

ExperimentConfig parse_experiment_config(const json& input, const fs::path& base_dir) {
  json j = input;
  inline_table(j, base_dir);
  check_keys(j, "", {"mode", "env", "dataset", "network", "phase1", "prune", "phase2", "baselines", "eval", "seeds"});
  ExperimentConfig c;
  read(j, "mode", c.mode, "");
  require(c.mode == "off_policy" || c.mode == "offline", "mode must be off_policy or offline");
  if (c.offline()) c.metrics = {"wis", "delta_mr", "overlap", "prune", "curve"};

  if (j.contains("env")) {
    const auto& e = j["env"];
    check_keys(e, "env", {"transition_table", "max_steps", "mask_prob", "noise_std", "diabetic_prob"});
    if (e.contains("transition_table")) {
      try {
        c.table = transition_table_from_json(e["transition_table"]);
      } catch (const std::exception& ex) {
        throw ConfigError(std::string("env.transition_table: ") + ex.what());
      }
    }
    read(e, "max_steps", c.episode.max_steps, "env");
    read(e, "mask_prob", c.episode.terminal_reward_mask_prob, "env");
    read(e, "noise_std", c.episode.noise_std, "env");
    read(e, "diabetic_prob", c.episode.diabetic_prob, "env");
  }
  try {
    c.episode.validate();
  } catch (const std::exception& ex) {
    throw ConfigError(std::string("env: ") + ex.what());
  }

  if (j.contains("dataset")) {
    const auto& d = j["dataset"];
    check_keys(d, "dataset", {"behavior", "epsilon", "trajectories", "split"});
    read(d, "behavior", c.behavior.kind, "dataset");
    read(d, "epsilon", c.behavior.epsilon, "dataset");
    read(d, "trajectories", c.trajectories, "dataset");
    read(d, "split", c.split_fractions, "dataset");
  }
  require(c.behavior.kind == "uniform" || c.behavior.kind == "heuristic",
          "dataset.behavior must be uniform or heuristic");
  require(c.behavior.epsilon >= 0 && c.behavior.epsilon <= 1, "dataset.epsilon must lie in [0, 1]");
  try {
    split_sizes(10, c.split_fractions);
  } catch (const std::exception& ex) {
    throw ConfigError(std::string("dataset.split: ") + ex.what());
  }

  if (j.contains("network")) {
    const auto& n = j["network"];
    check_keys(n, "network", {"hidden_width", "hidden_layers", "learning_rate", "clip_norm", "gamma"});
    read(n, "hidden_width", c.hidden_width, "network");
    read(n, "hidden_layers", c.hidden_layers, "network");
    read(n, "learning_rate", c.learning_rate, "network");
    read(n, "clip_norm", c.clip_norm, "network");
    read(n, "gamma", c.gamma, "network");
  }
  require(c.hidden_width > 0 && c.hidden_layers >= 0, "network dimensions must be positive");
  require(c.learning_rate > 0, "network.learning_rate must be positive");
  require(c.clip_norm > 0, "network.clip_norm must be positive");
  require(c.gamma >= 0 && c.gamma <= 1, "network.gamma must lie in [0, 1]");

  if (j.contains("phase1")) {
    const auto& p = j["phase1"];
    check_keys(p, "phase1",
               {"beta", "alpha", "prior", "particle_count", "total_updates", "target_update_period", "batch_size"});
    read_stage(p, "phase1", c.phase1);
    read(p, "beta", c.phase1_beta, "phase1");
    read(p, "particle_count", c.particle_count, "phase1");
    if (p.contains("prior")) {
      std::vector<double> prior;
      read(p, "prior", prior, "phase1");
      c.prior = Eigen::Map<const Vector>(prior.data(), static_cast<Index>(prior.size()));
    }
  }
  require(c.phase1_beta > 0, "phase1.beta must be positive");
  require(c.particle_count >= 1, "phase1.particle_count must be >= 1");
  require(c.prior.size() == kSepsisChannels, "phase1.prior needs one concentration per reward channel (5)");
  require((c.prior.array() > 0).all(), "phase1.prior concentrations must be positive");

  if (j.contains("prune")) {
    const auto& p = j["prune"];
    check_keys(p, "prune", {"beta", "m"});
    read(p, "beta", c.prune_beta, "prune");
    read(p, "m", c.prune_m, "prune");
  }
  require(c.prune_beta > 0, "prune.beta must be positive");
  require(c.prune_m >= 0, "prune.m must be >= 0");

  if (j.contains("phase2")) {
    const auto& p = j["phase2"];
    check_keys(p, "phase2", {"alpha", "total_updates", "target_update_period", "batch_size", "warm_start"});
    read_stage(p, "phase2", c.phase2);
    read(p, "warm_start", c.warm_start, "phase2");
  }

  if (j.contains("baselines")) {
    const auto& b = j["baselines"];
    check_keys(b, "baselines", {"dqn", "cql", "bcq"});
    if (b.contains("dqn")) {
      check_keys(b["dqn"], "baselines.dqn", {"total_updates", "target_update_period", "batch_size", "reward_scale"});
      read_stage(b["dqn"], "baselines.dqn", c.dqn);
      read(b["dqn"], "reward_scale", c.reward_scale, "baselines.dqn");
    }
    if (b.contains("cql")) {
      check_keys(b["cql"], "baselines.cql", {"total_updates", "target_update_period", "batch_size", "alpha"});
      read_stage(b["cql"], "baselines.cql", c.cql);
    }
    if (b.contains("bcq")) {
      check_keys(b["bcq"], "baselines.bcq", {"total_updates", "target_update_period", "batch_size", "thresholds"});
      read_stage(b["bcq"], "baselines.bcq", c.bcq);
      read(b["bcq"], "thresholds", c.bcq_thresholds, "baselines.bcq");
    }
  }
  require(c.reward_scale >= 0, "baselines.dqn.reward_scale must be >= 0");
  require(!c.bcq_thresholds.empty(), "baselines.bcq.thresholds must not be empty");
  for (double t : c.bcq_thresholds) require(t >= 0 && t <= 1, "baselines.bcq.thresholds must lie in [0, 1]");

  if (j.contains("eval")) {
    const auto& e = j["eval"];
    check_keys(e, "eval", {"metrics", "n_episodes", "every", "softening"});
    read(e, "metrics", c.metrics, "eval");
    read(e, "n_episodes", c.eval_episodes, "eval");
    read(e, "every", c.eval_every, "eval");
    read(e, "softening", c.softening, "eval");
  }
  static const std::set<std::string> known_metrics{"rollout", "wis", "delta_mr", "overlap", "prune", "curve"};
  for (const auto& m : c.metrics) require(known_metrics.count(m) == 1, "unknown metric '" + m + "'");
  require(c.eval_episodes >= 1, "eval.n_episodes must be >= 1");
  require(c.eval_every >= 0, "eval.every must be >= 0");
  require(c.softening >= 0 && c.softening < 1, "eval.softening must lie in [0, 1)");

  read(j, "seeds", c.seeds, "");
  require(!c.seeds.empty(), "seeds must not be empty");

  c.resolved = j;
  c.hash = hex64(fnv1a64(j.dump()));
  return c;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  return parse_experiment_config(resolve_config_json(path), path.parent_path());
}

// ---------------------------------------------------------------- stages

DataBundle split_data(const ExperimentConfig& config, TransitionDataset all, std::uint64_t seed) {
  DataBundle b;
  if (config.offline()) {
    auto parts = split(all, config.split_fractions, stage_seed(seed, "split"));
    b.train = std::move(parts[0]);
    b.validation = std::move(parts[1]);
    b.test = std::move(parts[2]);
  } else {
    b.train = all;
    b.train.split_tag = "train";
  }
  b.all = std::move(all);
  return b;
}

DataBundle make_data(const ExperimentConfig& config, std::uint64_t seed) {
  Rng rng(stage_seed(seed, "data"));
  const SepsisSimulator sim(config.table);
  return split_data(config, generate_offline_dataset(sim, config.behavior, config.trajectories, config.episode, rng),
                    seed);
}

Phase1Result run_phase1(const ExperimentConfig& config, const TransitionDataset& train, std::uint64_t seed) {
  if (train.empty()) throw MissingPrerequisite("phase1: training data is empty");
  if (train.channel_count() != config.prior.size())
    throw ConfigError("phase1: prior has " + std::to_string(config.prior.size()) + " channels, data has " +
                      std::to_string(train.channel_count()));
  const TrainerConfig tc = config.trainer(config.phase1, config.phase1_beta);
  Rng rng(stage_seed(seed, "phase1"));
  Phase1Result r;
  r.net = VectorQNetwork::create(train.state_dim(), train.action_count(), train.channel_count(), tc, rng);
  VectorQNetwork target = r.net;
  Optimizer opt = Optimizer::adam(tc.learning_rate);
  VectorTrainingSpec spec;
  spec.data = train.transitions();
  spec.cql_alpha = config.phase1.alpha;
  r.log = train_vector(r.net, target, opt, spec, WeightPrior(config.prior), tc, rng, &r.diagnostics);
  return r;
}

std::vector<Vector> prune_states(const TransitionDataset& data) {
  std::vector<Vector> states;
  const bool sepsis = data.state_dim() == SepsisState::kFeatureDim && data.action_count() == kSepsisActions;
  if (sepsis) states = sepsis_state_features();
  for (const auto& t : data.transitions()) {
    states.push_back(t.state);
    states.push_back(t.next_state);
  }
  return states;
}

PruneTable run_prune(const ExperimentConfig& config, const VectorQNetwork& net, const TransitionDataset& data,
                     std::uint64_t seed, const std::string& checkpoint_id) {
  Rng rng(stage_seed(seed, "prune"));
  return build_prune_table(net, prune_states(data), WeightPrior(config.prior), config.prune_beta, config.prune_m, rng,
                           checkpoint_id);
}

ReturnEstimate evaluate_rollouts(const ExperimentConfig& config, const Network& q_net, const PruneTable* table,
                                 std::uint64_t seed) {
  Rng rng(stage_seed(seed, "eval"));
  return rollout_return(table_policy(tabulate_sepsis_policy(q_net, table)), SepsisSimulator(config.table),
                        config.eval_episodes, config.episode, rng);
}

namespace {

// Online network initialized from the channel-0 outputs of a phase-1 network.
Network channel0_network(const VectorQNetwork& vq) {
  Network net = vq.net;
  auto& last = net.layers().back();
  const int A = vq.action_count, d = vq.channel_count;
  Matrix w(last.weight.rows(), A);
  RowVector b(A);
  for (int a = 0; a < A; ++a) {
    w.col(a) = last.weight.col(a * d);
    b[a] = last.bias[a * d];
  }
  last.weight = std::move(w);
  last.bias = std::move(b);
  return net;
}

ScalarResult train_with(const ExperimentConfig& config, const StageSettings& stage, std::span<const Transition> data,
                        Index state_dim, int action_count, std::vector<ActionSet> next_allowed,
                        const PruneTable* eval_table, std::uint64_t seed, std::string_view tag,
                        const Network* init = nullptr) {
  const TrainerConfig tc = config.trainer(stage);
  Rng rng(stage_seed(seed, tag));
  QAgent agent = QAgent::create(state_dim, action_count, tc, rng);
  if (init) {
    copy_parameters(*init, agent.online);
    copy_parameters(*init, agent.target);
  }
  ScalarTrainingSpec spec;
  spec.data = data;
  spec.next_allowed = std::move(next_allowed);
  spec.cql_alpha = stage.alpha;
  spec.log_every = 1000;
  if (!config.offline() && config.wants("rollout") && config.eval_every > 0) {
    spec.eval_every = config.eval_every;
    spec.evaluate = [&](const Network& net) { return evaluate_rollouts(config, net, eval_table, seed).mean; };
  }
  ScalarResult r;
  r.log = train_scalar(agent, spec, tc, rng);
  r.net = std::move(agent.online);
  return r;
}

}  // namespace

ScalarResult run_phase2(const ExperimentConfig& config, const TransitionDataset& train, const PruneTable& table,
                        std::uint64_t seed, const VectorQNetwork* warm_start) {
  if (train.empty()) throw MissingPrerequisite("phase2: training data is empty");
  if (table.action_count() != train.action_count())
    throw ConfigError("phase2: prune table action count does not match the data");
  std::int64_t fallbacks = 0;
  auto allowed = next_allowed_from_table(train.transitions(), table, &fallbacks);
  std::optional<Network> init;
  if (warm_start) init = channel0_network(*warm_start);
  ScalarResult r = train_with(config, config.phase2, train.transitions(), train.state_dim(), train.action_count(),
                              std::move(allowed), &table, seed, "phase2", init ? &*init : nullptr);
  r.fallbacks = fallbacks;
  r.log.fallbacks = fallbacks;
  return r;
}

std::vector<Transition> scalarize_rewards(std::span<const Transition> data, double scale) {
  std::vector<Transition> out(data.begin(), data.end());
  for (auto& t : out) t.reward[0] += scale * t.reward.tail(t.reward.size() - 1).sum();
  return out;
}

ScalarResult run_baseline(const ExperimentConfig& config, const std::string& method, const TransitionDataset& train,
                          std::uint64_t seed, const BehaviorModel* behavior, double threshold) {
  if (train.empty()) throw MissingPrerequisite(method + ": training data is empty");
  if (method == "dqn") {
    if (config.reward_scale > 0) {
      const auto data = scalarize_rewards(train.transitions(), config.reward_scale);
      return train_with(config, config.dqn, data, train.state_dim(), train.action_count(), {}, nullptr, seed, "dqn");
    }
    return train_with(config, config.dqn, train.transitions(), train.state_dim(), train.action_count(), {}, nullptr,
                      seed, "dqn");
  }
  if (method == "cql")
    return train_with(config, config.cql, train.transitions(), train.state_dim(), train.action_count(), {}, nullptr,
                      seed, "cql");
  if (method == "bcq") {
    if (!behavior) throw MissingPrerequisite("bcq: behavior model required");
    auto allowed = next_allowed_from_behavior(train.transitions(), *behavior, threshold);
    return train_with(config, config.bcq, train.transitions(), train.state_dim(), train.action_count(),
                      std::move(allowed), nullptr, seed, "bcq");
  }
  throw ConfigError("unknown baseline '" + method + "' (expected dqn, cql or bcq)");
}

PruneTable behavior_table(const BehaviorModel& behavior, std::span<const Vector> states, double threshold) {
  PruneTable table(behavior.action_count(), 0.0, 0, "bcq:" + std::to_string(threshold));
  if (states.empty()) return table;
  Matrix x(static_cast<Index>(states.size()), behavior.state_dim());
  for (std::size_t i = 0; i < states.size(); ++i) x.row(static_cast<Index>(i)) = states[i].transpose();
  const Matrix probs = behavior.predict_probs(x);
  for (std::size_t i = 0; i < states.size(); ++i)
    table.insert(state_key(states[i]), bcq_mask(probs.row(static_cast<Index>(i)).transpose(), threshold));
  return table;
}

BehaviorFit run_behavior_fit(const TransitionDataset& train, const TransitionDataset& validation) {
  return fit_behavior(train, validation.empty() ? nullptr : &validation);
}

EvaluationReport evaluate_policy(const ExperimentConfig& config, const std::string& name, const Network& q_net,
                                 const PruneTable* table, const DataBundle& data, const BehaviorModel* behavior,
                                 std::uint64_t seed) {
  EvaluationReport r;
  r.policy = name;
  r.seed = seed;
  r.provenance = {{"config_hash", config.hash}};
  json skipped = json::array();
  const bool have_test = !data.test.empty();
  const bool sepsis = q_net.input_dim() == SepsisState::kFeatureDim && q_net.output_dim() == kSepsisActions;
  for (const auto& metric : config.metrics) {
    if (metric == "rollout") {
      if (!sepsis) {
        skipped.push_back("rollout: no simulator for this state space");
        continue;
      }
      const auto est = evaluate_rollouts(config, q_net, table, seed);
      r.rollout_mean = est.mean;
      r.rollout_stderr = est.stderr_;
    } else if (!have_test) {
      skipped.push_back(metric + ": no test split");
    } else if (metric == "wis") {
      if (!behavior) {
        skipped.push_back("wis: no behavior model");
        continue;
      }
      const SoftenedPolicy soft{greedy_policy(q_net, table), config.softening, data.test.action_count()};
      const auto w = wis(data.test, soft, *behavior);
      r.wis_value = w.value;
      r.wis_ess = w.effective_sample_size;
    } else if (metric == "delta_mr") {
      try {
        r.delta_mr = delta_mr(data.test, q_net);
      } catch (const InvalidArgument& e) {
        skipped.push_back(std::string("delta_mr: ") + e.what());
      }
    } else if (metric == "overlap") {
      r.behavior_overlap = behavior_overlap(greedy_policy(q_net, table), data.test);
    } else if (metric == "prune") {
      if (!table) continue;
      const auto s = prune_stats(*table, data.test);
      r.mean_prune_size = s.mean_size;
      r.prune_recall = 100.0 * s.recall;
    } else if (metric == "curve") {
      r.percentile_curve = survival_percentile_curve(data.test, taken_action_values(data.test, q_net));
    }
  }
  const TransitionDataset& states = have_test ? data.test : data.train;
  if (!states.empty()) r.action_histogram = action_histogram(greedy_policy(q_net, table), states);
  if (!skipped.empty()) r.provenance["skipped"] = skipped;
  return r;
}

}  // namespace pruneq
