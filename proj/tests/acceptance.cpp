// Acceptance suite: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "pruneq/cli.hpp"
#include "pruneq/experiment.hpp"
#include "tabular.hpp"

using namespace pruneq;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(double x, int precision = 3) {
  std::ostringstream ss;
  ss << std::setprecision(precision) << x;
  return ss.str();
}

double mean(const std::vector<double>& v) { return mean_stderr(v).first; }

double range(const std::vector<double>& v) {
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  return *hi - *lo;
}

void progress(const std::string& text) { std::cerr << "  .. " << text << std::endl; }

// ---------------------------------------------------------------- 1

Verdict gradient_oracle() {
  Rng rng(1);
  std::uniform_int_distribution<int> dim(1, 16);
  double worst = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::array<Index, 4> dims{dim(rng), dim(rng), dim(rng), dim(rng)};
    Network net = Network::he_uniform(dims, rng);
    for (auto& layer : net.layers()) layer.bias = RowVector::Random(layer.bias.size()) * 0.5;
    const Matrix x = Matrix::Random(6, dims[0]);
    const Matrix g = Matrix::Random(6, dims[3]);
    worst = std::max(worst, oracle::check_gradients(net, x, g).max_relative_error);
  }
  return {worst < 1e-4, "max relative error " + fmt(worst)};
}

// ---------------------------------------------------------------- 2

Verdict tabular_fixed_point() {
  const ChainMDP mdp = ChainMDP::line(5, 0.9, 1.0);
  Vector w(1);
  w << 1;
  const Matrix qstar = oracle::value_iterate(mdp, w, oracle::max_backup);
  const auto run = tabular::scalar_q_learning(mdp, qstar, 1e-3, 50000, 1.0 / (mdp.state_count() + 1));
  const double err = (run.q - qstar).cwiseAbs().maxCoeff();
  return {run.updates > 0 && run.updates < 50000 && err < 1e-3,
          "sup-norm error " + fmt(err) + " after " + std::to_string(run.updates) + " updates"};
}

// ---------------------------------------------------------------- 3

Verdict conservative_scalarization() {
  const int S = 4, A = 3, d = 2;
  const double gamma = 0.8, beta = 10.0;
  Rng rng(3);
  std::uniform_int_distribution<int> next(0, S - 1);
  std::uniform_real_distribution<double> u(0, 1);
  ChainMDP mdp(S, A, d, gamma), same(S, A, d, gamma);
  for (int s = 0; s < S; ++s)
    for (int a = 0; a < A; ++a) {
      const int s2 = next(rng);
      Vector r(d);
      for (auto& x : r) x = u(rng);
      mdp.set(s, a, s2, r);
      same.set(s, a, next(rng), Vector::Constant(d, u(rng)));
    }
  Vector ones(d);
  ones.setOnes();
  const WeightPrior prior(ones);

  const auto net = tabular::vector_q_learning(mdp, prior, beta, 20000, 4);
  double worst = -1e300;
  for (int k = 0; k < 100; ++k) {
    const Vector w = sample_weight(prior, rng);
    const Matrix qstar = oracle::value_iterate(mdp, w, oracle::max_backup);
    worst = std::max(worst, (tabular::scalarized(net, S, w) - qstar).maxCoeff());
  }

  const auto twin = tabular::vector_q_learning(same, prior, beta, 20000, 5);
  const auto softmax_backup = [&](const Vector& row) {
    const Vector p = (beta * (row.array() - row.maxCoeff())).exp().matrix();
    return p.dot(row) / p.sum();
  };
  const Matrix scalar = oracle::value_iterate(same, Vector::Unit(d, 0), softmax_backup);
  double match = 0;
  for (int c = 0; c < d; ++c) match = std::max(match, (tabular::channel(twin, S, c) - scalar).cwiseAbs().maxCoeff());

  return {worst <= 0.05 && match <= 0.05,
          "max wQ - Q*_w " + fmt(worst) + " over 100 w; identical channels vs softmax double Q " + fmt(match)};
}

// ---------------------------------------------------------------- 4-6

ExperimentConfig off_policy_config(std::int64_t updates, double beta) {
  ExperimentConfig cfg = load_experiment_config(fs::path(PRUNEQ_CONFIG_DIR) / "off_policy.json");
  cfg.phase1.total_updates = cfg.phase2.total_updates = cfg.dqn.total_updates = updates;
  cfg.phase1_beta = cfg.prune_beta = beta;
  return cfg;
}

struct SimRun {
  double baseline = 0;
  double pruned = 0;
};

double best_return(const ScalarResult& r) {
  if (!r.log.best_return) throw std::runtime_error("run has no evaluation");
  return *r.log.best_return;
}

double pruned_best(const ExperimentConfig& cfg, const DataBundle& data, std::uint64_t seed) {
  const Phase1Result p1 = run_phase1(cfg, data.train, seed);
  const PruneTable table = run_prune(cfg, p1.net, data.train, seed);
  return best_return(run_phase2(cfg, data.train, table, seed));
}

SimRun sim_run(const ExperimentConfig& cfg, std::uint64_t seed) {
  const DataBundle data = make_data(cfg, seed);
  return {best_return(run_baseline(cfg, "dqn", data.train, seed)), pruned_best(cfg, data, seed)};
}

const std::vector<std::uint64_t> kSimSeeds{0, 1, 2};

Verdict off_policy_headline() {
  const std::vector<double> betas{20, 40, 160};
  std::vector<double> base;
  std::map<double, std::vector<double>> pruned;
  for (std::uint64_t seed : kSimSeeds) {
    ExperimentConfig cfg = off_policy_config(200000, 40);
    const DataBundle data = make_data(cfg, seed);
    base.push_back(best_return(run_baseline(cfg, "dqn", data.train, seed)));
    progress("seed " + std::to_string(seed) + " baseline " + fmt(base.back()));
    for (double beta : betas) {
      cfg.phase1_beta = cfg.prune_beta = beta;
      pruned[beta].push_back(pruned_best(cfg, data, seed));
      progress("seed " + std::to_string(seed) + " beta " + fmt(beta) + " pruned " + fmt(pruned[beta].back()));
    }
  }
  int wins = 0;
  double gap = 0;
  std::string detail = "baseline " + fmt(mean(base));
  for (double beta : betas) {
    const double g = mean(pruned[beta]) - mean(base);
    wins += g > 0;
    gap += g / static_cast<double>(betas.size());
    detail += "; beta " + fmt(beta) + " " + fmt(mean(pruned[beta]));
  }
  detail += "; wins " + std::to_string(wins) + "/3, mean gap " + fmt(gap);
  return {wins >= 2 && gap > 0, detail};
}

Verdict weighting_robustness() {
  std::vector<double> base_means, pruned_means;
  std::string detail;
  for (double scale : {0.1, 1.0, 10.0}) {
    ExperimentConfig cfg = off_policy_config(100000, 100);
    cfg.prior = Vector::Constant(kSepsisChannels, scale);
    cfg.prior[0] = 1;
    cfg.reward_scale = scale;
    std::vector<double> b, p;
    for (std::uint64_t seed : kSimSeeds) {
      const SimRun r = sim_run(cfg, seed);
      b.push_back(r.baseline);
      p.push_back(r.pruned);
      progress("scale " + fmt(scale) + " seed " + std::to_string(seed) + " baseline " + fmt(r.baseline) +
               " pruned " + fmt(r.pruned));
    }
    base_means.push_back(mean(b));
    pruned_means.push_back(mean(p));
    detail += "scale " + fmt(scale) + ": baseline " + fmt(mean(b)) + " pruned " + fmt(mean(p)) + "; ";
  }
  const double rb = range(base_means), rp = range(pruned_means);
  return {rp < rb, detail + "range pruned " + fmt(rp) + " vs baseline " + fmt(rb)};
}

Verdict noise_robustness() {
  std::map<double, std::vector<double>> base, pruned;
  for (double noise : {0.0, 0.1, 10.0}) {
    ExperimentConfig cfg = off_policy_config(100000, 40);
    cfg.episode.noise_std = noise;
    for (std::uint64_t seed : kSimSeeds) {
      const SimRun r = sim_run(cfg, seed);
      base[noise].push_back(r.baseline);
      pruned[noise].push_back(r.pruned);
      progress("noise " + fmt(noise) + " seed " + std::to_string(seed) + " baseline " + fmt(r.baseline) +
               " pruned " + fmt(r.pruned));
    }
  }
  const auto [m0, se0] = mean_stderr(pruned[0.0]);
  const double m01 = mean(pruned[0.1]);
  const double gap0 = m0 - mean(base[0.0]), gap10 = mean(pruned[10.0]) - mean(base[10.0]);
  return {std::abs(m01 - m0) <= se0 && gap10 < gap0,
          "pruned std 0 " + fmt(m0) + " +- " + fmt(se0) + ", std 0.1 " + fmt(m01) + "; gap std 0 " + fmt(gap0) +
              ", std 10 " + fmt(gap10)};
}

// ---------------------------------------------------------------- 7, 10

struct OfflineSeed {
  std::map<double, PruneStats> prune;
  std::map<double, EvaluationReport> pruned;
  EvaluationReport cql;
  std::map<double, EvaluationReport> bcq;
};

const std::vector<double> kOfflineBetas{20, 40, 160};
constexpr std::int64_t kOfflineUpdates = 100000;

std::vector<OfflineSeed> offline_runs() {
  static std::vector<OfflineSeed> cache;
  if (!cache.empty()) return cache;
  ExperimentConfig cfg = load_experiment_config(fs::path(PRUNEQ_CONFIG_DIR) / "offline.json");
  for (auto* s : {&cfg.phase1, &cfg.phase2, &cfg.cql, &cfg.bcq}) s->total_updates = kOfflineUpdates;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    OfflineSeed out;
    const DataBundle data = make_data(cfg, seed);
    const BehaviorFit fit = run_behavior_fit(data.train, data.validation);
    const auto evaluate = [&](const std::string& name, const Network& net, const PruneTable* table) {
      return evaluate_policy(cfg, name, net, table, data, &fit.model, seed);
    };
    out.cql = evaluate("cql", run_baseline(cfg, "cql", data.train, seed).net, nullptr);
    const auto states = prune_states(data.all);
    for (double t : cfg.bcq_thresholds) {
      const PruneTable table = behavior_table(fit.model, states, t);
      out.bcq[t] = evaluate("bcq", run_baseline(cfg, "bcq", data.train, seed, &fit.model, t).net, &table);
    }
    for (double beta : kOfflineBetas) {
      cfg.phase1_beta = cfg.prune_beta = beta;
      const Phase1Result p1 = run_phase1(cfg, data.train, seed);
      const PruneTable table = run_prune(cfg, p1.net, data.all, seed);
      out.prune[beta] = prune_stats(table, data.test);
      out.pruned[beta] = evaluate("pruned_cql", run_phase2(cfg, data.train, table, seed).net, &table);
    }
    progress("offline seed " + std::to_string(seed) + " done");
    cache.push_back(std::move(out));
  }
  return cache;
}

template <typename F>
double seed_mean(const std::vector<OfflineSeed>& runs, F metric) {
  std::vector<double> v;
  for (const auto& r : runs) v.push_back(metric(r));
  return mean(v);
}

Verdict pruning_monotonicity() {
  const auto runs = offline_runs();
  std::vector<double> size, recall;
  std::string detail;
  for (double beta : kOfflineBetas) {
    size.push_back(seed_mean(runs, [&](const OfflineSeed& r) { return r.prune.at(beta).mean_size; }));
    recall.push_back(seed_mean(runs, [&](const OfflineSeed& r) { return r.prune.at(beta).recall; }));
    detail += "beta " + fmt(beta) + ": size " + fmt(size.back()) + " recall " + fmt(recall.back()) + "; ";
  }
  const double chance = 1.0 / kSepsisActions;
  const bool ok = size[0] > size[1] && size[1] > size[2] && recall[0] >= recall[1] && recall[1] >= recall[2] &&
                  recall[0] > 1.5 * chance;
  return {ok, detail + "1.5x chance " + fmt(1.5 * chance)};
}

Verdict offline_ordering() {
  const auto runs = offline_runs();
  double best_beta = kOfflineBetas[0], best_wis = -1e300;
  for (double beta : kOfflineBetas) {
    const double w = seed_mean(runs, [&](const OfflineSeed& r) { return *r.pruned.at(beta).wis_value; });
    if (w > best_wis) best_wis = w, best_beta = beta;
  }
  const double pruned_dmr = seed_mean(runs, [&](const OfflineSeed& r) { return *r.pruned.at(best_beta).delta_mr; });
  const double cql_wis = seed_mean(runs, [](const OfflineSeed& r) { return *r.cql.wis_value; });
  double bcq_dmr = -1e300, bcq_t = 0;
  for (const auto& [t, rep] : runs[0].bcq) {
    const double m = seed_mean(runs, [&](const OfflineSeed& r) { return *r.bcq.at(t).delta_mr; });
    if (m > bcq_dmr) bcq_dmr = m, bcq_t = t;
  }
  return {best_wis >= cql_wis && pruned_dmr >= bcq_dmr,
          "pruned CQL (beta " + fmt(best_beta) + ") WIS " + fmt(best_wis) + " vs CQL " + fmt(cql_wis) +
              "; pruned dMR " + fmt(pruned_dmr) + " vs best BCQ (t=" + fmt(bcq_t) + ") " + fmt(bcq_dmr)};
}

// ---------------------------------------------------------------- 8, 9

TransitionDataset bandit(int n, const Vector& behavior, const Vector& win, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  TransitionDataset d(1, 2, 1);
  for (int k = 0; k < n; ++k) {
    Transition t;
    t.trajectory = k;
    t.state = t.next_state = Vector::Ones(1);
    t.action = u(rng) < behavior[0] ? 0 : 1;
    t.reward = Vector::Constant(1, u(rng) < win[t.action] ? 100.0 : -100.0);
    t.terminal = true;
    d.add(t);
  }
  return d;
}

Verdict wis_sanity() {
  const SepsisSimulator sim;
  Rng rng(8);
  const TransitionDataset d = generate_offline_dataset(sim, {"heuristic", 0.5}, 3000, EpisodeConfig{}, rng);
  const BehaviorFit fit = fit_behavior(d);
  const ActionProbs b = [&](const Eigen::Ref<const Vector>& s) { return fit.model.action_probs(s); };
  double empirical = 0;
  for (const auto& t : d.transitions()) empirical += t.reward[0];
  empirical /= static_cast<double>(d.trajectory_count());
  const double err_a = std::abs(wis(d, b, b).value - empirical);

  Vector pb(2), pe(2), win(2);
  pb << 0.4, 0.6;
  pe << 0.2, 0.8;
  win << 0.6, 0.3;
  const double truth = pe.dot(((200 * win.array()) - 100).matrix());
  const double est = wis(bandit(100000, pb, win, 9), [&](const Eigen::Ref<const Vector>&) { return pe; },
                         [&](const Eigen::Ref<const Vector>&) { return pb; })
                         .value;
  return {err_a < 1e-9 && std::abs(est - truth) < 1,
          "eval=behavior error " + fmt(err_a) + "; bandit " + fmt(est, 5) + " vs " + fmt(truth, 5)};
}

TransitionDataset outcomes(int n, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  std::uniform_int_distribution<int> len(1, 6);
  TransitionDataset d(2, 3, 1);
  for (int k = 0; k < n; ++k) {
    const bool death = u(rng) < 0.3;
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
      t.terminal = i + 1 == steps;
      if (t.terminal) t.reward[0] = death ? -100 : 100;
      d.add(t);
    }
  }
  return d;
}

Verdict delta_mr_construction() {
  const TransitionDataset d = outcomes(4000, 90);
  std::vector<double> q, noisy, transformed;
  Rng rng(91);
  std::normal_distribution<double> n(0, 1);
  for (const auto& t : d.transitions()) {
    q.push_back(t.state[1]);
    noisy.push_back(t.state[1] + n(rng));
    transformed.push_back(std::exp(3 * noisy.back()) - 7);
  }
  const double perfect = delta_mr(d, q);
  double constant = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const TransitionDataset c = outcomes(10000, 100 + seed);
    constant += delta_mr(c, std::vector<double>(c.size(), 3.0)) / 10;
  }
  const double a = delta_mr(d, noisy), b = delta_mr(d, transformed);
  return {perfect == 100 && std::abs(constant) < 2 && a == b,
          "perfect " + fmt(perfect) + "; constant Q mean over 10 seeds " + fmt(constant) + "; monotone transform " +
              fmt(a) + " vs " + fmt(b)};
}

// ---------------------------------------------------------------- 11

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Verdict determinism() {
  const fs::path root = fs::temp_directory_path() / "pruneq_acceptance_determinism";
  fs::remove_all(root);
  const std::vector<std::string> settings{
      "--set", "dataset.trajectories=300",        "--set", "phase1.total_updates=2000",
      "--set", "phase2.total_updates=2000",       "--set", "baselines.cql.total_updates=2000",
      "--set", "baselines.bcq.total_updates=2000", "--set", "baselines.bcq.thresholds=[0.3]",
      "--set", "network.hidden_width=16",         "--set", "seeds=[0,1]"};
  std::vector<std::string> metric_files;
  for (const char* run : {"a", "b"}) {
    const fs::path out = root / run;
    const auto call = [&](std::vector<std::string> args) {
      args.insert(args.begin(), "pruneq");
      args.insert(args.end(), {"--config", (fs::path(PRUNEQ_CONFIG_DIR) / "offline.json").string(), "--out",
                               out.string()});
      args.insert(args.end(), settings.begin(), settings.end());
      std::vector<const char*> argv;
      for (const auto& a : args) argv.push_back(a.c_str());
      std::ostringstream sink;
      const int code = run_cli(static_cast<int>(argv.size()), argv.data(), sink, sink);
      if (code != 0) throw std::runtime_error(args[1] + " exited with " + std::to_string(code) + ": " + sink.str());
    };
    call({"gen-data"});
    for (const char* stage : {"phase1", "prune", "phase2", "cql", "bcq"}) call({"train", "--stage", stage});
    call({"eval"});
  }
  std::size_t compared = 0, differing = 0;
  for (const auto& entry : fs::recursive_directory_iterator(root / "a")) {
    if (!entry.is_regular_file()) continue;
    const std::string name = entry.path().filename().string();
    if (name == "manifest.json") continue;  // holds wall-clock timings
    const fs::path twin = root / "b" / fs::relative(entry.path(), root / "a");
    ++compared;
    if (!fs::exists(twin) || slurp(entry.path()) != slurp(twin)) ++differing;
  }
  fs::remove_all(root);
  return {compared > 0 && differing == 0,
          std::to_string(compared) + " files compared, " + std::to_string(differing) + " differ"};
}

struct Criterion {
  int id;
  const char* name;
  double budget_seconds;  // 0: no runtime bound
  std::function<Verdict()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria{
      {1, "gradient oracle", 10, gradient_oracle},
      {2, "tabular fixed point", 30, tabular_fixed_point},
      {3, "conservative scalarization", 300, conservative_scalarization},
      {4, "off-policy headline", 7200, off_policy_headline},
      {5, "weighting robustness", 0, weighting_robustness},
      {6, "noise robustness", 0, noise_robustness},
      {7, "pruning monotonicity", 0, pruning_monotonicity},
      {8, "WIS sanity", 60, wis_sanity},
      {9, "delta MR construction", 0, delta_mr_construction},
      {10, "offline ordering", 0, offline_ordering},
      {11, "determinism", 0, determinism},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failures = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && selected.count(c.id) == 0) continue;
    const auto t0 = Clock::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    const double seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    if (c.budget_seconds > 0 && seconds > c.budget_seconds) {
      v.pass = false;
      v.detail += "; over the " + fmt(c.budget_seconds) + " s budget";
    }
    failures += !v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << "  " << std::setw(2) << c.id << "  " << c.name << "  (" << fmt(seconds)
              << " s)  " << v.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
