#include "pruneq/cli.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "pruneq/experiment.hpp"
#include "pruneq/seeding.hpp"

namespace pruneq {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingPrerequisite("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

json read_json(const fs::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

std::string file_id(const fs::path& path) { return hex64(fnv1a64(read_file(path))); }

std::string format_threshold(double t) {
  std::ostringstream ss;
  ss << t;
  return ss.str();
}

// Every artifact of a seed directory is recorded here with its content hash.
class Manifest {
 public:
  Manifest(fs::path dir, const ExperimentConfig& config, std::uint64_t seed) : dir_(std::move(dir)) {
    const fs::path path = dir_ / "manifest.json";
    if (fs::exists(path)) doc_ = read_json(path);
    doc_["config_hash"] = config.hash;
    doc_["seed"] = seed;
    if (!doc_.contains("files")) doc_["files"] = json::object();
    if (!doc_.contains("stages")) doc_["stages"] = json::object();
  }

  void record(const std::string& name, const std::string& stage) {
    const fs::path path = dir_ / name;
    doc_["files"][name] = {{"id", file_id(path)}, {"bytes", fs::file_size(path)}, {"stage", stage}};
  }
  void timing(const std::string& stage, double seconds) { doc_["stages"][stage] = {{"seconds", seconds}}; }
  void save() const { write_file(dir_ / "manifest.json", doc_.dump(2) + "\n"); }

 private:
  fs::path dir_;
  json doc_;
};

struct Context {
  ExperimentConfig config;
  fs::path out;
  std::vector<std::uint64_t> seeds;
  std::ostream* log;

  fs::path seed_dir(std::uint64_t seed) const { return out / ("seed-" + std::to_string(seed)); }
};

Context make_context(const std::string& config_path, const std::vector<std::string>& overrides,
                     std::optional<std::uint64_t> seed, const std::string& out, std::ostream& log) {
  if (!fs::exists(config_path)) throw ConfigError("config file not found: " + config_path);
  const fs::path path(config_path);
  json resolved = apply_overrides(resolve_config_json(path), overrides);
  Context ctx{parse_experiment_config(resolved, path.parent_path()), out, {}, &log};
  ctx.seeds = seed ? std::vector<std::uint64_t>{*seed} : ctx.config.seeds;
  fs::create_directories(ctx.out);
  write_file(ctx.out / "config.json", ctx.config.resolved.dump(2) + "\n");
  return ctx;
}

DataBundle load_bundle(const Context& ctx, const fs::path& dir) {
  const auto need = [&](const char* name) {
    const fs::path p = dir / name;
    if (!fs::exists(p)) throw MissingPrerequisite(p.string() + " is missing; run gen-data first");
    return load_dataset(p.string());
  };
  DataBundle b;
  b.all = need("dataset.jsonl");
  if (ctx.config.offline()) {
    b.train = need("train.jsonl");
    b.validation = need("validation.jsonl");
    b.test = need("test.jsonl");
  } else {
    b.train = b.all;
  }
  return b;
}

BehaviorModel load_behavior(const fs::path& dir) {
  const fs::path p = dir / "behavior.ckpt";
  if (!fs::exists(p)) throw MissingPrerequisite(p.string() + " is missing; run gen-data first");
  return BehaviorModel(load_checkpoint(p.string()).network);
}

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// ---------------------------------------------------------------- commands

void cmd_gen_data(const Context& ctx) {
  for (std::uint64_t seed : ctx.seeds) {
    const auto t0 = Clock::now();
    const fs::path dir = ctx.seed_dir(seed);
    fs::create_directories(dir);
    Manifest manifest(dir, ctx.config, seed);
    const DataBundle data = make_data(ctx.config, seed);
    save_dataset(data.all, (dir / "dataset.jsonl").string());
    manifest.record("dataset.jsonl", "gen-data");
    if (ctx.config.offline()) {
      for (const auto& [name, part] : {std::pair{"train.jsonl", &data.train}, std::pair{"validation.jsonl", &data.validation},
                                       std::pair{"test.jsonl", &data.test}}) {
        save_dataset(*part, (dir / name).string());
        manifest.record(name, "gen-data");
      }
    }
    if (!data.train.empty()) {
      const BehaviorFit fit = run_behavior_fit(data.train, data.validation);
      save_checkpoint((dir / "behavior.ckpt").string(), fit.model.network(), ModelKind::kBehavior);
      manifest.record("behavior.ckpt", "gen-data");
      const json summary{{"train_loss", fit.train_loss},       {"validation_loss", fit.validation_loss},
                         {"train_accuracy", fit.train_accuracy}, {"validation_accuracy", fit.validation_accuracy},
                         {"epochs", fit.epochs_run}};
      write_file(dir / "behavior.json", summary.dump(2) + "\n");
      manifest.record("behavior.json", "gen-data");
    }
    manifest.timing("gen-data", seconds_since(t0));
    manifest.save();
    *ctx.log << "seed " << seed << ": " << data.all.trajectory_count() << " trajectories, " << data.all.size()
             << " transitions -> " << dir.string() << '\n';
  }
}

void write_log(const fs::path& dir, Manifest& manifest, const std::string& name, const TrainingLog& log,
               const std::string& stage) {
  write_file(dir / name, log.csv());
  manifest.record(name, stage);
}

void cmd_train(const Context& ctx, const std::string& stage) {
  for (std::uint64_t seed : ctx.seeds) {
    const auto t0 = Clock::now();
    const fs::path dir = ctx.seed_dir(seed);
    const DataBundle data = load_bundle(ctx, dir);
    Manifest manifest(dir, ctx.config, seed);
    const auto& cfg = ctx.config;
    if (stage == "phase1") {
      const Phase1Result r = run_phase1(cfg, data.train, seed);
      save_checkpoint((dir / "phase1.ckpt").string(), r.net.net, ModelKind::kVectorQ);
      manifest.record("phase1.ckpt", stage);
      write_log(dir, manifest, "phase1_log.csv", r.log, stage);
      *ctx.log << "seed " << seed << ": phase1 final loss " << r.log.points.back().loss << ", "
               << r.diagnostics.zero_likelihood_fallbacks << " zero-likelihood fallbacks\n";
    } else if (stage == "prune") {
      const fs::path ckpt = dir / "phase1.ckpt";
      if (!fs::exists(ckpt)) throw MissingPrerequisite(ckpt.string() + " is missing; run train --stage phase1 first");
      const VectorQNetwork net(load_checkpoint(ckpt.string()).network, data.all.action_count(),
                               data.all.channel_count());
      const PruneTable table = run_prune(cfg, net, data.all, seed, "phase1.ckpt:" + file_id(ckpt));
      save_prune_table((dir / "prune_table.jsonl").string(), table);
      manifest.record("prune_table.jsonl", stage);
      double size = 0;
      for (const auto& [key, set] : table.entries()) size += set.size();
      *ctx.log << "seed " << seed << ": pruned " << table.size() << " states, mean permitted set "
               << size / static_cast<double>(std::max<std::size_t>(1, table.size())) << '\n';
    } else if (stage == "phase2") {
      const fs::path table_path = dir / "prune_table.jsonl";
      if (!fs::exists(table_path))
        throw MissingPrerequisite(table_path.string() + " is missing; run train --stage prune first");
      const PruneTable table = load_prune_table(table_path.string(), data.all.action_count());
      std::optional<VectorQNetwork> warm;
      if (cfg.warm_start) {
        const fs::path ckpt = dir / "phase1.ckpt";
        if (!fs::exists(ckpt)) throw MissingPrerequisite(ckpt.string() + " is missing; run train --stage phase1 first");
        warm.emplace(load_checkpoint(ckpt.string()).network, data.all.action_count(), data.all.channel_count());
      }
      const ScalarResult r = run_phase2(cfg, data.train, table, seed, warm ? &*warm : nullptr);
      save_checkpoint((dir / "phase2.ckpt").string(), r.net);
      manifest.record("phase2.ckpt", stage);
      write_log(dir, manifest, "phase2_log.csv", r.log, stage);
      *ctx.log << "seed " << seed << ": phase2 done, " << r.fallbacks << " prune-table fallbacks";
      if (r.log.best_return) *ctx.log << ", best return " << *r.log.best_return;
      *ctx.log << '\n';
    } else if (stage == "dqn" || stage == "cql") {
      const ScalarResult r = run_baseline(cfg, stage, data.train, seed);
      save_checkpoint((dir / (stage + ".ckpt")).string(), r.net);
      manifest.record(stage + ".ckpt", stage);
      write_log(dir, manifest, stage + "_log.csv", r.log, stage);
      *ctx.log << "seed " << seed << ": " << stage << " done";
      if (r.log.best_return) *ctx.log << ", best return " << *r.log.best_return;
      *ctx.log << '\n';
    } else if (stage == "bcq") {
      const BehaviorModel behavior = load_behavior(dir);
      for (double t : cfg.bcq_thresholds) {
        const std::string name = "bcq_t" + format_threshold(t);
        const ScalarResult r = run_baseline(cfg, "bcq", data.train, seed, &behavior, t);
        save_checkpoint((dir / (name + ".ckpt")).string(), r.net);
        manifest.record(name + ".ckpt", stage);
        write_log(dir, manifest, name + "_log.csv", r.log, stage);
        *ctx.log << "seed " << seed << ": " << name << " done\n";
      }
    } else {
      throw ConfigError("unknown stage '" + stage + "'");
    }
    manifest.timing(stage, seconds_since(t0));
    manifest.save();
  }
}

void cmd_eval(const Context& ctx) {
  const auto& cfg = ctx.config;
  std::map<std::string, std::vector<EvaluationReport>> by_policy;
  for (std::uint64_t seed : ctx.seeds) {
    const auto t0 = Clock::now();
    const fs::path dir = ctx.seed_dir(seed);
    const DataBundle data = load_bundle(ctx, dir);
    Manifest manifest(dir, cfg, seed);
    std::optional<BehaviorModel> behavior;
    if (fs::exists(dir / "behavior.ckpt")) behavior = load_behavior(dir);
    const BehaviorModel* bp = behavior ? &*behavior : nullptr;

    std::vector<EvaluationReport> reports;
    const auto eval_one = [&](const std::string& policy, const std::string& ckpt, const PruneTable* table) {
      const Network net = load_checkpoint((dir / ckpt).string()).network;
      EvaluationReport r = evaluate_policy(cfg, policy, net, table, data, bp, seed);
      r.provenance["checkpoint"] = ckpt + ":" + file_id(dir / ckpt);
      reports.push_back(std::move(r));
    };
    if (fs::exists(dir / "phase2.ckpt")) {
      const fs::path table_path = dir / "prune_table.jsonl";
      if (!fs::exists(table_path))
        throw MissingPrerequisite(table_path.string() + " is missing; run train --stage prune first");
      const PruneTable table = load_prune_table(table_path.string(), data.all.action_count());
      eval_one(cfg.phase2.alpha > 0 ? "pruned_cql" : "pruned_ql", "phase2.ckpt", &table);
    }
    for (const std::string name : {"dqn", "cql"})
      if (fs::exists(dir / (name + ".ckpt"))) eval_one(name, name + ".ckpt", nullptr);
    for (double t : cfg.bcq_thresholds) {
      const std::string name = "bcq_t" + format_threshold(t);
      if (!fs::exists(dir / (name + ".ckpt"))) continue;
      if (!bp) throw MissingPrerequisite("behavior.ckpt is missing; run gen-data first");
      const auto states = prune_states(data.all);
      const PruneTable table = behavior_table(*bp, states, t);
      eval_one(name, name + ".ckpt", &table);
    }
    if (reports.empty())
      throw MissingPrerequisite("no checkpoints in " + dir.string() + "; run train first");

    json doc{{"config_hash", cfg.hash}, {"seed", seed}, {"reports", json::array()}};
    for (const auto& r : reports) doc["reports"].push_back(r.to_json());
    if (!data.test.empty()) doc["logged_action_histogram"] = logged_action_histogram(data.test);
    else doc["logged_action_histogram"] = logged_action_histogram(data.train);
    write_file(dir / "report.json", doc.dump(2) + "\n");
    write_file(dir / "report.csv", reports_csv(reports));
    manifest.record("report.json", "eval");
    manifest.record("report.csv", "eval");
    manifest.timing("eval", seconds_since(t0));
    manifest.save();
    for (auto& r : reports) by_policy[r.policy].push_back(std::move(r));
  }

  json summary{{"config_hash", cfg.hash}, {"policies", json::object()}};
  std::vector<EvaluationReport> all;
  for (const auto& [policy, reports] : by_policy) {
    summary["policies"][policy] = aggregate_reports(reports);
    all.insert(all.end(), reports.begin(), reports.end());
  }
  write_file(ctx.out / "report.json", summary.dump(2) + "\n");
  write_file(ctx.out / "report.csv", reports_csv(all));
  for (const auto& [policy, agg] : summary["policies"].items()) {
    *ctx.log << policy;
    for (const auto& [metric, v] : agg.items())
      if (v.is_object()) *ctx.log << "  " << metric << " " << v["mean"].get<double>() << " +- " << v["stderr"].get<double>();
    *ctx.log << '\n';
  }
}

// Reads update_index,loss,mean_q,eval_return,best_return.
std::vector<std::vector<std::string>> read_csv_rows(const fs::path& path) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(read_file(path));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(std::move(cells));
  }
  return rows;
}

void cmd_report(const std::vector<std::string>& run_dirs, const fs::path& out, std::ostream& log) {
  fs::create_directories(out);
  std::ostringstream comparison, curves, sweep, hist;
  comparison << "run,policy,metric,mean,stderr,n\n";
  curves << "run,policy,seed,update_index,eval_return,best_return\n";
  sweep << "run,noise_std,mask_prob,prior_intermediate,reward_scale,prune_beta,policy,rollout_mean,rollout_stderr,"
           "wis_mean,delta_mr_mean\n";
  hist << "run,policy,seed,action,count\n";
  std::map<std::string, std::map<std::string, std::string>> table;  // policy/metric -> run -> text
  std::vector<std::string> names;
  for (const auto& run : run_dirs) {
    const fs::path dir(run);
    const fs::path report = dir / "report.json";
    if (!fs::exists(report)) throw MissingPrerequisite(report.string() + " is missing; run eval first");
    const json summary = read_json(report);
    const json config = fs::exists(dir / "config.json") ? read_json(dir / "config.json") : json::object();
    const std::string name = dir.filename().empty() ? dir.parent_path().filename().string() : dir.filename().string();
    names.push_back(name);
    const auto cfg_value = [&](const char* section, const char* key, double fallback) {
      if (config.contains(section) && config[section].contains(key)) return config[section][key].get<double>();
      return fallback;
    };
    double prior_intermediate = 10.0;
    if (config.contains("phase1") && config["phase1"].contains("prior")) prior_intermediate = config["phase1"]["prior"][1];
    double reward_scale = 0.0;
    if (config.contains("baselines") && config["baselines"].contains("dqn"))
      reward_scale = config["baselines"]["dqn"].value("reward_scale", 0.0);

    for (const auto& [policy, agg] : summary["policies"].items()) {
      const auto metric = [&](const char* m, const char* field) -> std::string {
        if (!agg.contains(m)) return "";
        std::ostringstream ss;
        ss.precision(17);
        ss << agg[m][field].get<double>();
        return ss.str();
      };
      for (const auto& [m, v] : agg.items()) {
        if (!v.is_object()) continue;
        comparison << name << ',' << policy << ',' << m << ',' << metric(m.c_str(), "mean") << ','
                   << metric(m.c_str(), "stderr") << ',' << v["n"].get<std::size_t>() << '\n';
        std::ostringstream cell;
        cell.precision(4);
        cell << v["mean"].get<double>() << " +- " << v["stderr"].get<double>();
        table[policy + " " + m][name] = cell.str();
      }
      sweep << name << ',' << cfg_value("env", "noise_std", 0.0) << ',' << cfg_value("env", "mask_prob", 0.9) << ','
            << prior_intermediate << ',' << reward_scale << ',' << cfg_value("prune", "beta", 40.0) << ',' << policy
            << ',' << metric("rollout_mean", "mean") << ',' << metric("rollout_mean", "stderr") << ','
            << metric("wis", "mean") << ',' << metric("delta_mr", "mean") << '\n';
    }

    for (const auto& entry : fs::directory_iterator(dir)) {
      if (!entry.is_directory() || entry.path().filename().string().rfind("seed-", 0) != 0) continue;
      const std::string seed = entry.path().filename().string().substr(5);
      for (const auto& file : fs::directory_iterator(entry.path())) {
        const std::string fname = file.path().filename().string();
        const auto pos = fname.rfind("_log.csv");
        if (pos == std::string::npos || pos + 8 != fname.size() || fname == "phase1_log.csv") continue;
        const std::string policy = fname.substr(0, pos);
        for (const auto& row : read_csv_rows(file.path()))
          if (row.size() >= 5 && !row[3].empty())
            curves << name << ',' << policy << ',' << seed << ',' << row[0] << ',' << row[3] << ',' << row[4] << '\n';
      }
      const fs::path seed_report = entry.path() / "report.json";
      if (!fs::exists(seed_report)) continue;
      const json doc = read_json(seed_report);
      for (const auto& r : doc["reports"]) {
        if (!r.contains("action_histogram")) continue;
        const auto counts = r["action_histogram"].get<std::vector<std::size_t>>();
        for (std::size_t a = 0; a < counts.size(); ++a)
          hist << name << ',' << r["policy"].get<std::string>() << ',' << seed << ',' << a << ',' << counts[a] << '\n';
      }
      if (doc.contains("logged_action_histogram")) {
        const auto counts = doc["logged_action_histogram"].get<std::vector<std::size_t>>();
        for (std::size_t a = 0; a < counts.size(); ++a)
          hist << name << ",behavior," << seed << ',' << a << ',' << counts[a] << '\n';
      }
    }
  }
  write_file(out / "comparison.csv", comparison.str());
  write_file(out / "learning_curves.csv", curves.str());
  write_file(out / "sweep.csv", sweep.str());
  write_file(out / "action_histograms.csv", hist.str());

  std::ostringstream text;
  text << std::left << std::setw(32) << "policy metric";
  for (const auto& n : names) text << " | " << std::setw(24) << n;
  text << '\n';
  for (const auto& [row, cells] : table) {
    text << std::setw(32) << row;
    for (const auto& n : names) {
      const auto it = cells.find(n);
      text << " | " << std::setw(24) << (it == cells.end() ? "-" : it->second);
    }
    text << '\n';
  }
  write_file(out / "comparison.txt", text.str());
  log << text.str();
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Two-phase Q-learning with action pruning from intermediate rewards"};
  app.require_subcommand(1);

  std::string config_path, out_dir, stage;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides, run_dirs;

  const auto common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "Experiment config (JSON)")->required();
    cmd->add_option("--seed", seed, "Run a single seed instead of the config's seed list");
    cmd->add_option("--out", out_dir, "Output directory")->required();
    cmd->add_option("--set", overrides, "Override a config key, e.g. --set phase1.total_updates=1000");
  };
  auto* gen = app.add_subcommand("gen-data", "Generate the logged dataset and fit the behavior model");
  common(gen);
  auto* train = app.add_subcommand("train", "Train one stage");
  common(train);
  train->add_option("--stage", stage, "phase1, prune, phase2, dqn, cql or bcq")
      ->required()
      ->check(CLI::IsMember({"phase1", "prune", "phase2", "dqn", "cql", "bcq"}));
  auto* eval = app.add_subcommand("eval", "Evaluate every trained policy");
  common(eval);
  auto* report = app.add_subcommand("report", "Compare evaluated runs");
  report->add_option("runs", run_dirs, "Experiment output directories (default: --out)");
  report->add_option("--out", out_dir, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }

  try {
    if (report->parsed()) {
      if (run_dirs.empty()) run_dirs.push_back(out_dir);
      cmd_report(run_dirs, out_dir, out);
      return kExitOk;
    }
    const Context ctx = make_context(config_path, overrides, seed, out_dir, out);
    if (gen->parsed()) cmd_gen_data(ctx);
    else if (train->parsed()) cmd_train(ctx, stage);
    else if (eval->parsed()) cmd_eval(ctx);
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const MissingPrerequisite& e) {
    err << "missing prerequisite: " << e.what() << '\n';
    return kExitMissing;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

}  // namespace pruneq
