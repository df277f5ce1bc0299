// catk: command-line driver for corpus generation, training, cascade
// evaluation and reports.

#include "catk/pipeline.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <iostream>

using namespace catk;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kUsage = 1, kRuntime = 2 };

struct Common {
  std::string config;
  std::string out;
  std::vector<std::string> overrides;
  long long seed = -1;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "experiment config (JSON)");
  cmd->add_option("--out", c.out, "output directory (overrides output_dir)");
  cmd->add_option("--override", c.overrides, "KEY=VALUE on a dotted config path; repeatable")
      ->take_all();
  cmd->add_option("--seed", c.seed, "run seed");
}

ExperimentConfig load(const Common& c) {
  std::vector<std::string> ov = c.overrides;
  if (!c.out.empty()) ov.push_back("output_dir=" + json(c.out).dump());
  return load_experiment_config(c.config.empty() ? std::nullopt
                                                 : std::optional<std::filesystem::path>(c.config),
                                ov);
}

std::uint64_t run_seed(const Common& c, const ExperimentConfig& cfg) {
  return c.seed >= 0 ? static_cast<std::uint64_t>(c.seed) : cfg.seeds.front();
}

void progress(const std::string& msg) {
  static const auto t0 = std::chrono::steady_clock::now();
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::fprintf(stderr, "[%7.1fs] %s\n", s, msg.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cascade-aware training experiments"};
  app.require_subcommand(1);

  Common common;
  auto* gen = app.add_subcommand("gen-data", "generate the corpus with label noise");
  add_common(gen, common);

  std::string role = "small", loss_name = "xent";
  auto* train_cmd = app.add_subcommand("train", "train the large teacher or one small model");
  add_common(train_cmd, common);
  train_cmd->add_option("--role", role, "small or large")->check(CLI::IsMember({"small", "large"}));
  train_cmd->add_option("--loss", loss_name, "loss kind for the small model");

  auto* cache_cmd = app.add_subcommand("cache-teacher", "cache teacher outputs on the train split");
  add_common(cache_cmd, common);

  std::string checkpoint, rules;
  auto* eval_cmd = app.add_subcommand("eval-cascade", "decode, score and sweep one small model");
  add_common(eval_cmd, common);
  eval_cmd->add_option("--loss", loss_name, "loss the small model was trained with");
  eval_cmd->add_option("--checkpoint", checkpoint, "small-model checkpoint (default: the run's)");
  eval_cmd->add_option("--rules", rules, "comma-separated deferral rules (default: config)");

  std::string scores, metric = "exact_match", stem;
  double cost_small = 0, cost_large = 0;
  auto* sweep_cmd = app.add_subcommand("sweep", "sweep thresholds over one score log");
  sweep_cmd->add_option("--scores", scores, "score log CSV")->required();
  sweep_cmd->add_option("--metric", metric, "exact_match or bleu (reads the *_quality columns)");
  sweep_cmd->add_option("--cost-small", cost_small, "per-query cost of the small model")->required();
  sweep_cmd->add_option("--cost-large", cost_large, "per-query cost of the large model")->required();
  sweep_cmd->add_option("--out", stem, "output path stem for .csv/.svg")->required();

  auto* report_cmd = app.add_subcommand("report", "curves and AUDC tables from the score logs");
  add_common(report_cmd, common);

  auto* config_cmd = app.add_subcommand("config", "print the resolved config as JSON");
  add_common(config_cmd, common);

  bool force = false;
  auto* repro_cmd = app.add_subcommand("repro", "run every stage and write summary.json");
  add_common(repro_cmd, common);
  repro_cmd->add_flag("--force", force, "delete an existing output directory first");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*sweep_cmd) {
      const auto log = read_score_log(scores);
      const auto curve = sweep(log, parse_metric(metric), cost_small, cost_large);
      emit_report({Curve{"score_log", metric, curve}}, stem);
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%.17g", audc(curve));
      std::cout << json{{"points", curve.size()}, {"audc", std::stod(buf)}}.dump() << '\n';
      return kOk;
    }

    ExperimentConfig cfg = load(common);
    if (*eval_cmd && !rules.empty()) {
      cfg.rules.clear();
      std::stringstream ss(rules);
      for (std::string r; std::getline(ss, r, ',');) cfg.rules.push_back(r);
      cfg.validate();
    }
    if (*config_cmd) {
      std::cout << cfg.to_json().dump(2) << '\n';
      return kOk;
    }
    if (*repro_cmd && std::filesystem::exists(cfg.output_dir) &&
        !std::filesystem::is_empty(cfg.output_dir)) {
      if (!force) {
        std::fprintf(stderr, "error: output directory %s is not empty (use --force)\n",
                     cfg.output_dir.string().c_str());
        return kUsage;
      }
      std::filesystem::remove_all(cfg.output_dir);
    }
    Experiment ex(cfg, progress);
    const std::uint64_t seed = run_seed(common, cfg);

    if (*gen) {
      const auto counts = ex.gen_data();
      std::cout << json(counts).dump(2) << '\n';
    } else if (*train_cmd) {
      if (role == "large") {
        ex.train_large();
      } else {
        ex.train_small(parse_loss_kind(loss_name), seed);
      }
    } else if (*cache_cmd) {
      ex.cache_teacher();
    } else if (*eval_cmd) {
      ex.eval_cascade(parse_loss_kind(loss_name), seed, checkpoint);
    } else if (*report_cmd) {
      ex.report();
    } else if (*repro_cmd) {
      const json summary = ex.repro();
      bool all = true;
      for (const auto& c : summary["criteria"]) all = all && c["pass"].get<bool>();
      std::cout << ex.paths().summary().string() << '\n';
      if (!all) progress("some acceptance criteria failed; see summary.json");
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntime;
  }
  return kOk;
}
