#pragma once

#include "catk/cascade.hpp"
#include "catk/corpus.hpp"
#include "catk/eval.hpp"
#include "catk/losses.hpp"
#include "catk/model.hpp"
#include "catk/trainer.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace catk {

inline constexpr int kSchemaVersion = 1;

struct CorpusConfig {
  std::uint64_t seed = 1234;
  double noise_rate = 0.15;
  int train_per_task = 4000;
  int eval_per_task = 500;
  std::vector<TaskSpec> tasks;  // empty means the default mixture
};

struct AnalysisConfig {
  std::string trend_rule = "average";
  std::vector<double> rates = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  double classification_rate = 0.2;
};

struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  std::filesystem::path output_dir = "runs/default";
  CorpusConfig corpus;
  ModelConfig small_model;
  ModelConfig large_model;
  TrainConfig small_train;
  TrainConfig large_train;
  std::map<std::string, nlohmann::json> per_loss;  // partial train blocks keyed by loss name
  std::vector<LossKind> losses;
  double w = 0.5;
  std::vector<std::string> rules;
  std::vector<std::uint64_t> seeds;
  RouterConfig router;  // used when "learned_router" is among the rules
  int max_new_tokens = 8;
  bool log_wall_clock = false;  // wall_ms is the one nondeterministic log column
  AnalysisConfig analysis;

  ExperimentConfig();
  void validate() const;
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);

  std::vector<TaskSpec> task_specs() const;
  // Train config for one small-model run; init seed of the model varies with `seed`.
  TrainConfig train_config_for(LossKind loss, std::uint64_t seed) const;
  ModelConfig small_model_for(std::uint64_t seed) const;
  std::string checksum() const;
};

// Applies `a.b.c=VALUE` overrides to a config document. VALUE is parsed as
// JSON when possible and taken as a string otherwise. Unknown paths are
// rejected except under train.per_loss.
void apply_override(nlohmann::json& doc, const std::string& assignment);

// File contents merged over the defaults, then overrides, then validation.
ExperimentConfig load_experiment_config(const std::optional<std::filesystem::path>& path,
                                        const std::vector<std::string>& overrides);

// Artifact locations under the output directory.
struct RunPaths {
  std::filesystem::path root;
  std::filesystem::path corpus() const { return root / "data" / "corpus.jsonl"; }
  std::filesystem::path vocab() const { return root / "data" / "vocab.json"; }
  std::filesystem::path large_dir() const { return root / "large"; }
  std::filesystem::path large_model() const { return large_dir() / "model.ckpt"; }
  std::filesystem::path large_log() const { return large_dir() / "train_log.csv"; }
  std::filesystem::path teacher_cache() const { return large_dir() / "teacher_cache.bin"; }
  std::filesystem::path large_decodes() const { return large_dir() / "eval_decodes.jsonl"; }
  std::filesystem::path small_dir(LossKind loss, std::uint64_t seed) const;
  std::filesystem::path eval_dir(LossKind loss, std::uint64_t seed) const;
  std::filesystem::path report_dir(std::uint64_t seed) const;
  std::filesystem::path summary() const { return root / "summary.json"; }
};

using Progress = std::function<void(const std::string&)>;

// Loaded corpus plus per-example bookkeeping for the eval split.
struct CorpusBundle {
  Vocab vocab = Vocab::standard();
  std::vector<Example> examples;
  std::vector<TaskSpec> specs;
  std::vector<const Example*> eval;
  std::vector<std::string> eval_ids;
  std::vector<MetricKind> eval_metrics;
  std::vector<std::string> eval_tasks;
};

struct ModelEval {
  double eval_loss = 0.0;
  double exact_match = 0.0;
  double next_token_acc = 0.0;
  double bleu = 0.0;  // corpus BLEU over generation tasks
  nlohmann::json to_json() const;
};

class Experiment {
 public:
  explicit Experiment(ExperimentConfig cfg, Progress progress = {});

  const ExperimentConfig& config() const { return cfg_; }
  const RunPaths& paths() const { return paths_; }

  // Each stage reads its inputs from disk and writes its outputs there.
  std::map<std::string, int> gen_data();
  void train_large();
  void cache_teacher();
  void train_small(LossKind loss, std::uint64_t seed);
  // Score logs for every configured rule, one file per rule. `checkpoint`
  // replaces the run's own small-model checkpoint when non-empty.
  void eval_cascade(LossKind loss, std::uint64_t seed,
                    const std::filesystem::path& checkpoint = {});
  // Curves, per-task breakdowns and AUDC tables from the score logs.
  void report();
  // Every stage in order, then the acceptance summary.
  nlohmann::json repro();

  const CorpusBundle& corpus();
  ModelEval evaluate_model(const Model& m);
  std::vector<DecodeResult> large_decodes();
  std::vector<DeferralRuleSpec> rules(LossKind loss, std::uint64_t seed);

  nlohmann::json summarize();

 private:
  void say(const std::string& msg) const;

  ExperimentConfig cfg_;
  RunPaths paths_;
  Progress progress_;
  std::optional<CorpusBundle> corpus_;
  std::optional<std::vector<DecodeResult>> large_decodes_;
};

}  // namespace catk
