#pragma once

#include "catk/corpus.hpp"
#include "catk/losses.hpp"
#include "catk/model.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

namespace catk {

enum class LrSchedule { constant, cosine_decay };
enum class OptimizerKind { sgd_momentum, adaptive_elementwise };

std::string to_string(LrSchedule s);
std::string to_string(OptimizerKind o);
LrSchedule parse_lr_schedule(std::string_view s);
OptimizerKind parse_optimizer(std::string_view s);

struct TrainConfig {
  LossSpec loss;
  int steps = 3000;
  int batch_size = 32;
  double learning_rate = 3e-3;
  LrSchedule lr_schedule = LrSchedule::cosine_decay;
  int warmup_steps = 0;
  OptimizerKind optimizer = OptimizerKind::adaptive_elementwise;
  double momentum = 0.9;  // sgd_momentum, and beta1 of the adaptive optimizer
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip_norm = 1.0;  // global gradient norm; 0 disables
  std::uint64_t seed = 0;
  int eval_every = 0;  // checkpoint interval; 0 disables
  std::filesystem::path checkpoint_dir;

  void validate() const;
  double lr_at(int step) const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// Teacher-forced outputs of the frozen teacher for every train example.
struct TeacherCache {
  std::string teacher_checksum;
  std::string corpus_checksum;
  std::vector<std::string> ids;
  std::vector<TeacherOutputs> entries;

  const TeacherOutputs* find(const std::string& id) const;
  std::string checksum() const;
  void reindex();

 private:
  std::unordered_map<std::string, std::size_t> index_;
};

TeacherCache build_teacher_cache(const Model& teacher, const std::vector<Example>& corpus);
void save_teacher_cache(const TeacherCache& cache, const std::filesystem::path& path);
TeacherCache load_teacher_cache(const std::filesystem::path& path);

struct TrainLogRow {
  int step = 0;
  double loss = 0.0;
  double masked_fraction = 0.0;
  double lr = 0.0;
  double wall_ms = 0.0;
};

// wall_ms is the only nondeterministic column; `with_wall` false writes 0.
void write_train_log(const std::vector<TrainLogRow>& log, const std::filesystem::path& path,
                     bool with_wall = true);

struct TrainResult {
  Model model;
  std::vector<TrainLogRow> log;
};

// Called after every step with the batch, its loss/grad record, and the
// logged row.
using StepObserver =
    std::function<void(int step, const std::vector<BatchItem>&, const LossGrad&, const TrainLogRow&)>;

// Trains on the train split only. `cache` may be null for losses that need no
// teacher. Deterministic given the inputs and cfg.seed.
TrainResult train(Model init, const TeacherCache* cache, const std::vector<Example>& corpus,
                  const TrainConfig& cfg, const StepObserver& observer = {});

// Plain cross-entropy training of the teacher from a fresh init.
TrainResult train_baseline_large(const std::vector<Example>& corpus, const ModelConfig& model_cfg,
                                 TrainConfig cfg);

// Exponential moving average of the logged loss, one value per step.
std::vector<double> loss_ema(const std::vector<TrainLogRow>& log, double beta = 0.98);

// Mean per-token cross-entropy of the gold responses.
double eval_loss(const Model& model, const std::vector<const Example*>& examples);

// Greedy decodes in input order.
std::vector<DecodeResult> decode_all(const Model& model, const std::vector<const Example*>& examples,
                                     int max_new_tokens, int batch_size = 64);

// Examples of one split, in corpus order.
std::vector<const Example*> split_of(const std::vector<Example>& corpus, Split split);

}  // namespace catk
