#pragma once

#include "catk/corpus.hpp"
#include "catk/eval.hpp"
#include "catk/model.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace catk {

// Two-layer scorer over the small model's per-token probabilities, zero padded
// (or truncated) to feature_len.
struct Router {
  int feature_len = 64;
  int hidden = 32;
  std::vector<double> w1;  // hidden x feature_len, row-major
  std::vector<double> b1;
  std::vector<double> w2;  // hidden
  double b2 = 0.0;

  // Probability that the query should go to the large model.
  double score(const std::vector<double>& features) const;
  nlohmann::json to_json() const;
  static Router from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static Router load(const std::filesystem::path& path);
};

enum class RuleKind { average, minimum, maximum, sum, quantile, learned_router };

// Rules pool u_i = -log p_S(token_i) over the small model's own decode; a
// higher score means defer. maximum/minimum are over u, so "maximum" is the
// least confident token.
struct DeferralRuleSpec {
  RuleKind kind = RuleKind::average;
  double q = 0.0;  // quantile only
  std::shared_ptr<const Router> router;  // learned_router only

  std::string name() const;
  void validate() const;
  // "average", "minimum", "maximum", "sum", "learned_router", "quantile(0.4)".
  static DeferralRuleSpec parse(const std::string& s);
};

std::vector<double> router_features(const DecodeResult& dr, int feature_len);

double deferral_score(const DecodeResult& dr, const DeferralRuleSpec& rule);

// Linear-interpolation quantile (q in [0, 1]) of an unsorted vector.
double quantile(std::vector<double> v, double q);

inline double query_cost(const Model& m) { return 2.0 * static_cast<double>(m.param_count()); }

struct CascadeConfig {
  DeferralRuleSpec rule;
  double tau = 0.0;
  const Model* small = nullptr;
  const Model* large = nullptr;
  int max_new_tokens = 16;

  double cost_small() const { return query_cost(*small); }
  double cost_large() const { return query_cost(*large); }
};

struct CascadePrediction {
  TokenSeq y_hat;
  bool used_large = false;
  double score = 0.0;
  double cost = 0.0;
};

using Decoder = std::function<DecodeResult(const TokenSeq&)>;

// Small model first; the large decoder runs only when score >= tau.
CascadePrediction cascade_predict(const TokenSeq& x, const Decoder& small, const Decoder& large,
                                  const DeferralRuleSpec& rule, double tau, double cost_small,
                                  double cost_large);
CascadePrediction cascade_predict(const TokenSeq& x, const CascadeConfig& cfg);

// Per-example quality for the pooled curves: exact match for classification,
// sentence BLEU for generation.
double example_quality(MetricKind metric, const TokenSeq& y_hat, const TokenSeq& y, int eos);

// Score log from precomputed decodes, aligned with `examples`.
std::vector<ScoreRow> build_score_log(const std::vector<const Example*>& examples,
                                      const std::vector<std::string>& ids,
                                      const std::vector<MetricKind>& metrics,
                                      const std::vector<DecodeResult>& small,
                                      const std::vector<DecodeResult>& large,
                                      const DeferralRuleSpec& rule, int eos);

struct RouterConfig {
  int feature_len = 64;
  int hidden = 32;
  int steps = 1500;
  int batch_size = 64;
  double learning_rate = 1e-2;
  int max_examples = 3000;  // train examples used for features; 0 means all
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static RouterConfig from_json(const nlohmann::json& j);
};

struct RouterTrainResult {
  Router router;
  double positive_rate = 0.0;
  bool degenerate = false;  // all labels equal
};

// Binary cross-entropy training on given features; deterministic in cfg.seed.
RouterTrainResult train_router_on_features(const std::vector<std::vector<double>>& features,
                                           const std::vector<int>& labels,
                                           const RouterConfig& cfg);

// Label = small decode wrong and large decode right, on train examples.
// Calls `warn` when every label is the same.
RouterTrainResult train_router(const Model& small, const Model& large,
                               const std::vector<Example>& corpus, const RouterConfig& cfg,
                               int max_new_tokens,
                               const std::function<void(const std::string&)>& warn = {});

// Probability that a random positive outscores a random negative (ties 1/2).
double ranking_accuracy(const std::vector<double>& scores, const std::vector<int>& labels);

}  // namespace catk
