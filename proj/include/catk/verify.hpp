#pragma once

// Property checks and independent reference implementations shared by the
// acceptance suite and `catk repro`.

#include "catk/eval.hpp"
#include "catk/losses.hpp"
#include "catk/model.hpp"
#include "catk/rng.hpp"

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

namespace catk::verify {

struct CheckResult {
  bool pass = false;
  double value = 0.0;      // worst observed deviation, or the tested statistic
  double threshold = 0.0;  // what `value` was compared against
  std::string detail;
  nlohmann::json to_json() const;
};

// Reference corpus BLEU-4, written separately from catk::bleu. Token
// sequences are content only (no eos).
double reference_bleu(const std::vector<TokenSeq>& hyps, const std::vector<TokenSeq>& refs);

// Random log-distribution rows.
LogitsSeq random_logprobs(Rng& rng, int rows, int vocab, double scale = 2.0);

// dist(w=1) == xent, cat_loss(mask of ones) == dist, cat_xent == cat_dist(w=1).
CheckResult loss_identities(std::uint64_t seed, int instances = 100, double tol = 1e-9);

// Central differences (h) against loss_and_grad for every loss kind on a
// 1-layer d_model=8 vocab=12 model, masks held fixed at their unperturbed value.
struct GradcheckResult {
  LossKind kind;
  double worst_rel = 0.0;
  int coords = 0;
};
std::vector<GradcheckResult> gradcheck_all(std::uint64_t seed, int coords = 200, double h = 1e-4);
CheckResult gradients(std::uint64_t seed, int coords = 200, double tol = 1e-4);

// alpha(both) == alpha(small) | alpha(large) and zero logit gradient where masked.
CheckResult masking(std::uint64_t seed, int positions = 1000);

// Partition oracle, decomposition, cost identity, endpoints and monotonicity
// for one curve swept from `log`.
CheckResult sweep_identities(const std::vector<ScoreRow>& log, const std::vector<CurvePoint>& curve,
                             MetricKind metric, double cost_small, double cost_large,
                             double tol = 1e-9);

// catk::bleu against reference_bleu on random mini-corpora.
CheckResult bleu_oracle(std::uint64_t seed, int corpora = 20, double tol = 1e-9);

}  // namespace catk::verify
