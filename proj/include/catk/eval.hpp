#pragma once

#include "catk/corpus.hpp"
#include "catk/model.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace catk {

enum class MetricKind { exact_match, bleu, next_token_acc };
std::string to_string(MetricKind m);
MetricKind parse_metric(std::string_view s);

// Tokens before the first eos; the whole sequence when there is none.
TokenSeq strip_eos(const TokenSeq& y, int eos);

// 1 iff the hypothesis terminated with eos and its content equals the
// reference content.
int exact_match(const TokenSeq& y_hat, const TokenSeq& y, int eos);

// Corpus BLEU-4 over content tokens: uniform weights, brevity penalty,
// add-one smoothing of orders 2-4 whose clipped match count is zero.
// Empty hypotheses everywhere give 0.
double bleu(const std::vector<TokenSeq>& hypotheses, const std::vector<TokenSeq>& references,
            int eos);
double sentence_bleu(const TokenSeq& hypothesis, const TokenSeq& reference, int eos);

// Fraction of response positions whose teacher-forced argmax is the gold token.
double next_token_acc(const Model& model, const std::vector<const Example*>& examples);

// One row per eval example; the only input threshold sweeps need.
struct ScoreRow {
  std::string example_id;
  double score = 0.0;
  int small_correct = 0;
  int large_correct = 0;
  double small_quality = 0.0;
  double large_quality = 0.0;
  int n_tokens = 0;
};

void write_score_log(const std::vector<ScoreRow>& rows, const std::filesystem::path& path);
std::vector<ScoreRow> read_score_log(const std::filesystem::path& path);

struct CurvePoint {
  double tau = 0.0;
  double deferral_rate = 0.0;
  double mean_cost = 0.0;
  double quality = 0.0;
  double a1 = 0.0;  // small-model quality over kept examples, divided by the total count
  double a2 = 0.0;  // large-model quality over deferred examples, same divisor
};

// Thresholds: +inf, the midpoints between consecutive distinct scores, -inf.
// An example is deferred when score >= tau. Points come out in increasing
// deferral-rate order. exact_match reads the *_correct columns; the other
// metrics read *_quality.
std::vector<CurvePoint> sweep(const std::vector<ScoreRow>& log, MetricKind metric,
                              double cost_small, double cost_large);

// Trapezoid area under quality(deferral_rate), divided by the rate span.
double audc(const std::vector<CurvePoint>& curve);

// Linear interpolation of a curve field at a deferral rate inside the curve's span.
enum class CurveField { quality, a1, a2 };
double curve_at(const std::vector<CurvePoint>& curve, double rate,
                CurveField field = CurveField::quality);

struct Curve {
  std::string rule;
  std::string loss;
  std::vector<CurvePoint> points;
};

// Writes `<stem>.csv` and `<stem>.svg`.
void emit_report(const std::vector<Curve>& curves, const std::filesystem::path& stem,
                 const std::string& title = "cascade quality vs cost");
std::vector<Curve> read_curve_csv(const std::filesystem::path& path);

}  // namespace catk
