#include "catk/cascade.hpp"
#include "catk/rng.hpp"
#include "catk/trainer.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>

using namespace catk;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

DecodeResult dr_of(std::vector<double> logprobs) {
  DecodeResult d;
  d.token_logprobs = std::move(logprobs);
  d.y_hat.assign(d.token_logprobs.size(), 5);
  if (!d.y_hat.empty()) d.y_hat.back() = 2;
  d.stopped_by = DecodeResult::Stop::eos;
  return d;
}

double score(const std::vector<double>& lp, const std::string& rule) {
  return deferral_score(dr_of(lp), DeferralRuleSpec::parse(rule));
}

const Vocab& V() {
  static const Vocab v = Vocab::standard();
  return v;
}

struct Pair {
  std::vector<Example> corpus;
  Model small;
  Model large;
};

const Pair& models() {
  static const Pair p = [] {
    std::vector<TaskSpec> specs;
    for (const auto& s : default_task_specs(4, 0.0)) {
      if (s.task_id == "bucket" || s.task_id == "copy") specs.push_back(s);
    }
    auto corpus = generate_corpus(specs, {80, 20}, V());
    ModelConfig c;
    c.n_layers = 1;
    c.d_model = 8;
    c.n_heads = 2;
    c.d_ff = 16;
    c.max_seq_len = 16;
    c.init_seed = 2;
    TrainConfig t;
    t.steps = 40;
    t.batch_size = 8;
    t.learning_rate = 1e-2;
    Model small = train_baseline_large(corpus, c, t).model;
    c.d_model = 16;
    c.d_ff = 32;
    t.steps = 80;
    Model large = train_baseline_large(corpus, c, t).model;
    return Pair{std::move(corpus), std::move(small), std::move(large)};
  }();
  return p;
}

}  // namespace

TEST_CASE("deferral scores over token uncertainties") {
  CHECK(score({-0.2, -0.4}, "average") == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(score({-3, -1}, "maximum") == 3.0);
  CHECK(score({-3, -1}, "minimum") == 1.0);
  CHECK(score({-3, -1}, "sum") == 4.0);
  CHECK(score({-1, -2, -3, -4}, "quantile(0.5)") == 2.5);
  CHECK(score({-1, -2, -3, -4}, "quantile(0.4)") == doctest::Approx(2.2).epsilon(1e-15));
  CHECK(score({-0.7}, "quantile(0.8)") == 0.7);
  CHECK_THROWS_AS(deferral_score(dr_of({}), DeferralRuleSpec::parse("average")), Error);
}

TEST_CASE("quantile endpoints equal minimum and maximum") {
  Rng rng(1);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> lp(1 + rng.below(12));
    for (double& v : lp) v = -3.0 * rng.uniform();
    CHECK(std::abs(score(lp, "quantile(0)") - score(lp, "minimum")) <= 1e-12);
    CHECK(std::abs(score(lp, "quantile(1)") - score(lp, "maximum")) <= 1e-12);
  }
}

TEST_CASE("rule names parse and print") {
  for (const char* s : {"average", "minimum", "maximum", "sum", "learned_router", "quantile(0.4)",
                        "quantile(0.8)"}) {
    CHECK(DeferralRuleSpec::parse(s).name() == s);
  }
  CHECK_THROWS_AS(DeferralRuleSpec::parse("median"), ConfigError);
  CHECK_THROWS_AS(DeferralRuleSpec::parse("quantile(1.5)"), ConfigError);
  CHECK_THROWS_AS(DeferralRuleSpec::parse("quantile(x)"), ConfigError);
  CHECK_THROWS_AS(DeferralRuleSpec::parse("learned_router").validate(), ConfigError);
}

TEST_CASE("router features pad and truncate") {
  const auto f = router_features(dr_of({-0.1, -0.2, 0.0}), 64);
  REQUIRE(f.size() == 64);
  CHECK(f[0] == doctest::Approx(std::exp(-0.1)));
  CHECK(f[2] == 1.0);
  for (int i = 3; i < 64; ++i) CHECK(f[i] == 0.0);
  const auto g = router_features(dr_of({-0.1, -0.2, -0.3}), 2);
  CHECK(g.size() == 2);
  CHECK(g[1] == doctest::Approx(std::exp(-0.2)));
}

TEST_CASE("threshold limits and the cost identity") {
  int small_calls = 0, large_calls = 0;
  const Decoder small = [&](const TokenSeq&) {
    ++small_calls;
    return dr_of({-0.5, -0.1});
  };
  const Decoder large = [&](const TokenSeq&) {
    ++large_calls;
    DecodeResult d = dr_of({-0.01});
    d.y_hat = {9, 2};
    return d;
  };
  const auto rule = DeferralRuleSpec::parse("average");
  const auto keep = cascade_predict({4}, small, large, rule, kInf, 10.0, 100.0);
  CHECK_FALSE(keep.used_large);
  CHECK(keep.cost == 10.0);
  CHECK(keep.y_hat == TokenSeq{5, 2});
  CHECK(small_calls == 1);
  CHECK(large_calls == 0);

  const auto defer = cascade_predict({4}, small, large, rule, -kInf, 10.0, 100.0);
  CHECK(defer.used_large);
  CHECK(defer.cost == 110.0);
  CHECK(defer.y_hat == TokenSeq{9, 2});
  CHECK(small_calls == 2);
  CHECK(large_calls == 1);

  // score == tau defers
  CHECK(cascade_predict({4}, small, large, rule, 0.3, 10.0, 100.0).used_large);
  CHECK_FALSE(cascade_predict({4}, small, large, rule, 0.30000001, 10.0, 100.0).used_large);
}

TEST_CASE("query cost is twice the parameter count") {
  const Pair& p = models();
  CHECK(query_cost(p.small) == 2.0 * p.small.param_count());
  CascadeConfig cfg{DeferralRuleSpec::parse("sum"), 0.0, &p.small, &p.large, 5};
  CHECK(cfg.cost_large() == 2.0 * p.large.param_count());
}

TEST_CASE("deferred set replays from the score log") {
  const Pair& p = models();
  const auto eval = split_of(p.corpus, Split::eval);
  std::vector<std::string> ids;
  std::vector<MetricKind> metrics;
  for (const auto* e : eval) {
    ids.push_back(e->task_id);
    metrics.push_back(e->task_id == "copy" ? MetricKind::bleu : MetricKind::exact_match);
  }
  const auto small = decode_all(p.small, eval, 8);
  const auto large = decode_all(p.large, eval, 8);
  const auto rule = DeferralRuleSpec::parse("average");
  const auto log = build_score_log(eval, ids, metrics, small, large, rule, V().eos());
  REQUIRE(log.size() == eval.size());

  std::vector<double> scores;
  for (const auto& r : log) scores.push_back(r.score);
  const double tau = quantile(scores, 0.5);
  CascadeConfig cfg{rule, tau, &p.small, &p.large, 8};
  int deferred = 0;
  for (std::size_t i = 0; i < eval.size(); ++i) {
    const auto pred = cascade_predict(eval[i]->x, cfg);
    CHECK(pred.used_large == (log[i].score >= tau));
    CHECK(pred.score == log[i].score);
    CHECK(pred.y_hat == (pred.used_large ? large[i].y_hat : small[i].y_hat));
    CHECK(log[i].small_correct == exact_match(small[i].y_hat, eval[i]->y, V().eos()));
    CHECK(log[i].n_tokens == static_cast<int>(small[i].y_hat.size()));
    deferred += pred.used_large;
  }
  CHECK(deferred > 0);
  CHECK(deferred < static_cast<int>(eval.size()));

  // scores depend only on the small model's decode
  const auto other = build_score_log(eval, ids, metrics, small, small, rule, V().eos());
  for (std::size_t i = 0; i < log.size(); ++i) CHECK(other[i].score == log[i].score);
}

TEST_CASE("example quality per metric") {
  const int eos = V().eos();
  CHECK(example_quality(MetricKind::exact_match, {5, 6, eos}, {5, 6, eos}, eos) == 1.0);
  CHECK(example_quality(MetricKind::exact_match, {5, 7, eos}, {5, 6, eos}, eos) == 0.0);
  CHECK(example_quality(MetricKind::bleu, {5, 6, 7, 8, eos}, {5, 6, 7, 8, eos}, eos) == 1.0);
  const double partial = example_quality(MetricKind::bleu, {5, 6, 7, 9, eos}, {5, 6, 7, 8, eos}, eos);
  CHECK(partial > 0.0);
  CHECK(partial < 1.0);
}

TEST_CASE("ranking accuracy") {
  CHECK(ranking_accuracy({0.9, 0.8, 0.1, 0.2}, {1, 1, 0, 0}) == 1.0);
  CHECK(ranking_accuracy({0.1, 0.2, 0.9, 0.8}, {1, 1, 0, 0}) == 0.0);
  CHECK(ranking_accuracy({0.5, 0.5}, {1, 0}) == 0.5);
  CHECK(ranking_accuracy({0.9, 0.5, 0.7}, {1, 0, 1}) == 1.0);
  CHECK(ranking_accuracy({0.9, 0.5, 0.7}, {0, 1, 0}) == 0.0);
}

TEST_CASE("router learns a separable rule") {
  Rng rng(3);
  std::vector<std::vector<double>> feats;
  std::vector<int> labels;
  for (int i = 0; i < 600; ++i) {
    std::vector<double> f(64, 0.0);
    const int n = 1 + rng.below(8);
    for (int k = 0; k < n; ++k) f[k] = rng.uniform();
    labels.push_back(f[0] < 0.5 ? 1 : 0);
    feats.push_back(std::move(f));
  }
  RouterConfig cfg;
  cfg.steps = 800;
  cfg.seed = 5;
  const auto r = train_router_on_features(feats, labels, cfg);
  CHECK_FALSE(r.degenerate);
  std::vector<double> s;
  for (const auto& f : feats) s.push_back(r.router.score(f));
  CHECK(ranking_accuracy(s, labels) >= 0.95);

  const auto again = train_router_on_features(feats, labels, cfg);
  CHECK(again.router.to_json() == r.router.to_json());

  testutil::TempDir dir("router");
  r.router.save(dir / "r.json");
  const Router back = Router::load(dir / "r.json");
  CHECK(back.score(feats[7]) == r.router.score(feats[7]));
}

TEST_CASE("degenerate labels still give a router") {
  std::vector<std::vector<double>> feats(20, std::vector<double>(64, 0.3));
  const std::vector<int> labels(20, 0);
  RouterConfig cfg;
  cfg.steps = 20;
  const auto r = train_router_on_features(feats, labels, cfg);
  CHECK(r.degenerate);
  CHECK(r.positive_rate == 0.0);
  CHECK(std::isfinite(r.router.score(feats[0])));
}

TEST_CASE("router training leaves both models untouched") {
  const Pair& p = models();
  const std::string s = p.small.checksum(), l = p.large.checksum();
  RouterConfig cfg;
  cfg.steps = 30;
  cfg.max_examples = 60;
  std::vector<std::string> warnings;
  const auto r = train_router(p.small, p.large, p.corpus, cfg, 8,
                              [&](const std::string& w) { warnings.push_back(w); });
  CHECK(p.small.checksum() == s);
  CHECK(p.large.checksum() == l);
  CHECK(r.degenerate == !warnings.empty());
  CHECK(r.router.w1.size() == static_cast<std::size_t>(cfg.hidden * cfg.feature_len));

  auto rule = DeferralRuleSpec::parse("learned_router");
  rule.router = std::make_shared<const Router>(r.router);
  const double sc = deferral_score(dr_of({-0.2, -0.1}), rule);
  CHECK(sc >= 0.0);
  CHECK(sc <= 1.0);
}
