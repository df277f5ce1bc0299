#include "catk/eval.hpp"
#include "catk/rng.hpp"
#include "catk/verify.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <cmath>
#include <set>
#include <limits>
#include <numeric>

using namespace catk;

namespace {

constexpr int kEos = 2;

// Values produced by a separate Python implementation of corpus BLEU-4
// (uniform weights, brevity penalty, add-one smoothing of orders 2-4 whose
// match count is zero), frozen here.
struct FrozenBleu {
  const char* name;
  std::vector<TokenSeq> hyps;
  std::vector<TokenSeq> refs;
  double value;
};

const std::vector<FrozenBleu>& frozen() {
  static const std::vector<FrozenBleu> cases = {
      {"five_pair",
       {{4, 5, 6, 7}, {8, 9}, {10, 11, 12, 13, 14}, {4, 4, 4}, {20, 21, 22, 23, 24, 25}},
       {{4, 5, 6, 7, 8}, {8, 9}, {10, 11, 13, 12, 14}, {4, 5, 4}, {20, 21, 22, 23, 24, 25}},
       0.6748517218376869},
      {"short_hyp", {{4, 5}}, {{4, 5, 6, 7, 8, 9}}, 0.1353352832366127},
      {"no_unigram", {{4, 5, 6}}, {{7, 8, 9}}, 0.0},
      {"single_token", {{30}}, {{30}}, 1.0},
  };
  return cases;
}

std::vector<ScoreRow> random_log(std::uint64_t seed, int n, bool with_ties) {
  Rng rng(seed);
  std::vector<ScoreRow> log;
  for (int i = 0; i < n; ++i) {
    ScoreRow r;
    r.example_id = "t/eval/" + std::to_string(i);
    r.score = with_ties ? std::floor(rng.uniform() * 6) / 2 : rng.uniform() * 3;
    r.small_correct = rng.bernoulli(0.5);
    r.large_correct = rng.bernoulli(0.75);
    r.small_quality = r.small_correct ? 1.0 : 0.4 * rng.uniform();
    r.large_quality = r.large_correct ? 1.0 : 0.4 * rng.uniform();
    r.n_tokens = 1 + rng.below(5);
    log.push_back(r);
  }
  return log;
}

double mean_of(const std::vector<ScoreRow>& log, bool large, bool correct) {
  double s = 0.0;
  for (const auto& r : log) {
    s += correct ? (large ? r.large_correct : r.small_correct)
                 : (large ? r.large_quality : r.small_quality);
  }
  return s / static_cast<double>(log.size());
}

}  // namespace

TEST_CASE("exact match") {
  CHECK(exact_match({5, 6, kEos}, {5, 6, kEos}, kEos) == 1);
  CHECK(exact_match({5, 7, kEos}, {5, 6, kEos}, kEos) == 0);
  CHECK(exact_match({5, 6}, {5, 6, kEos}, kEos) == 0);  // cut off by max_len
  CHECK(exact_match({5, 6, kEos}, {5, 6, 7, kEos}, kEos) == 0);
  CHECK(strip_eos({5, kEos, 9}, kEos) == TokenSeq{5});
}

TEST_CASE("BLEU matches frozen reference values") {
  for (const auto& c : frozen()) {
    INFO(c.name);
    CHECK(std::abs(bleu(c.hyps, c.refs, kEos) - c.value) < 1e-9);
    CHECK(std::abs(verify::reference_bleu(c.hyps, c.refs) - c.value) < 1e-9);
  }
}

TEST_CASE("BLEU edge cases") {
  const std::vector<TokenSeq> refs = {{4, 5, 6, 7}, {8, 9, 10}};
  CHECK(bleu(refs, refs, kEos) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(bleu({{kEos}, {}}, refs, kEos) == 0.0);
  CHECK_THROWS_AS(bleu({}, {}, kEos), Error);
  CHECK_THROWS_AS(bleu({{4}}, refs, kEos), Error);
  // trailing eos is ignored
  CHECK(bleu({{4, 5, 6, 7, kEos}, {8, 9, 10, kEos}}, refs, kEos) == doctest::Approx(1.0));
}

TEST_CASE("BLEU is bounded and invariant to relabeling") {
  Rng rng(9);
  std::vector<int> perm(64);
  std::iota(perm.begin(), perm.end(), 4);
  rng.shuffle(perm);
  for (int t = 0; t < 20; ++t) {
    std::vector<TokenSeq> h, r, hp, rp;
    const int pairs = 1 + rng.below(10);
    for (int i = 0; i < pairs; ++i) {
      TokenSeq a(rng.below(13)), b(1 + rng.below(12));
      for (int& v : a) v = 4 + rng.below(6);
      for (int& v : b) v = 4 + rng.below(6);
      h.push_back(a);
      r.push_back(b);
      for (int& v : a) v = perm[v - 4];
      for (int& v : b) v = perm[v - 4];
      hp.push_back(a);
      rp.push_back(b);
    }
    const double s = bleu(h, r, kEos);
    CHECK(s >= 0.0);
    CHECK(s <= 1.0);
    CHECK(bleu(hp, rp, kEos) == doctest::Approx(s).epsilon(1e-12));
  }
}

TEST_CASE("BLEU agrees with the reference on random mini-corpora") {
  const auto r = verify::bleu_oracle(31, 20, 1e-9);
  CHECK(r.pass);
}

TEST_CASE("score log CSV round trip") {
  testutil::TempDir dir("scores");
  const auto log = random_log(1, 40, false);
  write_score_log(log, dir / "s.csv");
  const auto back = read_score_log(dir / "s.csv");
  REQUIRE(back.size() == log.size());
  for (std::size_t i = 0; i < log.size(); ++i) {
    CHECK(back[i].example_id == log[i].example_id);
    CHECK(back[i].score == log[i].score);
    CHECK(back[i].small_quality == log[i].small_quality);
    CHECK(back[i].large_correct == log[i].large_correct);
    CHECK(back[i].n_tokens == log[i].n_tokens);
  }
  testutil::spit(dir / "bad.csv",
                 "example_id,score,small_correct,large_correct,small_quality,large_quality,n_tokens\n"
                 "a,0.5,1,0\n");
  CHECK_THROWS_AS(read_score_log(dir / "bad.csv"), Error);
}

TEST_CASE("sweep endpoints, ordering and identities") {
  for (bool ties : {false, true}) {
    for (MetricKind m : {MetricKind::exact_match, MetricKind::bleu}) {
      const auto log = random_log(ties ? 2 : 3, 57, ties);
      const double cs = 10.0, cl = 90.0;
      const auto curve = sweep(log, m, cs, cl);
      const bool em = m == MetricKind::exact_match;
      REQUIRE(curve.size() >= 2);
      CHECK(curve.front().tau == std::numeric_limits<double>::infinity());
      CHECK(curve.front().deferral_rate == 0.0);
      CHECK(curve.front().mean_cost == cs);
      CHECK(curve.front().quality == mean_of(log, false, em));
      CHECK(curve.back().tau == -std::numeric_limits<double>::infinity());
      CHECK(curve.back().deferral_rate == 1.0);
      CHECK(curve.back().mean_cost == cs + cl);
      CHECK(curve.back().quality == mean_of(log, true, em));
      for (std::size_t i = 1; i < curve.size(); ++i) {
        CHECK(curve[i].deferral_rate >= curve[i - 1].deferral_rate);
        CHECK(curve[i].tau < curve[i - 1].tau);
      }
      // brute-force partition at every threshold
      for (const auto& p : curve) {
        double a1 = 0.0, a2 = 0.0;
        int deferred = 0;
        for (const auto& r : log) {
          const double qs = em ? r.small_correct : r.small_quality;
          const double ql = em ? r.large_correct : r.large_quality;
          if (r.score >= p.tau) {
            a2 += ql;
            ++deferred;
          } else {
            a1 += qs;
          }
        }
        const double n = static_cast<double>(log.size());
        CHECK(std::abs(p.a1 - a1 / n) < 1e-12);
        CHECK(std::abs(p.a2 - a2 / n) < 1e-12);
        CHECK(std::abs(p.a1 + p.a2 - p.quality) < 1e-9);
        CHECK(p.deferral_rate == doctest::Approx(deferred / n).epsilon(1e-15));
        CHECK(std::abs(p.mean_cost - (cs + p.deferral_rate * cl)) < 1e-9);
      }
      // distinct scores plus two sentinels
      std::set<double> distinct;
      for (const auto& r : log) distinct.insert(r.score);
      CHECK(curve.size() == distinct.size() + 1);
      CHECK(verify::sweep_identities(log, curve, m, cs, cl).pass);
    }
  }
}

TEST_CASE("sweep rejects an empty log") {
  CHECK_THROWS_AS(sweep({}, MetricKind::exact_match, 1.0, 2.0), Error);
}

TEST_CASE("AUDC") {
  std::vector<CurvePoint> flat = {{0, 0.0, 0, 0.7}, {0, 0.3, 0, 0.7}, {0, 1.0, 0, 0.7}};
  CHECK(audc(flat) == doctest::Approx(0.7).epsilon(1e-15));
  CHECK(audc({{0, 0.0, 0, 0.0}, {0, 1.0, 0, 1.0}}) == 0.5);

  Rng rng(4);
  std::vector<CurvePoint> c;
  std::vector<double> xs = {0.0};
  for (int i = 0; i < 8; ++i) xs.push_back(rng.uniform());
  xs.push_back(1.0);
  std::sort(xs.begin(), xs.end());
  for (double x : xs) c.push_back({0, x, 0, rng.uniform()});
  long double area = 0.0L;
  for (std::size_t i = 1; i < c.size(); ++i) {
    area += 0.5L * ((long double)c[i].quality + c[i - 1].quality) *
            ((long double)c[i].deferral_rate - c[i - 1].deferral_rate);
  }
  CHECK(std::abs(audc(c) - static_cast<double>(area)) < 1e-12);

  CHECK_THROWS_AS(audc({{0, 0.0, 0, 1.0}}), Error);
  CHECK_THROWS_AS(audc({{0, 0.5, 0, 1.0}, {0, 0.2, 0, 1.0}}), Error);
  CHECK_THROWS_AS(audc({{0, 0.5, 0, 1.0}, {0, 0.5, 0, 1.0}}), Error);
}

TEST_CASE("curve interpolation") {
  const std::vector<CurvePoint> c = {{0, 0.0, 0, 0.2, 0.2, 0.0}, {0, 0.5, 0, 0.6, 0.1, 0.5},
                                     {0, 1.0, 0, 0.8, 0.0, 0.8}};
  CHECK(curve_at(c, 0.25) == doctest::Approx(0.4));
  CHECK(curve_at(c, 0.5) == doctest::Approx(0.6));
  CHECK(curve_at(c, 0.75, CurveField::a2) == doctest::Approx(0.65));
  CHECK(curve_at(c, 0.0, CurveField::a1) == doctest::Approx(0.2));
  CHECK_THROWS_AS(curve_at(c, 1.5), Error);
}

TEST_CASE("report files are deterministic and reload exactly") {
  testutil::TempDir dir("report");
  const auto a = sweep(random_log(5, 30, true), MetricKind::bleu, 3.0, 30.0);
  const auto b = sweep(random_log(6, 30, false), MetricKind::bleu, 3.0, 30.0);
  const std::vector<Curve> curves = {{"average", "xent", a}, {"quantile(0.4)", "cat_xent", b}};
  emit_report(curves, dir / "one");
  emit_report(curves, dir / "two");
  CHECK(testutil::slurp(dir / "one.csv") == testutil::slurp(dir / "two.csv"));
  CHECK(testutil::slurp(dir / "one.svg") == testutil::slurp(dir / "two.svg"));

  const std::string csv = testutil::slurp(dir / "one.csv");
  CHECK(csv.rfind("rule,loss,tau,deferral_rate,mean_cost,quality,a1,a2\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == static_cast<long>(a.size() + b.size() + 1));

  const auto back = read_curve_csv(dir / "one.csv");
  REQUIRE(back.size() == 2);
  CHECK(back[1].rule == "quantile(0.4)");
  CHECK(back[1].loss == "cat_xent");
  for (std::size_t k = 0; k < 2; ++k) {
    const auto& src = curves[k].points;
    REQUIRE(back[k].points.size() == src.size());
    for (std::size_t i = 0; i < src.size(); ++i) {
      CHECK(back[k].points[i].tau == src[i].tau);
      CHECK(back[k].points[i].deferral_rate == src[i].deferral_rate);
      CHECK(back[k].points[i].quality == src[i].quality);
      CHECK(back[k].points[i].a1 == src[i].a1);
      CHECK(back[k].points[i].a2 == src[i].a2);
      CHECK(back[k].points[i].mean_cost == src[i].mean_cost);
    }
  }
  const std::string svg = testutil::slurp(dir / "one.svg");
  CHECK(svg.find("<polyline") != std::string::npos);
  CHECK(svg.find("cat_xent") != std::string::npos);
}

TEST_CASE("next-token accuracy") {
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_ff = 8;
  cfg.vocab_size = 68;
  cfg.max_seq_len = 16;

  // final layer norm with zero gain makes every logit equal to out_bias
  Model gold(cfg);
  gold.params()[gold.param("out_bias").offset + kEos] = 3.0;
  std::vector<Example> ex(5);
  for (int i = 0; i < 5; ++i) {
    ex[i].x = {4 + i};
    ex[i].y = {kEos};
  }
  std::vector<const Example*> ptrs;
  for (const auto& e : ex) ptrs.push_back(&e);
  CHECK(next_token_acc(gold, ptrs) == 1.0);

  // uniform logits: argmax is always token 0, so random gold tokens hit it
  // about once in 68
  const Model uniform(cfg);
  Rng rng(12);
  std::vector<Example> rnd(1000);
  for (auto& e : rnd) {
    e.x = {4 + rng.below(60)};
    for (int k = 0; k < 10; ++k) e.y.push_back(rng.below(68));
  }
  std::vector<const Example*> rp;
  for (const auto& e : rnd) rp.push_back(&e);
  const double acc = next_token_acc(uniform, rp);
  const double p = 1.0 / 68.0;
  const double sigma = std::sqrt(p * (1 - p) / 10000.0);
  CHECK(std::abs(acc - p) <= 3 * sigma);

  // recount on a random model
  Model m = init_model(cfg);
  for (double& v : m.params()) v += 0.5 * rng.normal();
  std::size_t hit = 0, total = 0;
  for (const auto* e : rp) {
    const auto am = argmax_rows(forward_teacher_forced(m, e->x, e->y));
    for (std::size_t i = 0; i < am.size(); ++i) hit += am[i] == e->y[i];
    total += am.size();
  }
  CHECK(next_token_acc(m, rp) == static_cast<double>(hit) / static_cast<double>(total));
}

TEST_CASE("metric names") {
  CHECK(parse_metric("bleu") == MetricKind::bleu);
  CHECK(to_string(MetricKind::next_token_acc) == "next_token_acc");
  CHECK_THROWS_AS(parse_metric("rouge"), ConfigError);
}
