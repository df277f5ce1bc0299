#include "catk/losses.hpp"
#include "catk/rng.hpp"
#include "catk/verify.hpp"

#include <doctest.h>

#include <cmath>

using namespace catk;

namespace {

LogitsSeq from_probs(const std::vector<std::vector<double>>& rows) {
  LogitsSeq lp(rows.size(), rows[0].size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t v = 0; v < rows[i].size(); ++v) lp(i, v) = std::log(rows[i][v]);
  }
  return lp;
}

TeacherOutputs teacher_of(const LogitsSeq& lp) { return {argmax_rows(lp), lp}; }

// Scalar per-position summand, written from the definition:
// -[ w log p(y_i) + (1 - w) sum_v p_teach(v) log p(v) ].
double summand(const LogitsSeq& lp, const TokenSeq& y, const TeacherOutputs& t, double w, int i) {
  double cross = 0.0;
  for (int v = 0; v < lp.cols(); ++v) cross += std::exp(t.logprobs(i, v)) * lp(i, v);
  return -(w * lp(i, y[i]) + (1.0 - w) * cross);
}

}  // namespace

TEST_CASE("loss kind names round trip") {
  for (LossKind k : all_loss_kinds()) CHECK(parse_loss_kind(to_string(k)) == k);
  CHECK_THROWS_AS(parse_loss_kind("cat"), ConfigError);
  CHECK(all_loss_kinds().size() == 8);
}

TEST_CASE("loss spec properties") {
  CHECK(LossSpec{LossKind::cat_xent, 0.2}.effective_w() == 1.0);
  CHECK(LossSpec{LossKind::cat_dist, 0.2}.effective_w() == 0.2);
  CHECK(LossSpec{LossKind::xent, 0.5}.mask() == MaskVariant::none);
  CHECK(LossSpec{LossKind::cat_dist_l, 0.5}.mask() == MaskVariant::large_only);
  CHECK(LossSpec{LossKind::cat_xent_s, 0.5}.mask() == MaskVariant::small_only);
  CHECK_FALSE(LossSpec{LossKind::cat_xent_s, 0.5}.needs_teacher());
  CHECK(LossSpec{LossKind::cat_xent, 0.5}.needs_teacher());
  CHECK(LossSpec{LossKind::dist, 0.5}.needs_teacher());
  CHECK_THROWS_AS((LossSpec{LossKind::dist, 1.5}.validate()), ConfigError);
}

TEST_CASE("xent worked values") {
  CHECK(xent(from_probs({{1.0, 0.0, 0.0}}), {0}) == 0.0);
  CHECK(xent(from_probs({{0.25, 0.25, 0.25, 0.25}}), {2}) == doctest::Approx(1.386294).epsilon(1e-6));
  CHECK(xent(from_probs({{0.5, 0.5, 0.0, 0.0}, {0.25, 0.25, 0.25, 0.25}}), {1, 3}) ==
        doctest::Approx(2.079442).epsilon(1e-6));
}

TEST_CASE("dist worked values") {
  const LogitsSeq uni = from_probs({{0.25, 0.25, 0.25, 0.25}});
  CHECK(dist(uni, {1}, teacher_of(uni), 0.0) == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  Rng rng(5);
  const LogitsSeq lp = verify::random_logprobs(rng, 3, 12);
  const TeacherOutputs t = teacher_of(verify::random_logprobs(rng, 3, 12));
  const TokenSeq y = {4, 0, 11};
  CHECK(dist(lp, y, t, 1.0) == xent(lp, y));
  double expect = 0.0;
  for (int i = 0; i < 3; ++i) expect += summand(lp, y, t, 0.5, i);
  CHECK(dist(lp, y, t, 0.5) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("alpha masks") {
  const TokenSeq y = {3, 5, 7};
  const std::vector<int> s = {3, 5, 2};
  const std::vector<int> l = {3, 1, 7};
  CHECK(compute_alpha(y, s, l, MaskVariant::both) == TokenMask{1, 1, 1});
  CHECK(compute_alpha(y, s, l, MaskVariant::large_only) == TokenMask{1, 0, 1});
  CHECK(compute_alpha(y, s, l, MaskVariant::small_only) == TokenMask{1, 1, 0});
  const std::vector<int> wrong = {0, 0, 0};
  for (auto v : {MaskVariant::both, MaskVariant::large_only, MaskVariant::small_only}) {
    CHECK(compute_alpha(y, wrong, wrong, v) == TokenMask{0, 0, 0});
  }
  CHECK(compute_alpha(y, wrong, wrong, MaskVariant::none) == TokenMask{1, 1, 1});
}

TEST_CASE("argmax ties go to the lowest id") {
  const LogitsSeq lp = from_probs({{0.1, 0.4, 0.4, 0.1}, {0.25, 0.25, 0.25, 0.25}});
  CHECK(argmax_rows(lp) == std::vector<int>{1, 0});
}

TEST_CASE("cat_loss reductions and per-position oracle") {
  Rng rng(11);
  const LogitsSeq lp = verify::random_logprobs(rng, 3, 12);
  const TeacherOutputs t = teacher_of(verify::random_logprobs(rng, 3, 12));
  const TokenSeq y = {2, 9, 5};
  CHECK(cat_loss(lp, y, t, 1.0, {1, 1, 1}) == xent(lp, y));
  CHECK(cat_loss(lp, y, t, 0.4, {1, 1, 1}) == doctest::Approx(dist(lp, y, t, 0.4)).epsilon(1e-14));
  CHECK(cat_loss(lp, y, t, 0.4, {0, 0, 0}) == 0.0);
  const double expect = summand(lp, y, t, 0.4, 0) + summand(lp, y, t, 0.4, 2);
  CHECK(cat_loss(lp, y, t, 0.4, {1, 0, 1}) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("fully masked example has zero logit gradient") {
  Rng rng(12);
  const LogitsSeq lp = verify::random_logprobs(rng, 4, 12);
  const TeacherOutputs t = teacher_of(verify::random_logprobs(rng, 4, 12));
  const TokenSeq y = {1, 2, 3, 4};
  const TokenMask zeros(4, 0);
  Matrix d;
  for (LossKind k : {LossKind::cat_xent, LossKind::cat_dist, LossKind::cat_dist_s}) {
    CHECK(example_loss_and_dlogits(lp, y, &t, &zeros, LossSpec{k, 0.5}, d) == 0.0);
    CHECK(d.rows() == 4);
    CHECK((d.array() == 0.0).all());
  }
}

TEST_CASE("logit gradient matches finite differences of the loss") {
  Rng rng(13);
  Matrix z(3, 6);
  for (int i = 0; i < 3; ++i) {
    for (int v = 0; v < 6; ++v) z(i, v) = rng.normal();
  }
  auto logsm = [](const Matrix& raw) {
    LogitsSeq out = raw;
    for (int i = 0; i < raw.rows(); ++i) {
      const double mx = raw.row(i).maxCoeff();
      out.row(i).array() -= mx + std::log((raw.row(i).array() - mx).exp().sum());
    }
    return out;
  };
  const TeacherOutputs t = teacher_of(verify::random_logprobs(rng, 3, 6));
  const TokenSeq y = {5, 0, 2};
  const TokenMask mask = {1, 0, 1};
  const LossSpec spec{LossKind::cat_dist, 0.3};
  Matrix d;
  example_loss_and_dlogits(logsm(z), y, &t, &mask, spec, d);
  const double h = 1e-5;
  for (int i = 0; i < 3; ++i) {
    for (int v = 0; v < 6; ++v) {
      Matrix zp = z, zm = z;
      zp(i, v) += h;
      zm(i, v) -= h;
      Matrix unused;
      const double fp = example_loss_and_dlogits(logsm(zp), y, &t, &mask, spec, unused);
      const double fm = example_loss_and_dlogits(logsm(zm), y, &t, &mask, spec, unused);
      CHECK(d(i, v) == doctest::Approx((fp - fm) / (2 * h)).epsilon(1e-6));
    }
  }
}

TEST_CASE("reduction identities on random instances") {
  const auto r = verify::loss_identities(2024, 100, 1e-9);
  CHECK(r.pass);
  CHECK(r.value < 1e-9);
}

TEST_CASE("alpha(both) is the OR of the one-sided masks") {
  const auto r = verify::masking(7, 1000);
  CHECK(r.pass);
}

TEST_CASE("shape mismatch is an error") {
  Rng rng(1);
  const LogitsSeq lp = verify::random_logprobs(rng, 2, 5);
  CHECK_THROWS_AS(xent(lp, {1, 2, 3}), Error);
  CHECK_THROWS_AS(compute_alpha({1, 2}, {1}, {1, 2}, MaskVariant::both), Error);
}
