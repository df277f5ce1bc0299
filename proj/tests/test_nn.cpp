#include "catk/model.hpp"
#include "catk/rng.hpp"
#include "catk/verify.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <cmath>
#include <fstream>

using namespace catk;

namespace {

ModelConfig tiny_config(std::uint64_t seed = 3) {
  ModelConfig c;
  c.n_layers = 1;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.vocab_size = 12;
  c.max_seq_len = 14;
  c.init_seed = seed;
  return c;
}

ModelConfig small_config(std::uint64_t seed = 4) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.n_heads = 4;
  c.d_ff = 32;
  c.vocab_size = 12;
  c.max_seq_len = 16;
  c.init_seed = seed;
  return c;
}

// Random weights at a larger scale than init so the outputs are far from uniform.
Model random_model(const ModelConfig& cfg, std::uint64_t seed) {
  Model m = init_model(cfg);
  Rng rng(seed);
  for (double& p : m.params()) p += 0.3 * rng.normal();
  return m;
}

double logsumexp_row(const LogitsSeq& lp, int i) {
  double mx = lp.row(i).maxCoeff();
  double s = 0.0;
  for (int v = 0; v < lp.cols(); ++v) s += std::exp(lp(i, v) - mx);
  return mx + std::log(s);
}

void set_row(Model& m, const std::string& name, int row, const std::vector<double>& values) {
  const auto& p = m.param(name);
  const int width = p.shape.back();
  for (int k = 0; k < width; ++k) m.params()[p.offset + row * width + k] = values[k];
}

// All blocks contribute nothing; the residual stream is tok_emb + pos_emb.
Model blank_model(const ModelConfig& cfg) {
  Model m(cfg);
  const auto& g = m.param("final_ln.gain");
  for (std::size_t i = 0; i < g.size; ++i) m.params()[g.offset + i] = 1.0;
  return m;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c = tiny_config();
  CHECK_NOTHROW(init_model(c));
  c.d_model = 7;
  CHECK_THROWS_AS(init_model(c), ConfigError);
  c = tiny_config();
  c.n_layers = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  CHECK(ModelConfig::from_json(c.to_json()) == c);
}

TEST_CASE("init is deterministic and the manifest covers every parameter") {
  const Model a = init_model(small_config(9));
  const Model b = init_model(small_config(9));
  CHECK(a.checksum() == b.checksum());
  CHECK(a.params() == b.params());
  CHECK(init_model(small_config(10)).checksum() != a.checksum());

  std::size_t total = 0, expect_offset = 0;
  for (const auto& p : a.manifest()) {
    std::size_t n = 1;
    for (int s : p.shape) n *= s;
    CHECK(p.size == n);
    CHECK(p.offset == expect_offset);
    expect_offset += n;
    total += n;
  }
  CHECK(total == a.param_count());
  for (double v : a.params()) CHECK(std::isfinite(v));
}

TEST_CASE("teacher-forced outputs are normalized log-distributions") {
  const Model m = random_model(small_config(), 1);
  const TokenSeq x = {5, 6, 7, 8};
  const TokenSeq y = {9, 4, 10, 2};
  const LogitsSeq lp = forward_teacher_forced(m, x, y);
  REQUIRE(lp.rows() == 4);
  REQUIRE(lp.cols() == 12);
  for (int i = 0; i < lp.rows(); ++i) CHECK(std::abs(logsumexp_row(lp, i)) < 1e-6);
}

TEST_CASE("causality: a later target does not change earlier rows") {
  const Model m = random_model(small_config(), 2);
  const TokenSeq x = {5, 6, 7};
  TokenSeq y = {9, 4, 10, 11, 2};
  const LogitsSeq a = forward_teacher_forced(m, x, y);
  for (std::size_t j = 0; j < y.size(); ++j) {
    TokenSeq z = y;
    z[j] = 6;
    const LogitsSeq b = forward_teacher_forced(m, x, z);
    // row i conditions on y_<i, so rows 0..j are untouched by y_j
    for (std::size_t i = 0; i <= j; ++i) CHECK((a.row(i).array() == b.row(i).array()).all());
  }
}

TEST_CASE("sequence log-likelihood equals the chain-rule product") {
  const Model m = random_model(small_config(), 3);
  const TokenSeq x = {4, 5, 6};
  const TokenSeq y = {7, 8, 9, 2};
  const LogitsSeq lp = forward_teacher_forced(m, x, y);
  double joint = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) joint += lp(i, y[i]);

  // each factor from its own prefix-only forward pass
  double chain = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const TokenSeq prefix(y.begin(), y.begin() + i + 1);
    const LogitsSeq p = forward_teacher_forced(m, x, prefix);
    chain += p(i, y[i]);
  }
  CHECK(joint == doctest::Approx(chain).epsilon(1e-12));
}

TEST_CASE("batched forward matches single forward") {
  const Model m = random_model(small_config(), 4);
  const std::vector<TokenSeq> xs = {{4, 5}, {6, 7, 8, 9}, {10}};
  const std::vector<TokenSeq> ys = {{7, 2}, {4, 5, 6, 2}, {2}};
  std::vector<SeqRef> refs;
  for (std::size_t i = 0; i < xs.size(); ++i) refs.push_back({&xs[i], &ys[i]});
  const auto batch = forward_teacher_forced_batch(m, refs);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const LogitsSeq one = forward_teacher_forced(m, xs[i], ys[i]);
    CHECK((batch[i] - one).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("overlong sequences are rejected") {
  const Model m = init_model(tiny_config());
  const TokenSeq x(8, 5);
  const TokenSeq y(5, 6);  // 8 + 5 + 2 > 14
  CHECK_THROWS_AS(forward_teacher_forced(m, x, y), Error);
}

TEST_CASE("forced logits decode to [t5, eos]") {
  const ModelConfig cfg = tiny_config();
  Model m = blank_model(cfg);
  const std::vector<double> u = {1, -1, 0, 0, 0, 0, 0, 0};
  const std::vector<double> v = {0, 0, 1, -1, 0, 0, 0, 0};
  set_row(m, "tok_emb", 5, u);
  set_row(m, "tok_emb", cfg.ids.eos, v);
  // x has one token, so sep sits at position 2 and y_1 at position 3
  std::vector<double> p2(8), p3(8);
  for (int k = 0; k < 8; ++k) {
    p2[k] = 10 * u[k];
    p3[k] = 10 * v[k] - u[k];
  }
  set_row(m, "pos_emb", 2, p2);
  set_row(m, "pos_emb", 3, p3);

  const DecodeResult r = greedy_decode(m, {7}, 6);
  CHECK(r.y_hat == TokenSeq{5, cfg.ids.eos});
  CHECK(r.stopped_by == DecodeResult::Stop::eos);
  CHECK(r.token_logprobs.size() == 2);
}

TEST_CASE("decoding stops at max_new_tokens without eos") {
  const ModelConfig cfg = tiny_config();
  Model m = blank_model(cfg);
  m.params()[m.param("out_bias").offset + 7] = 5.0;
  const DecodeResult r = greedy_decode(m, {4, 5}, 3);
  CHECK(r.y_hat == TokenSeq{7, 7, 7});
  CHECK(r.stopped_by == DecodeResult::Stop::max_len);
  for (double lp : r.token_logprobs) CHECK(lp <= 0.0);
}

TEST_CASE("ties go to the lowest token id") {
  Model m = blank_model(tiny_config());
  m.params()[m.param("out_bias").offset + 9] = 4.0;
  m.params()[m.param("out_bias").offset + 6] = 4.0;
  CHECK(greedy_decode(m, {4}, 1).y_hat == TokenSeq{6});
}

TEST_CASE("re-scoring a decode reproduces its token log-probabilities") {
  for (std::uint64_t s = 0; s < 4; ++s) {
    const Model m = random_model(small_config(s), 10 + s);
    const TokenSeq x = {4, 5, static_cast<int>(6 + s)};
    const DecodeResult r = greedy_decode(m, x, 6);
    REQUIRE(r.y_hat.size() == r.token_logprobs.size());
    const LogitsSeq lp = forward_teacher_forced(m, x, r.y_hat);
    for (std::size_t i = 0; i < r.y_hat.size(); ++i) {
      CHECK(std::abs(lp(i, r.y_hat[i]) - r.token_logprobs[i]) < 1e-6);
    }
  }
}

TEST_CASE("batched decode matches single decode") {
  const Model m = random_model(small_config(), 21);
  const std::vector<TokenSeq> xs = {{4}, {5, 6, 7}, {8, 9}, {10, 11, 4, 5}};
  std::vector<const TokenSeq*> ptrs;
  for (const auto& x : xs) ptrs.push_back(&x);
  const auto batch = greedy_decode_batch(m, ptrs, 5);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const auto one = greedy_decode(m, xs[i], 5);
    CHECK(batch[i].y_hat == one.y_hat);
    CHECK(batch[i].stopped_by == one.stopped_by);
    for (std::size_t k = 0; k < one.token_logprobs.size(); ++k) {
      CHECK(batch[i].token_logprobs[k] == doctest::Approx(one.token_logprobs[k]).epsilon(1e-12));
    }
  }
}

TEST_CASE("unused positional rows get zero gradient") {
  const Model m = random_model(small_config(), 5);
  const std::vector<TokenSeq> xs = {{4, 5}, {6}};
  const std::vector<TokenSeq> ys = {{7, 2}, {8, 9, 2}};
  std::vector<BatchItem> batch;
  for (std::size_t i = 0; i < xs.size(); ++i) batch.push_back({&xs[i], &ys[i], nullptr});
  const LossGrad lg = loss_and_grad(m, batch, LossSpec{LossKind::xent, 1.0});
  const auto& pos = m.param("pos_emb");
  const int d = pos.shape[1];
  // the longest packed input has 5 positions
  for (int row = 5; row < pos.shape[0]; ++row) {
    for (int k = 0; k < d; ++k) CHECK(lg.grad[pos.offset + row * d + k] == 0.0);
  }
  double used = 0.0;
  for (int k = 0; k < d; ++k) used += std::abs(lg.grad[pos.offset + 4 * d + k]);
  CHECK(used > 0.0);
}

TEST_CASE("batch loss equals the per-example loss functions over the same logits") {
  const Model m = random_model(small_config(), 6);
  const Model t = random_model(small_config(99), 7);
  const std::vector<TokenSeq> xs = {{4, 5}, {6, 7, 8}, {9}};
  const std::vector<TokenSeq> ys = {{7, 2}, {8, 9, 10, 2}, {5, 2}};
  std::vector<TeacherOutputs> teach;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    TeacherOutputs o;
    o.logprobs = forward_teacher_forced(t, xs[i], ys[i]);
    o.argmax = argmax_rows(o.logprobs);
    teach.push_back(o);
  }
  std::vector<BatchItem> batch;
  for (std::size_t i = 0; i < xs.size(); ++i) batch.push_back({&xs[i], &ys[i], &teach[i]});

  for (LossKind k : all_loss_kinds()) {
    const LossSpec spec{k, 0.3};
    double sum = 0.0;
    std::int64_t active = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const LogitsSeq lp = forward_teacher_forced(m, xs[i], ys[i]);
      TokenMask mask(ys[i].size(), 1);
      if (spec.mask() != MaskVariant::none) {
        mask = compute_alpha(ys[i], argmax_rows(lp), teach[i].argmax, spec.mask());
      }
      sum += cat_loss(lp, ys[i], teach[i], spec.effective_w(), mask);
      for (auto a : mask) active += a;
    }
    const double expect = sum / std::max<std::int64_t>(1, active);
    const LossGrad lg = loss_and_grad(m, batch, spec);
    CHECK(lg.loss == doctest::Approx(expect).epsilon(1e-12));
    CHECK(lg.active_tokens == active);
    CHECK(lg.total_tokens == 8);
    CHECK(batch_loss(m, batch, spec) == lg.loss);
  }
}

TEST_CASE("analytic gradients match finite differences for every loss") {
  const auto results = verify::gradcheck_all(17, 200, 1e-4);
  CHECK(results.size() == all_loss_kinds().size());
  for (const auto& r : results) {
    INFO(to_string(r.kind));
    CHECK(r.coords == 200);
    CHECK(r.worst_rel < 1e-4);
  }
}

TEST_CASE("loss and gradient are deterministic") {
  const Model m = random_model(small_config(), 8);
  const std::vector<TokenSeq> xs = {{4, 5}, {6}};
  const std::vector<TokenSeq> ys = {{7, 2}, {8, 9, 2}};
  std::vector<BatchItem> batch;
  for (std::size_t i = 0; i < xs.size(); ++i) batch.push_back({&xs[i], &ys[i], nullptr});
  const LossGrad a = loss_and_grad(m, batch, LossSpec{LossKind::xent, 1.0});
  const LossGrad b = loss_and_grad(m, batch, LossSpec{LossKind::xent, 1.0});
  CHECK(a.loss == b.loss);
  CHECK(a.grad == b.grad);
}

TEST_CASE("missing teacher outputs are an error for distillation losses") {
  const Model m = init_model(tiny_config());
  const TokenSeq x = {4}, y = {5, 2};
  const std::vector<BatchItem> batch = {{&x, &y, nullptr}};
  CHECK_THROWS_AS(loss_and_grad(m, batch, LossSpec{LossKind::dist, 0.5}), Error);
  CHECK_THROWS_AS(loss_and_grad(m, batch, LossSpec{LossKind::cat_xent, 1.0}), Error);
  CHECK_NOTHROW(loss_and_grad(m, batch, LossSpec{LossKind::cat_xent_s, 1.0}));
}

TEST_CASE("checkpoint round trip") {
  testutil::TempDir dir("nn_ckpt");
  const Model m = random_model(small_config(), 9);
  save_model(m, dir / "m.ckpt");
  const Model back = load_model(dir / "m.ckpt");
  CHECK(back.checksum() == m.checksum());
  CHECK(back.config() == m.config());

  const TokenSeq x = {4, 5, 6}, y = {7, 8, 2};
  const LogitsSeq a = forward_teacher_forced(m, x, y);
  const LogitsSeq b = forward_teacher_forced(back, x, y);
  CHECK((a.array() == b.array()).all());
}

TEST_CASE("damaged checkpoints are rejected") {
  testutil::TempDir dir("nn_bad");
  const Model m = init_model(small_config());
  save_model(m, dir / "m.ckpt");
  const std::string bytes = testutil::slurp(dir / "m.ckpt");

  testutil::spit(dir / "trunc.ckpt", bytes.substr(0, bytes.size() - 5));
  CHECK_THROWS_WITH(load_model(dir / "trunc.ckpt"), doctest::Contains("truncated"));
  testutil::spit(dir / "short.ckpt", bytes.substr(0, 10));
  CHECK_THROWS_AS(load_model(dir / "short.ckpt"), Error);
  testutil::spit(dir / "long.ckpt", bytes + "x");
  CHECK_THROWS_AS(load_model(dir / "long.ckpt"), Error);

  std::string version = bytes;
  const auto at = version.find("\"format_version\":1");
  REQUIRE(at != std::string::npos);
  version[at + 17] = '7';
  testutil::spit(dir / "version.ckpt", version);
  CHECK_THROWS_WITH(load_model(dir / "version.ckpt"), doctest::Contains("version"));

  std::string shape = bytes;
  const auto sh = shape.find("\"shape\":[12,16]");
  REQUIRE(sh != std::string::npos);
  shape[sh + 10] = '3';  // [13,16]
  testutil::spit(dir / "shape.ckpt", shape);
  CHECK_THROWS_AS(load_model(dir / "shape.ckpt"), Error);

  CHECK_THROWS_AS(load_model(dir / "missing.ckpt"), ConfigError);
}
