#include "catk/verify.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <unordered_map>

namespace catk::verify {

using nlohmann::json;

json CheckResult::to_json() const {
  return json{{"pass", pass}, {"value", value}, {"threshold", threshold}, {"detail", detail}};
}

// ---------------------------------------------------------------------------
// Reference BLEU: string-keyed n-gram tables, long double accumulation.

namespace {

std::string gram_key(const TokenSeq& s, std::size_t at, int n) {
  std::string k;
  for (int i = 0; i < n; ++i) {
    k += std::to_string(s[at + i]);
    k += ' ';
  }
  return k;
}

}  // namespace

double reference_bleu(const std::vector<TokenSeq>& hyps, const std::vector<TokenSeq>& refs) {
  long double clipped[5] = {0, 0, 0, 0, 0};
  long double proposed[5] = {0, 0, 0, 0, 0};
  std::size_t c = 0, r = 0;
  for (std::size_t p = 0; p < hyps.size(); ++p) {
    const TokenSeq& h = hyps[p];
    const TokenSeq& ref = refs[p];
    c += h.size();
    r += ref.size();
    for (int n = 1; n <= 4; ++n) {
      std::unordered_map<std::string, int> budget;
      for (std::size_t i = 0; i + n <= ref.size(); ++i) budget[gram_key(ref, i, n)]++;
      for (std::size_t i = 0; i + n <= h.size(); ++i) {
        proposed[n] += 1;
        auto it = budget.find(gram_key(h, i, n));
        if (it != budget.end() && it->second > 0) {
          clipped[n] += 1;
          it->second--;
        }
      }
    }
  }
  if (c == 0 || clipped[1] == 0) return 0.0;
  long double log_p = 0;
  for (int n = 1; n <= 4; ++n) {
    const bool smooth = n >= 2 && clipped[n] == 0;
    log_p += smooth ? std::log((clipped[n] + 1) / (proposed[n] + 1))
                    : std::log(clipped[n] / proposed[n]);
  }
  long double bp = 1;
  if (c <= r) bp = std::exp(1.0L - static_cast<long double>(r) / static_cast<long double>(c));
  return static_cast<double>(bp * std::exp(log_p / 4));
}

LogitsSeq random_logprobs(Rng& rng, int rows, int vocab, double scale) {
  LogitsSeq z(rows, vocab);
  for (int i = 0; i < rows; ++i) {
    for (int v = 0; v < vocab; ++v) z(i, v) = scale * rng.normal();
    const double mx = z.row(i).maxCoeff();
    const double lse = mx + std::log((z.row(i).array() - mx).exp().sum());
    z.row(i).array() -= lse;
  }
  return z;
}

// ---------------------------------------------------------------------------

namespace {

TokenSeq random_targets(Rng& rng, int n, int vocab) {
  TokenSeq y;
  for (int i = 0; i < n; ++i) y.push_back(rng.below(vocab));
  return y;
}

TeacherOutputs random_teacher(Rng& rng, int rows, int vocab) {
  TeacherOutputs t;
  t.logprobs = random_logprobs(rng, rows, vocab);
  t.argmax = argmax_rows(t.logprobs);
  return t;
}

double loss_with(const LogitsSeq& lp, const TokenSeq& y, const TeacherOutputs& t,
                 const TokenMask* mask, LossKind kind, double w) {
  Matrix d;
  return example_loss_and_dlogits(lp, y, &t, mask, LossSpec{kind, w}, d);
}

}  // namespace

CheckResult loss_identities(std::uint64_t seed, int instances, double tol) {
  Rng rng(seed);
  double worst = 0.0;
  for (int k = 0; k < instances; ++k) {
    const int n = rng.between(1, 8), V = rng.between(4, 68);
    const LogitsSeq lp = random_logprobs(rng, n, V);
    const TokenSeq y = random_targets(rng, n, V);
    const TeacherOutputs t = random_teacher(rng, n, V);
    const double w = rng.uniform();
    const TokenMask ones(n, 1);
    TokenMask mixed(n);
    for (auto& m : mixed) m = static_cast<std::uint8_t>(rng.below(2));

    worst = std::max(worst, std::abs(dist(lp, y, t, 1.0) - xent(lp, y)));
    worst = std::max(worst, std::abs(cat_loss(lp, y, t, w, ones) - dist(lp, y, t, w)));
    worst = std::max(worst, std::abs(loss_with(lp, y, t, &mixed, LossKind::cat_xent, w) -
                                     loss_with(lp, y, t, &mixed, LossKind::cat_dist, 1.0)));
    worst = std::max(worst, std::abs(loss_with(lp, y, t, nullptr, LossKind::dist, 1.0) -
                                     loss_with(lp, y, t, nullptr, LossKind::xent, w)));
  }
  CheckResult r;
  r.value = worst;
  r.threshold = tol;
  r.pass = worst < tol;
  r.detail = std::to_string(instances) + " random instances, max abs deviation";
  return r;
}

std::vector<GradcheckResult> gradcheck_all(std::uint64_t seed, int coords, double h) {
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.vocab_size = 12;
  cfg.max_seq_len = 12;
  cfg.init_seed = seed;
  const Model base = init_model(cfg);
  Rng rng(mix_seed(seed, 0x67726164ULL));

  // Larger-than-default init so every block carries gradient signal.
  Model model = base;
  for (double& p : model.params()) p += 0.3 * rng.normal();

  std::vector<TokenSeq> xs, ys;
  std::vector<TeacherOutputs> teachers;
  for (int b = 0; b < 3; ++b) {
    TokenSeq x, y;
    const int m = rng.between(2, 4), n = rng.between(2, 4);
    for (int i = 0; i < m; ++i) x.push_back(rng.between(4, 11));
    for (int i = 0; i < n - 1; ++i) y.push_back(rng.between(4, 11));
    y.push_back(cfg.ids.eos);
    TeacherOutputs t = random_teacher(rng, n, cfg.vocab_size);
    // Make the teacher right at about half the positions so masks are mixed.
    for (int i = 0; i < n; ++i) {
      if (rng.bernoulli(0.5)) {
        t.logprobs(i, y[i]) = t.logprobs.row(i).maxCoeff() + 0.5;
        const double mx = t.logprobs.row(i).maxCoeff();
        const double lse = mx + std::log((t.logprobs.row(i).array() - mx).exp().sum());
        t.logprobs.row(i).array() -= lse;
      }
    }
    t.argmax = argmax_rows(t.logprobs);
    xs.push_back(x);
    ys.push_back(y);
    teachers.push_back(std::move(t));
  }
  std::vector<BatchItem> batch;
  for (int b = 0; b < 3; ++b) batch.push_back({&xs[b], &ys[b], &teachers[b]});

  std::vector<std::size_t> picks;
  for (int c = 0; c < coords; ++c) picks.push_back(rng.below(static_cast<int>(model.param_count())));

  std::vector<GradcheckResult> out;
  for (LossKind kind : all_loss_kinds()) {
    const LossSpec spec{kind, 0.5};
    const LossGrad lg = loss_and_grad(model, batch, spec);
    // Hold the masks fixed: alpha is piecewise constant and carries no gradient.
    const std::vector<TokenMask> masks = lg.masks;
    GradcheckResult r{kind, 0.0, coords};
    Model probe = model;
    for (std::size_t idx : picks) {
      const double orig = probe.params()[idx];
      probe.params()[idx] = orig + h;
      const double up = batch_loss(probe, batch, spec, &masks);
      probe.params()[idx] = orig - h;
      const double down = batch_loss(probe, batch, spec, &masks);
      probe.params()[idx] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = lg.grad[idx];
      const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
      r.worst_rel = std::max(r.worst_rel, std::abs(numeric - analytic) / denom);
    }
    out.push_back(r);
  }
  return out;
}

CheckResult gradients(std::uint64_t seed, int coords, double tol) {
  const auto all = gradcheck_all(seed, coords);
  CheckResult r;
  r.threshold = tol;
  std::ostringstream d;
  for (const auto& g : all) {
    r.value = std::max(r.value, g.worst_rel);
    d << to_string(g.kind) << '=' << g.worst_rel << ' ';
  }
  r.pass = r.value < tol;
  r.detail = "worst relative error per loss over " + std::to_string(coords) + " coords: " + d.str();
  return r;
}

CheckResult masking(std::uint64_t seed, int positions) {
  Rng rng(seed);
  int checked = 0, mismatches = 0, nonzero = 0;
  while (checked < positions) {
    const int n = rng.between(1, 10), V = rng.between(3, 12);
    const TokenSeq y = random_targets(rng, n, V);
    // Argmaxes drawn to hit the targets often, so every combination occurs.
    std::vector<int> sa, ta;
    for (int i = 0; i < n; ++i) {
      sa.push_back(rng.bernoulli(0.5) ? y[i] : rng.below(V));
      ta.push_back(rng.bernoulli(0.5) ? y[i] : rng.below(V));
    }
    const auto both = compute_alpha(y, sa, ta, MaskVariant::both);
    const auto small = compute_alpha(y, sa, ta, MaskVariant::small_only);
    const auto large = compute_alpha(y, sa, ta, MaskVariant::large_only);
    const LogitsSeq lp = random_logprobs(rng, n, V);
    const TeacherOutputs t = random_teacher(rng, n, V);
    for (LossKind kind : {LossKind::cat_xent, LossKind::cat_dist}) {
      Matrix d;
      example_loss_and_dlogits(lp, y, &t, &both, LossSpec{kind, 0.5}, d);
      for (int i = 0; i < n; ++i) {
        if (!both[i] && (d.row(i).array() != 0.0).any()) ++nonzero;
      }
    }
    for (int i = 0; i < n; ++i) {
      if (both[i] != (small[i] | large[i])) ++mismatches;
    }
    checked += n;
  }
  CheckResult r;
  r.value = mismatches + nonzero;
  r.threshold = 0;
  r.pass = mismatches == 0 && nonzero == 0;
  r.detail = std::to_string(checked) + " positions: " + std::to_string(mismatches) +
             " OR mismatches, " + std::to_string(nonzero) + " masked rows with nonzero gradient";
  return r;
}

CheckResult sweep_identities(const std::vector<ScoreRow>& log, const std::vector<CurvePoint>& curve,
                             MetricKind metric, double cost_small, double cost_large, double tol) {
  CheckResult r;
  r.threshold = tol;
  std::vector<std::string> problems;
  const double n = static_cast<double>(log.size());
  auto qs = [&](const ScoreRow& x) {
    return metric == MetricKind::exact_match ? x.small_correct : x.small_quality;
  };
  auto ql = [&](const ScoreRow& x) {
    return metric == MetricKind::exact_match ? x.large_correct : x.large_quality;
  };
  double worst = 0.0;
  for (std::size_t k = 0; k < curve.size(); ++k) {
    const CurvePoint& p = curve[k];
    double a1 = 0.0, a2 = 0.0;
    std::size_t deferred = 0;
    for (const auto& x : log) {
      if (x.score >= p.tau) {
        a2 += ql(x);
        ++deferred;
      } else {
        a1 += qs(x);
      }
    }
    a1 /= n;
    a2 /= n;
    worst = std::max({worst, std::abs(a1 - p.a1), std::abs(a2 - p.a2),
                      std::abs(static_cast<double>(deferred) / n - p.deferral_rate),
                      std::abs(p.a1 + p.a2 - p.quality),
                      std::abs(p.mean_cost - (cost_small + p.deferral_rate * cost_large)) /
                          std::max(1.0, cost_small + cost_large)});
    if (k > 0 && p.deferral_rate < curve[k - 1].deferral_rate) problems.push_back("rate decreased");
    if (k > 0 && !(p.tau < curve[k - 1].tau)) problems.push_back("tau not decreasing");
  }
  double small_mean = 0.0, large_mean = 0.0;
  for (const auto& x : log) {
    small_mean += qs(x);
    large_mean += ql(x);
  }
  small_mean /= n;
  large_mean /= n;
  if (curve.empty()) {
    problems.push_back("empty curve");
  } else {
    if (curve.front().deferral_rate != 0.0 || curve.front().quality != small_mean ||
        curve.front().mean_cost != cost_small) {
      problems.push_back("rate-0 endpoint differs from the small model");
    }
    if (curve.back().deferral_rate != 1.0 || curve.back().quality != large_mean ||
        curve.back().mean_cost != cost_small + cost_large) {
      problems.push_back("rate-1 endpoint differs from the large model");
    }
  }
  r.value = worst;
  r.pass = worst < tol && problems.empty();
  r.detail = std::to_string(curve.size()) + " points";
  for (const auto& p : problems) r.detail += "; " + p;
  return r;
}

CheckResult bleu_oracle(std::uint64_t seed, int corpora, double tol) {
  Rng rng(seed);
  double worst = 0.0;
  const int eos = 2;
  for (int c = 0; c < corpora; ++c) {
    const int pairs = rng.between(1, 10);
    // Small alphabets make higher-order matches common.
    const int alphabet = rng.between(2, 6);
    std::vector<TokenSeq> hyps, refs, hyps_eos, refs_eos;
    for (int p = 0; p < pairs; ++p) {
      TokenSeq h, ref;
      const int hl = rng.between(0, 12), rl = rng.between(1, 12);
      for (int i = 0; i < hl; ++i) h.push_back(4 + rng.below(alphabet));
      for (int i = 0; i < rl; ++i) ref.push_back(4 + rng.below(alphabet));
      hyps.push_back(h);
      refs.push_back(ref);
      h.push_back(eos);
      ref.push_back(eos);
      hyps_eos.push_back(h);
      refs_eos.push_back(ref);
    }
    worst = std::max(worst, std::abs(bleu(hyps_eos, refs_eos, eos) - reference_bleu(hyps, refs)));
  }
  CheckResult r;
  r.value = worst;
  r.threshold = tol;
  r.pass = worst < tol;
  r.detail = std::to_string(corpora) + " random mini-corpora, max abs deviation";
  return r;
}

}  // namespace catk::verify
