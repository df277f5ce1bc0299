#include "catk/cascade.hpp"
#include "json_field.hpp"

#include "catk/rng.hpp"
#include "catk/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

namespace catk {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Rules

std::string DeferralRuleSpec::name() const {
  switch (kind) {
    case RuleKind::average: return "average";
    case RuleKind::minimum: return "minimum";
    case RuleKind::maximum: return "maximum";
    case RuleKind::sum: return "sum";
    case RuleKind::learned_router: return "learned_router";
    case RuleKind::quantile: {
      char buf[48];
      std::snprintf(buf, sizeof(buf), "quantile(%g)", q);
      return buf;
    }
  }
  return "?";
}

void DeferralRuleSpec::validate() const {
  if (kind == RuleKind::quantile && !(q >= 0.0 && q <= 1.0)) {
    throw ConfigError("quantile rule needs q in [0, 1]");
  }
  if (kind == RuleKind::learned_router && !router) {
    throw ConfigError("learned_router rule has no trained router");
  }
}

DeferralRuleSpec DeferralRuleSpec::parse(const std::string& s) {
  DeferralRuleSpec r;
  if (s == "average") {
    r.kind = RuleKind::average;
  } else if (s == "minimum") {
    r.kind = RuleKind::minimum;
  } else if (s == "maximum") {
    r.kind = RuleKind::maximum;
  } else if (s == "sum") {
    r.kind = RuleKind::sum;
  } else if (s == "learned_router") {
    r.kind = RuleKind::learned_router;
  } else if (s.rfind("quantile(", 0) == 0 && s.size() > 10 && s.back() == ')') {
    const std::string num = s.substr(9, s.size() - 10);
    char* end = nullptr;
    r.kind = RuleKind::quantile;
    r.q = std::strtod(num.c_str(), &end);
    if (end != num.c_str() + num.size() || num.empty()) {
      throw ConfigError("bad quantile in rule '" + s + "'");
    }
    if (!(r.q >= 0.0 && r.q <= 1.0)) throw ConfigError("quantile rule needs q in [0, 1]: " + s);
  } else {
    throw ConfigError("unknown deferral rule '" + s + "'");
  }
  return r;
}

double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw Error("quantile of an empty vector");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  if (lo + 1 >= v.size()) return v.back();
  const double frac = pos - static_cast<double>(lo);
  if (frac == 0.0) return v[lo];
  return v[lo] + frac * (v[lo + 1] - v[lo]);
}

std::vector<double> router_features(const DecodeResult& dr, int feature_len) {
  std::vector<double> f(feature_len, 0.0);
  const std::size_t n = std::min<std::size_t>(feature_len, dr.token_logprobs.size());
  for (std::size_t i = 0; i < n; ++i) f[i] = std::exp(dr.token_logprobs[i]);
  return f;
}

double deferral_score(const DecodeResult& dr, const DeferralRuleSpec& rule) {
  if (dr.token_logprobs.empty()) throw Error("deferral_score: empty decode");
  std::vector<double> u;
  u.reserve(dr.token_logprobs.size());
  for (double lp : dr.token_logprobs) u.push_back(-lp);
  switch (rule.kind) {
    case RuleKind::average: {
      double s = 0.0;
      for (double v : u) s += v;
      return s / static_cast<double>(u.size());
    }
    case RuleKind::sum: {
      double s = 0.0;
      for (double v : u) s += v;
      return s;
    }
    case RuleKind::maximum: return *std::max_element(u.begin(), u.end());
    case RuleKind::minimum: return *std::min_element(u.begin(), u.end());
    case RuleKind::quantile: return quantile(std::move(u), rule.q);
    case RuleKind::learned_router:
      if (!rule.router) throw Error("deferral_score: learned_router rule has no router");
      return rule.router->score(router_features(dr, rule.router->feature_len));
  }
  return 0.0;
}

// ---------------------------------------------------------------------------
// Prediction

CascadePrediction cascade_predict(const TokenSeq& x, const Decoder& small, const Decoder& large,
                                  const DeferralRuleSpec& rule, double tau, double cost_small,
                                  double cost_large) {
  const DecodeResult s = small(x);
  CascadePrediction p;
  p.score = deferral_score(s, rule);
  if (p.score < tau) {
    p.y_hat = s.y_hat;
    p.cost = cost_small;
    return p;
  }
  p.y_hat = large(x).y_hat;
  p.used_large = true;
  p.cost = cost_small + cost_large;
  return p;
}

CascadePrediction cascade_predict(const TokenSeq& x, const CascadeConfig& cfg) {
  if (cfg.small == nullptr || cfg.large == nullptr) throw Error("cascade: missing model");
  cfg.rule.validate();
  const int n = cfg.max_new_tokens;
  return cascade_predict(
      x, [&](const TokenSeq& q) { return greedy_decode(*cfg.small, q, n); },
      [&](const TokenSeq& q) { return greedy_decode(*cfg.large, q, n); }, cfg.rule, cfg.tau,
      cfg.cost_small(), cfg.cost_large());
}

double example_quality(MetricKind metric, const TokenSeq& y_hat, const TokenSeq& y, int eos) {
  if (metric == MetricKind::bleu) return sentence_bleu(y_hat, y, eos);
  return exact_match(y_hat, y, eos);
}

std::vector<ScoreRow> build_score_log(const std::vector<const Example*>& examples,
                                      const std::vector<std::string>& ids,
                                      const std::vector<MetricKind>& metrics,
                                      const std::vector<DecodeResult>& small,
                                      const std::vector<DecodeResult>& large,
                                      const DeferralRuleSpec& rule, int eos) {
  const std::size_t n = examples.size();
  if (ids.size() != n || metrics.size() != n || small.size() != n || large.size() != n) {
    throw Error("build_score_log: inputs are not aligned");
  }
  std::vector<ScoreRow> rows(n);
  for (std::size_t i = 0; i < n; ++i) {
    const TokenSeq& y = examples[i]->y;
    ScoreRow& r = rows[i];
    r.example_id = ids[i];
    r.score = deferral_score(small[i], rule);
    r.small_correct = exact_match(small[i].y_hat, y, eos);
    r.large_correct = exact_match(large[i].y_hat, y, eos);
    r.small_quality = example_quality(metrics[i], small[i].y_hat, y, eos);
    r.large_quality = example_quality(metrics[i], large[i].y_hat, y, eos);
    r.n_tokens = static_cast<int>(small[i].y_hat.size());
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Router

namespace {

double sigmoid(double z) {
  return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

}  // namespace

double Router::score(const std::vector<double>& f) const {
  if (static_cast<int>(f.size()) != feature_len) throw Error("router: wrong feature length");
  double z = b2;
  for (int h = 0; h < hidden; ++h) {
    double a = b1[h];
    const double* row = &w1[static_cast<std::size_t>(h) * feature_len];
    for (int k = 0; k < feature_len; ++k) a += row[k] * f[k];
    z += w2[h] * std::tanh(a);
  }
  return sigmoid(z);
}

json Router::to_json() const {
  return json{{"feature_len", feature_len}, {"hidden", hidden}, {"w1", w1},
              {"b1", b1},                   {"w2", w2},         {"b2", b2}};
}

Router Router::from_json(const json& j) {
  Router r;
  try {
    r.feature_len = j.at("feature_len").get<int>();
    r.hidden = j.at("hidden").get<int>();
    r.w1 = j.at("w1").get<std::vector<double>>();
    r.b1 = j.at("b1").get<std::vector<double>>();
    r.w2 = j.at("w2").get<std::vector<double>>();
    r.b2 = j.at("b2").get<double>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("router: ") + e.what());
  }
  if (r.feature_len < 1 || r.hidden < 1 ||
      r.w1.size() != static_cast<std::size_t>(r.hidden) * r.feature_len ||
      r.b1.size() != static_cast<std::size_t>(r.hidden) ||
      r.w2.size() != static_cast<std::size_t>(r.hidden)) {
    throw ConfigError("router: parameter shapes do not match feature_len/hidden");
  }
  return r;
}

void Router::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << to_json().dump() << '\n';
}

Router Router::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read router " + path.string());
  try {
    return from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ConfigError("router " + path.string() + ": " + e.what());
  }
}

void RouterConfig::validate() const {
  if (feature_len < 1) throw ConfigError("router: feature_len must be >= 1");
  if (hidden < 1) throw ConfigError("router: hidden must be >= 1");
  if (steps < 1 || batch_size < 1) throw ConfigError("router: steps and batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("router: learning_rate must be > 0");
  if (max_examples < 0) throw ConfigError("router: max_examples must be >= 0");
}

json RouterConfig::to_json() const {
  return json{{"feature_len", feature_len}, {"hidden", hidden},
              {"steps", steps},             {"batch_size", batch_size},
              {"learning_rate", learning_rate}, {"max_examples", max_examples},
              {"seed", seed}};
}

RouterConfig RouterConfig::from_json(const json& j) {
  RouterConfig c;
  try {
    c.feature_len = field(j, "feature_len", c.feature_len);
    c.hidden = field(j, "hidden", c.hidden);
    c.steps = field(j, "steps", c.steps);
    c.batch_size = field(j, "batch_size", c.batch_size);
    c.learning_rate = field(j, "learning_rate", c.learning_rate);
    c.max_examples = field(j, "max_examples", c.max_examples);
    c.seed = field(j, "seed", c.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("router config: ") + e.what());
  }
  return c;
}

RouterTrainResult train_router_on_features(const std::vector<std::vector<double>>& features,
                                           const std::vector<int>& labels,
                                           const RouterConfig& cfg) {
  cfg.validate();
  if (features.empty() || features.size() != labels.size()) {
    throw Error("router: features and labels must be non-empty and aligned");
  }
  const int L = cfg.feature_len, Hn = cfg.hidden;
  for (const auto& f : features) {
    if (static_cast<int>(f.size()) != L) throw Error("router: wrong feature length");
  }
  RouterTrainResult res;
  std::size_t pos = 0;
  for (int y : labels) pos += y != 0;
  res.positive_rate = static_cast<double>(pos) / static_cast<double>(labels.size());
  res.degenerate = pos == 0 || pos == labels.size();

  Router& r = res.router;
  r.feature_len = L;
  r.hidden = Hn;
  Rng rng(mix_seed(cfg.seed, 0x726f75746572ULL));
  r.w1.resize(static_cast<std::size_t>(Hn) * L);
  for (double& v : r.w1) v = rng.normal() / std::sqrt(static_cast<double>(L));
  r.b1.assign(Hn, 0.0);
  r.w2.resize(Hn);
  for (double& v : r.w2) v = rng.normal() / std::sqrt(static_cast<double>(Hn));
  // Start at the base rate so the first steps are not spent on the bias.
  const double p0 = std::clamp(res.positive_rate, 1e-3, 1.0 - 1e-3);
  r.b2 = std::log(p0 / (1.0 - p0));

  // Adam over the concatenation [w1, b1, w2, b2].
  const std::size_t np = r.w1.size() + r.b1.size() + r.w2.size() + 1;
  std::vector<double> m(np, 0.0), v(np, 0.0), g(np);
  std::vector<std::size_t> order(features.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = order.size();
  std::vector<double> a(Hn), t(Hn);
  const double b1c = 0.9, b2c = 0.999;
  for (int step = 1; step <= cfg.steps; ++step) {
    std::fill(g.begin(), g.end(), 0.0);
    const int bs = std::min<int>(cfg.batch_size, static_cast<int>(features.size()));
    for (int b = 0; b < bs; ++b) {
      if (cursor == order.size()) {
        rng.shuffle(order);
        cursor = 0;
      }
      const std::size_t i = order[cursor++];
      const auto& f = features[i];
      double z = r.b2;
      for (int h = 0; h < Hn; ++h) {
        double s = r.b1[h];
        const double* row = &r.w1[static_cast<std::size_t>(h) * L];
        for (int k = 0; k < L; ++k) s += row[k] * f[k];
        t[h] = std::tanh(s);
        z += r.w2[h] * t[h];
      }
      const double dz = (sigmoid(z) - (labels[i] != 0 ? 1.0 : 0.0)) / bs;
      const std::size_t ob1 = r.w1.size(), ow2 = ob1 + Hn;
      for (int h = 0; h < Hn; ++h) {
        g[ow2 + h] += dz * t[h];
        const double da = dz * r.w2[h] * (1.0 - t[h] * t[h]);
        g[ob1 + h] += da;
        double* grow = &g[static_cast<std::size_t>(h) * L];
        for (int k = 0; k < L; ++k) grow[k] += da * f[k];
      }
      g[np - 1] += dz;
    }
    const double c1 = 1.0 - std::pow(b1c, step), c2 = 1.0 - std::pow(b2c, step);
    auto update = [&](std::size_t idx, double& p) {
      m[idx] = b1c * m[idx] + (1.0 - b1c) * g[idx];
      v[idx] = b2c * v[idx] + (1.0 - b2c) * g[idx] * g[idx];
      p -= cfg.learning_rate * (m[idx] / c1) / (std::sqrt(v[idx] / c2) + 1e-8);
    };
    std::size_t idx = 0;
    for (double& p : r.w1) update(idx++, p);
    for (double& p : r.b1) update(idx++, p);
    for (double& p : r.w2) update(idx++, p);
    update(idx, r.b2);
  }
  return res;
}

RouterTrainResult train_router(const Model& small, const Model& large,
                               const std::vector<Example>& corpus, const RouterConfig& cfg,
                               int max_new_tokens,
                               const std::function<void(const std::string&)>& warn) {
  cfg.validate();
  auto train_set = split_of(corpus, Split::train);
  if (train_set.empty()) throw Error("router: corpus has no train examples");
  if (cfg.max_examples > 0 && train_set.size() > static_cast<std::size_t>(cfg.max_examples)) {
    // Evenly spaced subset so every task is represented.
    std::vector<const Example*> sub;
    const double stride = static_cast<double>(train_set.size()) / cfg.max_examples;
    for (int i = 0; i < cfg.max_examples; ++i) {
      sub.push_back(train_set[static_cast<std::size_t>(i * stride)]);
    }
    train_set = std::move(sub);
  }
  const auto ds = decode_all(small, train_set, max_new_tokens);
  const auto dl = decode_all(large, train_set, max_new_tokens);
  const int eos = small.config().ids.eos;
  std::vector<std::vector<double>> features;
  std::vector<int> labels;
  for (std::size_t i = 0; i < train_set.size(); ++i) {
    features.push_back(router_features(ds[i], cfg.feature_len));
    const bool small_ok = exact_match(ds[i].y_hat, train_set[i]->y, eos) == 1;
    const bool large_ok = exact_match(dl[i].y_hat, train_set[i]->y, eos) == 1;
    labels.push_back(!small_ok && large_ok ? 1 : 0);
  }
  auto res = train_router_on_features(features, labels, cfg);
  if (res.degenerate && warn) {
    warn("router labels are all " + std::string(res.positive_rate > 0.5 ? "1" : "0") +
         "; the router carries no routing signal");
  }
  return res;
}

double ranking_accuracy(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw Error("ranking_accuracy: inputs are not aligned");
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Mann-Whitney U with average ranks for ties.
  double pos = 0, neg = 0, rank_sum = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = (static_cast<double>(i) + static_cast<double>(j - 1)) / 2.0 + 1.0;
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]]) {
        rank_sum += avg_rank;
        ++pos;
      } else {
        ++neg;
      }
    }
    i = j;
  }
  if (pos == 0 || neg == 0) throw Error("ranking_accuracy: needs both positive and negative labels");
  return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg);
}

}  // namespace catk
