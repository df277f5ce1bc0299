#include "catk/model.hpp"
#include "json_field.hpp"

#include "catk/rng.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace catk {

using nlohmann::json;

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr char kMagic[8] = {'C', 'A', 'T', 'K', 'M', 'D', 'L', '\0'};

using MatMap = Eigen::Map<Matrix>;
using ConstMatMap = Eigen::Map<const Matrix>;
using RowMap = Eigen::Map<RowVector>;
using ConstRowMap = Eigen::Map<const RowVector>;

struct LayerOffsets {
  std::size_t ln1_g, ln1_b, qkv, out, ln2_g, ln2_b, w1, b1, w2, b2;
};

struct Offsets {
  std::size_t tok_emb, pos_emb, lnf_g, lnf_b, out_bias;
  std::vector<LayerOffsets> layers;
};

Offsets offsets_of(const Model& m) {
  Offsets o;
  o.tok_emb = m.param("tok_emb").offset;
  o.pos_emb = m.param("pos_emb").offset;
  o.lnf_g = m.param("final_ln.gain").offset;
  o.lnf_b = m.param("final_ln.bias").offset;
  o.out_bias = m.param("out_bias").offset;
  for (int l = 0; l < m.config().n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    o.layers.push_back({m.param(p + "ln1.gain").offset, m.param(p + "ln1.bias").offset,
                        m.param(p + "attn.qkv").offset, m.param(p + "attn.out").offset,
                        m.param(p + "ln2.gain").offset, m.param(p + "ln2.bias").offset,
                        m.param(p + "ff.w1").offset, m.param(p + "ff.b1").offset,
                        m.param(p + "ff.w2").offset, m.param(p + "ff.b2").offset});
  }
  return o;
}

// One packed sequence: `[bos] x [sep] prefix`, with logits requested at the
// listed positions.
struct PackedSeq {
  std::vector<int> tokens;
  std::vector<int> out_positions;
};

struct LayerCache {
  Matrix a_hat, a;  // ln1
  Eigen::VectorXd a_rstd;
  Matrix qkv;
  std::vector<Matrix> probs;  // [seq * n_heads + head], L x L lower-triangular
  Matrix ctx;
  Matrix b_hat, b;  // ln2
  Eigen::VectorXd b_rstd;
  Matrix u, g;  // feed-forward pre/post activation
};

struct ForwardCache {
  std::vector<int> seq_start, seq_len;
  std::vector<int> out_rows;  // global row of each requested position
  std::vector<int> tokens;
  std::vector<LayerCache> layers;
  Matrix f_hat;
  Eigen::VectorXd f_rstd;
  Matrix h_sel;
  Matrix logprobs;
};

void layer_norm(const Matrix& x, const double* gain, const double* bias, Matrix& x_hat,
                Eigen::VectorXd& rstd, Matrix& y) {
  const Eigen::Index d = x.cols();
  const Eigen::VectorXd mean = x.rowwise().mean();
  x_hat = x.colwise() - mean;
  rstd = (x_hat.array().square().rowwise().sum() / static_cast<double>(d) + kLayerNormEps)
             .rsqrt()
             .matrix();
  x_hat.array().colwise() *= rstd.array();
  const ConstRowMap g(gain, d), b(bias, d);
  y = (x_hat.array().rowwise() * g.array()).rowwise() + b.array();
}

// Returns dx; accumulates gain/bias gradients.
Matrix layer_norm_backward(const Matrix& dy, const Matrix& x_hat, const Eigen::VectorXd& rstd,
                           const double* gain, double* dgain, double* dbias) {
  const Eigen::Index d = dy.cols();
  RowMap(dgain, d) += (dy.array() * x_hat.array()).colwise().sum().matrix();
  RowMap(dbias, d) += dy.colwise().sum();
  const ConstRowMap g(gain, d);
  const Matrix dx_hat = dy.array().rowwise() * g.array();
  const Eigen::VectorXd mean_d = dx_hat.rowwise().mean();
  const Eigen::VectorXd mean_dx = (dx_hat.array() * x_hat.array()).rowwise().mean();
  Matrix dx = dx_hat;
  dx.colwise() -= mean_d;
  dx.array() -= x_hat.array().colwise() * mean_dx.array();
  dx.array().colwise() *= rstd.array();
  return dx;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

// tanh through exp, which Eigen vectorizes for double; clamped so exp stays finite.
Eigen::ArrayXXd gelu_tanh(const Matrix& u) {
  const auto ua = u.array();
  const Eigen::ArrayXXd z = (2.0 * kGeluC * (ua + kGeluA * ua.cube())).min(700.0).max(-700.0);
  return 1.0 - 2.0 / (z.exp() + 1.0);
}

Matrix gelu(const Matrix& u) {
  return (0.5 * u.array() * (1.0 + gelu_tanh(u))).matrix();
}

Matrix gelu_backward(const Matrix& u, const Matrix& dg) {
  const auto ua = u.array();
  const Eigen::ArrayXXd t = gelu_tanh(u);
  const Eigen::ArrayXXd deriv =
      0.5 * (1.0 + t) + 0.5 * ua * (1.0 - t.square()) * kGeluC * (1.0 + 3.0 * kGeluA * ua.square());
  return (dg.array() * deriv).matrix();
}

void forward(const Model& model, const Offsets& off, const std::vector<PackedSeq>& seqs,
             ForwardCache& c) {
  const ModelConfig& cfg = model.config();
  const int d = cfg.d_model;
  const int H = cfg.n_heads;
  const int dh = d / H;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const double* P = model.params().data();

  c.seq_start.clear();
  c.seq_len.clear();
  c.out_rows.clear();
  c.tokens.clear();
  int total = 0;
  for (const auto& s : seqs) {
    if (static_cast<int>(s.tokens.size()) > cfg.max_seq_len) {
      throw Error("sequence of length " + std::to_string(s.tokens.size()) +
                  " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    }
    c.seq_start.push_back(total);
    c.seq_len.push_back(static_cast<int>(s.tokens.size()));
    for (int p : s.out_positions) c.out_rows.push_back(total + p);
    c.tokens.insert(c.tokens.end(), s.tokens.begin(), s.tokens.end());
    total += static_cast<int>(s.tokens.size());
  }

  const ConstMatMap tok(P + off.tok_emb, cfg.vocab_size, d);
  const ConstMatMap pos(P + off.pos_emb, cfg.max_seq_len, d);
  Matrix x(total, d);
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    for (int i = 0; i < c.seq_len[s]; ++i) {
      const int r = c.seq_start[s] + i;
      const int t = c.tokens[r];
      if (t < 0 || t >= cfg.vocab_size) throw Error("token id out of range");
      x.row(r) = tok.row(t) + pos.row(i);
    }
  }

  c.layers.resize(cfg.n_layers);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerOffsets& lo = off.layers[l];
    LayerCache& lc = c.layers[l];
    layer_norm(x, P + lo.ln1_g, P + lo.ln1_b, lc.a_hat, lc.a_rstd, lc.a);
    lc.qkv.noalias() = lc.a * ConstMatMap(P + lo.qkv, d, 3 * d);
    lc.ctx.setZero(total, d);
    lc.probs.resize(seqs.size() * H);
    for (std::size_t s = 0; s < seqs.size(); ++s) {
      const int o = c.seq_start[s];
      const int L = c.seq_len[s];
      for (int h = 0; h < H; ++h) {
        const auto q = lc.qkv.block(o, h * dh, L, dh);
        const auto k = lc.qkv.block(o, d + h * dh, L, dh);
        const auto v = lc.qkv.block(o, 2 * d + h * dh, L, dh);
        Matrix& p = lc.probs[s * H + h];
        p.noalias() = (q * k.transpose()) * scale;
        for (int i = 0; i < L; ++i) {
          double mx = p(i, 0);
          for (int j = 1; j <= i; ++j) mx = std::max(mx, p(i, j));
          double sum = 0.0;
          for (int j = 0; j <= i; ++j) {
            p(i, j) = std::exp(p(i, j) - mx);
            sum += p(i, j);
          }
          const double inv = 1.0 / sum;
          for (int j = 0; j <= i; ++j) p(i, j) *= inv;
          for (int j = i + 1; j < L; ++j) p(i, j) = 0.0;
        }
        lc.ctx.block(o, h * dh, L, dh).noalias() = p * v;
      }
    }
    x.noalias() += lc.ctx * ConstMatMap(P + lo.out, d, d);
    layer_norm(x, P + lo.ln2_g, P + lo.ln2_b, lc.b_hat, lc.b_rstd, lc.b);
    lc.u.noalias() = lc.b * ConstMatMap(P + lo.w1, d, cfg.d_ff);
    lc.u.rowwise() += ConstRowMap(P + lo.b1, cfg.d_ff);
    lc.g = gelu(lc.u);
    x.noalias() += lc.g * ConstMatMap(P + lo.w2, cfg.d_ff, d);
    x.rowwise() += ConstRowMap(P + lo.b2, d);
  }

  Matrix f;
  layer_norm(x, P + off.lnf_g, P + off.lnf_b, c.f_hat, c.f_rstd, f);
  const int R = static_cast<int>(c.out_rows.size());
  c.h_sel.resize(R, d);
  for (int r = 0; r < R; ++r) c.h_sel.row(r) = f.row(c.out_rows[r]);
  c.logprobs.noalias() = c.h_sel * tok.transpose();
  c.logprobs.rowwise() += ConstRowMap(P + off.out_bias, cfg.vocab_size);
  for (int r = 0; r < R; ++r) {
    auto row = c.logprobs.row(r);
    const double mx = row.maxCoeff();
    const double lse = mx + std::log((row.array() - mx).exp().sum());
    row.array() -= lse;
  }
}

// dz: gradient of the loss with respect to the raw logits at each requested row.
void backward(const Model& model, const Offsets& off, const ForwardCache& c, const Matrix& dz,
              ParamVec& grad) {
  const ModelConfig& cfg = model.config();
  const int d = cfg.d_model;
  const int H = cfg.n_heads;
  const int dh = d / H;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const double* P = model.params().data();
  double* G = grad.data();
  const int total = static_cast<int>(c.tokens.size());

  const ConstMatMap tok(P + off.tok_emb, cfg.vocab_size, d);
  MatMap dtok(G + off.tok_emb, cfg.vocab_size, d);
  dtok.noalias() += dz.transpose() * c.h_sel;
  RowMap(G + off.out_bias, cfg.vocab_size) += dz.colwise().sum();
  const Matrix dh_sel = dz * tok;
  Matrix df = Matrix::Zero(total, d);
  for (std::size_t r = 0; r < c.out_rows.size(); ++r) df.row(c.out_rows[r]) += dh_sel.row(r);

  Matrix dx = layer_norm_backward(df, c.f_hat, c.f_rstd, P + off.lnf_g, G + off.lnf_g,
                                  G + off.lnf_b);

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const LayerOffsets& lo = off.layers[l];
    const LayerCache& lc = c.layers[l];

    // Feed-forward block: x_out = x_mid + gelu(ln2(x_mid) W1 + b1) W2 + b2.
    MatMap(G + lo.w2, cfg.d_ff, d).noalias() += lc.g.transpose() * dx;
    RowMap(G + lo.b2, d) += dx.colwise().sum();
    const Matrix dg = dx * ConstMatMap(P + lo.w2, cfg.d_ff, d).transpose();
    const Matrix du = gelu_backward(lc.u, dg);
    MatMap(G + lo.w1, d, cfg.d_ff).noalias() += lc.b.transpose() * du;
    RowMap(G + lo.b1, cfg.d_ff) += du.colwise().sum();
    const Matrix db = du * ConstMatMap(P + lo.w1, d, cfg.d_ff).transpose();
    dx += layer_norm_backward(db, lc.b_hat, lc.b_rstd, P + lo.ln2_g, G + lo.ln2_g, G + lo.ln2_b);

    // Attention block: x_mid = x_in + ctx Wo.
    MatMap(G + lo.out, d, d).noalias() += lc.ctx.transpose() * dx;
    const Matrix dctx = dx * ConstMatMap(P + lo.out, d, d).transpose();
    Matrix dqkv = Matrix::Zero(total, 3 * d);
    for (std::size_t s = 0; s < c.seq_start.size(); ++s) {
      const int o = c.seq_start[s];
      const int L = c.seq_len[s];
      for (int h = 0; h < H; ++h) {
        const Matrix& p = lc.probs[s * H + h];
        const auto q = lc.qkv.block(o, h * dh, L, dh);
        const auto k = lc.qkv.block(o, d + h * dh, L, dh);
        const auto v = lc.qkv.block(o, 2 * d + h * dh, L, dh);
        const auto dc = dctx.block(o, h * dh, L, dh);
        Matrix dp = dc * v.transpose();
        dqkv.block(o, 2 * d + h * dh, L, dh).noalias() = p.transpose() * dc;
        for (int i = 0; i < L; ++i) {
          double dot = 0.0;
          for (int j = 0; j <= i; ++j) dot += p(i, j) * dp(i, j);
          for (int j = 0; j <= i; ++j) dp(i, j) = p(i, j) * (dp(i, j) - dot) * scale;
          for (int j = i + 1; j < L; ++j) dp(i, j) = 0.0;
        }
        dqkv.block(o, h * dh, L, dh).noalias() = dp * k;
        dqkv.block(o, d + h * dh, L, dh).noalias() = dp.transpose() * q;
      }
    }
    MatMap(G + lo.qkv, d, 3 * d).noalias() += lc.a.transpose() * dqkv;
    const Matrix da = dqkv * ConstMatMap(P + lo.qkv, d, 3 * d).transpose();
    dx += layer_norm_backward(da, lc.a_hat, lc.a_rstd, P + lo.ln1_g, G + lo.ln1_g, G + lo.ln1_b);
  }

  MatMap dpos(G + off.pos_emb, cfg.max_seq_len, d);
  for (std::size_t s = 0; s < c.seq_start.size(); ++s) {
    for (int i = 0; i < c.seq_len[s]; ++i) {
      const int r = c.seq_start[s] + i;
      dtok.row(c.tokens[r]) += dx.row(r);
      dpos.row(i) += dx.row(r);
    }
  }
}

PackedSeq pack_teacher_forced(const ModelConfig& cfg, const TokenSeq& x, const TokenSeq& y) {
  check_fits(cfg, x, y);
  PackedSeq s;
  s.tokens.reserve(x.size() + y.size() + 1);
  s.tokens.push_back(cfg.ids.bos);
  s.tokens.insert(s.tokens.end(), x.begin(), x.end());
  s.tokens.push_back(cfg.ids.sep);
  if (!y.empty()) s.tokens.insert(s.tokens.end(), y.begin(), y.end() - 1);
  const int first = static_cast<int>(x.size()) + 1;
  for (std::size_t i = 0; i < y.size(); ++i) s.out_positions.push_back(first + static_cast<int>(i));
  return s;
}

std::vector<ParamInfo> build_manifest(const ModelConfig& cfg) {
  std::vector<ParamInfo> m;
  std::size_t off = 0;
  auto add = [&](std::string name, std::vector<int> shape) {
    std::size_t n = 1;
    for (int s : shape) n *= static_cast<std::size_t>(s);
    m.push_back({std::move(name), std::move(shape), off, n});
    off += n;
  };
  const int d = cfg.d_model;
  add("tok_emb", {cfg.vocab_size, d});
  add("pos_emb", {cfg.max_seq_len, d});
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    add(p + "ln1.gain", {d});
    add(p + "ln1.bias", {d});
    add(p + "attn.qkv", {d, 3 * d});
    add(p + "attn.out", {d, d});
    add(p + "ln2.gain", {d});
    add(p + "ln2.bias", {d});
    add(p + "ff.w1", {d, cfg.d_ff});
    add(p + "ff.b1", {cfg.d_ff});
    add(p + "ff.w2", {cfg.d_ff, d});
    add(p + "ff.b2", {d});
  }
  add("final_ln.gain", {d});
  add("final_ln.bias", {d});
  add("out_bias", {cfg.vocab_size});
  return m;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config and handle

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  if (n_layers < 1) fail("n_layers must be >= 1");
  if (n_heads < 1) fail("n_heads must be >= 1");
  if (d_model < 4) fail("d_model must be >= 4");
  if (d_model % n_heads != 0) {
    fail("d_model " + std::to_string(d_model) + " is not a multiple of n_heads " +
         std::to_string(n_heads));
  }
  if (d_ff < 4) fail("d_ff must be >= 4");
  if (vocab_size < 4) fail("vocab_size must be >= 4");
  if (max_seq_len < 3) fail("max_seq_len must be >= 3");
  for (int id : {ids.pad, ids.bos, ids.eos, ids.sep}) {
    if (id < 0 || id >= vocab_size) fail("special token id out of range");
  }
}

json ModelConfig::to_json() const {
  return json{{"n_layers", n_layers},
              {"d_model", d_model},
              {"n_heads", n_heads},
              {"d_ff", d_ff},
              {"vocab_size", vocab_size},
              {"max_seq_len", max_seq_len},
              {"init_seed", init_seed},
              {"pad_id", ids.pad},
              {"bos_id", ids.bos},
              {"eos_id", ids.eos},
              {"sep_id", ids.sep}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  try {
    c.n_layers = field(j, "n_layers", c.n_layers);
    c.d_model = field(j, "d_model", c.d_model);
    c.n_heads = field(j, "n_heads", c.n_heads);
    c.d_ff = field(j, "d_ff", c.d_ff);
    c.vocab_size = field(j, "vocab_size", c.vocab_size);
    c.max_seq_len = field(j, "max_seq_len", c.max_seq_len);
    c.init_seed = field(j, "init_seed", c.init_seed);
    c.ids.pad = field(j, "pad_id", c.ids.pad);
    c.ids.bos = field(j, "bos_id", c.ids.bos);
    c.ids.eos = field(j, "eos_id", c.ids.eos);
    c.ids.sep = field(j, "sep_id", c.ids.sep);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return c;
}

Model::Model(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  manifest_ = build_manifest(cfg_);
  params_.assign(manifest_.back().offset + manifest_.back().size, 0.0);
}

const ParamInfo& Model::param(const std::string& name) const {
  for (const auto& p : manifest_) {
    if (p.name == name) return p;
  }
  throw Error("no parameter named " + name);
}

std::string Model::checksum() const {
  const std::string c = cfg_.to_json().dump();
  std::uint64_t h = fnv1a(c.data(), c.size());
  h = fnv1a(params_.data(), params_.size() * sizeof(double), h);
  return hex64(h);
}

Model init_model(const ModelConfig& cfg) {
  Model m(cfg);
  Rng rng(mix_seed(cfg.init_seed, 0x6d6f64656cULL));
  const double d = cfg.d_model;
  const double depth = std::sqrt(2.0 * cfg.n_layers);
  for (const auto& p : m.manifest()) {
    double sigma = 0.0;
    double constant = 0.0;
    if (p.name == "tok_emb" || p.name == "pos_emb") {
      sigma = 1.0 / std::sqrt(d);
    } else if (ends_with(p.name, ".gain")) {
      constant = 1.0;
    } else if (ends_with(p.name, "attn.qkv") || ends_with(p.name, "ff.w1")) {
      sigma = 1.0 / std::sqrt(d);
    } else if (ends_with(p.name, "attn.out")) {
      sigma = 1.0 / std::sqrt(d) / depth;
    } else if (ends_with(p.name, "ff.w2")) {
      sigma = 1.0 / std::sqrt(static_cast<double>(cfg.d_ff)) / depth;
    }
    for (std::size_t i = 0; i < p.size; ++i) {
      m.params()[p.offset + i] = sigma > 0.0 ? sigma * rng.normal() : constant;
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Inference

void check_fits(const ModelConfig& cfg, const TokenSeq& x, const TokenSeq& y) {
  const std::size_t packed = x.size() + y.size() + 2;
  if (packed > static_cast<std::size_t>(cfg.max_seq_len)) {
    throw Error("packed length " + std::to_string(packed) + " exceeds max_seq_len " +
                std::to_string(cfg.max_seq_len));
  }
}

std::vector<LogitsSeq> forward_teacher_forced_batch(const Model& model,
                                                    const std::vector<SeqRef>& batch) {
  std::vector<PackedSeq> seqs;
  seqs.reserve(batch.size());
  for (const auto& item : batch) seqs.push_back(pack_teacher_forced(model.config(), *item.x, *item.y));
  ForwardCache cache;
  forward(model, offsets_of(model), seqs, cache);
  std::vector<LogitsSeq> out;
  out.reserve(batch.size());
  Eigen::Index row = 0;
  for (const auto& item : batch) {
    const auto n = static_cast<Eigen::Index>(item.y->size());
    out.emplace_back(cache.logprobs.middleRows(row, n));
    row += n;
  }
  return out;
}

LogitsSeq forward_teacher_forced(const Model& model, const TokenSeq& x, const TokenSeq& y) {
  return forward_teacher_forced_batch(model, {SeqRef{&x, &y}}).front();
}

std::vector<DecodeResult> greedy_decode_batch(const Model& model,
                                              const std::vector<const TokenSeq*>& xs,
                                              int max_new_tokens) {
  if (max_new_tokens < 1) throw Error("greedy_decode: max_new_tokens must be >= 1");
  const ModelConfig& cfg = model.config();
  const Offsets off = offsets_of(model);
  std::vector<DecodeResult> results(xs.size());
  std::vector<int> cap(xs.size());
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    // The fed sequence is [bos] x [sep] + emitted tokens except the last.
    cap[i] = std::min(max_new_tokens, cfg.max_seq_len - static_cast<int>(xs[i]->size()) - 1);
    if (cap[i] < 1) throw Error("greedy_decode: query too long for max_seq_len");
    active.push_back(i);
  }
  // Each sequence gets its own forward pass. Packed matmuls block differently
  // with the row count, and a decode must not depend on its batch neighbours.
  ForwardCache cache;
  std::vector<PackedSeq> seqs(1);
  while (!active.empty()) {
    std::vector<std::size_t> still;
    for (std::size_t i : active) {
      PackedSeq& s = seqs[0];
      s.tokens.assign(1, cfg.ids.bos);
      s.tokens.insert(s.tokens.end(), xs[i]->begin(), xs[i]->end());
      s.tokens.push_back(cfg.ids.sep);
      s.tokens.insert(s.tokens.end(), results[i].y_hat.begin(), results[i].y_hat.end());
      s.out_positions.assign(1, static_cast<int>(s.tokens.size()) - 1);
      forward(model, off, seqs, cache);
      const int tok = argmax_lowest(cache.logprobs.row(0));
      DecodeResult& r = results[i];
      r.y_hat.push_back(tok);
      r.token_logprobs.push_back(cache.logprobs(0, tok));
      if (tok == cfg.ids.eos) {
        r.stopped_by = DecodeResult::Stop::eos;
      } else if (static_cast<int>(r.y_hat.size()) >= cap[i]) {
        r.stopped_by = DecodeResult::Stop::max_len;
      } else {
        still.push_back(i);
      }
    }
    active = std::move(still);
  }
  return results;
}

DecodeResult greedy_decode(const Model& model, const TokenSeq& x, int max_new_tokens) {
  return greedy_decode_batch(model, {&x}, max_new_tokens).front();
}

// ---------------------------------------------------------------------------
// Training objective

namespace {

struct BatchEval {
  ForwardCache cache;
  Matrix dz;
  LossGrad out;
};

void evaluate_batch(const Model& model, const Offsets& off, const std::vector<BatchItem>& batch,
                    const LossSpec& spec, const std::vector<TokenMask>* fixed_masks,
                    BatchEval& ev) {
  spec.validate();
  if (fixed_masks != nullptr && fixed_masks->size() != batch.size()) {
    throw Error("loss_and_grad: fixed masks do not match the batch");
  }
  std::vector<PackedSeq> seqs;
  seqs.reserve(batch.size());
  for (const auto& item : batch) {
    if (spec.needs_teacher() && item.teacher == nullptr) {
      throw Error("loss " + to_string(spec.kind) + " requires teacher outputs");
    }
    seqs.push_back(pack_teacher_forced(model.config(), *item.x, *item.y));
  }
  forward(model, off, seqs, ev.cache);

  LossGrad& out = ev.out;
  out = LossGrad{};
  ev.dz.setZero(ev.cache.logprobs.rows(), ev.cache.logprobs.cols());
  const MaskVariant variant = spec.mask();
  static const std::vector<int> kNoArgmax;
  double sum = 0.0;
  Eigen::Index row = 0;
  Matrix dl;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const TokenSeq& y = *batch[b].y;
    const auto n = static_cast<Eigen::Index>(y.size());
    const LogitsSeq lp = ev.cache.logprobs.middleRows(row, n);
    std::vector<int> student = argmax_rows(lp);
    TokenMask mask;
    if (fixed_masks != nullptr) {
      mask = (*fixed_masks)[b];
    } else {
      const auto& teacher_argmax = batch[b].teacher ? batch[b].teacher->argmax : kNoArgmax;
      mask = compute_alpha(y, student, teacher_argmax, variant);
    }
    const bool masked = variant != MaskVariant::none;
    if (masked) {
      for (auto a : mask) out.active_tokens += a;
    } else {
      out.active_tokens += n;
    }
    out.total_tokens += n;
    sum += example_loss_and_dlogits(lp, y, batch[b].teacher, masked ? &mask : nullptr, spec, dl);
    ev.dz.middleRows(row, n) = dl;
    out.masks.push_back(std::move(mask));
    out.student_argmax.push_back(std::move(student));
    row += n;
  }
  const double divisor = std::max<std::int64_t>(1, out.active_tokens);
  out.loss = sum / divisor;
  ev.dz /= divisor;
}

}  // namespace

LossGrad loss_and_grad(const Model& model, const std::vector<BatchItem>& batch,
                       const LossSpec& spec, const std::vector<TokenMask>* fixed_masks) {
  const Offsets off = offsets_of(model);
  BatchEval ev;
  evaluate_batch(model, off, batch, spec, fixed_masks, ev);
  ev.out.grad.assign(model.param_count(), 0.0);
  backward(model, off, ev.cache, ev.dz, ev.out.grad);
  return std::move(ev.out);
}

double batch_loss(const Model& model, const std::vector<BatchItem>& batch, const LossSpec& spec,
                  const std::vector<TokenMask>* fixed_masks) {
  BatchEval ev;
  evaluate_batch(model, offsets_of(model), batch, spec, fixed_masks, ev);
  return ev.out.loss;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_model(const Model& model, const std::filesystem::path& path) {
  json header;
  header["format_version"] = kCheckpointVersion;
  header["config"] = model.config().to_json();
  json manifest = json::array();
  for (const auto& p : model.manifest()) manifest.push_back({{"name", p.name}, {"shape", p.shape}});
  header["manifest"] = manifest;
  header["param_count"] = model.param_count();
  const std::string text = header.dump();

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out.write(kMagic, sizeof(kMagic));
    write_u64_le(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (double v : model.params()) write_u64_le(out, std::bit_cast<std::uint64_t>(v));
    if (!out) throw Error("write failed for " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Model load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = "checkpoint " + path.string() + ": ";
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw Error(where + "bad magic or truncated header");
  }
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint64_t header_len = read_u64_le(raw + 8);
  if (header_len > bytes.size() - 16) throw Error(where + "truncated header");
  json header;
  try {
    header = json::parse(bytes.substr(16, header_len));
  } catch (const json::exception& e) {
    throw Error(where + "malformed header: " + e.what());
  }
  if (header.value("format_version", -1) != kCheckpointVersion) {
    throw Error(where + "unsupported format version " + header.value("format_version", json()).dump());
  }
  Model m(ModelConfig::from_json(header.at("config")));
  const json& manifest = header.at("manifest");
  if (!manifest.is_array() || manifest.size() != m.manifest().size()) {
    throw Error(where + "manifest does not match the configured architecture");
  }
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    const auto& expect = m.manifest()[i];
    if (manifest[i].value("name", std::string()) != expect.name ||
        manifest[i].value("shape", std::vector<int>{}) != expect.shape) {
      throw Error(where + "manifest entry " + std::to_string(i) + " (" +
                  manifest[i].value("name", std::string("?")) + ") has the wrong name or shape");
    }
  }
  if (header.value("param_count", std::uint64_t{0}) != m.param_count()) {
    throw Error(where + "param_count does not match the manifest");
  }
  const std::size_t payload = m.param_count() * 8;
  if (bytes.size() - 16 - header_len != payload) {
    throw Error(where + "payload is " + std::to_string(bytes.size() - 16 - header_len) +
                " bytes, expected " + std::to_string(payload) + " (truncated or corrupt)");
  }
  const unsigned char* p = raw + 16 + header_len;
  for (std::size_t i = 0; i < m.param_count(); ++i) {
    const double v = std::bit_cast<double>(read_u64_le(p + 8 * i));
    if (!std::isfinite(v)) throw Error(where + "non-finite parameter value");
    m.params()[i] = v;
  }
  return m;
}

}  // namespace catk
