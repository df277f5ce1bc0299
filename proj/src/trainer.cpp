#include "catk/trainer.hpp"
#include "json_field.hpp"

#include "catk/rng.hpp"

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numbers>

namespace catk {

using nlohmann::json;

namespace {

constexpr char kCacheMagic[8] = {'C', 'A', 'T', 'K', 'T', 'C', 'H', '\0'};
constexpr int kCacheVersion = 1;

}  // namespace

std::string to_string(LrSchedule s) {
  return s == LrSchedule::constant ? "constant" : "cosine_decay";
}

std::string to_string(OptimizerKind o) {
  return o == OptimizerKind::sgd_momentum ? "sgd_momentum" : "adaptive_elementwise";
}

LrSchedule parse_lr_schedule(std::string_view s) {
  if (s == "constant") return LrSchedule::constant;
  if (s == "cosine_decay") return LrSchedule::cosine_decay;
  throw ConfigError("unknown lr_schedule '" + std::string(s) + "'");
}

OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "sgd_momentum") return OptimizerKind::sgd_momentum;
  if (s == "adaptive_elementwise") return OptimizerKind::adaptive_elementwise;
  throw ConfigError("unknown optimizer '" + std::string(s) + "'");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
  loss.validate();
  if (steps < 1) fail("steps must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) fail("learning_rate must be > 0");
  if (warmup_steps < 0) fail("warmup_steps must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) fail("beta2 must lie in [0, 1)");
  if (!(epsilon > 0.0)) fail("epsilon must be > 0");
  if (!(clip_norm >= 0.0)) fail("clip_norm must be >= 0");
  if (eval_every < 0) fail("eval_every must be >= 0");
}

double TrainConfig::lr_at(int step) const {
  if (step < warmup_steps) return learning_rate * (step + 1) / warmup_steps;
  if (lr_schedule == LrSchedule::constant) return learning_rate;
  const int span = std::max(1, steps - warmup_steps);
  const double t = static_cast<double>(step - warmup_steps) / span;
  return learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

json TrainConfig::to_json() const {
  return json{{"loss", to_string(loss.kind)},
              {"w", loss.w},
              {"steps", steps},
              {"batch_size", batch_size},
              {"learning_rate", learning_rate},
              {"lr_schedule", to_string(lr_schedule)},
              {"warmup_steps", warmup_steps},
              {"optimizer", to_string(optimizer)},
              {"momentum", momentum},
              {"beta2", beta2},
              {"epsilon", epsilon},
              {"clip_norm", clip_norm},
              {"seed", seed},
              {"eval_every", eval_every},
              {"checkpoint_dir", checkpoint_dir.string()}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  try {
    if (j.contains("loss")) c.loss.kind = parse_loss_kind(j.at("loss").get<std::string>());
    c.loss.w = field(j, "w", c.loss.w);
    c.steps = field(j, "steps", c.steps);
    c.batch_size = field(j, "batch_size", c.batch_size);
    c.learning_rate = field(j, "learning_rate", c.learning_rate);
    if (j.contains("lr_schedule")) c.lr_schedule = parse_lr_schedule(j.at("lr_schedule").get<std::string>());
    c.warmup_steps = field(j, "warmup_steps", c.warmup_steps);
    if (j.contains("optimizer")) c.optimizer = parse_optimizer(j.at("optimizer").get<std::string>());
    c.momentum = field(j, "momentum", c.momentum);
    c.beta2 = field(j, "beta2", c.beta2);
    c.epsilon = field(j, "epsilon", c.epsilon);
    c.clip_norm = field(j, "clip_norm", c.clip_norm);
    c.seed = field(j, "seed", c.seed);
    c.eval_every = field(j, "eval_every", c.eval_every);
    c.checkpoint_dir = field(j, "checkpoint_dir", std::string());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Teacher cache

void TeacherCache::reindex() {
  index_.clear();
  for (std::size_t i = 0; i < ids.size(); ++i) index_.emplace(ids[i], i);
}

const TeacherOutputs* TeacherCache::find(const std::string& id) const {
  const auto it = index_.find(id);
  return it == index_.end() ? nullptr : &entries[it->second];
}

std::string TeacherCache::checksum() const {
  std::uint64_t h = fnv1a(teacher_checksum.data(), teacher_checksum.size());
  h = fnv1a(corpus_checksum.data(), corpus_checksum.size(), h);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    h = fnv1a(ids[i].data(), ids[i].size() + 1, h);
    const auto& e = entries[i];
    h = fnv1a(e.argmax.data(), e.argmax.size() * sizeof(int), h);
    h = fnv1a(e.logprobs.data(), static_cast<std::size_t>(e.logprobs.size()) * sizeof(double), h);
  }
  return hex64(h);
}

TeacherCache build_teacher_cache(const Model& teacher, const std::vector<Example>& corpus) {
  const auto train_set = split_of(corpus, Split::train);
  if (train_set.empty()) throw Error("teacher cache: corpus has no train examples");
  for (const Example* e : train_set) {
    for (const TokenSeq* s : {&e->x, &e->y}) {
      for (int t : *s) {
        if (t < 0 || t >= teacher.config().vocab_size) {
          throw ConfigError("teacher cache: corpus token id " + std::to_string(t) +
                            " outside the teacher vocabulary");
        }
      }
    }
  }
  TeacherCache cache;
  cache.teacher_checksum = teacher.checksum();
  cache.corpus_checksum = corpus_checksum(corpus);
  const auto all_ids = example_ids(corpus);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (corpus[i].split == Split::train) cache.ids.push_back(all_ids[i]);
  }
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < train_set.size(); start += kChunk) {
    std::vector<SeqRef> refs;
    for (std::size_t i = start; i < std::min(train_set.size(), start + kChunk); ++i) {
      refs.push_back({&train_set[i]->x, &train_set[i]->y});
    }
    for (auto& lp : forward_teacher_forced_batch(teacher, refs)) {
      TeacherOutputs t;
      t.argmax = argmax_rows(lp);
      t.logprobs = std::move(lp);
      cache.entries.push_back(std::move(t));
    }
  }
  cache.reindex();
  return cache;
}

void save_teacher_cache(const TeacherCache& cache, const std::filesystem::path& path) {
  json header;
  header["format_version"] = kCacheVersion;
  header["teacher_checksum"] = cache.teacher_checksum;
  header["corpus_checksum"] = cache.corpus_checksum;
  header["vocab_size"] = cache.entries.empty() ? 0 : cache.entries.front().logprobs.cols();
  json rows = json::array();
  for (std::size_t i = 0; i < cache.ids.size(); ++i) {
    rows.push_back({cache.ids[i], cache.entries[i].logprobs.rows()});
  }
  header["entries"] = rows;
  const std::string text = header.dump();

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out.write(kCacheMagic, sizeof(kCacheMagic));
    write_u64_le(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& e : cache.entries) {
      for (int a : e.argmax) write_u64_le(out, static_cast<std::uint64_t>(a));
      const double* p = e.logprobs.data();
      for (Eigen::Index k = 0; k < e.logprobs.size(); ++k) {
        write_u64_le(out, std::bit_cast<std::uint64_t>(p[k]));
      }
    }
    if (!out) throw Error("write failed for " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

TeacherCache load_teacher_cache(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read teacher cache " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = "teacher cache " + path.string() + ": ";
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCacheMagic, sizeof(kCacheMagic)) != 0) {
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
  if (header.value("format_version", -1) != kCacheVersion) {
    throw Error(where + "unsupported format version");
  }
  TeacherCache cache;
  cache.teacher_checksum = header.at("teacher_checksum").get<std::string>();
  cache.corpus_checksum = header.at("corpus_checksum").get<std::string>();
  const auto V = header.at("vocab_size").get<Eigen::Index>();
  std::size_t pos = 16 + header_len;
  for (const auto& row : header.at("entries")) {
    const auto id = row.at(0).get<std::string>();
    const auto n = row.at(1).get<Eigen::Index>();
    const std::size_t need = static_cast<std::size_t>(n + n * V) * 8;
    if (bytes.size() - pos < need) throw Error(where + "payload truncated at entry " + id);
    TeacherOutputs t;
    for (Eigen::Index i = 0; i < n; ++i, pos += 8) {
      t.argmax.push_back(static_cast<int>(read_u64_le(raw + pos)));
    }
    t.logprobs.resize(n, V);
    double* p = t.logprobs.data();
    for (Eigen::Index k = 0; k < n * V; ++k, pos += 8) {
      p[k] = std::bit_cast<double>(read_u64_le(raw + pos));
    }
    cache.ids.push_back(id);
    cache.entries.push_back(std::move(t));
  }
  if (pos != bytes.size()) throw Error(where + "trailing bytes after the last entry");
  cache.reindex();
  return cache;
}

// ---------------------------------------------------------------------------
// Training

void write_train_log(const std::vector<TrainLogRow>& log, const std::filesystem::path& path,
                     bool with_wall) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "step,loss,masked_fraction,lr,wall_ms\n";
  char buf[160];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.3f\n", r.step, r.loss,
                  r.masked_fraction, r.lr, with_wall ? r.wall_ms : 0.0);
    out << buf;
  }
  if (!out) throw Error("write failed for " + path.string());
}

std::vector<const Example*> split_of(const std::vector<Example>& corpus, Split split) {
  std::vector<const Example*> out;
  for (const auto& e : corpus) {
    if (e.split == split) out.push_back(&e);
  }
  return out;
}

namespace {

class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, std::size_t n) : cfg_(cfg), m_(n, 0.0) {
    if (cfg.optimizer == OptimizerKind::adaptive_elementwise) v_.assign(n, 0.0);
  }

  void step(ParamVec& params, ParamVec& grad, double lr) {
    ++t_;
    if (cfg_.clip_norm > 0.0) {
      double sq = 0.0;
      for (double g : grad) sq += g * g;
      const double norm = std::sqrt(sq);
      if (norm > cfg_.clip_norm) {
        const double s = cfg_.clip_norm / norm;
        for (double& g : grad) g *= s;
      }
    }
    const double b1 = cfg_.momentum;
    if (cfg_.optimizer == OptimizerKind::sgd_momentum) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i] = b1 * m_[i] + grad[i];
        params[i] -= lr * m_[i];
      }
      return;
    }
    const double b2 = cfg_.beta2;
    const double c1 = 1.0 - std::pow(b1, t_);
    const double c2 = 1.0 - std::pow(b2, t_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = b1 * m_[i] + (1.0 - b1) * grad[i];
      v_[i] = b2 * v_[i] + (1.0 - b2) * grad[i] * grad[i];
      params[i] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + cfg_.epsilon);
    }
  }

 private:
  const TrainConfig& cfg_;
  std::vector<double> m_, v_;
  int t_ = 0;
};

}  // namespace

TrainResult train(Model init, const TeacherCache* cache, const std::vector<Example>& corpus,
                  const TrainConfig& cfg, const StepObserver& observer) {
  cfg.validate();
  const auto train_set = split_of(corpus, Split::train);
  if (train_set.empty()) throw Error("train: corpus has no train examples");

  std::vector<const TeacherOutputs*> teacher(train_set.size(), nullptr);
  if (cfg.loss.needs_teacher()) {
    if (cache == nullptr) {
      throw ConfigError("loss " + to_string(cfg.loss.kind) + " needs a teacher cache");
    }
    if (cache->corpus_checksum != corpus_checksum(corpus)) {
      throw Error("train: teacher cache was built for a different corpus");
    }
    const auto ids = example_ids(corpus);
    std::size_t k = 0;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      if (corpus[i].split != Split::train) continue;
      teacher[k] = cache->find(ids[i]);
      if (teacher[k] == nullptr ||
          teacher[k]->logprobs.rows() != static_cast<Eigen::Index>(corpus[i].y.size())) {
        throw Error("train: teacher cache has no usable entry for " + ids[i]);
      }
      ++k;
    }
  }

  TrainResult result{std::move(init), {}};
  Model& model = result.model;
  Optimizer opt(cfg, model.param_count());
  Rng rng(mix_seed(cfg.seed, 0x7472616e));
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = order.size();
  const bool masked = cfg.loss.mask() != MaskVariant::none;
  const auto t0 = std::chrono::steady_clock::now();

  std::vector<BatchItem> batch;
  for (int step = 0; step < cfg.steps; ++step) {
    batch.clear();
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        rng.shuffle(order);
        cursor = 0;
      }
      const std::size_t i = order[cursor++];
      batch.push_back({&train_set[i]->x, &train_set[i]->y, teacher[i]});
    }
    LossGrad lg = loss_and_grad(model, batch, cfg.loss);
    if (!std::isfinite(lg.loss)) {
      throw Error("train: non-finite loss at step " + std::to_string(step));
    }
    TrainLogRow row;
    row.step = step;
    row.loss = lg.loss;
    row.masked_fraction =
        masked && lg.total_tokens > 0
            ? 1.0 - static_cast<double>(lg.active_tokens) / static_cast<double>(lg.total_tokens)
            : 0.0;
    row.lr = cfg.lr_at(step);
    opt.step(model.params(), lg.grad, row.lr);
    row.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (observer) observer(step, batch, lg, row);
    result.log.push_back(row);

    if (cfg.eval_every > 0 && !cfg.checkpoint_dir.empty() && (step + 1) % cfg.eval_every == 0) {
      std::filesystem::create_directories(cfg.checkpoint_dir);
      char name[32];
      std::snprintf(name, sizeof(name), "step_%06d.ckpt", step + 1);
      save_model(model, cfg.checkpoint_dir / name);
    }
  }
  return result;
}

TrainResult train_baseline_large(const std::vector<Example>& corpus, const ModelConfig& model_cfg,
                                 TrainConfig cfg) {
  cfg.loss = LossSpec{LossKind::xent, 1.0};
  return train(init_model(model_cfg), nullptr, corpus, cfg);
}

std::vector<double> loss_ema(const std::vector<TrainLogRow>& log, double beta) {
  std::vector<double> out;
  out.reserve(log.size());
  double ema = 0.0;
  for (std::size_t i = 0; i < log.size(); ++i) {
    ema = i == 0 ? log[i].loss : beta * ema + (1.0 - beta) * log[i].loss;
    out.push_back(ema);
  }
  return out;
}

double eval_loss(const Model& model, const std::vector<const Example*>& examples) {
  double total = 0.0;
  std::size_t tokens = 0;
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < examples.size(); start += kChunk) {
    std::vector<SeqRef> refs;
    for (std::size_t i = start; i < std::min(examples.size(), start + kChunk); ++i) {
      refs.push_back({&examples[i]->x, &examples[i]->y});
    }
    const auto lps = forward_teacher_forced_batch(model, refs);
    for (std::size_t k = 0; k < refs.size(); ++k) {
      total += xent(lps[k], *refs[k].y);
      tokens += refs[k].y->size();
    }
  }
  return total / static_cast<double>(std::max<std::size_t>(1, tokens));
}

std::vector<DecodeResult> decode_all(const Model& model, const std::vector<const Example*>& examples,
                                     int max_new_tokens, int batch_size) {
  std::vector<DecodeResult> out;
  out.reserve(examples.size());
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    std::vector<const TokenSeq*> xs;
    for (std::size_t i = start; i < std::min(examples.size(), start + batch_size); ++i) {
      xs.push_back(&examples[i]->x);
    }
    for (auto& r : greedy_decode_batch(model, xs, max_new_tokens)) out.push_back(std::move(r));
  }
  return out;
}

}  // namespace catk
