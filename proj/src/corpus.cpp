#include "catk/corpus.hpp"
#include "json_field.hpp"

#include "catk/rng.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

namespace catk {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr int kLowerCount = 26;
constexpr int kDigitCount = 10;
constexpr int kParityAlphabet = 4;

int upper(const Vocab& v, int i) { return v.id(std::string(1, static_cast<char>('A' + i))); }
int lower(const Vocab& v, int i) { return v.id(std::string(1, static_cast<char>('a' + i))); }
int digit(const Vocab& v, int i) { return v.id(std::string(1, static_cast<char>('0' + i))); }

int lower_index(const Vocab& v, int id) {
  const std::string& t = v.token(id);
  if (t.size() != 1 || t[0] < 'a' || t[0] > 'z') throw Error("token '" + t + "' is not a-z");
  return t[0] - 'a';
}

int digit_index(const Vocab& v, int id) {
  const std::string& t = v.token(id);
  if (t.size() != 1 || t[0] < '0' || t[0] > '9') throw Error("token '" + t + "' is not 0-9");
  return t[0] - '0';
}

TokenSeq random_tokens(Rng& rng, int n, int alphabet, int (*make)(const Vocab&, int),
                       const Vocab& v) {
  TokenSeq out(n);
  for (auto& t : out) t = make(v, rng.below(alphabet));
  return out;
}

// Draws one input body for the task.
TokenSeq draw_body(const TaskSpec& s, const Vocab& v, Rng& rng) {
  switch (s.rule) {
    case TaskRule::first_token_bucket:
    case TaskRule::copy:
    case TaskRule::reverse:
      return random_tokens(rng, rng.between(s.min_len, s.max_len), kLowerCount, lower, v);
    case TaskRule::majority_vote: {
      TokenSeq out(rng.between(s.min_len, s.max_len));
      for (auto& t : out) t = upper(v, rng.below(s.n_classes));
      return out;
    }
    case TaskRule::marker_parity:
      return random_tokens(rng, rng.between(s.min_len, s.max_len), kParityAlphabet, lower, v);
    case TaskRule::modular_add: {
      const int k = rng.between(s.min_response, s.max_response);
      TokenSeq out = random_tokens(rng, k, kDigitCount, digit, v);
      out.push_back(v.id("+"));
      const TokenSeq rhs = random_tokens(rng, k, kDigitCount, digit, v);
      out.insert(out.end(), rhs.begin(), rhs.end());
      return out;
    }
  }
  throw Error("unreachable task rule");
}

// A uniformly random response that is well-formed for the task family and has
// the same length as `like`.
TokenSeq random_response(const TaskSpec& s, const Vocab& v, Rng& rng, std::size_t len) {
  switch (s.rule) {
    case TaskRule::first_token_bucket:
    case TaskRule::majority_vote:
    case TaskRule::marker_parity:
      return {upper(v, rng.below(s.n_classes))};
    case TaskRule::copy:
    case TaskRule::reverse:
      return random_tokens(rng, static_cast<int>(len), kLowerCount, lower, v);
    case TaskRule::modular_add:
      return random_tokens(rng, static_cast<int>(len), kDigitCount, digit, v);
  }
  throw Error("unreachable task rule");
}

template <typename E>
E parse_enum(std::string_view s, std::initializer_list<std::pair<const char*, E>> table,
             const char* what) {
  for (const auto& [name, value] : table) {
    if (s == name) return value;
  }
  throw ConfigError("unknown " + std::string(what) + " '" + std::string(s) + "'");
}

}  // namespace

// ---------------------------------------------------------------------------
// Vocab

Vocab::Vocab(std::vector<std::string> tokens, int pad, int bos, int eos, int sep)
    : tokens_(std::move(tokens)), pad_(pad), bos_(bos), eos_(eos), sep_(sep) {
  const int n = size();
  for (int id : {pad_, bos_, eos_, sep_}) {
    if (id < 0 || id >= n) throw ConfigError("special token id " + std::to_string(id) + " out of range");
  }
  if (pad_ == bos_ || pad_ == eos_ || pad_ == sep_ || bos_ == eos_ || bos_ == sep_ || eos_ == sep_) {
    throw ConfigError("special token ids must be distinct");
  }
  for (int i = 0; i < n; ++i) {
    if (!index_.emplace(tokens_[i], i).second) {
      throw ConfigError("duplicate vocabulary token '" + tokens_[i] + "'");
    }
  }
}

Vocab Vocab::standard() {
  std::vector<std::string> t = {"<pad>", "<bos>", "<eos>", "<sep>"};
  for (char c = 'A'; c <= 'Z'; ++c) t.emplace_back(1, c);
  for (char c = 'a'; c <= 'z'; ++c) t.emplace_back(1, c);
  for (char c = '0'; c <= '9'; ++c) t.emplace_back(1, c);
  t.emplace_back("+");
  t.emplace_back("=");
  return Vocab(std::move(t), 0, 1, 2, 3);
}

int Vocab::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) throw ConfigError("unknown token '" + std::string(token) + "'");
  return it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size()) throw Error("unknown token id " + std::to_string(id));
  return tokens_[id];
}

json Vocab::to_json() const {
  return json{{"tokens", tokens_}, {"pad", pad_}, {"bos", bos_}, {"eos", eos_}, {"sep", sep_}};
}

Vocab Vocab::from_json(const json& j) {
  try {
    return Vocab(j.at("tokens").get<std::vector<std::string>>(), j.at("pad").get<int>(),
                 j.at("bos").get<int>(), j.at("eos").get<int>(), j.at("sep").get<int>());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("vocab: ") + e.what());
  }
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  ordered_json j;
  j["tokens"] = tokens_;
  j["pad"] = pad_;
  j["bos"] = bos_;
  j["eos"] = eos_;
  j["sep"] = sep_;
  out << j.dump() << "\n";
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read vocab " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return from_json(j);
}

// ---------------------------------------------------------------------------
// Enums

std::string to_string(Tier t) {
  switch (t) {
    case Tier::easy: return "easy";
    case Tier::medium: return "medium";
    case Tier::hard: return "hard";
  }
  return "?";
}

std::string to_string(Split s) { return s == Split::train ? "train" : "eval"; }

std::string to_string(Family f) {
  return f == Family::classification ? "classification" : "generation";
}

std::string to_string(TaskRule r) {
  switch (r) {
    case TaskRule::first_token_bucket: return "first_token_bucket";
    case TaskRule::majority_vote: return "majority_vote";
    case TaskRule::marker_parity: return "marker_parity";
    case TaskRule::copy: return "copy";
    case TaskRule::reverse: return "reverse";
    case TaskRule::modular_add: return "modular_add";
  }
  return "?";
}

Tier parse_tier(std::string_view s) {
  return parse_enum<Tier>(s, {{"easy", Tier::easy}, {"medium", Tier::medium}, {"hard", Tier::hard}},
                          "tier");
}

Split parse_split(std::string_view s) {
  return parse_enum<Split>(s, {{"train", Split::train}, {"eval", Split::eval}}, "split");
}

TaskRule parse_rule(std::string_view s) {
  return parse_enum<TaskRule>(s,
                              {{"first_token_bucket", TaskRule::first_token_bucket},
                               {"majority_vote", TaskRule::majority_vote},
                               {"marker_parity", TaskRule::marker_parity},
                               {"copy", TaskRule::copy},
                               {"reverse", TaskRule::reverse},
                               {"modular_add", TaskRule::modular_add}},
                              "task rule");
}

Family family_of(TaskRule r) {
  switch (r) {
    case TaskRule::first_token_bucket:
    case TaskRule::majority_vote:
    case TaskRule::marker_parity:
      return Family::classification;
    default:
      return Family::generation;
  }
}

// ---------------------------------------------------------------------------
// TaskSpec

void TaskSpec::validate(const Vocab& vocab) const {
  const std::string where = "task '" + task_id + "': ";
  if (task_id.empty()) throw ConfigError("task_id must be non-empty");
  const int tag_id = vocab.id(tag);
  if (vocab.is_special(tag_id)) throw ConfigError(where + "tag must be a content token");
  if (min_len < 1 || max_len < min_len) {
    throw ConfigError(where + "input length range [" + std::to_string(min_len) + ", " +
                      std::to_string(max_len) + "] is invalid");
  }
  if (!(noise_rate >= 0.0 && noise_rate <= 1.0)) {
    throw ConfigError(where + "noise_rate must lie in [0, 1]");
  }
  switch (rule) {
    case TaskRule::first_token_bucket:
    case TaskRule::majority_vote:
    case TaskRule::marker_parity:
      if (n_classes < 2 || n_classes > 26) throw ConfigError(where + "n_classes must be in [2, 26]");
      break;
    default:
      break;
  }
  if (rule == TaskRule::marker_parity) {
    if (n_classes != 2) throw ConfigError(where + "marker_parity has exactly 2 classes");
    if (window < 1) throw ConfigError(where + "parity window must be >= 1");
    if (window > min_len) {
      throw ConfigError(where + "parity window " + std::to_string(window) +
                        " is longer than the minimum input length " + std::to_string(min_len));
    }
  }
  if (rule == TaskRule::copy || rule == TaskRule::reverse) {
    if (min_response != min_len || max_response != max_len) {
      throw ConfigError(where + "response length range must equal the input length range for " +
                        to_string(rule));
    }
  }
  if (rule == TaskRule::modular_add) {
    if (min_response < 1 || max_response < min_response) {
      throw ConfigError(where + "response length range is invalid");
    }
    if (min_len != 2 * min_response + 1 || max_len != 2 * max_response + 1) {
      throw ConfigError(where + "modular_add needs input lengths [2k+1] for k in the response range");
    }
  }
}

json TaskSpec::to_json() const {
  return json{{"task_id", task_id},   {"rule", to_string(rule)}, {"tier", to_string(tier)},
              {"tag", tag},           {"min_len", min_len},      {"max_len", max_len},
              {"n_classes", n_classes}, {"min_response", min_response},
              {"max_response", max_response}, {"window", window}, {"noise_rate", noise_rate},
              {"seed", seed}};
}

TaskSpec TaskSpec::from_json(const json& j) {
  TaskSpec s;
  try {
    s.task_id = j.at("task_id").get<std::string>();
    s.rule = parse_rule(j.at("rule").get<std::string>());
    s.tier = parse_tier(field(j, "tier", std::string("easy")));
    s.tag = j.at("tag").get<std::string>();
    s.min_len = j.at("min_len").get<int>();
    s.max_len = j.at("max_len").get<int>();
    s.n_classes = field(j, "n_classes", 2);
    s.min_response = field(j, "min_response", s.family() == Family::classification ? 1 : s.min_len);
    s.max_response = field(j, "max_response", s.family() == Family::classification ? 1 : s.max_len);
    s.window = field(j, "window", 0);
    s.noise_rate = field(j, "noise_rate", 0.0);
    s.seed = field(j, "seed", std::uint64_t{0});
  } catch (const json::exception& e) {
    throw ConfigError("task spec: " + std::string(e.what()));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Rules

TokenSeq response_content(const TokenSeq& y, int eos) {
  if (!y.empty() && y.back() == eos) return TokenSeq(y.begin(), y.end() - 1);
  return y;
}

TokenSeq task_body(const TokenSeq& x) {
  if (x.empty()) return {};
  return TokenSeq(x.begin() + 1, x.end());
}

TokenSeq apply_rule(const TaskSpec& s, const Vocab& v, const TokenSeq& body) {
  switch (s.rule) {
    case TaskRule::first_token_bucket: {
      if (body.empty()) throw Error("first_token_bucket needs a non-empty body");
      return {upper(v, lower_index(v, body[0]) * s.n_classes / kLowerCount)};
    }
    case TaskRule::majority_vote: {
      std::vector<int> counts(s.n_classes, 0);
      for (int t : body) {
        const std::string& tok = v.token(t);
        const int c = tok[0] - 'A';
        if (tok.size() != 1 || c < 0 || c >= s.n_classes) throw Error("majority_vote: bad token " + tok);
        ++counts[c];
      }
      return {upper(v, argmax_lowest(counts))};
    }
    case TaskRule::marker_parity: {
      const int marker = lower(v, 0);
      const int w = std::min<int>(s.window, static_cast<int>(body.size()));
      const auto n = std::count(body.begin(), body.begin() + w, marker);
      return {upper(v, n % 2 == 0 ? 0 : 1)};
    }
    case TaskRule::copy:
      return body;
    case TaskRule::reverse:
      return TokenSeq(body.rbegin(), body.rend());
    case TaskRule::modular_add: {
      const auto plus = std::find(body.begin(), body.end(), v.id("+"));
      const auto k = plus - body.begin();
      if (plus == body.end() || static_cast<std::size_t>(2 * k + 1) != body.size()) {
        throw Error("modular_add: malformed body");
      }
      TokenSeq out(k);
      for (std::ptrdiff_t i = 0; i < k; ++i) {
        out[i] = digit(v, (digit_index(v, body[i]) + digit_index(v, body[k + 1 + i])) % kDigitCount);
      }
      return out;
    }
  }
  throw Error("unreachable task rule");
}

std::vector<Example> generate_corpus(const std::vector<TaskSpec>& specs, const SplitSizes& sizes,
                                     const Vocab& vocab) {
  if (specs.empty()) throw ConfigError("generate_corpus: no task specs");
  if (sizes.train < 0 || sizes.eval < 0) throw ConfigError("generate_corpus: negative split size");
  for (const auto& s : specs) s.validate(vocab);
  std::vector<Example> out;
  out.reserve(specs.size() * static_cast<std::size_t>(sizes.train + sizes.eval));
  const int tag_eos = vocab.eos();
  for (const auto& s : specs) {
    const int tag = vocab.id(s.tag);
    for (Split split : {Split::train, Split::eval}) {
      Rng rng(mix_seed(s.seed, split == Split::train ? 0 : 1));
      const int n = split == Split::train ? sizes.train : sizes.eval;
      for (int i = 0; i < n; ++i) {
        Example e;
        e.task_id = s.task_id;
        e.tier = s.tier;
        e.split = split;
        const TokenSeq body = draw_body(s, vocab, rng);
        e.x.reserve(body.size() + 1);
        e.x.push_back(tag);
        e.x.insert(e.x.end(), body.begin(), body.end());
        e.y = apply_rule(s, vocab, body);
        e.y.push_back(tag_eos);
        out.push_back(std::move(e));
      }
    }
  }
  return out;
}

std::uint64_t noise_selection_seed(std::uint64_t seed) { return mix_seed(seed, 1); }

std::vector<Example> inject_label_noise(std::vector<Example> examples,
                                        const std::vector<TaskSpec>& specs, const Vocab& vocab,
                                        std::uint64_t seed) {
  std::map<std::string, const TaskSpec*> by_id;
  for (const auto& s : specs) by_id[s.task_id] = &s;
  Rng select(noise_selection_seed(seed));
  Rng draw(mix_seed(seed, 2));
  for (auto& e : examples) {
    if (e.split != Split::train) continue;
    auto it = by_id.find(e.task_id);
    if (it == by_id.end()) throw ConfigError("inject_label_noise: no spec for task " + e.task_id);
    const TaskSpec& s = *it->second;
    if (!(s.noise_rate >= 0.0 && s.noise_rate <= 1.0)) {
      throw ConfigError("noise rate must lie in [0, 1]");
    }
    if (select.uniform() < s.noise_rate) {
      TokenSeq content = random_response(s, vocab, draw, e.y.size() - 1);
      content.push_back(vocab.eos());
      e.y = std::move(content);
      e.noisy = true;
    }
  }
  return examples;
}

std::vector<Example> inject_label_noise(std::vector<Example> examples,
                                        const std::vector<TaskSpec>& specs, const Vocab& vocab,
                                        double rho, std::uint64_t seed) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("noise rate must lie in [0, 1]");
  std::vector<TaskSpec> uniform = specs;
  for (auto& s : uniform) s.noise_rate = rho;
  return inject_label_noise(std::move(examples), uniform, vocab, seed);
}

// ---------------------------------------------------------------------------
// Serialization

void validate_example(const Example& e, const Vocab& v, const std::string& where) {
  auto fail = [&](const std::string& field, const std::string& msg) {
    throw Error(where + ": field '" + field + "': " + msg);
  };
  if (e.task_id.empty()) fail("task_id", "empty");
  if (e.x.empty()) fail("x", "empty query");
  for (int t : e.x) {
    if (t < 0 || t >= v.size()) fail("x", "unknown token id " + std::to_string(t));
    if (t == v.eos() || t == v.pad()) fail("x", "query contains eos/pad");
  }
  if (e.y.empty() || e.y.back() != v.eos()) fail("y", "response must end with eos");
  for (std::size_t i = 0; i < e.y.size(); ++i) {
    const int t = e.y[i];
    if (t < 0 || t >= v.size()) fail("y", "unknown token id " + std::to_string(t));
    if (t == v.pad()) fail("y", "response contains pad");
    if (t == v.eos() && i + 1 != e.y.size()) fail("y", "eos before the end of the response");
  }
  if (e.noisy && e.split != Split::train) fail("noisy", "eval examples cannot be noisy");
}

namespace {

ordered_json example_to_json(const Example& e) {
  ordered_json j;
  j["task_id"] = e.task_id;
  j["x"] = e.x;
  j["y"] = e.y;
  j["tier"] = to_string(e.tier);
  j["noisy"] = e.noisy;
  j["split"] = to_string(e.split);
  return j;
}

TokenSeq tokens_from_json(const json& arr, const Vocab& v, const std::string& where,
                          const char* field) {
  if (!arr.is_array()) throw Error(where + ": field '" + field + "': expected an array");
  TokenSeq out;
  out.reserve(arr.size());
  for (const auto& t : arr) {
    if (t.is_number_integer()) {
      const int id = t.get<int>();
      if (id < 0 || id >= v.size()) {
        throw Error(where + ": field '" + field + "': unknown token id " + std::to_string(id));
      }
      out.push_back(id);
    } else if (t.is_string()) {
      try {
        out.push_back(v.id(t.get<std::string>()));
      } catch (const ConfigError& e) {
        throw Error(where + ": field '" + field + "': " + e.what());
      }
    } else {
      throw Error(where + ": field '" + field + "': tokens must be integers or strings");
    }
  }
  return out;
}

}  // namespace

void save_corpus(const std::vector<Example>& examples, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& e : examples) out << example_to_json(e).dump() << "\n";
  if (!out) throw Error("write failed for " + path.string());
}

std::vector<Example> load_corpus(const std::filesystem::path& path, const Vocab& vocab) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read corpus " + path.string());
  std::vector<Example> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = path.filename().string() + " line " + std::to_string(lineno);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw Error(where + ": malformed JSON: " + e.what());
    }
    if (!j.is_object()) throw Error(where + ": expected a JSON object");
    auto field = [&](const char* name) -> const json& {
      auto it = j.find(name);
      if (it == j.end()) throw Error(where + ": field '" + std::string(name) + "': missing");
      return *it;
    };
    Example e;
    try {
      e.task_id = field("task_id").get<std::string>();
    } catch (const json::type_error&) {
      throw Error(where + ": field 'task_id': expected a string");
    }
    e.x = tokens_from_json(field("x"), vocab, where, "x");
    e.y = tokens_from_json(field("y"), vocab, where, "y");
    const json& tier = field("tier");
    const json& split = field("split");
    const json& noisy = field("noisy");
    if (!tier.is_string()) throw Error(where + ": field 'tier': expected a string");
    if (!split.is_string()) throw Error(where + ": field 'split': expected a string");
    if (!noisy.is_boolean()) throw Error(where + ": field 'noisy': expected a boolean");
    try {
      e.tier = parse_tier(tier.get<std::string>());
    } catch (const ConfigError& err) {
      throw Error(where + ": field 'tier': " + err.what());
    }
    try {
      e.split = parse_split(split.get<std::string>());
    } catch (const ConfigError& err) {
      throw Error(where + ": field 'split': " + err.what());
    }
    e.noisy = noisy.get<bool>();
    validate_example(e, vocab, where);
    out.push_back(std::move(e));
  }
  return out;
}

std::string corpus_checksum(const std::vector<Example>& examples) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& e : examples) {
    const std::string s = example_to_json(e).dump();
    h = fnv1a(s.data(), s.size(), h);
  }
  return hex64(h);
}

std::vector<std::string> example_ids(const std::vector<Example>& examples) {
  std::map<std::pair<std::string, Split>, int> counters;
  std::vector<std::string> ids;
  ids.reserve(examples.size());
  for (const auto& e : examples) {
    const int k = counters[{e.task_id, e.split}]++;
    ids.push_back(e.task_id + "/" + to_string(e.split) + "/" + std::to_string(k));
  }
  return ids;
}

std::vector<TaskSpec> default_task_specs(std::uint64_t seed, double noise_rate) {
  std::vector<TaskSpec> specs;
  auto add = [&](TaskSpec s) {
    s.noise_rate = noise_rate;
    s.seed = mix_seed(seed, specs.size() + 100);
    specs.push_back(std::move(s));
  };
  TaskSpec bucket;
  bucket.task_id = "bucket";
  bucket.rule = TaskRule::first_token_bucket;
  bucket.tier = Tier::easy;
  bucket.tag = "Z";
  bucket.min_len = 3;
  bucket.max_len = 8;
  bucket.n_classes = 4;
  add(bucket);

  TaskSpec majority;
  majority.task_id = "majority";
  majority.rule = TaskRule::majority_vote;
  majority.tier = Tier::medium;
  majority.tag = "Y";
  majority.min_len = 5;
  majority.max_len = 9;
  majority.n_classes = 3;
  add(majority);

  TaskSpec parity;
  parity.task_id = "parity";
  parity.rule = TaskRule::marker_parity;
  parity.tier = Tier::hard;
  parity.tag = "X";
  parity.min_len = 7;
  parity.max_len = 8;
  parity.window = 6;
  parity.n_classes = 2;
  add(parity);

  TaskSpec copy;
  copy.task_id = "copy";
  copy.rule = TaskRule::copy;
  copy.tier = Tier::easy;
  copy.tag = "W";
  copy.min_len = copy.min_response = 2;
  copy.max_len = copy.max_response = 5;
  add(copy);

  TaskSpec rev;
  rev.task_id = "reverse";
  rev.rule = TaskRule::reverse;
  rev.tier = Tier::medium;
  rev.tag = "V";
  rev.min_len = rev.min_response = 2;
  rev.max_len = rev.max_response = 5;
  add(rev);

  TaskSpec add_task;
  add_task.task_id = "modadd";
  add_task.rule = TaskRule::modular_add;
  add_task.tier = Tier::hard;
  add_task.tag = "U";
  add_task.min_response = 2;
  add_task.max_response = 3;
  add_task.min_len = 5;
  add_task.max_len = 7;
  add(add_task);
  return specs;
}

}  // namespace catk
