#pragma once

#include "catk/common.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace catk {

// Closed token vocabulary with four special tokens.
class Vocab {
 public:
  Vocab(std::vector<std::string> tokens, int pad, int bos, int eos, int sep);

  // 4 specials followed by 64 content tokens: A-Z, a-z, 0-9, '+', '='.
  static Vocab standard();

  int size() const { return static_cast<int>(tokens_.size()); }
  int pad() const { return pad_; }
  int bos() const { return bos_; }
  int eos() const { return eos_; }
  int sep() const { return sep_; }
  bool is_special(int id) const { return id == pad_ || id == bos_ || id == eos_ || id == sep_; }

  // Throws ConfigError naming the token when it is not in the vocabulary.
  int id(std::string_view token) const;
  const std::string& token(int id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  nlohmann::json to_json() const;
  static Vocab from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

  bool operator==(const Vocab& o) const {
    return tokens_ == o.tokens_ && pad_ == o.pad_ && bos_ == o.bos_ && eos_ == o.eos_ &&
           sep_ == o.sep_;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  int pad_, bos_, eos_, sep_;
};

enum class Tier { easy, medium, hard };
enum class Split { train, eval };
enum class Family { classification, generation };
enum class TaskRule { first_token_bucket, majority_vote, marker_parity, copy, reverse, modular_add };

std::string to_string(Tier t);
std::string to_string(Split s);
std::string to_string(Family f);
std::string to_string(TaskRule r);
Tier parse_tier(std::string_view s);
Split parse_split(std::string_view s);
TaskRule parse_rule(std::string_view s);
Family family_of(TaskRule r);

// `tier` and `noisy` are analysis metadata only; training and inference code
// never reads them.
struct Example {
  std::string task_id;
  TokenSeq x;
  TokenSeq y;
  Tier tier = Tier::easy;
  bool noisy = false;
  Split split = Split::train;

  bool operator==(const Example&) const = default;
};

// One synthetic task. Inputs are `[tag] body`; the rule reads only the body.
//
// Body alphabets and outputs per rule:
//   first_token_bucket  body over a-z, label = bucket of body[0] among n_classes
//   majority_vote       body over the n_classes labels, label = most frequent
//                       (ties to the lowest id)
//   marker_parity       body over {a,b,c,d}; label A if the count of 'a' in the
//                       first `window` body tokens is even, else B
//   copy / reverse      body over a-z, response = body / reversed body
//   modular_add         body = d_1..d_k '+' e_1..e_k over 0-9,
//                       response_i = (d_i + e_i) mod 10
// Class labels are the first n_classes uppercase letters.
struct TaskSpec {
  std::string task_id;
  TaskRule rule = TaskRule::copy;
  Tier tier = Tier::easy;
  std::string tag;
  int min_len = 1;  // body length range
  int max_len = 1;
  int n_classes = 2;
  int min_response = 1;  // content tokens, generation only
  int max_response = 1;
  int window = 0;  // marker_parity only
  double noise_rate = 0.0;
  std::uint64_t seed = 0;

  Family family() const { return family_of(rule); }
  // Throws ConfigError when the length ranges cannot encode the rule.
  void validate(const Vocab& vocab) const;

  nlohmann::json to_json() const;
  static TaskSpec from_json(const nlohmann::json& j);
};

struct SplitSizes {
  int train = 0;
  int eval = 0;
};

// Content tokens of a response, i.e. y without its trailing eos.
TokenSeq response_content(const TokenSeq& y, int eos);

// The task rule applied to an input body; returns content tokens (no eos).
TokenSeq apply_rule(const TaskSpec& spec, const Vocab& vocab, const TokenSeq& body);

// x with the leading task tag removed.
TokenSeq task_body(const TokenSeq& x);

// Ordered by spec, then train before eval. Pure function of the specs' seeds.
std::vector<Example> generate_corpus(const std::vector<TaskSpec>& specs, const SplitSizes& sizes,
                                     const Vocab& vocab);

// Each train example is selected independently with its task's noise_rate
// using one uniform draw from a selection stream (seed, stream 1) in corpus
// order; replacement responses come from a separate stream (seed, stream 2).
std::vector<Example> inject_label_noise(std::vector<Example> examples,
                                        const std::vector<TaskSpec>& specs, const Vocab& vocab,
                                        std::uint64_t seed);
// Same with a single rate for every task.
std::vector<Example> inject_label_noise(std::vector<Example> examples,
                                        const std::vector<TaskSpec>& specs, const Vocab& vocab,
                                        double rho, std::uint64_t seed);

// Stream used for noise selection; exposed so draws can be replayed.
std::uint64_t noise_selection_seed(std::uint64_t seed);

// Checks the Example invariants; throws Error with `where` prefixed.
void validate_example(const Example& e, const Vocab& vocab, const std::string& where);

void save_corpus(const std::vector<Example>& examples, const std::filesystem::path& path);
// Token ids may be given as integers or as token strings.
std::vector<Example> load_corpus(const std::filesystem::path& path, const Vocab& vocab);

std::string corpus_checksum(const std::vector<Example>& examples);

// Stable per-example identifier: "<task_id>/<split>/<index within task split>".
std::vector<std::string> example_ids(const std::vector<Example>& examples);

// Default six-task mixture (3 classification, 3 generation).
std::vector<TaskSpec> default_task_specs(std::uint64_t seed, double noise_rate);

}  // namespace catk
