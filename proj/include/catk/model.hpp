#pragma once

#include "catk/common.hpp"
#include "catk/losses.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace catk {

// Token ids the model uses to pack `[bos] x [sep] y`.
struct SpecialIds {
  int pad = 0;
  int bos = 1;
  int eos = 2;
  int sep = 3;
  bool operator==(const SpecialIds&) const = default;
};

struct ModelConfig {
  int n_layers = 2;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 256;
  int vocab_size = 68;
  int max_seq_len = 32;
  std::uint64_t init_seed = 0;
  SpecialIds ids;

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

struct ParamInfo {
  std::string name;
  std::vector<int> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
};

// Pre-norm decoder-only transformer: learned positions, causal attention,
// GELU feed-forward blocks, output projection tied to the input embedding.
// All parameters live in one flat float64 buffer described by the manifest.
class Model {
 public:
  explicit Model(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  const std::vector<ParamInfo>& manifest() const { return manifest_; }
  std::size_t param_count() const { return params_.size(); }
  ParamVec& params() { return params_; }
  const ParamVec& params() const { return params_; }
  const ParamInfo& param(const std::string& name) const;
  std::string checksum() const;

 private:
  ModelConfig cfg_;
  std::vector<ParamInfo> manifest_;
  ParamVec params_;
};

// Seeded scaled-normal initialization; bitwise reproducible for equal configs.
Model init_model(const ModelConfig& cfg);

struct DecodeResult {
  enum class Stop { eos, max_len };
  TokenSeq y_hat;
  std::vector<double> token_logprobs;
  Stop stopped_by = Stop::max_len;
};

// Throws Error when `[bos] x [sep] y` would not fit in max_seq_len.
void check_fits(const ModelConfig& cfg, const TokenSeq& x, const TokenSeq& y);

// Row i is log p(. | x, y_<i) for i = 1..N.
LogitsSeq forward_teacher_forced(const Model& model, const TokenSeq& x, const TokenSeq& y);

struct SeqRef {
  const TokenSeq* x = nullptr;
  const TokenSeq* y = nullptr;
};
std::vector<LogitsSeq> forward_teacher_forced_batch(const Model& model,
                                                    const std::vector<SeqRef>& batch);

// Argmax decoding (lowest id on ties) until eos or `max_new_tokens`, also
// capped by the positional table.
DecodeResult greedy_decode(const Model& model, const TokenSeq& x, int max_new_tokens);
std::vector<DecodeResult> greedy_decode_batch(const Model& model,
                                              const std::vector<const TokenSeq*>& xs,
                                              int max_new_tokens);

struct BatchItem {
  const TokenSeq* x = nullptr;
  const TokenSeq* y = nullptr;
  const TeacherOutputs* teacher = nullptr;
};

struct LossGrad {
  double loss = 0.0;
  ParamVec grad;  // same layout as Model::params()
  std::int64_t active_tokens = 0;
  std::int64_t total_tokens = 0;
  std::vector<TokenMask> masks;
  std::vector<std::vector<int>> student_argmax;
};

// Batch loss = (sum of per-example losses) / max(1, unmasked response tokens).
// Student argmaxes for the mask come from this same forward pass unless
// `fixed_masks` is given, in which case those masks are used verbatim.
LossGrad loss_and_grad(const Model& model, const std::vector<BatchItem>& batch,
                       const LossSpec& spec, const std::vector<TokenMask>* fixed_masks = nullptr);
// Loss value only; same semantics as loss_and_grad.
double batch_loss(const Model& model, const std::vector<BatchItem>& batch, const LossSpec& spec,
                  const std::vector<TokenMask>* fixed_masks = nullptr);

inline constexpr int kCheckpointVersion = 1;

// Layout: 8-byte magic, u64 header length, header JSON (version, config,
// manifest), then raw little-endian float64 parameters.
void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

}  // namespace catk
