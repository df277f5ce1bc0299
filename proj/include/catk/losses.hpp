#pragma once

#include "catk/common.hpp"

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace catk {

enum class LossKind { xent, dist, cat_xent, cat_dist, cat_xent_l, cat_xent_s, cat_dist_l, cat_dist_s };

// Which models' argmaxes admit a target token into the loss.
enum class MaskVariant { none, both, large_only, small_only };

std::string to_string(LossKind k);
LossKind parse_loss_kind(std::string_view s);
const std::vector<LossKind>& all_loss_kinds();

struct LossSpec {
  LossKind kind = LossKind::xent;
  double w = 0.5;  // weight on the one-hot term; the teacher term gets 1 - w

  // 1 for the xent family regardless of `w`.
  double effective_w() const;
  MaskVariant mask() const;
  bool uses_teacher_distribution() const { return effective_w() < 1.0; }
  bool uses_teacher_argmax() const {
    return mask() == MaskVariant::both || mask() == MaskVariant::large_only;
  }
  bool needs_teacher() const { return uses_teacher_distribution() || uses_teacher_argmax(); }
  void validate() const;
};

// Teacher-forced outputs of the frozen large model at each response position.
struct TeacherOutputs {
  std::vector<int> argmax;
  LogitsSeq logprobs;
};

using TokenMask = std::vector<std::uint8_t>;

// Row-wise argmax with lowest-id tie breaking.
std::vector<int> argmax_rows(const LogitsSeq& logprobs);

// -sum_i log p(y_i | x, y_<i).
double xent(const LogitsSeq& logprobs, const TokenSeq& y);

// -sum_i [ w log p(y_i) + (1 - w) sum_v p_teach(v) log p(v) ].
double dist(const LogitsSeq& logprobs, const TokenSeq& y, const TeacherOutputs& teacher, double w);

// alpha_i = 1[y_i == small argmax or y_i == large argmax] for `both`; the
// one-sided variants keep only one of the two tests.
TokenMask compute_alpha(const TokenSeq& y, const std::vector<int>& student_argmax,
                        const std::vector<int>& teacher_argmax, MaskVariant variant);

// The dist summand at each position, multiplied by alpha_i.
double cat_loss(const LogitsSeq& logprobs, const TokenSeq& y, const TeacherOutputs& teacher,
                double w, const TokenMask& mask);

// Per-example loss under `spec`, with its gradient with respect to the raw
// logits written to `dlogits` (same shape as `logprobs`). `teacher` may be
// null when the spec does not need it; `mask` may be null for unmasked kinds.
double example_loss_and_dlogits(const LogitsSeq& logprobs, const TokenSeq& y,
                                const TeacherOutputs* teacher, const TokenMask* mask,
                                const LossSpec& spec, Matrix& dlogits);

}  // namespace catk
