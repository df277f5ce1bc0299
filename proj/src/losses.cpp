#include "catk/losses.hpp"

#include <cmath>

namespace catk {

std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::xent: return "xent";
    case LossKind::dist: return "dist";
    case LossKind::cat_xent: return "cat_xent";
    case LossKind::cat_dist: return "cat_dist";
    case LossKind::cat_xent_l: return "cat_xent_l";
    case LossKind::cat_xent_s: return "cat_xent_s";
    case LossKind::cat_dist_l: return "cat_dist_l";
    case LossKind::cat_dist_s: return "cat_dist_s";
  }
  return "?";
}

const std::vector<LossKind>& all_loss_kinds() {
  static const std::vector<LossKind> kinds = {
      LossKind::xent,       LossKind::dist,       LossKind::cat_xent,   LossKind::cat_dist,
      LossKind::cat_xent_l, LossKind::cat_xent_s, LossKind::cat_dist_l, LossKind::cat_dist_s};
  return kinds;
}

LossKind parse_loss_kind(std::string_view s) {
  for (LossKind k : all_loss_kinds()) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown loss kind '" + std::string(s) + "'");
}

double LossSpec::effective_w() const {
  switch (kind) {
    case LossKind::xent:
    case LossKind::cat_xent:
    case LossKind::cat_xent_l:
    case LossKind::cat_xent_s:
      return 1.0;
    default:
      return w;
  }
}

MaskVariant LossSpec::mask() const {
  switch (kind) {
    case LossKind::xent:
    case LossKind::dist:
      return MaskVariant::none;
    case LossKind::cat_xent:
    case LossKind::cat_dist:
      return MaskVariant::both;
    case LossKind::cat_xent_l:
    case LossKind::cat_dist_l:
      return MaskVariant::large_only;
    case LossKind::cat_xent_s:
    case LossKind::cat_dist_s:
      return MaskVariant::small_only;
  }
  return MaskVariant::none;
}

void LossSpec::validate() const {
  if (!(w >= 0.0 && w <= 1.0)) throw ConfigError("distillation weight w must lie in [0, 1]");
}

std::vector<int> argmax_rows(const LogitsSeq& logprobs) {
  std::vector<int> out(logprobs.rows());
  for (Eigen::Index i = 0; i < logprobs.rows(); ++i) out[i] = argmax_lowest(logprobs.row(i));
  return out;
}

namespace {

void check_targets(const LogitsSeq& lp, const TokenSeq& y) {
  if (static_cast<std::size_t>(lp.rows()) != y.size()) {
    throw Error("loss: " + std::to_string(lp.rows()) + " logit rows for " +
                std::to_string(y.size()) + " targets");
  }
  for (int t : y) {
    if (t < 0 || t >= lp.cols()) throw Error("loss: target id out of range");
  }
}

void check_teacher(const LogitsSeq& lp, const TeacherOutputs& teacher) {
  if (teacher.logprobs.rows() != lp.rows() || teacher.logprobs.cols() != lp.cols()) {
    throw Error("loss: teacher outputs do not cover every response position");
  }
}

// Summand at position i before masking:
//   -(w log p(y_i) + (1 - w) sum_v q(v) log p(v)).
// At w == 1 the teacher term is skipped, so teacher may be null.
double summand(const LogitsSeq& lp, const TokenSeq& y, const TeacherOutputs* teacher, double w,
               Eigen::Index i) {
  double s = w * lp(i, y[i]);
  if (w < 1.0) {
    double cross = 0.0;
    for (Eigen::Index v = 0; v < lp.cols(); ++v) {
      cross += std::exp(teacher->logprobs(i, v)) * lp(i, v);
    }
    s += (1.0 - w) * cross;
  }
  return -s;
}

}  // namespace

double xent(const LogitsSeq& lp, const TokenSeq& y) {
  check_targets(lp, y);
  double total = 0.0;
  for (Eigen::Index i = 0; i < lp.rows(); ++i) total += -lp(i, y[i]);
  return total;
}

double dist(const LogitsSeq& lp, const TokenSeq& y, const TeacherOutputs& teacher, double w) {
  check_targets(lp, y);
  if (w < 1.0) check_teacher(lp, teacher);
  double total = 0.0;
  for (Eigen::Index i = 0; i < lp.rows(); ++i) total += summand(lp, y, &teacher, w, i);
  return total;
}

TokenMask compute_alpha(const TokenSeq& y, const std::vector<int>& student_argmax,
                        const std::vector<int>& teacher_argmax, MaskVariant variant) {
  const bool need_small = variant == MaskVariant::both || variant == MaskVariant::small_only;
  const bool need_large = variant == MaskVariant::both || variant == MaskVariant::large_only;
  if ((need_small && student_argmax.size() != y.size()) ||
      (need_large && teacher_argmax.size() != y.size())) {
    throw Error("compute_alpha: argmax and target lengths differ");
  }
  TokenMask mask(y.size(), 1);
  if (variant == MaskVariant::none) return mask;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const bool small_ok = need_small && y[i] == student_argmax[i];
    const bool large_ok = need_large && y[i] == teacher_argmax[i];
    mask[i] = (small_ok || large_ok) ? 1 : 0;
  }
  return mask;
}

double cat_loss(const LogitsSeq& lp, const TokenSeq& y, const TeacherOutputs& teacher, double w,
                const TokenMask& mask) {
  check_targets(lp, y);
  if (w < 1.0) check_teacher(lp, teacher);
  if (mask.size() != y.size()) throw Error("cat_loss: mask does not cover every position");
  double total = 0.0;
  for (Eigen::Index i = 0; i < lp.rows(); ++i) {
    if (mask[i]) total += summand(lp, y, &teacher, w, i);
  }
  return total;
}

double example_loss_and_dlogits(const LogitsSeq& lp, const TokenSeq& y,
                                const TeacherOutputs* teacher, const TokenMask* mask,
                                const LossSpec& spec, Matrix& dlogits) {
  check_targets(lp, y);
  const double w = spec.effective_w();
  if (w < 1.0) {
    if (teacher == nullptr) throw Error("loss " + to_string(spec.kind) + " needs teacher outputs");
    check_teacher(lp, *teacher);
  }
  if (spec.mask() != MaskVariant::none && (mask == nullptr || mask->size() != y.size())) {
    throw Error("loss " + to_string(spec.kind) + " needs a mask over every position");
  }
  dlogits.setZero(lp.rows(), lp.cols());
  double total = 0.0;
  for (Eigen::Index i = 0; i < lp.rows(); ++i) {
    if (mask != nullptr && spec.mask() != MaskVariant::none && !(*mask)[i]) continue;
    total += summand(lp, y, teacher, w, i);
    // d/dz of -sum_v c_v log softmax(z)_v is p - c, with c summing to one.
    auto row = dlogits.row(i);
    row = lp.row(i).array().exp();
    row(y[i]) -= w;
    if (w < 1.0) row -= (1.0 - w) * teacher->logprobs.row(i).array().exp().matrix();
  }
  return total;
}

}  // namespace catk
