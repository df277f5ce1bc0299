#include "catk/eval.hpp"

#include "catk/losses.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

namespace catk {

std::string to_string(MetricKind m) {
  switch (m) {
    case MetricKind::exact_match: return "exact_match";
    case MetricKind::bleu: return "bleu";
    case MetricKind::next_token_acc: return "next_token_acc";
  }
  return "?";
}

MetricKind parse_metric(std::string_view s) {
  if (s == "exact_match") return MetricKind::exact_match;
  if (s == "bleu") return MetricKind::bleu;
  if (s == "next_token_acc") return MetricKind::next_token_acc;
  throw ConfigError("unknown metric '" + std::string(s) + "'");
}

TokenSeq strip_eos(const TokenSeq& y, int eos) {
  const auto it = std::find(y.begin(), y.end(), eos);
  return TokenSeq(y.begin(), it);
}

int exact_match(const TokenSeq& y_hat, const TokenSeq& y, int eos) {
  if (std::find(y_hat.begin(), y_hat.end(), eos) == y_hat.end()) return 0;
  return strip_eos(y_hat, eos) == strip_eos(y, eos) ? 1 : 0;
}

namespace {

constexpr int kMaxOrder = 4;

// Clipped matches and hypothesis n-gram counts for one pair.
void count_ngrams(const TokenSeq& h, const TokenSeq& r, std::int64_t* matches,
                  std::int64_t* totals) {
  for (int n = 1; n <= kMaxOrder; ++n) {
    if (static_cast<int>(h.size()) < n) continue;
    std::map<std::vector<int>, int> ref_counts;
    for (std::size_t i = 0; i + n <= r.size(); ++i) {
      ++ref_counts[std::vector<int>(r.begin() + i, r.begin() + i + n)];
    }
    std::map<std::vector<int>, int> hyp_counts;
    for (std::size_t i = 0; i + n <= h.size(); ++i) {
      ++hyp_counts[std::vector<int>(h.begin() + i, h.begin() + i + n)];
    }
    for (const auto& [gram, c] : hyp_counts) {
      totals[n] += c;
      const auto it = ref_counts.find(gram);
      if (it != ref_counts.end()) matches[n] += std::min(c, it->second);
    }
  }
}

}  // namespace

double bleu(const std::vector<TokenSeq>& hypotheses, const std::vector<TokenSeq>& references,
            int eos) {
  if (hypotheses.size() != references.size()) {
    throw Error("bleu: " + std::to_string(hypotheses.size()) + " hypotheses for " +
                std::to_string(references.size()) + " references");
  }
  if (hypotheses.empty()) throw Error("bleu: empty corpus");
  std::int64_t matches[kMaxOrder + 1] = {};
  std::int64_t totals[kMaxOrder + 1] = {};
  std::int64_t hyp_len = 0, ref_len = 0;
  for (std::size_t k = 0; k < hypotheses.size(); ++k) {
    const TokenSeq h = strip_eos(hypotheses[k], eos);
    const TokenSeq r = strip_eos(references[k], eos);
    hyp_len += static_cast<std::int64_t>(h.size());
    ref_len += static_cast<std::int64_t>(r.size());
    count_ngrams(h, r, matches, totals);
  }
  if (hyp_len == 0 || matches[1] == 0) return 0.0;
  double log_sum = 0.0;
  for (int n = 1; n <= kMaxOrder; ++n) {
    double p;
    if (n > 1 && matches[n] == 0) {
      p = 1.0 / static_cast<double>(totals[n] + 1);
    } else {
      p = static_cast<double>(matches[n]) / static_cast<double>(totals[n]);
    }
    log_sum += std::log(p);
  }
  const double bp =
      hyp_len > ref_len ? 1.0 : std::exp(1.0 - static_cast<double>(ref_len) / hyp_len);
  return bp * std::exp(log_sum / kMaxOrder);
}

double sentence_bleu(const TokenSeq& hypothesis, const TokenSeq& reference, int eos) {
  return bleu({hypothesis}, {reference}, eos);
}

double next_token_acc(const Model& model, const std::vector<const Example*>& examples) {
  if (examples.empty()) throw Error("next_token_acc: no examples");
  std::int64_t hits = 0, total = 0;
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < examples.size(); start += kChunk) {
    std::vector<SeqRef> refs;
    for (std::size_t i = start; i < std::min(examples.size(), start + kChunk); ++i) {
      refs.push_back({&examples[i]->x, &examples[i]->y});
    }
    const auto lps = forward_teacher_forced_batch(model, refs);
    for (std::size_t k = 0; k < refs.size(); ++k) {
      const auto am = argmax_rows(lps[k]);
      for (std::size_t i = 0; i < am.size(); ++i) hits += am[i] == (*refs[k].y)[i];
      total += static_cast<std::int64_t>(am.size());
    }
  }
  return static_cast<double>(hits) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// Score logs

namespace {

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s, const std::string& where) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) throw Error(where + ": bad number '" + s + "'");
  return v;
}

int parse_int(const std::string& s, const std::string& where) {
  const double v = parse_double(s, where);
  if (v != std::floor(v)) throw Error(where + ": expected an integer, got '" + s + "'");
  return static_cast<int>(v);
}

const char* kScoreHeader =
    "example_id,score,small_correct,large_correct,small_quality,large_quality,n_tokens";
const char* kCurveHeader = "rule,loss,tau,deferral_rate,mean_cost,quality,a1,a2";

}  // namespace

void write_score_log(const std::vector<ScoreRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << kScoreHeader << '\n';
  for (const auto& r : rows) {
    out << r.example_id << ',' << fmt17(r.score) << ',' << r.small_correct << ','
        << r.large_correct << ',' << fmt17(r.small_quality) << ',' << fmt17(r.large_quality)
        << ',' << r.n_tokens << '\n';
  }
  if (!out) throw Error("write failed for " + path.string());
}

std::vector<ScoreRow> read_score_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read score log " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kScoreHeader) {
    throw Error(path.string() + ": missing or wrong score log header");
  }
  std::vector<ScoreRow> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = path.string() + " line " + std::to_string(lineno);
    const auto c = split_csv(line);
    if (c.size() != 7) throw Error(where + ": expected 7 columns, got " + std::to_string(c.size()));
    ScoreRow r;
    r.example_id = c[0];
    r.score = parse_double(c[1], where);
    r.small_correct = parse_int(c[2], where);
    r.large_correct = parse_int(c[3], where);
    r.small_quality = parse_double(c[4], where);
    r.large_quality = parse_double(c[5], where);
    r.n_tokens = parse_int(c[6], where);
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Sweeps

std::vector<CurvePoint> sweep(const std::vector<ScoreRow>& log, MetricKind metric,
                              double cost_small, double cost_large) {
  if (log.empty()) throw Error("sweep: empty score log");
  const std::size_t n = log.size();
  std::vector<double> qs(n), ql(n);
  for (std::size_t i = 0; i < n; ++i) {
    const ScoreRow& r = log[i];
    if (r.example_id.empty() || std::isnan(r.score) || !std::isfinite(r.small_quality) ||
        !std::isfinite(r.large_quality)) {
      throw Error("sweep: incomplete score log row " + std::to_string(i));
    }
    qs[i] = metric == MetricKind::exact_match ? r.small_correct : r.small_quality;
    ql[i] = metric == MetricKind::exact_match ? r.large_correct : r.large_quality;
  }
  // Highest scores are deferred first.
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return log[a].score > log[b].score; });

  // Totals in corpus order, so the endpoints equal the standalone means exactly.
  const double count = static_cast<double>(n);
  double small_total = 0.0, large_total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    small_total += qs[i];
    large_total += ql[i];
  }

  std::vector<CurvePoint> out;
  auto emit = [&](double tau, std::size_t deferred, double small_kept, double large_deferred) {
    CurvePoint p;
    p.tau = tau;
    p.deferral_rate = static_cast<double>(deferred) / count;
    p.mean_cost = (count * cost_small + static_cast<double>(deferred) * cost_large) / count;
    p.a1 = small_kept / count;
    p.a2 = large_deferred / count;
    p.quality = (small_kept + large_deferred) / count;
    out.push_back(p);
  };

  constexpr double inf = std::numeric_limits<double>::infinity();
  emit(inf, 0, small_total, 0.0);
  double small_deferred = 0.0, large_deferred = 0.0;
  std::size_t k = 0;
  while (k < n) {
    const double s = log[order[k]].score;
    while (k < n && log[order[k]].score == s) {
      small_deferred += qs[order[k]];
      large_deferred += ql[order[k]];
      ++k;
    }
    if (k < n) {
      const double next = log[order[k]].score;
      emit(s + (next - s) / 2.0, k, small_total - small_deferred, large_deferred);
    }
  }
  emit(-inf, n, 0.0, large_total);
  return out;
}

double audc(const std::vector<CurvePoint>& curve) {
  if (curve.size() < 2) throw Error("audc: curve needs at least two points");
  for (std::size_t i = 1; i < curve.size(); ++i) {
    if (curve[i].deferral_rate < curve[i - 1].deferral_rate) {
      throw Error("audc: deferral rates are not sorted");
    }
  }
  const double span = curve.back().deferral_rate - curve.front().deferral_rate;
  if (!(span > 0.0)) throw Error("audc: curve spans no deferral-rate interval");
  double area = 0.0;
  for (std::size_t i = 1; i < curve.size(); ++i) {
    area += (curve[i].deferral_rate - curve[i - 1].deferral_rate) *
            (curve[i].quality + curve[i - 1].quality) / 2.0;
  }
  return area / span;
}

double curve_at(const std::vector<CurvePoint>& curve, double rate, CurveField field) {
  if (curve.empty()) throw Error("curve_at: empty curve");
  auto get = [field](const CurvePoint& p) {
    switch (field) {
      case CurveField::a1: return p.a1;
      case CurveField::a2: return p.a2;
      default: return p.quality;
    }
  };
  if (rate < curve.front().deferral_rate || rate > curve.back().deferral_rate) {
    throw Error("curve_at: rate outside the curve");
  }
  for (std::size_t i = 1; i < curve.size(); ++i) {
    const CurvePoint& a = curve[i - 1];
    const CurvePoint& b = curve[i];
    if (rate <= b.deferral_rate) {
      const double dx = b.deferral_rate - a.deferral_rate;
      if (dx <= 0.0) return get(b);
      const double t = (rate - a.deferral_rate) / dx;
      return get(a) + t * (get(b) - get(a));
    }
  }
  return get(curve.back());
}

// ---------------------------------------------------------------------------
// Reports

namespace {

std::string svg_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fmt(double v, int prec = 4) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
  return buf;
}

void write_svg(const std::vector<Curve>& curves, const std::filesystem::path& path,
               const std::string& title) {
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                  "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
  double ymin = xmin, ymax = -xmin;
  for (const auto& c : curves) {
    for (const auto& p : c.points) {
      xmin = std::min(xmin, p.mean_cost);
      xmax = std::max(xmax, p.mean_cost);
      ymin = std::min(ymin, p.quality);
      ymax = std::max(ymax, p.quality);
    }
  }
  if (!std::isfinite(xmin)) xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  if (xmax <= xmin) xmax = xmin + 1.0;
  if (ymax <= ymin) ymax = ymin + 1e-3;
  const double W = 720, H = 480, L = 70, R = 220, T = 40, B = 60;
  const double pw = W - L - R, ph = H - T - B;
  auto sx = [&](double x) { return L + (x - xmin) / (xmax - xmin) * pw; };
  auto sy = [&](double y) { return T + ph - (y - ymin) / (ymax - ymin) * ph; };

  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << L << "\" y=\"24\" font-size=\"14\">" << svg_escape(title) << "</text>\n";
  out << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = xmin + (xmax - xmin) * i / 4.0;
    const double yv = ymin + (ymax - ymin) * i / 4.0;
    out << "<text x=\"" << fmt(sx(xv), 6) << "\" y=\"" << T + ph + 16
        << "\" text-anchor=\"middle\">" << fmt(xv) << "</text>\n";
    out << "<text x=\"" << L - 6 << "\" y=\"" << fmt(sy(yv) + 4, 6) << "\" text-anchor=\"end\">"
        << fmt(yv) << "</text>\n";
  }
  out << "<text x=\"" << L + pw / 2 << "\" y=\"" << H - 16
      << "\" text-anchor=\"middle\">mean cost per query (2 x params)</text>\n";
  out << "<text x=\"18\" y=\"" << T + ph / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
      << T + ph / 2 << ")\">quality</text>\n";
  for (std::size_t c = 0; c < curves.size(); ++c) {
    const char* color = kColors[c % 10];
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < curves[c].points.size(); ++i) {
      const auto& p = curves[c].points[i];
      out << (i ? " " : "") << fmt(sx(p.mean_cost), 7) << ',' << fmt(sy(p.quality), 7);
    }
    out << "\"/>\n";
    const double ly = T + 14 + 16.0 * static_cast<double>(c);
    out << "<line x1=\"" << W - R + 12 << "\" y1=\"" << ly - 4 << "\" x2=\"" << W - R + 32
        << "\" y2=\"" << ly - 4 << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    out << "<text x=\"" << W - R + 38 << "\" y=\"" << ly << "\">"
        << svg_escape(curves[c].loss + " / " + curves[c].rule) << "</text>\n";
  }
  out << "</svg>\n";
  if (!out) throw Error("write failed for " + path.string());
}

}  // namespace

void emit_report(const std::vector<Curve>& curves, const std::filesystem::path& stem,
                 const std::string& title) {
  const std::filesystem::path csv = stem.string() + ".csv";
  std::ofstream out(csv);
  if (!out) throw Error("cannot write " + csv.string());
  out << kCurveHeader << '\n';
  for (const auto& c : curves) {
    for (const auto& p : c.points) {
      out << c.rule << ',' << c.loss << ',' << fmt17(p.tau) << ',' << fmt17(p.deferral_rate) << ','
          << fmt17(p.mean_cost) << ',' << fmt17(p.quality) << ',' << fmt17(p.a1) << ','
          << fmt17(p.a2) << '\n';
    }
  }
  if (!out) throw Error("write failed for " + csv.string());
  out.close();
  write_svg(curves, stem.string() + ".svg", title);
}

std::vector<Curve> read_curve_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read curve file " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kCurveHeader) {
    throw Error(path.string() + ": missing or wrong curve header");
  }
  std::vector<Curve> curves;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = path.string() + " line " + std::to_string(lineno);
    const auto c = split_csv(line);
    if (c.size() != 8) throw Error(where + ": expected 8 columns, got " + std::to_string(c.size()));
    if (curves.empty() || curves.back().rule != c[0] || curves.back().loss != c[1]) {
      curves.push_back({c[0], c[1], {}});
    }
    CurvePoint p;
    p.tau = parse_double(c[2], where);
    p.deferral_rate = parse_double(c[3], where);
    p.mean_cost = parse_double(c[4], where);
    p.quality = parse_double(c[5], where);
    p.a1 = parse_double(c[6], where);
    p.a2 = parse_double(c[7], where);
    curves.back().points.push_back(p);
  }
  return curves;
}

}  // namespace catk
