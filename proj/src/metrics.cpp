#include "bimot/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include "bimot/errors.hpp"

namespace bimot {

namespace {

void require_pairs(const Features& a, const Features& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw EvaluationError("feature sets must be paired");
}

}  // namespace

RPrecision r_precision(const Features& text, const Features& motion, std::size_t batch) {
  require_pairs(text, motion);
  const auto n = static_cast<std::size_t>(text.rows());
  if (batch == 0 || n < batch) {
    throw EvaluationError("R-precision needs at least " + std::to_string(batch) + " pairs, got " + std::to_string(n));
  }
  RPrecision r;
  r.batches = n / batch;
  for (std::size_t g = 0; g < r.batches; ++g) {
    const auto base = static_cast<Eigen::Index>(g * batch);
    for (std::size_t i = 0; i < batch; ++i) {
      const auto qi = base + static_cast<Eigen::Index>(i);
      const double own = (text.row(qi) - motion.row(qi)).norm();
      std::size_t closer = 0;
      for (std::size_t j = 0; j < batch; ++j) {
        if (j == i) continue;
        if ((text.row(qi) - motion.row(base + static_cast<Eigen::Index>(j))).norm() < own) ++closer;
      }
      r.top1 += closer < 1;
      r.top2 += closer < 2;
      r.top3 += closer < 3;
    }
  }
  const double total = static_cast<double>(r.batches * batch);
  r.top1 /= total;
  r.top2 /= total;
  r.top3 /= total;
  return r;
}

double mm_dist(const Features& text, const Features& motion) {
  require_pairs(text, motion);
  if (text.rows() == 0) throw EvaluationError("MM distance over an empty set");
  return (text - motion).rowwise().norm().mean();
}

double fid(const Features& real, const Features& generated) {
  if (real.rows() < 2 || generated.rows() < 2) throw EvaluationError("FID needs at least two samples per side");
  if (real.cols() != generated.cols()) throw EvaluationError("FID feature sizes differ");
  auto moments = [](const Features& x, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
    mu = x.colwise().mean().transpose();
    const Eigen::MatrixXd c = x.rowwise() - mu.transpose();
    cov = c.transpose() * c / static_cast<double>(x.rows() - 1);
  };
  Eigen::VectorXd m1, m2;
  Eigen::MatrixXd s1, s2;
  moments(real, m1, s1);
  moments(generated, m2, s2);
  if (!s1.allFinite() || !s2.allFinite()) throw DataError("non-finite covariance in FID");
  auto sqrtm = [](const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
    const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return Eigen::MatrixXd(es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose());
  };
  // Tr((S1 S2)^1/2) = Tr((A S2 A)^1/2) with A = S1^1/2, which keeps the argument symmetric.
  const Eigen::MatrixXd a = sqrtm(s1);
  const double cross = sqrtm(a * s2 * a).trace();
  const double value = (m1 - m2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * cross;
  return std::max(0.0, value);
}

double diversity(const Features& features, std::size_t subset, std::uint64_t seed) {
  const auto n = static_cast<std::size_t>(features.rows());
  if (subset == 0 || n < subset) {
    throw EvaluationError("diversity needs at least " + std::to_string(subset) + " samples, got " + std::to_string(n));
  }
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> a(n), b(n);
  std::iota(a.begin(), a.end(), 0);
  std::iota(b.begin(), b.end(), 0);
  std::shuffle(a.begin(), a.end(), rng);
  std::shuffle(b.begin(), b.end(), rng);
  double total = 0;
  for (std::size_t i = 0; i < subset; ++i) {
    total += (features.row(static_cast<Eigen::Index>(a[i])) - features.row(static_cast<Eigen::Index>(b[i]))).norm();
  }
  return total / static_cast<double>(subset);
}

double multimodality(const std::vector<Features>& groups) {
  if (groups.empty()) throw EvaluationError("multimodality needs at least one caption");
  double total = 0;
  for (const auto& g : groups) {
    if (g.rows() < 2) throw EvaluationError("multimodality needs at least two generations per caption");
    double sum = 0;
    std::size_t pairs = 0;
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      for (Eigen::Index j = i + 1; j < g.rows(); ++j) {
        sum += (g.row(i) - g.row(j)).norm();
        ++pairs;
      }
    }
    total += sum / static_cast<double>(pairs);
  }
  return total / static_cast<double>(groups.size());
}

namespace {

std::map<Tokens, int> ngram_counts(const Tokens& t, int n) {
  std::map<Tokens, int> counts;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= t.size(); ++i) {
    ++counts[Tokens(t.begin() + static_cast<std::ptrdiff_t>(i), t.begin() + static_cast<std::ptrdiff_t>(i) + n)];
  }
  return counts;
}

// Clipped matches and candidate n-gram total.
std::pair<double, double> modified_precision(const Tokens& candidate, const std::vector<Tokens>& references, int n) {
  const auto cand = ngram_counts(candidate, n);
  std::map<Tokens, int> max_ref;
  for (const auto& r : references) {
    for (const auto& [g, c] : ngram_counts(r, n)) max_ref[g] = std::max(max_ref[g], c);
  }
  double matched = 0, total = 0;
  for (const auto& [g, c] : cand) {
    total += c;
    const auto it = max_ref.find(g);
    if (it != max_ref.end()) matched += std::min(c, it->second);
  }
  return {matched, total};
}

}  // namespace

double unigram_precision(const Tokens& candidate, const std::vector<Tokens>& references) {
  if (candidate.empty()) return 0.0;
  const auto [m, t] = modified_precision(candidate, references, 1);
  return m / t;
}

double bleu(const Tokens& candidate, const std::vector<Tokens>& references, int max_n) {
  if (max_n < 1) throw ConfigError("BLEU order must be at least 1");
  if (references.empty()) throw EvaluationError("BLEU needs at least one reference");
  if (candidate.empty()) return 0.0;
  double log_sum = 0;
  for (int n = 1; n <= max_n; ++n) {
    const auto [m, t] = modified_precision(candidate, references, n);
    if (t == 0 || m == 0) return 0.0;
    log_sum += std::log(m / t);
  }
  const double c = static_cast<double>(candidate.size());
  double best_len = 0, best_gap = std::numeric_limits<double>::infinity();
  for (const auto& r : references) {
    const double gap = std::abs(static_cast<double>(r.size()) - c);
    if (gap < best_gap || (gap == best_gap && static_cast<double>(r.size()) < best_len)) {
      best_gap = gap;
      best_len = static_cast<double>(r.size());
    }
  }
  const double bp = c >= best_len ? 1.0 : std::exp(1.0 - best_len / c);
  return bp * std::exp(log_sum / max_n);
}

double rouge_l(const Tokens& candidate, const Tokens& reference, double beta) {
  if (candidate.empty() || reference.empty()) return 0.0;
  std::vector<std::size_t> prev(reference.size() + 1, 0), cur(reference.size() + 1, 0);
  for (std::size_t i = 1; i <= candidate.size(); ++i) {
    for (std::size_t j = 1; j <= reference.size(); ++j) {
      cur[j] = candidate[i - 1] == reference[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  const double lcs = static_cast<double>(prev[reference.size()]);
  if (lcs == 0) return 0.0;
  const double p = lcs / static_cast<double>(candidate.size());
  const double r = lcs / static_cast<double>(reference.size());
  return (1 + beta * beta) * p * r / (r + beta * beta * p);
}

double rouge_l(const Tokens& candidate, const std::vector<Tokens>& references, double beta) {
  double best = 0;
  for (const auto& r : references) best = std::max(best, rouge_l(candidate, r, beta));
  return best;
}

MeanCi mean_ci95(std::span<const double> values) {
  if (values.empty()) throw EvaluationError("confidence interval over no values");
  MeanCi out;
  out.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() < 2) return out;
  double sq = 0;
  for (double v : values) sq += (v - out.mean) * (v - out.mean);
  const double sd = std::sqrt(sq / static_cast<double>(values.size() - 1));
  out.ci95 = 1.96 * sd / std::sqrt(static_cast<double>(values.size()));
  return out;
}

TemplateOracle::TemplateOracle(std::span<const CorpusRecord> templates, const MotionStats& stats, int frames)
    : stats_(stats), frames_(frames) {
  if (templates.empty()) throw EvaluationError("template oracle needs reference clips");
  for (const auto& r : templates) {
    signatures_.push_back(signature(r.clip));
    labels_.push_back(r.label);
  }
}

std::vector<double> TemplateOracle::signature(const MotionClip& raw) const {
  const MotionClip c = stats_.standardize(raw);
  std::vector<double> out(static_cast<std::size_t>(frames_ * c.dims));
  for (int f = 0; f < frames_; ++f) {
    const double pos = c.frames == 1 ? 0.0 : static_cast<double>(f) * (c.frames - 1) / (frames_ - 1);
    const int lo = static_cast<int>(std::floor(pos));
    const int hi = std::min(lo + 1, c.frames - 1);
    const double w = pos - lo;
    for (int d = 0; d < c.dims; ++d) {
      out[static_cast<std::size_t>(f * c.dims + d)] = (1 - w) * c.at(lo, d) + w * c.at(hi, d);
    }
  }
  return out;
}

MotionClass TemplateOracle::classify(const MotionClip& raw) const {
  const auto s = signature(raw);
  double best = std::numeric_limits<double>::infinity();
  std::size_t arg = 0;
  for (std::size_t i = 0; i < signatures_.size(); ++i) {
    if (signatures_[i].size() != s.size()) continue;
    double d = 0;
    for (std::size_t k = 0; k < s.size(); ++k) d += (s[k] - signatures_[i][k]) * (s[k] - signatures_[i][k]);
    if (d < best) {
      best = d;
      arg = i;
    }
  }
  return labels_[arg];
}

}  // namespace bimot
