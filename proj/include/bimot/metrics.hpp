#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bimot/corpus.hpp"

namespace bimot {

// Rows are samples.
using Features = Eigen::MatrixXd;

struct RPrecision {
  double top1 = 0, top2 = 0, top3 = 0;
  std::size_t batches = 0;
};

// Consecutive groups of `batch` pairs; within each, every text ranks the
// group's motions by Euclidean distance. Leftover pairs are dropped.
RPrecision r_precision(const Features& text, const Features& motion, std::size_t batch = 8);
double mm_dist(const Features& text, const Features& motion);

double fid(const Features& real, const Features& generated);

// Mean distance between paired rows of two random subsets of size `subset`.
double diversity(const Features& features, std::size_t subset, std::uint64_t seed);
// groups[i]: R generations for caption i; mean pairwise distance within each group, averaged.
double multimodality(const std::vector<Features>& groups);

using Tokens = std::vector<std::string>;

// Modified n-gram precision, uniform weights up to max_n, brevity penalty
// against the closest reference length. Empty candidate scores 0.
double bleu(const Tokens& candidate, const std::vector<Tokens>& references, int max_n);
double rouge_l(const Tokens& candidate, const Tokens& reference, double beta = 1.2);
double rouge_l(const Tokens& candidate, const std::vector<Tokens>& references, double beta = 1.2);
// Fraction of clipped unigram matches; the precision BLEU@1 is built on.
double unigram_precision(const Tokens& candidate, const std::vector<Tokens>& references);

struct MeanCi {
  double mean = 0;
  double ci95 = 0;
};
MeanCi mean_ci95(std::span<const double> values);

// Labels generated clips by the nearest reference clip after resampling to a common length.
class TemplateOracle {
 public:
  TemplateOracle(std::span<const CorpusRecord> templates, const MotionStats& stats, int frames = 32);
  MotionClass classify(const MotionClip& raw) const;

 private:
  std::vector<double> signature(const MotionClip& raw) const;

  MotionStats stats_;
  int frames_;
  std::vector<std::vector<double>> signatures_;
  std::vector<MotionClass> labels_;
};

}  // namespace bimot
