#pragma once

// Metric tables for a trained model: text-to-motion retrieval/FID/diversity
// through the evaluator, captioning scores, and the guidance sweep.

#include <filesystem>
#include <string>
#include <vector>

#include "bimot/evaluator.hpp"
#include "bimot/model.hpp"

namespace bimot {

struct MetricRow {
  std::string metric;
  double value = 0;
  double ci95 = 0;
  int n_rep = 1;
};

struct EvalSettings {
  SamplerSettings sampler{50, 3.0, 0, 1.0, true};
  TextSampler captioner;
  std::size_t batch = 8;
  int repetitions = 5;
  // Multimodality: this many captions, each generated `mm_repeats` times.
  int mm_captions = 10;
  int mm_repeats = 8;
  std::size_t div_subset = 32;
  std::uint64_t seed = 0;
};

// One generated clip per record, same length as the record's clip.
template <typename T>
std::vector<MotionClip> generate_for_records(const MotionModel<T>& model, std::span<const CorpusRecord> records,
                                             const SamplerSettings& settings);

struct T2mScores {
  RPrecision r;
  double mm_dist = 0;
  double fid = 0;
  double diversity = 0;
  double class_accuracy = 0;
};

// Scores one generated set against the records it was generated for.
T2mScores score_t2m(const Evaluator& evaluator, const TemplateOracle& oracle, std::span<const CorpusRecord> records,
                    std::span<const MotionClip> generated, std::size_t batch, std::size_t div_subset,
                    std::uint64_t seed);

struct CaptionScores {
  double bleu1 = 0;
  double bleu4 = 0;
  double rouge_l = 0;
  double class_word_accuracy = 0;
  std::vector<std::string> captions;
};

// References are every template rendering of each record.
template <typename T>
CaptionScores score_m2t(const MotionModel<T>& model, std::span<const CorpusRecord> records,
                        const TextSampler& sampler);

// Full table: repeated T2M generation with 95% intervals, ground-truth reference
// rows, multimodality and captioning.
template <typename T>
std::vector<MetricRow> evaluate_model(const MotionModel<T>& model, const Evaluator& evaluator,
                                      const TemplateOracle& oracle, std::span<const CorpusRecord> records,
                                      const EvalSettings& settings);

// FID of generated val motions at each guidance scale (one generation per omega, same seed).
template <typename T>
std::vector<double> guidance_sweep(const MotionModel<T>& model, const Evaluator& evaluator,
                                   std::span<const CorpusRecord> records, const std::vector<double>& omegas,
                                   const SamplerSettings& base);

void write_metric_rows(const std::filesystem::path& path, const std::vector<MetricRow>& rows);

}  // namespace bimot
