#include "bimot/evaluation.hpp"

#include <algorithm>
#include <fmt/format.h>
#include <fstream>
#include <numeric>
#include <random>

namespace bimot {

template <typename T>
std::vector<MotionClip> generate_for_records(const MotionModel<T>& model, std::span<const CorpusRecord> records,
                                             const SamplerSettings& settings) {
  std::vector<MotionClip> out;
  out.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    SamplerSettings s = settings;
    s.seed = settings.seed * 1000003ull + i;
    const int frames = std::min(records[i].clip.frames, model.config().vae.max_frames);
    out.push_back(model.text_to_motion(records[i].caption, frames, s));
  }
  return out;
}

namespace {

std::vector<std::string> captions_of(std::span<const CorpusRecord> records) {
  std::vector<std::string> out;
  for (const auto& r : records) out.push_back(r.caption);
  return out;
}

std::vector<MotionClip> clips_of(std::span<const CorpusRecord> records) {
  std::vector<MotionClip> out;
  for (const auto& r : records) out.push_back(r.clip);
  return out;
}

Features permute(const Features& f, const std::vector<std::size_t>& order) {
  Features out(f.rows(), f.cols());
  for (std::size_t i = 0; i < order.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = f.row(static_cast<Eigen::Index>(order[i]));
  }
  return out;
}

MetricRow summarize(const std::string& name, const std::vector<double>& values) {
  const auto m = mean_ci95(values);
  return {name, m.mean, m.ci95, static_cast<int>(values.size())};
}

}  // namespace

T2mScores score_t2m(const Evaluator& evaluator, const TemplateOracle& oracle, std::span<const CorpusRecord> records,
                    std::span<const MotionClip> generated, std::size_t batch, std::size_t div_subset,
                    std::uint64_t seed) {
  if (generated.size() != records.size()) throw EvaluationError("one generated clip per record is required");
  const auto caps = captions_of(records);
  const auto real = clips_of(records);
  const Features text = evaluator.text_features(caps);
  const Features gen = evaluator.motion_features(generated);
  const Features ref = evaluator.motion_features(real);
  // Batches are drawn from a seeded shuffle so repeated runs see different distractors.
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  T2mScores s;
  s.r = r_precision(permute(text, order), permute(gen, order), batch);
  s.mm_dist = mm_dist(text, gen);
  s.fid = fid(ref, gen);
  s.diversity = diversity(gen, std::min(div_subset, generated.size()), seed);
  int hits = 0;
  for (std::size_t i = 0; i < records.size(); ++i) hits += oracle.classify(generated[i]) == records[i].label;
  s.class_accuracy = static_cast<double>(hits) / static_cast<double>(records.size());
  return s;
}

template <typename T>
CaptionScores score_m2t(const MotionModel<T>& model, std::span<const CorpusRecord> records,
                        const TextSampler& sampler) {
  if (records.empty()) throw EvaluationError("captioning evaluation over no records");
  CaptionScores s;
  int class_hits = 0;
  for (const auto& r : records) {
    const std::string caption = model.caption(r.clip, sampler);
    std::vector<Tokens> refs;
    for (const auto& c : render_all_captions(r.label, r.params)) refs.push_back(Vocabulary::split(c));
    const Tokens cand = Vocabulary::split(caption);
    s.bleu1 += bleu(cand, refs, 1);
    s.bleu4 += bleu(cand, refs, 4);
    s.rouge_l += rouge_l(cand, refs);
    class_hits += caption_class(caption) == static_cast<int>(r.label);
    s.captions.push_back(caption);
  }
  const auto n = static_cast<double>(records.size());
  s.bleu1 /= n;
  s.bleu4 /= n;
  s.rouge_l /= n;
  s.class_word_accuracy = class_hits / n;
  return s;
}

template <typename T>
std::vector<MetricRow> evaluate_model(const MotionModel<T>& model, const Evaluator& evaluator,
                                      const TemplateOracle& oracle, std::span<const CorpusRecord> records,
                                      const EvalSettings& settings) {
  if (settings.repetitions < 1) throw ConfigError("at least one evaluation repetition is required");
  std::vector<double> r1, r2, r3, mmd, fids, divs, acc;
  for (int rep = 0; rep < settings.repetitions; ++rep) {
    SamplerSettings s = settings.sampler;
    s.seed = settings.seed + static_cast<std::uint64_t>(rep);
    const auto gen = generate_for_records(model, records, s);
    const auto sc = score_t2m(evaluator, oracle, records, gen, settings.batch, settings.div_subset, s.seed);
    r1.push_back(sc.r.top1);
    r2.push_back(sc.r.top2);
    r3.push_back(sc.r.top3);
    mmd.push_back(sc.mm_dist);
    fids.push_back(sc.fid);
    divs.push_back(sc.diversity);
    acc.push_back(sc.class_accuracy);
  }
  std::vector<MetricRow> rows{summarize("t2m_r_precision_top1", r1), summarize("t2m_r_precision_top2", r2),
                              summarize("t2m_r_precision_top3", r3), summarize("t2m_mm_dist", mmd),
                              summarize("t2m_fid", fids),            summarize("t2m_diversity", divs),
                              summarize("t2m_class_accuracy", acc)};

  // Ground truth through the same evaluator, the reference the generated rows are read against.
  const auto real = clips_of(records);
  std::vector<double> g1, g2, g3;
  for (int rep = 0; rep < settings.repetitions; ++rep) {
    const auto sc = score_t2m(evaluator, oracle, records, real, settings.batch, settings.div_subset,
                              settings.seed + static_cast<std::uint64_t>(rep));
    g1.push_back(sc.r.top1);
    g2.push_back(sc.r.top2);
    g3.push_back(sc.r.top3);
    if (rep == 0) {
      rows.push_back({"real_mm_dist", sc.mm_dist, 0, 1});
      rows.push_back({"real_diversity", sc.diversity, 0, 1});
    }
  }
  rows.push_back(summarize("real_r_precision_top1", g1));
  rows.push_back(summarize("real_r_precision_top2", g2));
  rows.push_back(summarize("real_r_precision_top3", g3));

  const int mm_captions = std::min<int>(settings.mm_captions, static_cast<int>(records.size()));
  if (mm_captions > 0 && settings.mm_repeats >= 2) {
    std::vector<Features> groups;
    for (int i = 0; i < mm_captions; ++i) {
      std::vector<MotionClip> clips;
      for (int k = 0; k < settings.mm_repeats; ++k) {
        SamplerSettings s = settings.sampler;
        s.seed = settings.seed * 7919ull + static_cast<std::uint64_t>(i * settings.mm_repeats + k);
        const auto& r = records[static_cast<std::size_t>(i)];
        clips.push_back(model.text_to_motion(r.caption, std::min(r.clip.frames, model.config().vae.max_frames), s));
      }
      groups.push_back(evaluator.motion_features(clips));
    }
    rows.push_back({"t2m_multimodality", multimodality(groups), 0, 1});
  }

  const auto cap = score_m2t(model, records, settings.captioner);
  rows.push_back({"m2t_bleu1", cap.bleu1, 0, 1});
  rows.push_back({"m2t_bleu4", cap.bleu4, 0, 1});
  rows.push_back({"m2t_rouge_l", cap.rouge_l, 0, 1});
  rows.push_back({"m2t_class_word_accuracy", cap.class_word_accuracy, 0, 1});
  return rows;
}

template <typename T>
std::vector<double> guidance_sweep(const MotionModel<T>& model, const Evaluator& evaluator,
                                   std::span<const CorpusRecord> records, const std::vector<double>& omegas,
                                   const SamplerSettings& base) {
  const Features ref = evaluator.motion_features(clips_of(records));
  std::vector<double> out;
  for (double omega : omegas) {
    SamplerSettings s = base;
    s.omega = omega;
    out.push_back(fid(ref, evaluator.motion_features(generate_for_records(model, records, s))));
  }
  return out;
}

void write_metric_rows(const std::filesystem::path& path, const std::vector<MetricRow>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "metric,value,ci95,n_rep\n";
  for (const auto& r : rows) out << fmt::format("{},{:.6g},{:.6g},{}\n", r.metric, r.value, r.ci95, r.n_rep);
}

#define BIMOT_INSTANTIATE(T)                                                                                     \
  template std::vector<MotionClip> generate_for_records(const MotionModel<T>&, std::span<const CorpusRecord>,    \
                                                        const SamplerSettings&);                                \
  template CaptionScores score_m2t(const MotionModel<T>&, std::span<const CorpusRecord>, const TextSampler&);   \
  template std::vector<MetricRow> evaluate_model(const MotionModel<T>&, const Evaluator&, const TemplateOracle&, \
                                                 std::span<const CorpusRecord>, const EvalSettings&);           \
  template std::vector<double> guidance_sweep(const MotionModel<T>&, const Evaluator&,                           \
                                              std::span<const CorpusRecord>, const std::vector<double>&,         \
                                              const SamplerSettings&);
BIMOT_INSTANTIATE(float)
BIMOT_INSTANTIATE(double)
#undef BIMOT_INSTANTIATE

}  // namespace bimot
