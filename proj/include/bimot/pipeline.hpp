#pragma once

// File layout and the end-to-end steps behind each CLI subcommand.

#include <filesystem>
#include <functional>
#include <optional>
#include <string>

#include "bimot/evaluation.hpp"
#include "bimot/trainer.hpp"
#include "bimot/vae_train.hpp"

namespace bimot {

using LogFn = std::function<void(const std::string&)>;

std::string version_string();

/// Everything lives under one root: corpus/, checkpoints/, metrics/, runs/.
struct Workspace {
  std::filesystem::path root;

  // Empty root: $BIMOT_DATA_DIR, else ./data.
  static Workspace open(const std::filesystem::path& root = {});

  std::filesystem::path split(const std::string& name) const { return root / "corpus" / (name + ".jsonl"); }
  std::filesystem::path stats() const { return root / "corpus" / "stats.json"; }
  std::filesystem::path vocab() const { return root / "corpus" / "vocab.json"; }
  std::filesystem::path vae() const { return root / "checkpoints" / "vae.bin"; }
  std::filesystem::path evaluator() const { return root / "checkpoints" / "evaluator.bin"; }
  std::filesystem::path stage(int n) const { return root / "checkpoints" / ("stage" + std::to_string(n) + ".bin"); }
  std::filesystem::path metrics(const std::string& name) const { return root / "metrics" / (name + ".csv"); }
  std::filesystem::path manifest(const std::string& name) const { return root / "runs" / (name + ".json"); }
};

// Seeds, configs and versions of a run; written before any training step and
// completed with the finish time afterwards.
struct RunManifest {
  std::string command;
  std::uint64_t seed = 0;
  std::vector<std::string> config_paths;
  std::string config;  // effective configuration as JSON
  std::string output;
  std::string version = version_string();
  std::string started;
  std::string finished;

  void write(const std::filesystem::path& path) const;
};

struct CorpusFiles {
  std::vector<CorpusRecord> train, val, test;
  MotionStats stats;
  Vocabulary vocab;

  const std::vector<CorpusRecord>& split(const std::string& name) const;
};

// Captions of every template plus the instruction phrasings.
Vocabulary build_vocabulary(std::span<const CorpusRecord> train);

void gen_data(const Workspace& ws, const CorpusConfig& config, const LogFn& log);
// ConfigError naming the missing file and the subcommand that produces it.
CorpusFiles load_corpus(const Workspace& ws);

// model_config: only the vae section is used here; the whole config is carried
// in the checkpoint for the later stages.
VaeReport run_train_vae(const Workspace& ws, const ModelConfig& model_config, const VaeTrainConfig& config,
                        const LogFn& log);
// Per-joint errors and MSE on a split, written as CSV.
void vae_report(const Workspace& ws, const std::string& split, const std::filesystem::path& out, const LogFn& log);

EvaluatorFit run_train_evaluator(const Workspace& ws, const EvaluatorConfig& config,
                                 const EvaluatorTrainConfig& train, const LogFn& log);
// Loads the evaluator and refuses it (EvaluationError) when its margin is too small.
Evaluator load_fit_evaluator(const Workspace& ws, double min_margin = 0.2);

// Stage 0 starts from the VAE checkpoint, stage n from stage n-1.
StageReport run_train_stage(const Workspace& ws, const StageConfig& config, const LogFn& log,
                            const std::vector<std::string>& config_paths = {});

// Newest stage checkpoint, or the explicit one.
MotionModel<float> load_model(const Workspace& ws, const std::optional<std::filesystem::path>& checkpoint);

std::vector<MetricRow> run_eval(const Workspace& ws, const std::string& split, const EvalSettings& settings,
                                const std::optional<std::filesystem::path>& checkpoint,
                                const std::filesystem::path& out, const LogFn& log);

// Generated motion as a corpus-style JSONL record without class/params.
std::string generated_record_json(const std::string& id, const std::string& caption, const MotionClip& clip);

// SVG line chart of the named numeric columns against the first column.
void plot_csv(const std::filesystem::path& csv, const std::vector<std::string>& columns,
              const std::filesystem::path& out);

}  // namespace bimot
