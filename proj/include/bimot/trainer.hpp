#pragma once

// Stage schedule: 0 text pretraining, 1 text-to-motion with the text branch
// frozen, 2 adds captioning and prediction, 3 joint instruction tuning.

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "bimot/model.hpp"
#include "bimot/optim.hpp"

namespace bimot {

struct TaskMixture {
  double text = 0;  // "<bos> caption <eos>" language modelling
  double t2m = 0;
  double m2t = 0;
  double predict = 0;
  double plain_text = 0;

  double total() const { return text + t2m + m2t + predict + plain_text; }
};

struct StageConfig {
  int stage = 1;
  TaskMixture mixture;
  // Backbone group prefixes with gradients switched off.
  std::vector<std::string> frozen_groups;
  double backbone_lr = 2e-4;
  double diffusion_lr = 1e-4;
  double weight_decay = 0.01;
  int batch = 32;
  int steps = 2000;
  double warmup_frac = 0.05;
  double clip_norm = 1.0;
  double diffusion_weight = 1.0;
  double predict_prefix = 0.5;
  int eval_every = 250;
  int val_examples = 96;
  std::uint64_t seed = 11;
  std::filesystem::path metrics_csv;

  static StageConfig defaults(int stage);
  std::string to_json() const;
  static StageConfig from_json(const std::string& text, int stage);
  static StageConfig load(const std::filesystem::path& path, int stage);
};

// Per-record training material, precomputed once with the frozen VAE.
struct TrainingItem {
  std::string id;
  MotionClass label = MotionClass::kWalk;
  std::string caption;
  std::vector<std::string> captions;  // every template rendering of the record
  std::vector<double> latent;         // standardized, whole clip
  std::vector<double> prefix_latent;  // standardized, first part of the clip
  int frames = 0;
};

template <typename T>
std::vector<TrainingItem> prepare_items(const MotionModel<T>& model, std::span<const CorpusRecord> records,
                                        double prefix_ratio = 0.5);

struct TrainingExample {
  Instruction instruction;
  std::vector<double> target;  // diffusion target when the instruction has a motion output block
};

TrainingExample make_example(const Vocabulary& vocab, Task task, const TrainingItem& item, int holders, Rng& rng);
// A "text" draw becomes a plain caption sequence.
std::vector<TrainingExample> sample_batch(const Vocabulary& vocab, std::span<const TrainingItem> items,
                                          const TaskMixture& mixture, int batch, int holders, Rng& rng);

template <typename T>
struct BatchLoss {
  Tensor<T> total;
  Tensor<T> ce;         // undefined when no text position is supervised
  Tensor<T> diffusion;  // undefined when no example emits motion
  Tensor<T> logits;     // backbone text logits, kept for gradient inspection
  std::vector<int> targets;
  std::vector<std::uint8_t> mask;  // per logits row
};

// CE over masked text positions plus diffusion_weight * diffusion loss over
// examples with an output block. Throws EmptyLossError if neither term exists.
template <typename T>
BatchLoss<T> compose_losses(const MotionModel<T>& model, std::span<const TrainingExample> batch, Rng& rng,
                            double p_drop, double diffusion_weight = 1.0);

struct FreezeReport {
  bool ok = true;
  std::size_t frozen_params = 0;
  std::vector<std::string> violations;
};

// Every parameter in a frozen group must be non-trainable with an absent or all-zero gradient.
template <typename T>
FreezeReport verify_freeze(const ParamStore<T>& store, const std::vector<std::string>& frozen_groups);

struct StageReport {
  int steps = 0;
  int skipped = 0;
  double best_val = 0;
  int best_step = 0;
  double seconds = 0;
  int freeze_checks = 0;
  std::vector<std::string> freeze_violations;
  std::vector<double> losses;
};

template <typename T>
class StageTrainer {
 public:
  StageTrainer(MotionModel<T>& model, StageConfig config);

  const StageConfig& config() const { return config_; }
  int step() const { return step_; }

  // One optimizer step on a freshly sampled batch; returns the loss, NaN if the batch was skipped.
  double train_step(std::span<const TrainingItem> train);
  double validate(std::span<const TrainingItem> val) const;
  const FreezeReport& last_freeze() const { return freeze_; }

  // Model, optimizer moments and step counter.
  void save_checkpoint(const std::filesystem::path& path, std::map<std::string, std::string> metadata = {}) const;
  void resume(const std::filesystem::path& path);

 private:
  void apply_freeze();

  MotionModel<T>& model_;
  StageConfig config_;
  AdamW<T> backbone_opt_, diffusion_opt_;
  int step_ = 0;
  FreezeReport freeze_;
};

// Trains to config.steps, keeping the best validation snapshot; the model ends
// on that snapshot. Checkpoints go to best_path when given.
template <typename T>
StageReport run_stage(StageTrainer<T>& trainer, MotionModel<T>& model, std::span<const TrainingItem> train,
                      std::span<const TrainingItem> val, const std::filesystem::path& best_path,
                      const std::function<void(const std::string&)>& log);

}  // namespace bimot
