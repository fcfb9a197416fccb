#pragma once

// Synthetic motion-caption corpus: ten parametric motion primitives rendered as
// 5-joint trajectories, each paired with a templated caption.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bimot/errors.hpp"

namespace bimot {

inline constexpr int kJoints = 5;
inline constexpr int kMotionDims = kJoints * 3;
inline constexpr double kFps = 20.0;

/// Frame-major [frames x dims] trajectory. Joint order: root (absolute),
/// left hand, right hand, left foot, right foot (offsets from the root).
struct MotionClip {
  int frames = 0;
  int dims = kMotionDims;
  double fps = kFps;
  std::vector<double> values;

  double at(int frame, int dim) const { return values[static_cast<std::size_t>(frame * dims + dim)]; }
  double& at(int frame, int dim) { return values[static_cast<std::size_t>(frame * dims + dim)]; }
  // First `n` frames.
  MotionClip prefix(int n) const;
  MotionClip reversed() const;
};

enum class MotionClass { kWalk, kRun, kJump, kCircle, kWave, kKick, kSquat, kClap, kTurn, kPunch };
inline constexpr int kNumClasses = 10;

std::string_view class_name(MotionClass c);
// Throws ContractError for names outside the fixed primitive set.
MotionClass parse_class(std::string_view name);
// Word stem every caption of the class contains ("wav" matches waves/waving).
std::string_view class_stem(MotionClass c);
const std::array<MotionClass, kNumClasses>& all_classes();

/// Real parameters of a primitive. Per class:
///   walk/run  speed m/s, amplitude stride scale, direction heading (rad)
///   jump      speed forward m/s (0 = in place), amplitude apex height m
///   circle    speed m/s, amplitude radius m, direction +1 ccw / -1 cw
///   wave      speed Hz, amplitude sway m, direction +1 left hand / -1 right hand
///   kick      speed kicks/s, amplitude height m, direction +1 left / -1 right foot
///   squat     speed cycles/s, amplitude depth m
///   clap      speed claps/s, amplitude hand spread m
///   turn      speed rad/s, direction +1 left / -1 right
///   punch     speed punches/s, amplitude reach m, direction +1 left / -1 right arm
/// duration is informational (frames / fps).
struct ClipParams {
  double speed = 0.0;
  double amplitude = 0.0;
  double direction = 0.0;
  double duration = 0.0;
};

// Throws ContractError when params fall outside the class's ranges.
void validate_params(MotionClass c, const ClipParams& params);

/// Analytic trajectory plus seeded N(0, jitter^2) noise on every value.
MotionClip generate_clip(MotionClass c, const ClipParams& params, int frames, std::uint64_t seed,
                         double jitter = 0.01);

inline constexpr int kTemplatesPerClass = 3;
// Caption for template `index` in [0, kTemplatesPerClass).
std::string render_caption(MotionClass c, const ClipParams& params, int index);
std::vector<std::string> render_all_captions(MotionClass c, const ClipParams& params);
// Class whose stem occurs as a word prefix in the caption; -1 if none or ambiguous.
int caption_class(std::string_view caption);

struct CorpusRecord {
  std::string id;
  std::string caption;
  MotionClass label = MotionClass::kWalk;
  ClipParams params;
  MotionClip clip;
};

struct CorpusConfig {
  std::uint64_t seed = 1234;
  int count = 1000;
  double train_ratio = 0.8;
  double val_ratio = 0.1;  // test gets the rest
  int min_frames = 16;
  int max_frames = 64;
};

struct Corpus {
  std::vector<CorpusRecord> train, val, test;
};

/// Pure function of the config: stratified classes, fixed per-class splits.
Corpus generate_corpus(const CorpusConfig& config);

// One JSON object per line: {"id","caption","class","params","fps","motion"}.
std::string record_to_json_line(const CorpusRecord& record);
CorpusRecord record_from_json_line(std::string_view line);
void write_jsonl(const std::filesystem::path& path, std::span<const CorpusRecord> records);
std::vector<CorpusRecord> read_jsonl(const std::filesystem::path& path);

/// Corpus-wide per-dimension normalization constants (from the train split).
struct MotionStats {
  std::vector<double> mean;
  std::vector<double> stddev;

  static MotionStats compute(std::span<const CorpusRecord> records);
  MotionClip standardize(const MotionClip& clip) const;
  MotionClip destandardize(const MotionClip& clip) const;
  void save(const std::filesystem::path& path) const;
  static MotionStats load(const std::filesystem::path& path);
};

}  // namespace bimot
