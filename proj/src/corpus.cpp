#include "bimot/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numbers>
#include <random>
#include <sstream>

namespace bimot {

namespace {

using std::numbers::pi;

constexpr std::array<MotionClass, kNumClasses> kClasses{
    MotionClass::kWalk, MotionClass::kRun,   MotionClass::kJump, MotionClass::kCircle, MotionClass::kWave,
    MotionClass::kKick, MotionClass::kSquat, MotionClass::kClap, MotionClass::kTurn,   MotionClass::kPunch};
constexpr std::array<std::string_view, kNumClasses> kNames{"walk", "run",   "jump", "circle", "wave",
                                                           "kick", "squat", "clap", "turn",   "punch"};
constexpr std::array<std::string_view, kNumClasses> kStems{"walk", "run",   "jump", "circl", "wav",
                                                           "kick", "squat", "clap", "turn",  "punch"};

double uniform(std::mt19937_64& rng, double lo, double hi) {
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

// Body-frame offset (forward, up, left) of one limb joint.
struct Offset {
  double forward = 0, up = 0, left = 0;
};

struct Pose {
  double root[3] = {0, 1.0, 0};
  double yaw = 0;
  // left hand, right hand, left foot, right foot
  Offset limbs[4] = {{0, -0.05, 0.25}, {0, -0.05, -0.25}, {0, -0.95, 0.12}, {0, -0.95, -0.12}};
};

void write_pose(const Pose& p, MotionClip& clip, int frame) {
  for (int k = 0; k < 3; ++k) clip.at(frame, k) = p.root[k];
  const double c = std::cos(p.yaw), s = std::sin(p.yaw);
  for (int j = 0; j < 4; ++j) {
    const Offset& o = p.limbs[j];
    clip.at(frame, 3 + 3 * j + 0) = o.forward * c - o.left * s;
    clip.at(frame, 3 + 3 * j + 1) = o.up;
    clip.at(frame, 3 + 3 * j + 2) = o.forward * s + o.left * c;
  }
}

void gait(Pose& p, double phase, double stride, double lift, double arm_swing) {
  const double sp = std::sin(phase), cp = std::cos(phase);
  p.limbs[2].forward = stride * sp;
  p.limbs[2].up += lift * std::max(0.0, cp);
  p.limbs[3].forward = -stride * sp;
  p.limbs[3].up += lift * std::max(0.0, -cp);
  p.limbs[0].forward = -arm_swing * stride * sp;
  p.limbs[1].forward = arm_swing * stride * sp;
}

// Backward locomotion keeps the body facing forward.
double facing_for(double heading) {
  return std::abs(heading) > 0.75 * pi ? heading - std::copysign(pi, heading) : heading;
}

Pose pose_at(MotionClass c, const ClipParams& q, int frame, int frames) {
  Pose p;
  const double t = frame / kFps;
  const double side = q.direction >= 0 ? 1.0 : -1.0;
  switch (c) {
    case MotionClass::kWalk: {
      const double phase = 2 * pi * (0.8 + 0.5 * q.speed) * t;
      const double backward = std::abs(q.direction) > 0.75 * pi ? -1.0 : 1.0;
      p.root[0] = q.speed * t * std::cos(q.direction);
      p.root[2] = q.speed * t * std::sin(q.direction);
      p.root[1] = 1.0 + 0.02 * std::cos(2 * phase);
      p.yaw = facing_for(q.direction);
      gait(p, backward * phase, 0.15 + 0.25 * q.amplitude, 0.08, 0.6);
      break;
    }
    case MotionClass::kRun: {
      const double phase = 2 * pi * (1.4 + 0.3 * q.speed) * t;
      const double backward = std::abs(q.direction) > 0.75 * pi ? -1.0 : 1.0;
      p.root[0] = q.speed * t * std::cos(q.direction);
      p.root[2] = q.speed * t * std::sin(q.direction);
      p.root[1] = 0.95 + 0.05 * std::abs(std::sin(phase));
      p.yaw = facing_for(q.direction);
      p.limbs[0].up = p.limbs[1].up = 0.1;
      gait(p, backward * phase, 0.3 + 0.2 * q.amplitude, 0.25, 0.8);
      break;
    }
    case MotionClass::kJump: {
      const int apex = std::max(1, (frames - 1) / 2);
      const double u = static_cast<double>(frame - apex) / apex;
      const double bump = std::max(0.0, 1.0 - u * u);
      p.root[0] = q.speed * t;
      p.root[1] = 1.0 + q.amplitude * bump;
      p.limbs[2].up += 0.25 * bump;
      p.limbs[3].up += 0.25 * bump;
      p.limbs[0].up += 0.6 * bump;
      p.limbs[1].up += 0.6 * bump;
      p.limbs[0].forward = p.limbs[1].forward = 0.1 * bump;
      break;
    }
    case MotionClass::kCircle: {
      const double r = q.amplitude, theta = q.speed / r * t;
      p.root[0] = r * std::sin(theta);
      p.root[2] = side * (r - r * std::cos(theta));
      const double phase = 2 * pi * (0.8 + 0.5 * q.speed) * t;
      p.root[1] = 1.0 + 0.02 * std::cos(2 * phase);
      p.yaw = side * theta;
      gait(p, phase, 0.2, 0.08, 0.6);
      break;
    }
    case MotionClass::kWave: {
      Offset& hand = p.limbs[side > 0 ? 0 : 1];
      hand.forward = 0.1;
      hand.up = 0.65 + 0.05 * std::cos(4 * pi * q.speed * t);
      hand.left = side * 0.3 + q.amplitude * std::sin(2 * pi * q.speed * t);
      break;
    }
    case MotionClass::kKick: {
      const double s = std::max(0.0, std::sin(2 * pi * q.speed * t));
      const double b = s * s;
      Offset& foot = p.limbs[side > 0 ? 2 : 3];
      foot.forward = 0.5 * b;
      foot.up += 1.2 * q.amplitude * b;
      p.limbs[0].forward = p.limbs[1].forward = -0.1 * b;
      break;
    }
    case MotionClass::kSquat: {
      const double d = 0.5 * (1.0 - std::cos(2 * pi * q.speed * t));
      p.root[1] = 1.0 - q.amplitude * d;
      p.limbs[2].up += q.amplitude * d;
      p.limbs[3].up += q.amplitude * d;
      p.limbs[0].forward = p.limbs[1].forward = 0.35 * d;
      p.limbs[0].up += 0.3 * d;
      p.limbs[1].up += 0.3 * d;
      break;
    }
    case MotionClass::kClap: {
      const double open = 0.5 * (1.0 + std::cos(2 * pi * q.speed * t));
      p.limbs[0] = {0.35, 0.25, 0.03 + q.amplitude * open};
      p.limbs[1] = {0.35, 0.25, -(0.03 + q.amplitude * open)};
      break;
    }
    case MotionClass::kTurn: {
      p.yaw = side * q.speed * t;
      const double step = std::sin(2 * pi * 1.5 * t);
      p.limbs[2].up += 0.05 * std::max(0.0, step);
      p.limbs[3].up += 0.05 * std::max(0.0, -step);
      break;
    }
    case MotionClass::kPunch: {
      const double s = std::max(0.0, std::sin(2 * pi * q.speed * t));
      Offset& fist = p.limbs[side > 0 ? 0 : 1];
      Offset& guard = p.limbs[side > 0 ? 1 : 0];
      fist = {0.2 + q.amplitude * s, 0.35, side * 0.2 * (1.0 - s)};
      guard = {0.2, 0.35, -side * 0.2};
      break;
    }
  }
  return p;
}

struct Range {
  double lo, hi;
};

void check_range(std::string_view cls, const char* field, double v, Range r) {
  if (!std::isfinite(v) || v < r.lo || v > r.hi) {
    std::ostringstream os;
    os << cls << ": " << field << "=" << v << " outside [" << r.lo << ", " << r.hi << "]";
    throw ContractError(os.str());
  }
}

std::string direction_words(double heading) {
  const double a = std::remainder(heading, 2 * pi);
  if (std::abs(a) <= pi / 4) return "forward";
  if (std::abs(a) >= 3 * pi / 4) return "backward";
  return a > 0 ? "to the left" : "to the right";
}

ClipParams sample_params(MotionClass c, std::mt19937_64& rng) {
  ClipParams q;
  const bool first = rng() % 2 == 0;
  const bool second = rng() % 2 == 0;
  const double side = second ? 1.0 : -1.0;
  switch (c) {
    case MotionClass::kWalk: {
      static constexpr double dirs[] = {0.0, pi, pi / 2, -pi / 2};
      q.direction = dirs[rng() % 4];
      q.speed = first ? uniform(rng, 0.5, 0.7) : uniform(rng, 1.2, 1.5);
      q.amplitude = uniform(rng, 0.4, 0.6);
      break;
    }
    case MotionClass::kRun: {
      static constexpr double dirs[] = {0.0, pi / 2, -pi / 2};
      q.direction = dirs[rng() % 3];
      q.speed = first ? uniform(rng, 2.0, 2.4) : uniform(rng, 3.4, 4.0);
      q.amplitude = uniform(rng, 0.4, 0.6);
      break;
    }
    case MotionClass::kJump:
      q.speed = first ? 0.0 : uniform(rng, 0.5, 0.8);
      q.amplitude = second ? uniform(rng, 0.15, 0.25) : uniform(rng, 0.45, 0.6);
      break;
    case MotionClass::kCircle:
      q.speed = uniform(rng, 0.7, 0.9);
      q.amplitude = first ? uniform(rng, 0.4, 0.6) : uniform(rng, 1.2, 1.6);
      q.direction = side;
      break;
    case MotionClass::kWave:
      q.speed = uniform(rng, 1.3, 1.7);
      q.amplitude = first ? uniform(rng, 0.08, 0.12) : uniform(rng, 0.25, 0.35);
      q.direction = side;
      break;
    case MotionClass::kKick:
      q.speed = uniform(rng, 0.8, 1.2);
      q.amplitude = first ? uniform(rng, 0.2, 0.3) : uniform(rng, 0.6, 0.8);
      q.direction = side;
      break;
    case MotionClass::kSquat:
      q.speed = first ? uniform(rng, 0.4, 0.5) : uniform(rng, 0.9, 1.1);
      q.amplitude = second ? uniform(rng, 0.15, 0.25) : uniform(rng, 0.4, 0.5);
      break;
    case MotionClass::kClap:
      q.speed = first ? uniform(rng, 0.8, 1.2) : uniform(rng, 2.2, 2.8);
      q.amplitude = uniform(rng, 0.2, 0.3);
      break;
    case MotionClass::kTurn:
      q.speed = first ? uniform(rng, 1.0, 1.4) : uniform(rng, 2.6, 3.2);
      q.direction = side;
      break;
    case MotionClass::kPunch:
      q.speed = first ? uniform(rng, 0.8, 1.1) : uniform(rng, 1.8, 2.2);
      q.amplitude = uniform(rng, 0.4, 0.5);
      q.direction = side;
      break;
  }
  return q;
}

}  // namespace

MotionClip MotionClip::prefix(int n) const {
  if (n < 1 || n > frames) throw ContractError("prefix length " + std::to_string(n) + " outside clip");
  MotionClip out{n, dims, fps, {}};
  out.values.assign(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(n * dims));
  return out;
}

MotionClip MotionClip::reversed() const {
  MotionClip out = *this;
  for (int f = 0; f < frames; ++f)
    for (int d = 0; d < dims; ++d) out.at(f, d) = at(frames - 1 - f, d);
  return out;
}

std::string_view class_name(MotionClass c) { return kNames[static_cast<int>(c)]; }
std::string_view class_stem(MotionClass c) { return kStems[static_cast<int>(c)]; }
const std::array<MotionClass, kNumClasses>& all_classes() { return kClasses; }

MotionClass parse_class(std::string_view name) {
  for (int i = 0; i < kNumClasses; ++i) {
    if (kNames[i] == name) return kClasses[i];
  }
  throw ContractError("unknown motion class '" + std::string(name) + "'");
}

void validate_params(MotionClass c, const ClipParams& q) {
  const auto n = class_name(c);
  const Range heading{-pi - 1e-9, pi + 1e-9};
  const Range sense{-1.0, 1.0};
  switch (c) {
    case MotionClass::kWalk:
      check_range(n, "speed", q.speed, {0, 2});
      check_range(n, "amplitude", q.amplitude, {0, 1});
      check_range(n, "direction", q.direction, heading);
      break;
    case MotionClass::kRun:
      check_range(n, "speed", q.speed, {0, 5});
      check_range(n, "amplitude", q.amplitude, {0, 1});
      check_range(n, "direction", q.direction, heading);
      break;
    case MotionClass::kJump:
      check_range(n, "speed", q.speed, {0, 2});
      check_range(n, "amplitude", q.amplitude, {0, 1});
      break;
    case MotionClass::kCircle:
      check_range(n, "speed", q.speed, {0, 2});
      check_range(n, "amplitude", q.amplitude, {0.1, 3});
      check_range(n, "direction", q.direction, sense);
      break;
    case MotionClass::kWave:
      check_range(n, "speed", q.speed, {0, 4});
      check_range(n, "amplitude", q.amplitude, {0, 0.6});
      check_range(n, "direction", q.direction, sense);
      break;
    case MotionClass::kKick:
      check_range(n, "speed", q.speed, {0, 3});
      check_range(n, "amplitude", q.amplitude, {0, 1});
      check_range(n, "direction", q.direction, sense);
      break;
    case MotionClass::kSquat:
      check_range(n, "speed", q.speed, {0, 3});
      check_range(n, "amplitude", q.amplitude, {0, 0.8});
      break;
    case MotionClass::kClap:
      check_range(n, "speed", q.speed, {0, 4});
      check_range(n, "amplitude", q.amplitude, {0, 0.5});
      break;
    case MotionClass::kTurn:
      check_range(n, "speed", q.speed, {0, 6});
      check_range(n, "direction", q.direction, sense);
      break;
    case MotionClass::kPunch:
      check_range(n, "speed", q.speed, {0, 4});
      check_range(n, "amplitude", q.amplitude, {0, 0.7});
      check_range(n, "direction", q.direction, sense);
      break;
  }
}

MotionClip generate_clip(MotionClass c, const ClipParams& params, int frames, std::uint64_t seed, double jitter) {
  validate_params(c, params);
  if (frames < 2) throw ContractError("generate_clip: need at least 2 frames, got " + std::to_string(frames));
  MotionClip clip{frames, kMotionDims, kFps, std::vector<double>(static_cast<std::size_t>(frames * kMotionDims))};
  for (int f = 0; f < frames; ++f) write_pose(pose_at(c, params, f, frames), clip, f);
  if (jitter > 0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, jitter);
    for (auto& v : clip.values) v += noise(rng);
  }
  return clip;
}

std::string render_caption(MotionClass c, const ClipParams& q, int index) {
  if (index < 0 || index >= kTemplatesPerClass) throw ContractError("caption template index out of range");
  const std::string side = q.direction >= 0 ? "left" : "right";
  auto pick = [index](std::string a, std::string b, std::string c3) {
    return index == 0 ? a : index == 1 ? b : c3;
  };
  switch (c) {
    case MotionClass::kWalk: {
      const std::string d = direction_words(q.direction), s = q.speed < 1.0 ? "slowly" : "quickly";
      return pick("a person walks " + d + " " + s, "someone is walking " + d + " " + s,
                  "a person " + s + " walks " + d);
    }
    case MotionClass::kRun: {
      const std::string d = direction_words(q.direction), s = q.speed < 3.0 ? "slowly" : "quickly";
      return pick("a person runs " + d + " " + s, "someone is running " + d + " " + s, "a person " + s + " runs " + d);
    }
    case MotionClass::kJump: {
      const bool low = q.amplitude < 0.35;
      const std::string h = low ? "a little" : "high", adj = low ? "small" : "high";
      const std::string where = q.speed < 0.2 ? "in place" : "forward";
      return pick("a person jumps " + h + " " + where, "someone is jumping " + where + " " + h,
                  "a person does a " + adj + " jump " + where);
    }
    case MotionClass::kCircle: {
      const std::string size = q.amplitude < 0.9 ? "small" : "large";
      const std::string sense = q.direction > 0 ? "counterclockwise" : "clockwise";
      return pick("a person moves in a " + size + " circle " + sense,
                  "someone goes around in a " + size + " circle " + sense,
                  "a person circles " + sense + " in a " + size + " loop");
    }
    case MotionClass::kWave: {
      const std::string m = q.amplitude < 0.2 ? "gently" : "widely";
      return pick("a person waves the " + side + " hand " + m, "someone is waving with the " + side + " hand " + m,
                  "a person " + m + " waves the " + side + " hand");
    }
    case MotionClass::kKick: {
      const std::string h = q.amplitude < 0.45 ? "low" : "high";
      return pick("a person kicks " + h + " with the " + side + " foot",
                  "someone does a " + h + " kick with the " + side + " foot",
                  "a person is kicking " + h + " using the " + side + " foot");
    }
    case MotionClass::kSquat: {
      const std::string d = q.amplitude < 0.33 ? "slightly" : "deeply", s = q.speed < 0.7 ? "slowly" : "quickly";
      return pick("a person squats " + d + " " + s, "someone squats down " + d + " " + s,
                  "a person " + s + " squats " + d);
    }
    case MotionClass::kClap: {
      const std::string s = q.speed < 1.7 ? "slowly" : "quickly";
      return pick("a person claps " + s, "someone is clapping hands " + s, "a person " + s + " claps the hands");
    }
    case MotionClass::kTurn: {
      const std::string s = q.speed < 2.0 ? "slowly" : "quickly";
      return pick("a person turns to the " + side + " " + s, "someone is turning " + side + " " + s,
                  "a person " + s + " turns around to the " + side);
    }
    case MotionClass::kPunch: {
      const std::string s = q.speed < 1.5 ? "slowly" : "quickly";
      return pick("a person punches with the " + side + " arm " + s,
                  "someone throws punches with the " + side + " fist " + s,
                  "a person is punching " + s + " with the " + side + " hand");
    }
  }
  throw ContractError("unhandled motion class");
}

std::vector<std::string> render_all_captions(MotionClass c, const ClipParams& params) {
  std::vector<std::string> out;
  for (int i = 0; i < kTemplatesPerClass; ++i) out.push_back(render_caption(c, params, i));
  return out;
}

int caption_class(std::string_view caption) {
  int found = -1;
  std::istringstream words{std::string(caption)};
  std::string w;
  while (words >> w) {
    for (int i = 0; i < kNumClasses; ++i) {
      if (!w.starts_with(kStems[i])) continue;
      if (found >= 0 && found != i) return -1;
      found = i;
    }
  }
  return found;
}

Corpus generate_corpus(const CorpusConfig& config) {
  if (config.count < 10 * kNumClasses) {
    throw ConfigError("corpus size must be at least " + std::to_string(10 * kNumClasses));
  }
  if (config.min_frames < 2 || config.max_frames < config.min_frames) {
    throw ConfigError("invalid frame bounds");
  }
  std::mt19937_64 rng(config.seed);
  std::vector<int> labels(static_cast<std::size_t>(config.count));
  for (int i = 0; i < config.count; ++i) labels[i] = i % kNumClasses;
  std::shuffle(labels.begin(), labels.end(), rng);

  std::array<std::vector<CorpusRecord>, kNumClasses> by_class;
  for (int i = 0; i < config.count; ++i) {
    CorpusRecord r;
    char id[16];
    std::snprintf(id, sizeof id, "m%05d", i);
    r.id = id;
    r.label = kClasses[labels[i]];
    r.params = sample_params(r.label, rng);
    const int span = config.max_frames - config.min_frames + 1;
    const int frames = config.min_frames + static_cast<int>(rng() % static_cast<std::uint64_t>(span));
    r.params.duration = frames / kFps;
    const int tmpl = static_cast<int>(rng() % kTemplatesPerClass);
    r.caption = render_caption(r.label, r.params, tmpl);
    r.clip = generate_clip(r.label, r.params, frames, rng());
    by_class[labels[i]].push_back(std::move(r));
  }

  Corpus corpus;
  for (auto& records : by_class) {
    const auto n = static_cast<double>(records.size());
    const auto n_train = static_cast<std::size_t>(std::lround(n * config.train_ratio));
    const auto n_val = static_cast<std::size_t>(std::lround(n * config.val_ratio));
    for (std::size_t i = 0; i < records.size(); ++i) {
      auto& dst = i < n_train ? corpus.train : i < n_train + n_val ? corpus.val : corpus.test;
      dst.push_back(std::move(records[i]));
    }
  }
  auto by_id = [](const CorpusRecord& a, const CorpusRecord& b) { return a.id < b.id; };
  std::sort(corpus.train.begin(), corpus.train.end(), by_id);
  std::sort(corpus.val.begin(), corpus.val.end(), by_id);
  std::sort(corpus.test.begin(), corpus.test.end(), by_id);
  return corpus;
}

std::string record_to_json_line(const CorpusRecord& r) {
  nlohmann::ordered_json j;
  j["id"] = r.id;
  j["caption"] = r.caption;
  j["class"] = class_name(r.label);
  j["params"] = {{"speed", r.params.speed},
                 {"amplitude", r.params.amplitude},
                 {"direction", r.params.direction},
                 {"duration", r.params.duration}};
  j["fps"] = r.clip.fps;
  auto motion = nlohmann::ordered_json::array();
  for (int f = 0; f < r.clip.frames; ++f) {
    auto row = nlohmann::ordered_json::array();
    for (int d = 0; d < r.clip.dims; ++d) row.push_back(r.clip.at(f, d));
    motion.push_back(std::move(row));
  }
  j["motion"] = std::move(motion);
  return j.dump();
}

CorpusRecord record_from_json_line(std::string_view line) {
  const auto j = nlohmann::json::parse(line);
  CorpusRecord r;
  r.id = j.value("id", std::string());
  r.caption = j.value("caption", std::string());
  if (j.contains("class")) r.label = parse_class(j.at("class").get<std::string>());
  if (j.contains("params")) {
    const auto& p = j.at("params");
    r.params.speed = p.value("speed", 0.0);
    r.params.amplitude = p.value("amplitude", 0.0);
    r.params.direction = p.value("direction", 0.0);
    r.params.duration = p.value("duration", 0.0);
  }
  r.clip.fps = j.value("fps", kFps);
  const auto& motion = j.at("motion");
  r.clip.frames = static_cast<int>(motion.size());
  if (r.clip.frames == 0) throw DataError("record " + r.id + " has no motion frames");
  r.clip.dims = static_cast<int>(motion.at(0).size());
  for (const auto& row : motion) {
    if (static_cast<int>(row.size()) != r.clip.dims) throw DataError("record " + r.id + " has ragged motion rows");
    for (const auto& v : row) {
      const double x = v.get<double>();
      if (!std::isfinite(x)) throw DataError("record " + r.id + " has non-finite motion values");
      r.clip.values.push_back(x);
    }
  }
  return r;
}

void write_jsonl(const std::filesystem::path& path, std::span<const CorpusRecord> records) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  for (const auto& r : records) out << record_to_json_line(r) << '\n';
}

std::vector<CorpusRecord> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::vector<CorpusRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(record_from_json_line(line));
  }
  return out;
}

MotionStats MotionStats::compute(std::span<const CorpusRecord> records) {
  if (records.empty()) throw DataError("motion statistics need at least one record");
  const int dims = records.front().clip.dims;
  std::vector<double> sum(dims, 0.0), sq(dims, 0.0);
  double count = 0;
  for (const auto& r : records) {
    for (int f = 0; f < r.clip.frames; ++f) {
      for (int d = 0; d < dims; ++d) {
        sum[d] += r.clip.at(f, d);
        sq[d] += r.clip.at(f, d) * r.clip.at(f, d);
      }
      count += 1;
    }
  }
  MotionStats s;
  for (int d = 0; d < dims; ++d) {
    const double m = sum[d] / count;
    s.mean.push_back(m);
    s.stddev.push_back(std::sqrt(std::max(sq[d] / count - m * m, 1e-12)));
  }
  return s;
}

MotionClip MotionStats::standardize(const MotionClip& clip) const {
  MotionClip out = clip;
  for (int f = 0; f < clip.frames; ++f)
    for (int d = 0; d < clip.dims; ++d) out.at(f, d) = (clip.at(f, d) - mean[d]) / stddev[d];
  return out;
}

MotionClip MotionStats::destandardize(const MotionClip& clip) const {
  MotionClip out = clip;
  for (int f = 0; f < clip.frames; ++f)
    for (int d = 0; d < clip.dims; ++d) out.at(f, d) = clip.at(f, d) * stddev[d] + mean[d];
  return out;
}

void MotionStats::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << nlohmann::json{{"mean", mean}, {"std", stddev}}.dump(2) << '\n';
}

MotionStats MotionStats::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read motion statistics " + path.string());
  const auto j = nlohmann::json::parse(in);
  return {j.at("mean").get<std::vector<double>>(), j.at("std").get<std::vector<double>>()};
}

}  // namespace bimot
