#include "bimot/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fmt/format.h>
#include <fstream>
#include <json.hpp>
#include <sstream>

namespace bimot {

using nlohmann::json;
namespace fs = std::filesystem;

#ifndef BIMOT_VERSION
#define BIMOT_VERSION "0.1.0"
#endif

std::string version_string() { return BIMOT_VERSION; }

namespace {

std::string now_utc() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void require_file(const fs::path& path, const std::string& what, const std::string& producer) {
  if (!fs::exists(path)) {
    throw ConfigError(fmt::format("missing {} at {}; run `bimot {}` first", what, path.string(), producer));
  }
}

void fresh_log(const fs::path& path) {
  if (!path.empty() && fs::exists(path)) fs::remove(path);
}

MotionVae<float> load_vae(const fs::path& path, ModelConfig* model_config) {
  const auto a = ArrayArchive::load(path);
  if (!a.metadata().contains("model_config")) throw DataError(path.string() + " is not a VAE checkpoint");
  const ModelConfig mc = ModelConfig::from_json(a.metadata().at("model_config"));
  MotionVae<float> vae(mc.vae, 0);
  vae.params().load_from(a);
  if (model_config) *model_config = mc;
  return vae;
}

MotionClip vae_input(const MotionClip& raw, const MotionStats& stats, int max_frames) {
  MotionClip c = stats.standardize(raw);
  return c.frames > max_frames ? c.prefix(max_frames) : c;
}

}  // namespace

Workspace Workspace::open(const fs::path& root) {
  if (!root.empty()) return {root};
  if (const char* env = std::getenv("BIMOT_DATA_DIR"); env && *env) return {fs::path(env)};
  return {fs::path("data")};
}

void RunManifest::write(const fs::path& path) const {
  json j{{"command", command},
         {"seed", seed},
         {"config_paths", config_paths},
         {"config", config.empty() ? json(nullptr) : json::parse(config)},
         {"output", output},
         {"version", version},
         {"started", started},
         {"finished", finished.empty() ? json(nullptr) : json(finished)}};
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write manifest " + path.string());
  out << j.dump(2) << "\n";
}

const std::vector<CorpusRecord>& CorpusFiles::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  throw ConfigError("unknown split '" + name + "' (expected train, val or test)");
}

Vocabulary build_vocabulary(std::span<const CorpusRecord> train) {
  std::vector<std::string> texts = instruction_phrases();
  for (const auto& r : train) {
    for (const auto& c : render_all_captions(r.label, r.params)) texts.push_back(c);
  }
  return Vocabulary::build(texts);
}

void gen_data(const Workspace& ws, const CorpusConfig& config, const LogFn& log) {
  RunManifest m;
  m.command = "gen-data";
  m.seed = config.seed;
  m.config = json{{"seed", config.seed},
                  {"count", config.count},
                  {"train_ratio", config.train_ratio},
                  {"val_ratio", config.val_ratio},
                  {"min_frames", config.min_frames},
                  {"max_frames", config.max_frames}}
                 .dump();
  m.output = (ws.root / "corpus").string();
  m.started = now_utc();
  m.write(ws.manifest("gen-data"));
  const Corpus corpus = generate_corpus(config);
  write_jsonl(ws.split("train"), corpus.train);
  write_jsonl(ws.split("val"), corpus.val);
  write_jsonl(ws.split("test"), corpus.test);
  MotionStats::compute(corpus.train).save(ws.stats());
  const Vocabulary vocab = build_vocabulary(corpus.train);
  vocab.save(ws.vocab());
  if (log) {
    log(fmt::format("corpus: {} train / {} val / {} test records, vocabulary {} words -> {}", corpus.train.size(),
                    corpus.val.size(), corpus.test.size(), vocab.size(), m.output));
  }
  m.finished = now_utc();
  m.write(ws.manifest("gen-data"));
}

CorpusFiles load_corpus(const Workspace& ws) {
  for (const auto& name : {"train", "val", "test"}) require_file(ws.split(name), std::string(name) + " split", "gen-data");
  require_file(ws.stats(), "motion statistics", "gen-data");
  require_file(ws.vocab(), "vocabulary", "gen-data");
  CorpusFiles c;
  c.train = read_jsonl(ws.split("train"));
  c.val = read_jsonl(ws.split("val"));
  c.test = read_jsonl(ws.split("test"));
  c.stats = MotionStats::load(ws.stats());
  c.vocab = Vocabulary::load(ws.vocab());
  return c;
}

VaeReport run_train_vae(const Workspace& ws, const ModelConfig& model_config, const VaeTrainConfig& config,
                        const LogFn& log) {
  const CorpusFiles corpus = load_corpus(ws);
  ModelConfig mc = model_config;
  mc.link(corpus.vocab);
  VaeTrainConfig tc = config;
  if (tc.metrics_csv.empty()) tc.metrics_csv = ws.metrics("vae");
  fresh_log(tc.metrics_csv);

  RunManifest m;
  m.command = "train-vae";
  m.seed = tc.seed;
  m.config = json{{"model", json::parse(mc.to_json())},
                  {"steps", tc.steps},
                  {"batch", tc.batch},
                  {"lr", tc.lr},
                  {"final_lr_frac", tc.final_lr_frac},
                  {"crop_prob", tc.crop_prob}}
                 .dump();
  m.output = ws.vae().string();
  m.started = now_utc();
  m.write(ws.manifest("train-vae"));

  MotionVae<float> vae(mc.vae, tc.seed);
  std::vector<MotionClip> train, val;
  for (const auto& r : corpus.train) train.push_back(vae_input(r.clip, corpus.stats, mc.vae.max_frames));
  for (const auto& r : corpus.val) val.push_back(vae_input(r.clip, corpus.stats, mc.vae.max_frames));
  const VaeReport report = train_vae(vae, train, val, tc, log);

  ArrayArchive a;
  vae.params().save_to(a);
  a.metadata()["model_config"] = mc.to_json();
  a.metadata()["val_mse"] = fmt::format("{:.17g}", report.val_mse);
  a.metadata()["best_step"] = std::to_string(report.best_step);
  fs::create_directories(ws.vae().parent_path());
  a.save(ws.vae());
  m.finished = now_utc();
  m.write(ws.manifest("train-vae"));
  return report;
}

void vae_report(const Workspace& ws, const std::string& split, const fs::path& out, const LogFn& log) {
  const CorpusFiles corpus = load_corpus(ws);
  require_file(ws.vae(), "VAE checkpoint", "train-vae");
  ModelConfig mc;
  const MotionVae<float> vae = load_vae(ws.vae(), &mc);
  std::vector<MotionClip> clips;
  for (const auto& r : corpus.split(split)) clips.push_back(vae_input(r.clip, corpus.stats, mc.vae.max_frames));
  const double mse = vae_reconstruction_mse(vae, clips);
  const auto joints = vae_joint_errors(vae, clips);
  static const char* names[] = {"root", "left_hand", "right_hand", "left_foot", "right_foot"};
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  std::ofstream f(out);
  if (!f) throw ConfigError("cannot write " + out.string());
  f << "metric,value\n" << fmt::format("mse,{:.6g}\n", mse);
  for (std::size_t j = 0; j < joints.size(); ++j) {
    f << fmt::format("l2_{},{:.6g}\n", j < 5 ? names[j] : std::to_string(j).c_str(), joints[j]);
  }
  if (log) log(fmt::format("{} reconstruction MSE {:.4f} (standardized) over {} clips -> {}", split, mse, clips.size(),
                           out.string()));
}

EvaluatorFit run_train_evaluator(const Workspace& ws, const EvaluatorConfig& config,
                                 const EvaluatorTrainConfig& train, const LogFn& log) {
  const CorpusFiles corpus = load_corpus(ws);
  EvaluatorTrainConfig tc = train;
  if (tc.metrics_csv.empty()) tc.metrics_csv = ws.metrics("evaluator");
  fresh_log(tc.metrics_csv);
  RunManifest m;
  m.command = "train-evaluator";
  m.seed = tc.seed;
  m.config = json{{"embed", config.embed},
                  {"width", config.width},
                  {"layers", config.layers},
                  {"temperature", config.temperature},
                  {"steps", tc.steps},
                  {"batch", tc.batch},
                  {"lr", tc.lr},
                  {"shuffle_pairs", tc.shuffle_pairs}}
                 .dump();
  m.output = ws.evaluator().string();
  m.started = now_utc();
  m.write(ws.manifest("train-evaluator"));
  Evaluator e(config, corpus.vocab, corpus.stats, tc.seed);
  const EvaluatorFit fit = train_evaluator(e, corpus.train, corpus.val, tc, log);
  e.save(ws.evaluator(), fit);
  m.finished = now_utc();
  m.write(ws.manifest("train-evaluator"));
  if (log) {
    log(fmt::format("evaluator: matched cosine {:.3f}, mismatched {:.3f}, margin {:.3f}", fit.matched_cosine,
                    fit.mismatched_cosine, fit.margin()));
  }
  return fit;
}

Evaluator load_fit_evaluator(const Workspace& ws, double min_margin) {
  require_file(ws.evaluator(), "trained evaluator", "train-evaluator");
  EvaluatorFit fit;
  Evaluator e = Evaluator::load(ws.evaluator(), &fit);
  require_fit(fit, min_margin);
  return e;
}

StageReport run_train_stage(const Workspace& ws, const StageConfig& config, const LogFn& log,
                            const std::vector<std::string>& config_paths) {
  const CorpusFiles corpus = load_corpus(ws);
  StageConfig sc = config;
  if (sc.metrics_csv.empty()) sc.metrics_csv = ws.metrics("stage" + std::to_string(sc.stage));
  const fs::path source = sc.stage == 0 ? ws.vae() : ws.stage(sc.stage - 1);
  require_file(source, sc.stage == 0 ? "VAE checkpoint" : fmt::format("stage {} checkpoint", sc.stage - 1),
               sc.stage == 0   ? "train-vae"
               : sc.stage == 1 ? "train-text"
                               : fmt::format("train --stage {}", sc.stage - 1));
  fresh_log(sc.metrics_csv);

  RunManifest m;
  m.command = sc.stage == 0 ? "train-text" : fmt::format("train --stage {}", sc.stage);
  m.seed = sc.seed;
  m.config_paths = config_paths;
  m.config = sc.to_json();
  m.output = ws.stage(sc.stage).string();
  m.started = now_utc();
  m.write(ws.manifest("stage" + std::to_string(sc.stage)));

  std::optional<MotionModel<float>> model;
  if (sc.stage == 0) {
    ModelConfig mc;
    const MotionVae<float> vae = load_vae(source, &mc);
    mc.link(corpus.vocab);
    model.emplace(mc, corpus.vocab, corpus.stats, sc.seed);
    ArrayArchive vae_params;
    vae.params().save_to(vae_params);
    model->vae().params().load_from(vae_params);
    std::vector<std::vector<double>> means;
    for (const auto& r : corpus.train) {
      means.push_back(model->vae().encode_mean(vae_input(r.clip, corpus.stats, mc.vae.max_frames)));
    }
    model->set_latent_stats(LatentStats::compute(means));
  } else {
    model.emplace(MotionModel<float>::load(source));
  }
  const auto train = prepare_items(*model, corpus.train, sc.predict_prefix);
  const auto val = prepare_items(*model, corpus.val, sc.predict_prefix);
  StageTrainer<float> trainer(*model, sc);
  const StageReport report = run_stage(trainer, *model, train, val, ws.stage(sc.stage), log);
  m.finished = now_utc();
  m.write(ws.manifest("stage" + std::to_string(sc.stage)));
  if (!report.freeze_violations.empty()) {
    throw ContractError("frozen parameters changed: " + report.freeze_violations.front());
  }
  return report;
}

MotionModel<float> load_model(const Workspace& ws, const std::optional<fs::path>& checkpoint) {
  if (checkpoint) {
    require_file(*checkpoint, "model checkpoint", "train");
    return MotionModel<float>::load(*checkpoint);
  }
  for (int s = 3; s >= 0; --s) {
    if (fs::exists(ws.stage(s))) return MotionModel<float>::load(ws.stage(s));
  }
  throw ConfigError("no trained model under " + (ws.root / "checkpoints").string() +
                    "; run `bimot train --stage 1` first");
}

std::vector<MetricRow> run_eval(const Workspace& ws, const std::string& split, const EvalSettings& settings,
                                const std::optional<fs::path>& checkpoint, const fs::path& out, const LogFn& log) {
  const CorpusFiles corpus = load_corpus(ws);
  const auto& records = corpus.split(split);
  const Evaluator evaluator = load_fit_evaluator(ws);
  const auto model = load_model(ws, checkpoint);
  const TemplateOracle oracle(corpus.train, corpus.stats);
  const auto rows = evaluate_model(model, evaluator, oracle, records, settings);
  const fs::path path = out.empty() ? ws.metrics("eval_" + split) : out;
  write_metric_rows(path, rows);
  if (log) {
    for (const auto& r : rows) {
      log(r.n_rep > 1 ? fmt::format("{:28s} {:9.4f} ± {:.4f}", r.metric, r.value, r.ci95)
                      : fmt::format("{:28s} {:9.4f}", r.metric, r.value));
    }
    log("metrics -> " + path.string());
  }
  return rows;
}

std::string generated_record_json(const std::string& id, const std::string& caption, const MotionClip& clip) {
  nlohmann::ordered_json j;
  j["id"] = id;
  j["caption"] = caption;
  j["fps"] = clip.fps;
  auto motion = nlohmann::ordered_json::array();
  for (int f = 0; f < clip.frames; ++f) {
    auto row = nlohmann::ordered_json::array();
    for (int d = 0; d < clip.dims; ++d) row.push_back(clip.at(f, d));
    motion.push_back(std::move(row));
  }
  j["motion"] = std::move(motion);
  return j.dump();
}

void plot_csv(const fs::path& csv, const std::vector<std::string>& columns, const fs::path& out) {
  std::ifstream in(csv);
  if (!in) throw ConfigError("cannot read " + csv.string());
  auto split_line = [](const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
  };
  std::string line;
  if (!std::getline(in, line)) throw DataError(csv.string() + " is empty");
  const auto header = split_line(line);
  std::vector<std::size_t> idx;
  std::vector<std::string> names = columns;
  if (names.empty()) names.assign(header.begin() + 1, header.end());
  for (const auto& n : names) {
    const auto it = std::find(header.begin(), header.end(), n);
    if (it == header.end()) throw ConfigError("column '" + n + "' not in " + csv.string());
    idx.push_back(static_cast<std::size_t>(it - header.begin()));
  }
  std::vector<std::vector<std::pair<double, double>>> series(idx.size());
  while (std::getline(in, line)) {
    const auto cells = split_line(line);
    if (cells.empty()) continue;
    char* end = nullptr;
    const double x = std::strtod(cells[0].c_str(), &end);
    if (end == cells[0].c_str()) continue;
    for (std::size_t s = 0; s < idx.size(); ++s) {
      if (idx[s] >= cells.size() || cells[idx[s]].empty()) continue;
      const double y = std::strtod(cells[idx[s]].c_str(), &end);
      if (end != cells[idx[s]].c_str() && std::isfinite(y)) series[s].push_back({x, y});
    }
  }
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series) {
    for (const auto& [x, y] : s) {
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  if (!std::isfinite(x0)) throw DataError("no numeric rows to plot in " + csv.string());
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  const double w = 720, h = 420, left = 70, right = 170, top = 30, bottom = 50;
  auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * (w - left - right); };
  auto py = [&](double y) { return h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  std::ostringstream svg;
  svg << fmt::format("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\" "
                     "font-size=\"12\">\n",
                     w, h);
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"black\"/>\n", left, h - bottom,
                     w - right);
  svg << fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\"/>\n", left, top, h - bottom);
  for (int k = 0; k <= 4; ++k) {
    const double xv = x0 + (x1 - x0) * k / 4, yv = y0 + (y1 - y0) * k / 4;
    svg << fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"middle\">{:.4g}</text>\n", px(xv),
                       h - bottom + 18, xv);
    svg << fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"end\">{:.4g}</text>\n", left - 6, py(yv) + 4,
                       yv);
  }
  svg << fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"middle\">{}</text>\n", (left + w - right) / 2,
                     h - 12, header[0]);
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = colors[s % 6];
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : series[s]) svg << fmt::format("{:.1f},{:.1f} ", px(x), py(y));
    svg << "\"/>\n";
    svg << fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" fill=\"{}\">{}</text>\n", w - right + 10,
                       top + 16 * static_cast<double>(s + 1), color, names[s]);
  }
  svg << "</svg>\n";
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  std::ofstream f(out);
  if (!f) throw ConfigError("cannot write " + out.string());
  f << svg.str();
}

}  // namespace bimot
