// Command-line entry point: one subcommand per pipeline step.

#include <CLI11.hpp>
#include <cstdio>
#include <fmt/format.h>
#include <fstream>
#include <iostream>
#include <map>

#include "bimot/pipeline.hpp"

using namespace bimot;
namespace fs = std::filesystem;

namespace {

void say(const std::string& line) {
  std::cout << line << std::endl;
}

std::vector<CorpusRecord> read_clips(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("no such clip file: " + path.string());
  auto records = read_jsonl(path);
  if (records.empty()) throw DataError(path.string() + " holds no clips");
  return records;
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  bimot::retain_freed_memory();
  CLI::App app{"bimot: text/motion generation with a dual-branch transformer and a latent diffusion head"};
  app.set_version_flag("--version", version_string());
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  fs::path data_dir;
  app.add_option("--data-dir", data_dir, "Data root (default: $BIMOT_DATA_DIR, else ./data)");

  // gen-data
  CorpusConfig corpus_cfg;
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic motion/caption corpus");
  gen->add_option("--count", corpus_cfg.count, "Number of clips");
  gen->add_option("--seed", corpus_cfg.seed, "Corpus seed");
  gen->add_option("--min-frames", corpus_cfg.min_frames, "Shortest clip");
  gen->add_option("--max-frames", corpus_cfg.max_frames, "Longest clip");

  // train-vae
  VaeTrainConfig vae_cfg;
  fs::path model_config_path;
  auto* tvae = app.add_subcommand("train-vae", "Train the motion VAE");
  tvae->add_option("--steps", vae_cfg.steps, "Optimizer steps");
  tvae->add_option("--batch", vae_cfg.batch, "Clips per batch");
  tvae->add_option("--lr", vae_cfg.lr, "Peak learning rate");
  tvae->add_option("--final-lr-frac", vae_cfg.final_lr_frac, "Cosine decay floor as a fraction of lr");
  tvae->add_option("--crop-prob", vae_cfg.crop_prob, "Probability of training on a clip prefix");
  tvae->add_option("--eval-every", vae_cfg.eval_every, "Validation interval");
  tvae->add_option("--seed", vae_cfg.seed, "Initialization and batch seed");
  tvae->add_option("--model-config", model_config_path, "Model config JSON (VAE, backbone, diffusion sizes)");

  std::string report_split = "val";
  fs::path report_out;
  std::uint64_t unused_seed = 0;
  auto* vrep = app.add_subcommand("vae-report", "Reconstruction MSE and per-joint L2 as CSV");
  vrep->add_option("--split", report_split, "train, val or test");
  vrep->add_option("--out", report_out, "CSV path (default: metrics/vae_<split>_report.csv)");
  vrep->add_option("--seed", unused_seed, "Accepted for uniformity; the report is deterministic");

  // train-evaluator
  EvaluatorConfig ev_cfg;
  EvaluatorTrainConfig ev_train;
  auto* tev = app.add_subcommand("train-evaluator", "Train the contrastive text/motion evaluator");
  tev->add_option("--steps", ev_train.steps, "Optimizer steps");
  tev->add_option("--batch", ev_train.batch, "Pairs per batch");
  tev->add_option("--lr", ev_train.lr, "Peak learning rate");
  tev->add_option("--seed", ev_train.seed, "Initialization and batch seed");
  tev->add_option("--embed", ev_cfg.embed, "Embedding size");
  tev->add_option("--temperature", ev_cfg.temperature, "Contrastive temperature");
  tev->add_flag("--shuffle-pairs", ev_train.shuffle_pairs, "Negative control: train on mismatched pairs");

  // train-text (stage 0) and train --stage
  int stage = 1;
  int stage_steps = -1, stage_batch = -1;
  long long stage_seed = -1;
  fs::path stage_config_path;
  auto* ttext = app.add_subcommand("train-text", "Stage 0: language-model pretraining of the text branch");
  auto* train = app.add_subcommand("train", "Stage 1 (text-to-motion), 2 (alignment) or 3 (joint instructions)");
  train->add_option("--stage", stage, "Training stage")->required()->check(CLI::IsMember({1, 2, 3}));
  for (auto* sub : {ttext, train}) {
    sub->add_option("--steps", stage_steps, "Optimizer steps (-1: stage default)");
    sub->add_option("--batch", stage_batch, "Sequences per batch (-1: stage default)");
    sub->add_option("--seed", stage_seed, "Batch seed (-1: stage default)");
    sub->add_option("--config", stage_config_path, "Stage config JSON overriding the defaults");
  }

  // sample / caption / predict
  SamplerSettings sampler;
  sampler.steps = 100;
  int frames = 40;
  fs::path out_path, checkpoint;
  std::string caption_text;
  auto* sample = app.add_subcommand("sample", "Generate a motion clip from a caption");
  sample->add_option("caption", caption_text, "Caption text")->required();
  sample->add_option("--frames", frames, "Clip length");
  sample->add_option("--out", out_path, "Output JSONL (default: stdout)");

  fs::path clip_path;
  TextSampler text_sampler;
  std::string sampler_kind = "greedy";
  auto* cap = app.add_subcommand("caption", "Describe each clip of a JSONL file");
  cap->add_option("clips", clip_path, "Clip JSONL")->required();
  cap->add_option("--sampler", sampler_kind, "greedy, topk or temperature")
      ->check(CLI::IsMember({"greedy", "topk", "temperature"}));
  cap->add_option("--top-k", text_sampler.top_k, "k for top-k sampling");
  cap->add_option("--temperature", text_sampler.temperature, "Softmax temperature for sampling");
  cap->add_option("--seed", text_sampler.seed, "Sampling seed");

  int predict_frames = 0;
  auto* pred = app.add_subcommand("predict", "Continue each clip of a JSONL file from its first half");
  pred->add_option("clips", clip_path, "Clip JSONL")->required();
  pred->add_option("--frames", predict_frames, "Output length (0: the input clip's length)");
  pred->add_option("--out", out_path, "Output JSONL (default: stdout)");

  for (auto* sub : {sample, pred}) {
    sub->add_option("--steps", sampler.steps, "Diffusion sampling steps");
    sub->add_option("--cfg-omega", sampler.omega, "Classifier-free guidance scale");
    sub->add_option("--temperature", sampler.temperature, "Posterior noise scale (0: deterministic)");
    sub->add_option("--seed", sampler.seed, "Sampling seed");
  }
  for (auto* sub : {sample, cap, pred}) sub->add_option("--checkpoint", checkpoint, "Model checkpoint (default: newest stage)");

  // eval
  EvalSettings eval_cfg;
  std::string eval_split = "val";
  std::string sweep;
  auto* ev = app.add_subcommand("eval", "Metric table for a trained model");
  ev->add_option("--split", eval_split, "train, val or test");
  ev->add_option("--repetitions", eval_cfg.repetitions, "Generation repeats for confidence intervals");
  ev->add_option("--batch", eval_cfg.batch, "R-precision batch size");
  ev->add_option("--steps", eval_cfg.sampler.steps, "Diffusion sampling steps");
  ev->add_option("--cfg-omega", eval_cfg.sampler.omega, "Classifier-free guidance scale");
  ev->add_option("--cfg-sweep", sweep, "Comma-separated guidance scales for an extra FID sweep");
  ev->add_option("--seed", eval_cfg.seed, "Generation seed");
  ev->add_option("--checkpoint", checkpoint, "Model checkpoint (default: newest stage)");
  ev->add_option("--out", out_path, "CSV path (default: metrics/eval_<split>.csv)");

  // plot
  fs::path csv_path;
  std::vector<std::string> columns;
  auto* plot = app.add_subcommand("plot", "Render training curves from a metrics CSV as SVG");
  plot->add_option("csv", csv_path, "Metrics CSV")->required();
  plot->add_option("--columns", columns, "Columns to draw (default: all but the first)")->delimiter(',');
  plot->add_option("--out", out_path, "SVG path (default: next to the CSV)");
  plot->add_option("--seed", unused_seed, "Accepted for uniformity; plotting is deterministic");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const Workspace ws = Workspace::open(data_dir);
    auto chosen_checkpoint = [&] { return checkpoint.empty() ? std::optional<fs::path>() : std::optional<fs::path>(checkpoint); };
    if (gen->parsed()) {
      gen_data(ws, corpus_cfg, say);
    } else if (tvae->parsed()) {
      const ModelConfig mc = model_config_path.empty() ? ModelConfig{} : ModelConfig::load(model_config_path);
      const auto r = run_train_vae(ws, mc, vae_cfg, say);
      say(fmt::format("VAE: best val MSE {:.4f} at step {}, val KL {:.3f}, {:.0f}s -> {}", r.val_mse, r.best_step,
                      r.val_kl, r.seconds, ws.vae().string()));
    } else if (vrep->parsed()) {
      vae_report(ws, report_split,
                 report_out.empty() ? ws.metrics("vae_" + report_split + "_report") : report_out, say);
    } else if (tev->parsed()) {
      const auto fit = run_train_evaluator(ws, ev_cfg, ev_train, say);
      require_fit(fit, ev_train.min_margin);
    } else if (ttext->parsed() || train->parsed()) {
      const int s = ttext->parsed() ? 0 : stage;
      StageConfig sc = stage_config_path.empty() ? StageConfig::defaults(s) : StageConfig::load(stage_config_path, s);
      if (stage_steps > 0) sc.steps = stage_steps;
      if (stage_batch > 0) sc.batch = stage_batch;
      if (stage_seed >= 0) sc.seed = static_cast<std::uint64_t>(stage_seed);
      std::vector<std::string> paths;
      if (!stage_config_path.empty()) paths.push_back(stage_config_path.string());
      const auto r = run_train_stage(ws, sc, say, paths);
      say(fmt::format("stage {}: {} steps ({} skipped), best val {:.4f} at step {}, {} freeze checks, {:.0f}s -> {}", s,
                      r.steps, r.skipped, r.best_val, r.best_step, r.freeze_checks, r.seconds,
                      ws.stage(s).string()));
    } else if (sample->parsed()) {
      const auto model = load_model(ws, chosen_checkpoint());
      const MotionClip clip = model.text_to_motion(caption_text, frames, sampler);
      const std::string line = generated_record_json(fmt::format("sample-{}", sampler.seed), caption_text, clip);
      if (out_path.empty()) {
        say(line);
      } else {
        open_out(out_path) << line << "\n";
        say(fmt::format("{} frames -> {}", clip.frames, out_path.string()));
      }
    } else if (cap->parsed()) {
      text_sampler.kind = sampler_kind == "greedy" ? SamplerKind::kGreedy
                          : sampler_kind == "topk" ? SamplerKind::kTopK
                                                   : SamplerKind::kTemperature;
      const auto model = load_model(ws, chosen_checkpoint());
      for (const auto& r : read_clips(clip_path)) say(r.id + "\t" + model.caption(r.clip, text_sampler));
    } else if (pred->parsed()) {
      const auto model = load_model(ws, chosen_checkpoint());
      std::ostringstream lines;
      for (const auto& r : read_clips(clip_path)) {
        const int n = predict_frames > 0 ? predict_frames : r.clip.frames;
        lines << generated_record_json(r.id + "-predicted", r.caption, model.predict(r.clip, n, sampler)) << "\n";
      }
      if (out_path.empty()) {
        std::cout << lines.str();
      } else {
        open_out(out_path) << lines.str();
        say("predictions -> " + out_path.string());
      }
    } else if (ev->parsed()) {
      auto rows = run_eval(ws, eval_split, eval_cfg, chosen_checkpoint(),
                           out_path, say);
      if (!sweep.empty()) {
        std::vector<double> omegas;
        std::stringstream ss(sweep);
        std::string item;
        while (std::getline(ss, item, ',')) {
          try {
            omegas.push_back(std::stod(item));
          } catch (const std::exception&) {
            throw ConfigError("bad guidance scale '" + item + "' in --cfg-sweep");
          }
        }
        const CorpusFiles corpus = load_corpus(ws);
        const auto model = load_model(ws, chosen_checkpoint());
        const auto fids = guidance_sweep(model, load_fit_evaluator(ws), corpus.split(eval_split), omegas,
                                         eval_cfg.sampler);
        for (std::size_t i = 0; i < omegas.size(); ++i) {
          rows.push_back({fmt::format("t2m_fid_omega_{:g}", omegas[i]), fids[i], 0, 1});
          say(fmt::format("FID at omega {:<5g} {:.4f}", omegas[i], fids[i]));
        }
        write_metric_rows(out_path.empty() ? ws.metrics("eval_" + eval_split) : out_path, rows);
      }
    } else if (plot->parsed()) {
      fs::path out = out_path;
      if (out.empty()) out = fs::path(csv_path).replace_extension(".svg");
      plot_csv(csv_path, columns, out);
      say("plot -> " + out.string());
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const EvaluationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
