#include "bimot/instructions.hpp"

#include <algorithm>
#include <array>

namespace bimot {

namespace {

constexpr std::array<const char*, kPhrasingsPerTask> kT2MPhrases{
    "generate motion :", "create a motion for :", "show me a motion :", "produce the movement :",
    "animate this :"};
constexpr std::array<const char*, kPhrasingsPerTask> kM2TPhrases{
    "describe :", "caption this motion :", "what is the person doing :", "explain the movement :",
    "give a description :"};
constexpr std::array<const char*, kPhrasingsPerTask> kPredictPhrases{
    "predict motion :", "continue the motion :", "what comes next :", "complete the movement :",
    "extend this motion :"};
constexpr std::array<const char*, kPhrasingsPerTask> kPlainPhrases{
    "paraphrase :", "rephrase :", "say it differently :", "another way to say :", "reword :"};

const std::string& require(const std::optional<std::string>& slot, Task task, const char* what) {
  if (!slot || slot->empty()) throw TemplateError(std::string(task_name(task)) + " instruction needs a " + what);
  return *slot;
}

const std::vector<double>& require(const std::optional<std::vector<double>>& slot, Task task) {
  if (!slot || slot->empty()) throw TemplateError(std::string(task_name(task)) + " instruction needs an input motion");
  return *slot;
}

void push_words(const Vocabulary& vocab, HybridSequence& seq, const std::string& text) {
  for (int t : vocab.tokenize(text)) seq.push_text(t);
}

void fill_targets(Instruction& ins) {
  const auto& items = ins.sequence.items;
  ins.targets.assign(items.size(), -1);
  ins.loss_mask.assign(items.size(), 0);
  for (std::size_t i = 0; i + 1 < items.size(); ++i) {
    if (items[i].modality == Modality::kText && items[i + 1].modality == Modality::kText) {
      ins.targets[i] = items[i + 1].token;
    }
  }
}

// Supervise every text position whose target lies in [from, to).
void supervise(Instruction& ins, std::size_t from, std::size_t to) {
  for (std::size_t j = std::max<std::size_t>(from, 1); j < to; ++j) {
    if (ins.targets[j - 1] >= 0) ins.loss_mask[j - 1] = 1;
  }
}

}  // namespace

std::vector<int> HybridSequence::tokens() const {
  std::vector<int> out;
  out.reserve(items.size());
  for (const auto& it : items) out.push_back(it.token);
  return out;
}

std::vector<std::uint8_t> HybridSequence::modalities() const {
  std::vector<std::uint8_t> out;
  out.reserve(items.size());
  for (const auto& it : items) out.push_back(static_cast<std::uint8_t>(it.modality));
  return out;
}

const char* task_name(Task task) {
  switch (task) {
    case Task::kT2M: return "t2m";
    case Task::kM2T: return "m2t";
    case Task::kPredict: return "predict";
    case Task::kPlainText: return "plain_text";
  }
  return "?";
}

Task parse_task(const std::string& name) {
  for (Task t : {Task::kT2M, Task::kM2T, Task::kPredict, Task::kPlainText}) {
    if (name == task_name(t)) return t;
  }
  throw ConfigError("unknown task '" + name + "'");
}

std::vector<std::string> instruction_phrases() {
  std::vector<std::string> out;
  for (const auto* group : {&kT2MPhrases, &kM2TPhrases, &kPredictPhrases, &kPlainPhrases}) {
    out.insert(out.end(), group->begin(), group->end());
  }
  out.emplace_back("=");
  return out;
}

Instruction make_instruction(const Vocabulary& vocab, Task task, const InstructionSlots& slots, int holders,
                             int phrasing) {
  if (phrasing < 0 || phrasing >= kPhrasingsPerTask) throw TemplateError("phrasing index out of range");
  if ((task == Task::kT2M || task == Task::kPredict) && holders < 1) {
    throw TemplateError("motion output block needs at least one holder");
  }
  Instruction ins;
  ins.task = task;
  auto& seq = ins.sequence;
  seq.push_text(vocab.bos());
  auto output_block = [&] {
    seq.push_text(vocab.som());
    ins.prompt_length = static_cast<int>(seq.size());
    ins.output_begin = static_cast<int>(seq.size());
    ins.holders = holders;
    for (int h = 0; h < holders; ++h) seq.push_holder(vocab.holder_out());
    seq.push_text(vocab.eom());
    seq.push_text(vocab.eos());
  };

  switch (task) {
    case Task::kT2M: {
      const auto& caption = require(slots.caption, task, "caption");
      push_words(vocab, seq, kT2MPhrases[phrasing]);
      push_words(vocab, seq, caption);
      const std::size_t som = seq.size();
      output_block();
      fill_targets(ins);
      supervise(ins, som, som + 1);
      break;
    }
    case Task::kM2T: {
      const auto& z = require(slots.motion, task);
      const auto& caption = require(slots.caption, task, "caption");
      push_words(vocab, seq, kM2TPhrases[phrasing]);
      seq.push_text(vocab.som());
      seq.push_motion_input(vocab.holder_in(), z);
      seq.push_text(vocab.eom());
      ins.prompt_length = static_cast<int>(seq.size());
      const std::size_t answer = seq.size();
      push_words(vocab, seq, caption);
      seq.push_text(vocab.eos());
      fill_targets(ins);
      supervise(ins, answer, seq.size());
      break;
    }
    case Task::kPredict: {
      const auto& z = require(slots.motion, task);
      push_words(vocab, seq, kPredictPhrases[phrasing]);
      seq.push_text(vocab.som());
      seq.push_motion_input(vocab.holder_in(), z);
      seq.push_text(vocab.eom());
      const std::size_t som = seq.size();
      output_block();
      fill_targets(ins);
      supervise(ins, som, som + 1);
      break;
    }
    case Task::kPlainText: {
      const auto& source = require(slots.caption, task, "caption");
      const auto& target = require(slots.paraphrase, task, "paraphrase");
      push_words(vocab, seq, kPlainPhrases[phrasing]);
      push_words(vocab, seq, source);
      seq.push_text(vocab.id("="));
      ins.prompt_length = static_cast<int>(seq.size());
      const std::size_t answer = seq.size();
      push_words(vocab, seq, target);
      seq.push_text(vocab.eos());
      fill_targets(ins);
      supervise(ins, answer, seq.size());
      break;
    }
  }
  return ins;
}

Instruction make_text_sequence(const Vocabulary& vocab, const std::string& text) {
  Instruction ins;
  ins.task = Task::kPlainText;
  ins.sequence.push_text(vocab.bos());
  push_words(vocab, ins.sequence, text);
  ins.sequence.push_text(vocab.eos());
  ins.prompt_length = 1;
  fill_targets(ins);
  supervise(ins, 1, ins.sequence.size());
  return ins;
}

}  // namespace bimot
