#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bimot/errors.hpp"
#include "bimot/vocab.hpp"

namespace bimot {

enum class Modality : std::uint8_t { kText = 0, kMotion = 1 };

struct HybridItem {
  int token = 0;  // vocabulary id, including <mholder_in>/<mholder_out>
  Modality modality = Modality::kText;
  int latent = -1;  // index into HybridSequence::latents for <mholder_in>
};

/// Ordered multimodal token stream; an item's position is its index.
struct HybridSequence {
  std::vector<HybridItem> items;
  std::vector<std::vector<double>> latents;

  std::size_t size() const { return items.size(); }
  void push_text(int token) { items.push_back({token, Modality::kText, -1}); }
  void push_motion_input(int holder_in, std::vector<double> z) {
    latents.push_back(std::move(z));
    items.push_back({holder_in, Modality::kMotion, static_cast<int>(latents.size()) - 1});
  }
  void push_holder(int holder_out) { items.push_back({holder_out, Modality::kMotion, -1}); }
  std::vector<int> tokens() const;
  std::vector<std::uint8_t> modalities() const;
};

class TemplateError : public ContractError {
 public:
  using ContractError::ContractError;
};

enum class Task { kT2M, kM2T, kPredict, kPlainText };
const char* task_name(Task task);
Task parse_task(const std::string& name);

inline constexpr int kPhrasingsPerTask = 5;

struct InstructionSlots {
  std::optional<std::string> caption;       // T2M prompt, M2T answer, PLAIN_TEXT source
  std::optional<std::string> paraphrase;    // PLAIN_TEXT answer
  std::optional<std::vector<double>> motion;  // latent at <mholder_in> (M2T, PREDICT)
};

/// A training/inference sequence plus next-token supervision. targets[i] is the
/// token at i+1 (or -1); loss_mask[i] selects which of those enter the CE.
struct Instruction {
  Task task = Task::kT2M;
  HybridSequence sequence;
  std::vector<int> targets;
  std::vector<std::uint8_t> loss_mask;
  int output_begin = -1;  // first <mholder_out>, -1 when the task emits no motion
  int holders = 0;
  // Length of the prompt handed to generation (T2M: through <som>; M2T: through <eom>).
  int prompt_length = 0;
};

Instruction make_instruction(const Vocabulary& vocab, Task task, const InstructionSlots& slots, int holders,
                             int phrasing = 0);

// Prompt phrases, used to seed the vocabulary.
std::vector<std::string> instruction_phrases();

// Plain next-token sequence "<bos> text <eos>" with every position supervised.
Instruction make_text_sequence(const Vocabulary& vocab, const std::string& text);

}  // namespace bimot
