#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace bimot {

/// Word-level vocabulary. Layout: sorted words, then <unk> <pad> <bos> <eos>,
/// then the four motion tokens <som> <eom> <mholder_in> <mholder_out> at the top.
class Vocabulary {
 public:
  static constexpr std::string_view kUnk = "<unk>";
  static constexpr std::string_view kPad = "<pad>";
  static constexpr std::string_view kBos = "<bos>";
  static constexpr std::string_view kEos = "<eos>";
  static constexpr std::string_view kSom = "<som>";
  static constexpr std::string_view kEom = "<eom>";
  static constexpr std::string_view kHolderIn = "<mholder_in>";
  static constexpr std::string_view kHolderOut = "<mholder_out>";
  static constexpr int kMotionTokens = 4;

  // Every word of every text (after splitting) enters the vocabulary.
  static Vocabulary build(std::span<const std::string> texts);

  // Lowercased words; punctuation characters become their own tokens.
  static std::vector<std::string> split(std::string_view text);

  int id(std::string_view word) const;
  const std::string& word(int id) const;
  int size() const { return static_cast<int>(words_.size()); }
  // Ids below this existed before the motion tokens were added.
  int base_size() const { return size() - kMotionTokens; }
  bool is_motion_token(int id) const { return id >= base_size() && id < size(); }

  int unk() const { return unk_; }
  int pad() const { return pad_; }
  int bos() const { return bos_; }
  int eos() const { return eos_; }
  int som() const { return som_; }
  int eom() const { return eom_; }
  int holder_in() const { return holder_in_; }
  int holder_out() const { return holder_out_; }

  std::vector<int> tokenize(std::string_view text) const;
  std::string detokenize(std::span<const int> ids) const;

  std::string to_json() const;
  static Vocabulary from_json(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  void index_specials();

  std::vector<std::string> words_;
  std::map<std::string, int, std::less<>> ids_;
  int unk_ = -1, pad_ = -1, bos_ = -1, eos_ = -1, som_ = -1, eom_ = -1, holder_in_ = -1, holder_out_ = -1;
};

}  // namespace bimot
