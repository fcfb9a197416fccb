#include "bimot/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <json.hpp>
#include <set>

#include "bimot/errors.hpp"

namespace bimot {

std::vector<std::string> Vocabulary::split(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    if (ch == '<') {
      // Special-token literals stay whole.
      const auto close = text.find('>', i);
      if (close != std::string_view::npos) {
        const std::string_view lit = text.substr(i, close - i + 1);
        if (lit.find(' ') == std::string_view::npos && lit.size() > 2) {
          flush();
          out.emplace_back(lit);
          i = close;
          continue;
        }
      }
    }
    const auto u = static_cast<unsigned char>(ch);
    if (std::isspace(u)) {
      flush();
    } else if (std::ispunct(u) && ch != '\'' && ch != '-') {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(static_cast<char>(std::tolower(u)));
    }
  }
  flush();
  return out;
}

Vocabulary Vocabulary::build(std::span<const std::string> texts) {
  const std::set<std::string_view> specials{kUnk, kPad, kBos, kEos, kSom, kEom, kHolderIn, kHolderOut};
  std::set<std::string> words;
  for (const auto& t : texts) {
    for (auto& w : split(t)) {
      if (!specials.contains(w)) words.insert(std::move(w));
    }
  }
  Vocabulary v;
  v.words_.assign(words.begin(), words.end());
  for (auto s : {kUnk, kPad, kBos, kEos, kSom, kEom, kHolderIn, kHolderOut}) v.words_.emplace_back(s);
  for (int i = 0; i < v.size(); ++i) v.ids_[v.words_[i]] = i;
  v.index_specials();
  return v;
}

void Vocabulary::index_specials() {
  auto need = [this](std::string_view w) {
    auto it = ids_.find(w);
    if (it == ids_.end()) throw DataError("vocabulary lacks special token " + std::string(w));
    return it->second;
  };
  unk_ = need(kUnk);
  pad_ = need(kPad);
  bos_ = need(kBos);
  eos_ = need(kEos);
  som_ = need(kSom);
  eom_ = need(kEom);
  holder_in_ = need(kHolderIn);
  holder_out_ = need(kHolderOut);
  const int n = size();
  if (som_ != n - 4 || eom_ != n - 3 || holder_in_ != n - 2 || holder_out_ != n - 1) {
    throw DataError("vocabulary: motion tokens must occupy the four highest ids");
  }
}

int Vocabulary::id(std::string_view word) const {
  auto it = ids_.find(word);
  return it == ids_.end() ? unk_ : it->second;
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || id >= size()) throw IndexError("token id " + std::to_string(id) + " outside vocabulary");
  return words_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::tokenize(std::string_view text) const {
  std::vector<int> out;
  for (const auto& w : split(text)) out.push_back(id(w));
  return out;
}

std::string Vocabulary::detokenize(std::span<const int> ids) const {
  std::string out;
  for (int t : ids) {
    if (!out.empty()) out.push_back(' ');
    out += word(t);
  }
  return out;
}

std::string Vocabulary::to_json() const {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (int i = 0; i < size(); ++i) j[words_[i]] = i;
  return j.dump(1);
}

Vocabulary Vocabulary::from_json(std::string_view text) {
  const auto j = nlohmann::json::parse(text);
  if (!j.is_object()) throw DataError("vocabulary must be a JSON object");
  Vocabulary v;
  v.words_.resize(j.size());
  std::vector<bool> seen(j.size(), false);
  for (const auto& [w, idv] : j.items()) {
    const int i = idv.get<int>();
    if (i < 0 || i >= static_cast<int>(j.size()) || seen[i]) throw DataError("vocabulary ids are not 0..n-1");
    seen[i] = true;
    v.words_[i] = w;
    v.ids_[w] = i;
  }
  v.index_specials();
  return v;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write vocabulary " + path.string());
  out << to_json() << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read vocabulary " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return from_json(buf.str());
}

}  // namespace bimot
