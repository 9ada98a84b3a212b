#include "modrank/tokenizer.hpp"

#include <algorithm>
#include <map>

#include "modrank/error.hpp"

namespace modrank {

namespace {

const std::vector<std::string>& special_names() {
  static const std::vector<std::string> names = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
  return names;
}

bool is_word_char(unsigned char c) {
  // Bytes >= 0x80 belong to UTF-8 sequences and are kept inside words.
  return c >= 0x80 || (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z');
}

}  // namespace

Tokenizer::Tokenizer() : Tokenizer(std::vector<std::string>{}) {}

Tokenizer::Tokenizer(std::vector<std::string> vocabulary) {
  tokens_ = special_names();
  tokens_.reserve(tokens_.size() + vocabulary.size());
  for (auto& w : vocabulary) tokens_.push_back(std::move(w));
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    auto [it, inserted] = ids_.emplace(tokens_[i], static_cast<int>(i));
    if (!inserted) throw ContractError("duplicate vocabulary entry '" + tokens_[i] + "'");
  }
}

Tokenizer Tokenizer::build(std::span<const std::string> texts, std::size_t max_types) {
  if (max_types < special::kCount) throw ConfigError("vocabulary cap smaller than the special tokens");
  std::map<std::string, std::size_t> counts;
  for (const auto& text : texts) {
    for (auto& w : split_words(text)) ++counts[std::move(w)];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  const auto keep = std::min(ranked.size(), max_types - special::kCount);
  std::vector<std::string> vocab;
  vocab.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) vocab.push_back(std::move(ranked[i].first));
  return Tokenizer(std::move(vocab));
}

std::vector<std::string> Tokenizer::split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (is_word_char(c)) {
      current.push_back((c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : ch);
    } else if (!current.empty()) {
      words.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

std::vector<int> Tokenizer::tokenize(std::string_view text) const {
  std::vector<int> ids;
  for (const auto& w : split_words(text)) ids.push_back(id(w));
  return ids;
}

int Tokenizer::id(std::string_view word) const {
  auto it = ids_.find(std::string(word));
  return it == ids_.end() ? special::kUnk : it->second;
}

const std::string& Tokenizer::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw ContractError("token id " + std::to_string(id) + " outside vocabulary");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

}  // namespace modrank
