#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace modrank {

/// Reserved ids; every vocabulary starts with these five entries.
namespace special {
inline constexpr int kPad = 0;
inline constexpr int kUnk = 1;
inline constexpr int kCls = 2;
inline constexpr int kSep = 3;
inline constexpr int kMask = 4;
inline constexpr int kCount = 5;
}  // namespace special

/// Word-level tokenizer: lower-cases ASCII, splits on whitespace and
/// punctuation, maps out-of-vocabulary words to [UNK].
class Tokenizer {
 public:
  Tokenizer();
  /// `vocabulary` lists the regular (non-special) words in id order.
  explicit Tokenizer(std::vector<std::string> vocabulary);

  /// Builds a vocabulary from `texts`, most frequent words first (ties by
  /// byte order), keeping at most `max_types` ids including the specials.
  static Tokenizer build(std::span<const std::string> texts, std::size_t max_types = 8192);

  /// Normalised words of `text`; the same split the inverted index uses.
  static std::vector<std::string> split_words(std::string_view text);

  std::vector<int> tokenize(std::string_view text) const;
  int id(std::string_view word) const;
  const std::string& token(int id) const;
  std::size_t size() const { return tokens_.size(); }
  /// All entries including the specials, indexed by id.
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

}  // namespace modrank
