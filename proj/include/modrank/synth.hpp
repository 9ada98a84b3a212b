#pragma once

// Synthetic bilingual retrieval benchmark. Documents mix words of a primary
// topic, a distractor topic and background words; queries sample words of one
// topic, and a document is relevant when its primary topic matches. The target
// language is a word-level cipher onto a disjoint alphabet.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "modrank/eval.hpp"
#include "modrank/retrieval.hpp"

namespace modrank {

struct SynthConfig {
  std::uint64_t seed = 1;
  std::size_t num_docs = 1200;
  std::size_t num_topics = 150;
  std::size_t terms_per_topic = 15;
  std::size_t background_terms = 300;
  std::size_t train_topics = 110;
  std::size_t val_topics = 10;
  std::size_t queries_per_topic = 2;
  std::size_t doc_len_min = 16;
  std::size_t doc_len_max = 24;
  std::size_t query_len_min = 3;
  std::size_t query_len_max = 5;
  double topic_rate = 0.5;
  double distractor_rate = 0.15;

  std::size_t test_topics() const;
  /// Throws ContractError for fewer than 100 documents, fewer than 20 test
  /// queries or inconsistent sizes.
  void validate() const;
};

inline constexpr const char* kSourceLang = "src";
inline constexpr const char* kTargetLang = "tgt";

/// Bijection between source and target words.
class Cipher {
 public:
  Cipher() = default;
  Cipher(std::vector<std::string> source, std::vector<std::string> target);

  std::string encode(const std::string& text) const;
  std::string decode(const std::string& text) const;
  const std::map<std::string, std::string>& forward() const { return forward_; }

 private:
  static std::string map_words(const std::string& text, const std::map<std::string, std::string>& table);
  std::map<std::string, std::string> forward_;
  std::map<std::string, std::string> backward_;
};

struct QuerySplit {
  std::vector<Query> source;
  std::vector<Query> target;
  Qrels qrels;
};

struct SyntheticBenchmark {
  SynthConfig config;
  Corpus source;
  Corpus target;
  Cipher cipher;
  QuerySplit train, val, test;

  /// corpus.{src,tgt}.jsonl, queries.{train,val,test}.{src,tgt}.tsv,
  /// qrels.{train,val,test}.txt and cipher.tsv.
  void write(const std::filesystem::path& dir) const;
  static SyntheticBenchmark read(const std::filesystem::path& dir);
};

SyntheticBenchmark generate_benchmark(const SynthConfig& config);

}  // namespace modrank
