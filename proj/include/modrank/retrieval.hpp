#pragma once

// Stage-1 preranking (BM25, bi-encoder cosine), Stage-2 cross-encoder
// reranking of the top k, rank-average ensembling and TREC run files.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "modrank/encoder.hpp"

namespace modrank {

struct Document {
  std::string id;
  std::string text;
  std::string lang;
};

class Corpus {
 public:
  /// Throws ContractError on a duplicate id.
  void add(Document doc);
  std::size_t size() const { return docs_.size(); }
  bool empty() const { return docs_.empty(); }
  const Document& at(std::size_t i) const { return docs_.at(i); }
  const std::vector<Document>& documents() const { return docs_; }
  /// Position of `id`, or size() when absent.
  std::size_t find(const std::string& id) const;
  const std::string& text(const std::string& id) const;

  /// One JSON object {"id", "text", "lang"} per line.
  static Corpus load_jsonl(const std::filesystem::path& path);
  void save_jsonl(const std::filesystem::path& path) const;

 private:
  std::vector<Document> docs_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct Query {
  std::string id;
  std::string text;
};

/// `qid<TAB>text` per line.
std::vector<Query> load_queries(const std::filesystem::path& path);
void save_queries(const std::filesystem::path& path, std::span<const Query> queries);

struct Bm25Params {
  double k1 = 0.9;
  double b = 0.4;
};

struct Posting {
  std::uint32_t doc;
  std::uint32_t tf;
};

/// Term statistics over Tokenizer::split_words of each document.
struct InvertedIndex {
  std::vector<std::string> doc_ids;
  std::vector<std::uint32_t> doc_lengths;
  std::unordered_map<std::string, std::vector<Posting>> postings;  // ascending doc
  double avg_doc_length = 0.0;

  std::size_t num_docs() const { return doc_ids.size(); }
  std::size_t df(const std::string& term) const;
  std::uint32_t tf(const std::string& term, std::size_t doc) const;

  /// Throws ContractError for an empty corpus.
  static InvertedIndex build(const Corpus& corpus);
};

/// ln((n − df + 0.5)/(df + 0.5) + 1).
double bm25_idf(std::size_t n, std::size_t df);

enum class Stage { kR0, kR1, kEnsemble };

struct ScoredDoc {
  std::string doc_id;
  double score = 0.0;
  bool operator==(const ScoredDoc&) const = default;
};

struct Ranking {
  std::string query_id;
  Stage stage = Stage::kR0;
  std::vector<ScoredDoc> docs;  // best first, scores non-increasing
  /// Length of the cross-encoder block at the head of an R1 list.
  std::size_t reranked = 0;
};

/// Scores every indexed document; each occurrence of a query term contributes.
/// Ties and zero scores are ordered by ascending doc id.
Ranking bm25_rank(const Query& query, const InvertedIndex& index, const Bm25Params& params = {});

/// be_embed of every document, in corpus order.
std::vector<std::vector<double>> embed_corpus(const Backbone& backbone, const ParamStore& params,
                                              const Corpus& corpus);
/// Cosine similarity (0 for zero-norm vectors); ties by ascending doc id.
double cosine(std::span<const double> a, std::span<const double> b);
Ranking biencoder_rank(const Query& query, const Corpus& corpus,
                       std::span<const std::vector<double>> doc_embeddings, const Backbone& backbone,
                       const ParamStore& params);

/// Relevance scores for the given documents of one query, in the same order.
using PairScorer = std::function<std::vector<double>(const Query& query, std::span<const std::string> doc_ids)>;

/// Re-scores the first min(k, n) documents of r0 and stably sorts them by
/// score; the remaining documents follow in R0 order with scores continuing
/// below the block minimum (min − 1, min − 2, ...).
Ranking rerank(const Ranking& r0, const Query& query, std::size_t k, const PairScorer& scorer);

/// Rank averaging: key (rank_R0 + rank_R1)/2 inside the reranked block,
/// rank_R0 outside; ascending key, ties by rank_R0 then doc id; score −key.
Ranking ensemble(const Ranking& r0, const Ranking& r1);

/// `qid Q0 docid rank score tag` lines; scores in shortest round-trip form.
std::string format_run(std::span<const Ranking> rankings, const std::string& tag);
void write_run(const std::filesystem::path& path, std::span<const Ranking> rankings, const std::string& tag);
/// Rankings keyed by query id, documents ordered by rank.
std::map<std::string, Ranking> read_run(const std::filesystem::path& path);

}  // namespace modrank
