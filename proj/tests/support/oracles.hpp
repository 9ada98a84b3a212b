#pragma once

// Independent reference implementations used as test oracles.

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "modrank/retrieval.hpp"
#include "modrank/sftm.hpp"

namespace modrank::testing {

using RawDocs = std::vector<std::pair<std::string, std::vector<std::string>>>;

/// Okapi BM25 computed term by term from raw token lists, with
/// idf = ln((n − df + 0.5)/(df + 0.5) + 1); each query occurrence counts.
inline std::map<std::string, double> brute_force_bm25(const RawDocs& docs, const std::vector<std::string>& query,
                                                      double k1 = 0.9, double b = 0.4) {
  const double n = static_cast<double>(docs.size());
  double avgdl = 0.0;
  for (const auto& d : docs) avgdl += static_cast<double>(d.second.size()) / n;
  std::map<std::string, double> scores;
  for (const auto& [id, words] : docs) {
    double s = 0.0;
    for (const auto& term : query) {
      double df = 0.0;
      for (const auto& other : docs) df += std::count(other.second.begin(), other.second.end(), term) > 0 ? 1.0 : 0.0;
      const double tf = static_cast<double>(std::count(words.begin(), words.end(), term));
      if (tf == 0.0) continue;
      const double idf = std::log((n - df + 0.5) / (df + 0.5) + 1.0);
      s += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * static_cast<double>(words.size()) / avgdl));
    }
    scores[id] = s;
  }
  return scores;
}

struct RandomCorpus {
  Corpus corpus;
  RawDocs raw;
  std::vector<std::string> query;
  std::string query_text;
};

/// Up to `max_docs` documents over a small vocabulary (so terms repeat), with
/// a query that repeats its first term.
inline RandomCorpus random_corpus(std::mt19937_64& rng, std::size_t max_docs) {
  std::uniform_int_distribution<std::size_t> ndocs(1, max_docs), len(0, 30), vocab_size(3, 80);
  const auto v = vocab_size(rng);
  std::uniform_int_distribution<std::size_t> word(0, v - 1);
  RandomCorpus out;
  const auto n = ndocs(rng);
  bool any_word = false;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::string> words(len(rng));
    std::string text;
    for (auto& w : words) {
      w = "w" + std::to_string(word(rng));
      text += w + " ";
    }
    any_word = any_word || !words.empty();
    const std::string id = "doc" + std::to_string(100000 + (i * 7919) % 900000);
    out.corpus.add({id, text, "src"});
    out.raw.emplace_back(id, std::move(words));
  }
  if (!any_word) {
    out.raw.front().second = {"w0"};
    Corpus fixed;
    for (const auto& [id, words] : out.raw) fixed.add({id, words.empty() ? "" : "w0", "src"});
    out.corpus = std::move(fixed);
  }
  for (std::size_t i = 0; i < 4; ++i) {
    out.query.push_back("w" + std::to_string(word(rng)));
    out.query_text += out.query.back() + " ";
  }
  out.query.push_back(out.query.front());
  out.query_text += out.query.front();
  return out;
}

/// Max |engine − oracle| over all documents, or +inf on a missing document
/// or an ordering violation (score descending, ties by ascending id).
inline double bm25_oracle_gap(const RandomCorpus& rc) {
  const auto index = InvertedIndex::build(rc.corpus);
  const auto ranking = bm25_rank({"q", rc.query_text}, index);
  const auto oracle = brute_force_bm25(rc.raw, rc.query);
  if (ranking.docs.size() != oracle.size()) return INFINITY;
  double gap = 0.0;
  for (std::size_t i = 0; i < ranking.docs.size(); ++i) {
    const auto& d = ranking.docs[i];
    const auto it = oracle.find(d.doc_id);
    if (it == oracle.end()) return INFINITY;
    gap = std::max(gap, std::abs(d.score - it->second));
    if (i > 0) {
      const auto& p = ranking.docs[i - 1];
      if (!(p.score > d.score || (p.score == d.score && p.doc_id < d.doc_id))) return INFINITY;
    }
  }
  return gap;
}

/// A mask with `entries` random coordinates and small random deltas.
inline SparseMask random_mask(std::size_t dim, std::size_t entries, std::mt19937_64& rng, const std::string& tag) {
  std::vector<std::size_t> all(dim);
  for (std::size_t i = 0; i < dim; ++i) all[i] = i;
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(entries);
  std::sort(all.begin(), all.end());
  std::normal_distribution<double> delta(0.0, 1e-2);
  SparseMask m;
  m.dim = dim;
  m.k = entries;
  m.exempt_from = dim;
  m.tag = tag;
  m.base_fingerprint = "fp";
  m.indices = all;
  for (std::size_t i = 0; i < entries; ++i) m.values.push_back(delta(rng));
  return m;
}

/// The mask as a dense vector of length dim.
inline std::vector<double> dense(const SparseMask& m) {
  std::vector<double> d(m.dim, 0.0);
  for (std::size_t i = 0; i < m.size(); ++i) d[m.indices[i]] = m.values[i];
  return d;
}

}  // namespace modrank::testing
