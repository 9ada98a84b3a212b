#include "modrank/retrieval.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "modrank/error.hpp"
#include "modrank/io.hpp"
#include "modrank/tokenizer.hpp"

namespace modrank {

namespace {

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

void sort_by_score_then_id(std::vector<ScoredDoc>& docs) {
  std::sort(docs.begin(), docs.end(), [](const ScoredDoc& a, const ScoredDoc& b) {
    return a.score != b.score ? a.score > b.score : a.doc_id < b.doc_id;
  });
}

}  // namespace

// Corpus ------------------------------------------------------------------------

void Corpus::add(Document doc) {
  auto [it, inserted] = index_.emplace(doc.id, docs_.size());
  if (!inserted) throw ContractError("duplicate document id '" + doc.id + "'");
  docs_.push_back(std::move(doc));
}

std::size_t Corpus::find(const std::string& id) const {
  auto it = index_.find(id);
  return it == index_.end() ? docs_.size() : it->second;
}

const std::string& Corpus::text(const std::string& id) const {
  const auto i = find(id);
  if (i == docs_.size()) throw ContractError("unknown document id '" + id + "'");
  return docs_[i].text;
}

Corpus Corpus::load_jsonl(const std::filesystem::path& path) {
  Corpus corpus;
  std::size_t line_no = 0;
  for (const auto& line : lines_of(io::read_file(path))) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      corpus.add({j.at("id").get<std::string>(), j.at("text").get<std::string>(),
                  j.value("lang", std::string())});
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return corpus;
}

void Corpus::save_jsonl(const std::filesystem::path& path) const {
  std::string out;
  for (const auto& d : docs_) {
    out += nlohmann::json{{"id", d.id}, {"text", d.text}, {"lang", d.lang}}.dump();
    out += '\n';
  }
  io::write_atomic(path, out);
}

std::vector<Query> load_queries(const std::filesystem::path& path) {
  std::vector<Query> queries;
  std::size_t line_no = 0;
  for (const auto& line : lines_of(io::read_file(path))) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw IoError(path.string() + ":" + std::to_string(line_no) + ": expected qid<TAB>text");
    }
    queries.push_back({line.substr(0, tab), line.substr(tab + 1)});
  }
  return queries;
}

void save_queries(const std::filesystem::path& path, std::span<const Query> queries) {
  std::string out;
  for (const auto& q : queries) out += q.id + '\t' + q.text + '\n';
  io::write_atomic(path, out);
}

// BM25 ------------------------------------------------------------------------------

std::size_t InvertedIndex::df(const std::string& term) const {
  auto it = postings.find(term);
  return it == postings.end() ? 0 : it->second.size();
}

std::uint32_t InvertedIndex::tf(const std::string& term, std::size_t doc) const {
  auto it = postings.find(term);
  if (it == postings.end()) return 0;
  auto p = std::lower_bound(it->second.begin(), it->second.end(), doc,
                            [](const Posting& x, std::size_t d) { return x.doc < d; });
  return p != it->second.end() && p->doc == doc ? p->tf : 0;
}

InvertedIndex InvertedIndex::build(const Corpus& corpus) {
  if (corpus.empty()) throw ContractError("cannot index an empty corpus");
  InvertedIndex index;
  std::uint64_t total = 0;
  std::unordered_map<std::string, std::uint32_t> counts;
  for (std::size_t d = 0; d < corpus.size(); ++d) {
    const auto& doc = corpus.at(d);
    const auto words = Tokenizer::split_words(doc.text);
    counts.clear();
    for (const auto& w : words) ++counts[w];
    for (const auto& [term, tf] : counts) {
      index.postings[term].push_back({static_cast<std::uint32_t>(d), tf});
    }
    index.doc_ids.push_back(doc.id);
    index.doc_lengths.push_back(static_cast<std::uint32_t>(words.size()));
    total += words.size();
  }
  index.avg_doc_length = static_cast<double>(total) / static_cast<double>(corpus.size());
  return index;
}

double bm25_idf(std::size_t n, std::size_t df) {
  const double N = static_cast<double>(n), DF = static_cast<double>(df);
  return std::log((N - DF + 0.5) / (DF + 0.5) + 1.0);
}

Ranking bm25_rank(const Query& query, const InvertedIndex& index, const Bm25Params& params) {
  const auto n = index.num_docs();
  std::vector<double> scores(n, 0.0);
  const auto terms = Tokenizer::split_words(query.text);
  if (terms.empty()) spdlog::warn("query {} has no terms; all BM25 scores are zero", query.id);
  for (const auto& term : terms) {
    auto it = index.postings.find(term);
    if (it == index.postings.end()) continue;
    const double idf = bm25_idf(n, it->second.size());
    for (const auto& p : it->second) {
      const double tf = p.tf;
      const double norm = params.k1 * (1.0 - params.b + params.b * index.doc_lengths[p.doc] / index.avg_doc_length);
      scores[p.doc] += idf * tf * (params.k1 + 1.0) / (tf + norm);
    }
  }
  Ranking r;
  r.query_id = query.id;
  r.stage = Stage::kR0;
  r.docs.reserve(n);
  for (std::size_t d = 0; d < n; ++d) r.docs.push_back({index.doc_ids[d], scores[d]});
  sort_by_score_then_id(r.docs);
  return r;
}

// Bi-encoder --------------------------------------------------------------------------

std::vector<std::vector<double>> embed_corpus(const Backbone& backbone, const ParamStore& params,
                                              const Corpus& corpus) {
  std::vector<std::vector<double>> out;
  out.reserve(corpus.size());
  for (const auto& d : corpus.documents()) out.push_back(be_embed(backbone, params, d.text));
  return out;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("cosine: vector lengths differ");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

Ranking biencoder_rank(const Query& query, const Corpus& corpus,
                       std::span<const std::vector<double>> doc_embeddings, const Backbone& backbone,
                       const ParamStore& params) {
  if (doc_embeddings.size() != corpus.size()) throw ContractError("biencoder_rank: embedding count mismatch");
  const auto q = be_embed(backbone, params, query.text);
  Ranking r;
  r.query_id = query.id;
  r.stage = Stage::kR0;
  r.docs.reserve(corpus.size());
  for (std::size_t d = 0; d < corpus.size(); ++d) {
    r.docs.push_back({corpus.at(d).id, cosine(q, doc_embeddings[d])});
  }
  sort_by_score_then_id(r.docs);
  return r;
}

// Reranking ---------------------------------------------------------------------------

Ranking rerank(const Ranking& r0, const Query& query, std::size_t k, const PairScorer& scorer) {
  if (k == 0) throw ContractError("rerank: k must be at least 1");
  if (r0.query_id != query.id) throw ContractError("rerank: ranking is for query " + r0.query_id);
  const auto block = std::min(k, r0.docs.size());
  std::vector<std::string> ids;
  ids.reserve(block);
  for (std::size_t i = 0; i < block; ++i) ids.push_back(r0.docs[i].doc_id);

  std::vector<double> scores;
  try {
    scores = scorer(query, ids);
  } catch (const std::exception& e) {
    throw ContractError("rerank: scorer failed for query " + query.id + ": " + e.what());
  }
  if (scores.size() != block) throw ContractError("rerank: scorer returned the wrong number of scores");
  for (std::size_t i = 0; i < block; ++i) {
    if (!std::isfinite(scores[i])) {
      throw NumericError("rerank: non-finite score for pair (" + query.id + ", " + ids[i] + ")");
    }
  }

  std::vector<std::size_t> order(block);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  Ranking r1;
  r1.query_id = r0.query_id;
  r1.stage = Stage::kR1;
  r1.reranked = block;
  r1.docs.reserve(r0.docs.size());
  for (auto i : order) r1.docs.push_back({ids[i], scores[i]});
  const double floor = block > 0 ? scores[order.back()] : 0.0;
  for (std::size_t j = block; j < r0.docs.size(); ++j) {
    r1.docs.push_back({r0.docs[j].doc_id, floor - static_cast<double>(j - block + 1)});
  }
  return r1;
}

Ranking ensemble(const Ranking& r0, const Ranking& r1) {
  if (r0.query_id != r1.query_id) {
    throw ContractError("ensemble: query ids differ (" + r0.query_id + " vs " + r1.query_id + ")");
  }
  if (r0.docs.size() != r1.docs.size()) throw ContractError("ensemble: rankings cover different documents");
  const auto block = r1.stage == Stage::kR1 ? r1.reranked : r1.docs.size();

  std::unordered_map<std::string, std::size_t> rank1;
  for (std::size_t i = 0; i < block; ++i) rank1.emplace(r1.docs[i].doc_id, i + 1);

  struct Entry {
    double key;
    std::size_t rank0;
    const std::string* id;
  };
  std::vector<Entry> entries;
  entries.reserve(r0.docs.size());
  std::size_t matched = 0;
  for (std::size_t i = 0; i < r0.docs.size(); ++i) {
    const auto rank0 = i + 1;
    double key = static_cast<double>(rank0);
    if (auto it = rank1.find(r0.docs[i].doc_id); it != rank1.end()) {
      key = static_cast<double>(rank0 + it->second) / 2.0;
      ++matched;
    }
    entries.push_back({key, rank0, &r0.docs[i].doc_id});
  }
  if (matched != block) throw ContractError("ensemble: R1 block is not drawn from R0");
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    if (a.key != b.key) return a.key < b.key;
    if (a.rank0 != b.rank0) return a.rank0 < b.rank0;
    return *a.id < *b.id;
  });

  Ranking out;
  out.query_id = r0.query_id;
  out.stage = Stage::kEnsemble;
  out.docs.reserve(entries.size());
  for (const auto& e : entries) out.docs.push_back({*e.id, -e.key});
  return out;
}

// Run files ---------------------------------------------------------------------------

std::string format_run(std::span<const Ranking> rankings, const std::string& tag) {
  std::string out;
  for (const auto& r : rankings) {
    for (std::size_t i = 0; i < r.docs.size(); ++i) {
      out += r.query_id + " Q0 " + r.docs[i].doc_id + " " + std::to_string(i + 1) + " " +
             io::format_exact(r.docs[i].score) + " " + tag + "\n";
    }
  }
  return out;
}

void write_run(const std::filesystem::path& path, std::span<const Ranking> rankings, const std::string& tag) {
  io::write_atomic(path, format_run(rankings, tag));
}

std::map<std::string, Ranking> read_run(const std::filesystem::path& path) {
  struct Row {
    std::size_t rank;
    ScoredDoc doc;
  };
  std::map<std::string, std::vector<Row>> rows;
  std::size_t line_no = 0;
  for (const auto& line : lines_of(io::read_file(path))) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string qid, q0, doc, rank, score, tag;
    if (!(fields >> qid >> q0 >> doc >> rank >> score >> tag)) {
      throw IoError(path.string() + ":" + std::to_string(line_no) + ": malformed run line");
    }
    try {
      rows[qid].push_back({std::stoul(rank), {doc, io::parse_double(score)}});
    } catch (const std::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  std::map<std::string, Ranking> out;
  for (auto& [qid, list] : rows) {
    std::stable_sort(list.begin(), list.end(), [](const Row& a, const Row& b) { return a.rank < b.rank; });
    Ranking r;
    r.query_id = qid;
    for (auto& row : list) r.docs.push_back(std::move(row.doc));
    out.emplace(qid, std::move(r));
  }
  return out;
}

}  // namespace modrank
