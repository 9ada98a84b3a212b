#include <cmath>
#include <filesystem>
#include <map>
#include <random>
#include <sstream>

#include "doctest.h"
#include "modrank/error.hpp"
#include "modrank/retrieval.hpp"
#include "oracles.hpp"

using namespace modrank;

namespace {

Corpus corpus_of(const std::vector<std::string>& texts) {
  Corpus c;
  for (std::size_t i = 0; i < texts.size(); ++i) c.add({"d" + std::to_string(i), texts[i], "src"});
  return c;
}

Ranking ranking_of(const std::vector<std::string>& ids, Stage stage = Stage::kR0) {
  Ranking r{"q", stage, {}, 0};
  double s = static_cast<double>(ids.size());
  for (const auto& id : ids) r.docs.push_back({id, s--});
  return r;
}

std::vector<std::string> ids_of(const Ranking& r) {
  std::vector<std::string> out;
  for (const auto& d : r.docs) out.push_back(d.doc_id);
  return out;
}

}  // namespace

TEST_CASE("index statistics") {
  const auto index = InvertedIndex::build(corpus_of({"a b a"}));
  CHECK(index.tf("a", 0) == 2);
  CHECK(index.tf("b", 0) == 1);
  CHECK(index.tf("c", 0) == 0);
  CHECK(index.df("a") == 1);
  CHECK(index.avg_doc_length == 3.0);
  CHECK_THROWS_AS(InvertedIndex::build(Corpus{}), ContractError);
}

TEST_CASE("idf formula") {
  CHECK(bm25_idf(10, 3) == doctest::Approx(std::log(7.5 / 3.5 + 1)).epsilon(1e-15));
  CHECK(bm25_idf(1, 1) > 0.0);
}

TEST_CASE("bm25 matches a brute-force oracle on random corpora") {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 20; ++trial) {
    const auto rc = testing::random_corpus(rng, 300);
    CHECK(testing::bm25_oracle_gap(rc) < 1e-9);
  }
}

TEST_CASE("rerank sorts the head stably and continues scores below it") {
  const auto r0 = ranking_of({"a", "b", "c", "d", "e"});
  const std::map<std::string, double> scores{{"a", 0.1}, {"b", 0.9}, {"c", 0.1}};
  const PairScorer scorer = [&](const Query&, std::span<const std::string> ids) {
    std::vector<double> out;
    for (const auto& id : ids) out.push_back(scores.at(id));
    return out;
  };
  const auto r1 = rerank(r0, {"q", "x"}, 3, scorer);
  CHECK(ids_of(r1) == std::vector<std::string>{"b", "a", "c", "d", "e"});
  CHECK(r1.reranked == 3);
  CHECK(r1.docs[3].score == doctest::Approx(0.1 - 1));
  CHECK(r1.docs[4].score == doctest::Approx(0.1 - 2));
  const auto all = rerank(r0, {"q", "x"}, 50, [](const Query&, std::span<const std::string> ids) {
    return std::vector<double>(ids.size(), 1.0);
  });
  CHECK(ids_of(all) == ids_of(r0));
}

TEST_CASE("ensemble averages ranks inside the reranked block") {
  const auto r0 = ranking_of({"a", "b", "c", "d"});
  auto r1 = ranking_of({"c", "b", "a", "d"}, Stage::kR1);
  r1.reranked = 3;
  const auto e = ensemble(r0, r1);
  // keys: a (1+3)/2=2, b 2, c (3+1)/2=2, d 4: ties resolved by R0 rank.
  CHECK(ids_of(e) == std::vector<std::string>{"a", "b", "c", "d"});
  CHECK(e.docs[0].score == -2.0);
  CHECK(e.docs[3].score == -4.0);

  auto r1b = ranking_of({"b", "a", "c", "d"}, Stage::kR1);
  r1b.reranked = 2;
  const auto e2 = ensemble(r0, r1b);
  CHECK(ids_of(e2) == std::vector<std::string>{"a", "b", "c", "d"});
  CHECK(e2.docs[0].score == -1.5);
}

TEST_CASE("run files round trip with exact scores") {
  auto r = ranking_of({"d1", "d2"});
  r.docs[0].score = 0.1 + 0.2;
  r.docs[1].score = -1e-300;
  const std::vector<Ranking> run{r};
  const auto text = format_run(run, "tag");
  CHECK(text.starts_with("q Q0 d1 1 "));
  const auto path = std::filesystem::temp_directory_path() / "modrank_test.run";
  write_run(path, run, "tag");
  const auto back = read_run(path);
  CHECK(back.at("q").docs == r.docs);
  std::filesystem::remove(path);
}

TEST_CASE("corpus and queries files") {
  Corpus c;
  c.add({"x", "hello \"world\"\ttab", "src"});
  CHECK_THROWS_AS(c.add({"x", "dup", "src"}), ContractError);
  const auto dir = std::filesystem::temp_directory_path();
  c.save_jsonl(dir / "modrank_test_corpus.jsonl");
  const auto back = Corpus::load_jsonl(dir / "modrank_test_corpus.jsonl");
  CHECK(back.text("x") == "hello \"world\"\ttab");
  const std::vector<Query> qs{{"q1", "a b"}, {"q2", "c"}};
  save_queries(dir / "modrank_test_q.tsv", qs);
  const auto qb = load_queries(dir / "modrank_test_q.tsv");
  CHECK(qb.size() == 2);
  CHECK(qb[1].text == "c");
  CHECK_THROWS_AS(Corpus::load_jsonl(dir / "modrank_missing.jsonl"), IoError);
}

TEST_CASE("cosine similarity") {
  const std::vector<double> a{1, 0}, b{0, 2}, z{0, 0};
  CHECK(cosine(a, a) == doctest::Approx(1.0));
  CHECK(cosine(a, b) == 0.0);
  CHECK(cosine(a, z) == 0.0);
}
