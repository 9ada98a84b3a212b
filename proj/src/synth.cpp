#include "modrank/synth.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"
#include "modrank/error.hpp"
#include "modrank/io.hpp"

namespace modrank {

std::size_t SynthConfig::test_topics() const {
  return num_topics > train_topics + val_topics ? num_topics - train_topics - val_topics : 0;
}

void SynthConfig::validate() const {
  if (num_docs < 100) throw ContractError("synthetic benchmark needs at least 100 documents");
  if (test_topics() * queries_per_topic < 20) throw ContractError("synthetic benchmark needs at least 20 test queries");
  if (train_topics == 0 || val_topics == 0) throw ContractError("train and validation topics must be non-empty");
  if (num_docs < num_topics) throw ContractError("need at least one document per topic");
  if (terms_per_topic < query_len_max || query_len_min == 0 || query_len_min > query_len_max) {
    throw ContractError("query length must fit within a topic's terms");
  }
  if (doc_len_min == 0 || doc_len_min > doc_len_max) throw ContractError("bad document length range");
  if (background_terms == 0) throw ContractError("background vocabulary must be non-empty");
  if (topic_rate < 0 || distractor_rate < 0 || topic_rate + distractor_rate > 1.0) {
    throw ContractError("topic and distractor rates must be probabilities summing to at most 1");
  }
}

// Cipher ------------------------------------------------------------------------

Cipher::Cipher(std::vector<std::string> source, std::vector<std::string> target) {
  if (source.size() != target.size()) throw ContractError("cipher word lists differ in length");
  for (std::size_t i = 0; i < source.size(); ++i) {
    if (!forward_.emplace(source[i], target[i]).second || !backward_.emplace(target[i], source[i]).second) {
      throw ContractError("cipher is not a bijection at '" + source[i] + "'");
    }
  }
}

std::string Cipher::map_words(const std::string& text, const std::map<std::string, std::string>& table) {
  std::istringstream in(text);
  std::string word, out;
  while (in >> word) {
    auto it = table.find(word);
    if (it == table.end()) throw ContractError("cipher has no entry for '" + word + "'");
    if (!out.empty()) out += ' ';
    out += it->second;
  }
  return out;
}

std::string Cipher::encode(const std::string& text) const { return map_words(text, forward_); }
std::string Cipher::decode(const std::string& text) const { return map_words(text, backward_); }

// Generation ----------------------------------------------------------------------

namespace {

std::vector<std::string> make_words(std::size_t n, std::string_view alphabet, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> len(3, 7), letter(0, alphabet.size() - 1);
  std::set<std::string> seen;
  std::vector<std::string> words;
  while (words.size() < n) {
    std::string w(len(rng), ' ');
    for (auto& c : w) c = alphabet[letter(rng)];
    if (seen.insert(w).second) words.push_back(std::move(w));
  }
  return words;
}

std::discrete_distribution<std::size_t> zipf(std::size_t n, double exponent) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = 1.0 / std::pow(static_cast<double>(i + 1), exponent);
  return {w.begin(), w.end()};
}

std::string doc_id(std::size_t i) {
  std::string s = std::to_string(i + 1);
  return "d" + std::string(s.size() < 5 ? 5 - s.size() : 0, '0') + s;
}

}  // namespace

SyntheticBenchmark generate_benchmark(const SynthConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  const auto T = config.num_topics, m = config.terms_per_topic;
  const auto vocab = T * m + config.background_terms;
  const auto source_words = make_words(vocab, "abcdefghijklm", rng);
  auto target_words = make_words(vocab, "nopqrstuvwxyz", rng);
  std::shuffle(target_words.begin(), target_words.end(), rng);

  SyntheticBenchmark bench;
  bench.config = config;
  bench.cipher = Cipher(source_words, target_words);
  auto topic_term = [&](std::size_t topic, std::size_t j) -> const std::string& { return source_words[topic * m + j]; };
  auto background = [&](std::size_t j) -> const std::string& { return source_words[T * m + j]; };

  auto in_topic = zipf(m, 0.8);
  auto in_background = zipf(config.background_terms, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> doc_len(config.doc_len_min, config.doc_len_max);
  std::uniform_int_distribution<std::size_t> any_topic(0, T - 1);

  // Topics 0..T-1 each own at least one document; the rest are uniform.
  std::vector<std::size_t> primary(config.num_docs);
  for (std::size_t d = 0; d < config.num_docs; ++d) primary[d] = d < T ? d : any_topic(rng);
  std::shuffle(primary.begin(), primary.end(), rng);

  for (std::size_t d = 0; d < config.num_docs; ++d) {
    const auto topic = primary[d];
    std::size_t distractor = any_topic(rng);
    if (distractor == topic) distractor = (distractor + 1) % T;
    const auto n = doc_len(rng);
    std::string text;
    for (std::size_t i = 0; i < n; ++i) {
      const double u = unit(rng);
      const std::string& w = u < config.topic_rate ? topic_term(topic, in_topic(rng))
                             : u < config.topic_rate + config.distractor_rate ? topic_term(distractor, in_topic(rng))
                                                                               : background(in_background(rng));
      if (!text.empty()) text += ' ';
      text += w;
    }
    bench.source.add({doc_id(d), text, kSourceLang});
    bench.target.add({doc_id(d), bench.cipher.encode(text), kTargetLang});
  }

  std::vector<std::size_t> topics(T);
  for (std::size_t t = 0; t < T; ++t) topics[t] = t;
  std::shuffle(topics.begin(), topics.end(), rng);
  std::uniform_int_distribution<std::size_t> query_len(config.query_len_min, config.query_len_max);
  std::size_t next_query = 0;
  auto fill = [&](QuerySplit& split, std::size_t first, std::size_t count, const char* prefix) {
    for (std::size_t i = first; i < first + count; ++i) {
      const auto topic = topics[i];
      std::set<std::string> relevant;
      for (std::size_t d = 0; d < config.num_docs; ++d) {
        if (primary[d] == topic) relevant.insert(doc_id(d));
      }
      for (std::size_t k = 0; k < config.queries_per_topic; ++k) {
        const auto n = query_len(rng);
        std::set<std::size_t> picked;
        while (picked.size() < n) picked.insert(in_topic(rng));
        std::vector<std::size_t> order(picked.begin(), picked.end());
        std::shuffle(order.begin(), order.end(), rng);
        std::string text;
        for (auto j : order) {
          if (!text.empty()) text += ' ';
          text += topic_term(topic, j);
        }
        const std::string qid = std::string(prefix) + std::to_string(++next_query);
        split.source.push_back({qid, text});
        split.target.push_back({qid, bench.cipher.encode(text)});
        split.qrels.relevant[qid] = relevant;
      }
    }
  };
  fill(bench.train, 0, config.train_topics, "tr");
  fill(bench.val, config.train_topics, config.val_topics, "va");
  fill(bench.test, config.train_topics + config.val_topics, config.test_topics(), "te");
  return bench;
}

// Files ---------------------------------------------------------------------------

namespace {

nlohmann::ordered_json config_json(const SynthConfig& c) {
  return {{"version", 1},
          {"seed", c.seed},
          {"num_docs", c.num_docs},
          {"num_topics", c.num_topics},
          {"terms_per_topic", c.terms_per_topic},
          {"background_terms", c.background_terms},
          {"train_topics", c.train_topics},
          {"val_topics", c.val_topics},
          {"queries_per_topic", c.queries_per_topic},
          {"doc_len_min", c.doc_len_min},
          {"doc_len_max", c.doc_len_max},
          {"query_len_min", c.query_len_min},
          {"query_len_max", c.query_len_max},
          {"topic_rate", c.topic_rate},
          {"distractor_rate", c.distractor_rate}};
}

SynthConfig config_from_json(const nlohmann::json& j) {
  SynthConfig c;
  c.seed = j.at("seed");
  c.num_docs = j.at("num_docs");
  c.num_topics = j.at("num_topics");
  c.terms_per_topic = j.at("terms_per_topic");
  c.background_terms = j.at("background_terms");
  c.train_topics = j.at("train_topics");
  c.val_topics = j.at("val_topics");
  c.queries_per_topic = j.at("queries_per_topic");
  c.doc_len_min = j.at("doc_len_min");
  c.doc_len_max = j.at("doc_len_max");
  c.query_len_min = j.at("query_len_min");
  c.query_len_max = j.at("query_len_max");
  c.topic_rate = j.at("topic_rate");
  c.distractor_rate = j.at("distractor_rate");
  return c;
}

}  // namespace

void SyntheticBenchmark::write(const std::filesystem::path& dir) const {
  io::write_atomic(dir / "benchmark.json", config_json(config).dump(2) + "\n");
  source.save_jsonl(dir / "corpus.src.jsonl");
  target.save_jsonl(dir / "corpus.tgt.jsonl");
  const std::pair<const char*, const QuerySplit*> splits[] = {{"train", &train}, {"val", &val}, {"test", &test}};
  for (const auto& [name, split] : splits) {
    save_queries(dir / (std::string("queries.") + name + ".src.tsv"), split->source);
    save_queries(dir / (std::string("queries.") + name + ".tgt.tsv"), split->target);
    split->qrels.save(dir / (std::string("qrels.") + name + ".txt"));
  }
  std::string table;
  for (const auto& [s, t] : cipher.forward()) table += s + '\t' + t + '\n';
  io::write_atomic(dir / "cipher.tsv", table);
}

SyntheticBenchmark SyntheticBenchmark::read(const std::filesystem::path& dir) {
  SyntheticBenchmark bench;
  try {
    bench.config = config_from_json(nlohmann::json::parse(io::read_file(dir / "benchmark.json")));
  } catch (const nlohmann::json::exception& e) {
    throw IoError((dir / "benchmark.json").string() + ": " + e.what());
  }
  bench.source = Corpus::load_jsonl(dir / "corpus.src.jsonl");
  bench.target = Corpus::load_jsonl(dir / "corpus.tgt.jsonl");
  const std::pair<const char*, QuerySplit*> splits[] = {{"train", &bench.train}, {"val", &bench.val}, {"test", &bench.test}};
  for (const auto& [name, split] : splits) {
    split->source = load_queries(dir / (std::string("queries.") + name + ".src.tsv"));
    split->target = load_queries(dir / (std::string("queries.") + name + ".tgt.tsv"));
    split->qrels = Qrels::load(dir / (std::string("qrels.") + name + ".txt"));
  }
  std::vector<std::string> s, t;
  std::istringstream in(io::read_file(dir / "cipher.tsv"));
  std::string line;
  while (std::getline(in, line)) {
    const auto tab = line.find('\t');
    if (tab == std::string::npos) continue;
    s.push_back(line.substr(0, tab));
    t.push_back(line.substr(tab + 1));
  }
  bench.cipher = Cipher(std::move(s), std::move(t));
  return bench;
}

}  // namespace modrank
