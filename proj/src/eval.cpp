#include "modrank/eval.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "json.hpp"
#include "modrank/error.hpp"
#include "modrank/io.hpp"

namespace modrank {

// Qrels ---------------------------------------------------------------------------

Qrels Qrels::load(const std::filesystem::path& path) {
  Qrels qrels;
  std::istringstream in(io::read_file(path));
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream fields(line);
    std::string qid, iter, doc;
    long rel = 0;
    if (!(fields >> qid >> iter >> doc >> rel)) {
      throw IoError(path.string() + ":" + std::to_string(line_no) + ": malformed qrels line");
    }
    auto& set = qrels.relevant[qid];
    if (rel > 0) set.insert(doc);
  }
  return qrels;
}

std::string Qrels::format() const {
  std::string out;
  for (const auto& [qid, docs] : relevant) {
    for (const auto& d : docs) out += qid + " 0 " + d + " 1\n";
  }
  return out;
}

void Qrels::save(const std::filesystem::path& path) const { io::write_atomic(path, format()); }

// AP / MAP --------------------------------------------------------------------------

double average_precision(std::span<const ScoredDoc> ranking, const std::set<std::string>& relevant,
                         std::size_t cutoff) {
  if (relevant.empty()) throw ContractError("average precision needs at least one relevant document");
  const auto depth = cutoff == 0 ? ranking.size() : std::min(cutoff, ranking.size());
  std::size_t hits = 0;
  long double sum = 0.0L;
  for (std::size_t i = 0; i < depth; ++i) {
    if (relevant.contains(ranking[i].doc_id)) {
      ++hits;
      sum += static_cast<long double>(hits) / static_cast<long double>(i + 1);
    }
  }
  return static_cast<double>(sum / static_cast<long double>(relevant.size()));
}

MapResult mean_average_precision(const std::map<std::string, Ranking>& run, const Qrels& qrels,
                                 std::size_t cutoff) {
  MapResult out;
  double total = 0.0;
  for (const auto& [qid, rel] : qrels.relevant) {
    if (rel.empty()) {
      spdlog::warn("query {} has no relevant documents; skipped", qid);
      continue;
    }
    double ap = 0.0;
    if (auto it = run.find(qid); it != run.end()) {
      ap = average_precision(it->second.docs, rel, cutoff);
    } else {
      spdlog::warn("query {} missing from run; AP = 0", qid);
    }
    out.per_query.emplace(qid, ap);
    total += ap;
  }
  if (out.per_query.empty()) throw ContractError("no evaluable queries");
  out.map = total / static_cast<double>(out.per_query.size());
  return out;
}

double random_expected_ap(std::size_t n, std::size_t r) {
  if (r == 0 || r > n) throw ContractError("random_expected_ap: need 1 <= r <= n");
  if (n == 1) return 1.0;
  double harmonic = 0.0;
  for (std::size_t i = 1; i <= n; ++i) harmonic += 1.0 / static_cast<double>(i);
  const double N = static_cast<double>(n), R = static_cast<double>(r);
  return (R - 1.0) / (N - 1.0) + harmonic * (N - R) / (N * (N - 1.0));
}

// Student t -------------------------------------------------------------------------

namespace {

double beta_continued_fraction(double a, double b, double x) {
  constexpr double tiny = 1e-300;
  constexpr double eps = 1e-16;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 10000; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::fabs(delta - 1.0) < eps) return h;
  }
  throw NumericError("incomplete beta continued fraction did not converge");
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) throw ContractError("incomplete_beta: a and b must be positive");
  if (!(x >= 0.0 && x <= 1.0)) throw ContractError("incomplete_beta: x outside [0, 1]");
  if (x == 0.0 || x == 1.0) return x;
  const double log_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  if (x < (a + 1.0) / (a + b + 2.0)) return std::exp(log_front) * beta_continued_fraction(a, b, x) / a;
  return 1.0 - std::exp(log_front) * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double student_t_cdf(double t, double df) {
  if (!(df > 0.0)) throw ContractError("student_t_cdf: df must be positive");
  if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
  const double tail = 0.5 * incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
  return t > 0 ? 1.0 - tail : tail;
}

TTest paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractError("paired_t_test: samples differ in length");
  const auto n = a.size();
  if (n < 2) throw ContractError("paired_t_test: need at least two pairs");
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += a[i] - b[i];
  mean /= static_cast<double>(n);
  double ss = 0.0;
  bool all_zero = true;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a[i] - b[i];
    all_zero = all_zero && d == 0.0;
    ss += (d - mean) * (d - mean);
  }
  TTest out;
  out.df = n - 1;
  if (all_zero) {
    spdlog::warn("paired t-test: all differences are zero; reporting p = 1");
    out.degenerate = true;
    return out;
  }
  const double se = std::sqrt(ss / static_cast<double>(n - 1) / static_cast<double>(n));
  if (se == 0.0) {
    out.t = mean > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
    out.p = 0.0;
    return out;
  }
  out.t = mean / se;
  const double df = static_cast<double>(out.df);
  out.p = incomplete_beta(0.5 * df, 0.5, df / (df + out.t * out.t));
  return out;
}

// Latency ---------------------------------------------------------------------------

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto mid = v.size() / 2;
  return v.size() % 2 ? v[mid] : 0.5 * (v[mid - 1] + v[mid]);
}

LatencyStats summarize(std::vector<double> reps) {
  LatencyStats s;
  double sum = 0.0;
  for (double v : reps) sum += v;
  s.mean_ms = sum / static_cast<double>(reps.size());
  double var = 0.0;
  for (double v : reps) var += (v - s.mean_ms) * (v - s.mean_ms);
  var /= static_cast<double>(reps.size() > 1 ? reps.size() - 1 : 1);
  s.cv = s.mean_ms > 0.0 ? std::sqrt(var) / s.mean_ms : 0.0;
  s.median_ms = median(reps);
  s.repetition_ms = std::move(reps);
  return s;
}

double timed_pass(const std::function<void(std::size_t)>& run, std::size_t num_queries) {
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t q = 0; q < num_queries; ++q) run(q);
  const auto stop = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(stop - start).count() / static_cast<double>(num_queries);
}

}  // namespace

void retain_freed_memory() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, std::numeric_limits<int>::max());
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

LatencyStats measure_latency(const std::function<void(std::size_t)>& run, std::size_t num_queries,
                             std::size_t repetitions) {
  return measure_latency_interleaved({&run, 1}, num_queries, repetitions).front();
}

std::vector<LatencyStats> measure_latency_interleaved(
    std::span<const std::function<void(std::size_t)>> runs, std::size_t num_queries,
    std::size_t repetitions) {
  if (repetitions < 3) throw ContractError("measure_latency: need at least 3 repetitions");
  if (num_queries == 0) throw ContractError("measure_latency: no queries");
  for (const auto& run : runs) timed_pass(run, num_queries);
  std::vector<std::vector<double>> reps(runs.size());
  for (std::size_t rep = 0; rep < repetitions; ++rep) {
    for (std::size_t j = 0; j < runs.size(); ++j) {
      const auto i = rep % 2 ? runs.size() - 1 - j : j;
      reps[i].push_back(timed_pass(runs[i], num_queries));
    }
  }
  std::vector<double> rep_means(repetitions, 0.0);
  for (std::size_t rep = 0; rep < repetitions; ++rep) {
    for (const auto& r : reps) rep_means[rep] += r[rep] / static_cast<double>(runs.size());
  }
  const double typical = median(rep_means);
  std::vector<LatencyStats> out;
  for (auto& r : reps) {
    std::vector<double> share(repetitions);
    for (std::size_t rep = 0; rep < repetitions; ++rep) share[rep] = r[rep] / rep_means[rep];
    out.push_back(summarize(std::move(r)));
    out.back().drift_corrected_ms = median(std::move(share)) * typical;
  }
  return out;
}

// Reports ---------------------------------------------------------------------------

std::string MetricReport::to_jsonl() const {
  nlohmann::ordered_json j;
  j["name"] = name;
  j["map"] = result.map;
  j["queries"] = result.per_query.size();
  nlohmann::ordered_json per_query = nlohmann::ordered_json::object();
  for (const auto& [qid, ap] : result.per_query) per_query[qid] = ap;
  j["per_query_ap"] = per_query;
  if (test) {
    j["t_test"] = {{"against", test_against}, {"t", test->t}, {"p", test->p}, {"df", test->df},
                   {"degenerate", test->degenerate}};
  }
  if (latency_ms) j["latency_ms"] = *latency_ms;
  return j.dump();
}

void write_reports(const std::filesystem::path& path, std::span<const MetricReport> reports) {
  std::string out;
  for (const auto& r : reports) out += r.to_jsonl() + "\n";
  io::write_atomic(path, out);
}

}  // namespace modrank
