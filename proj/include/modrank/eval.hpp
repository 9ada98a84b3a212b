#pragma once

// Retrieval metrics (AP, MAP), paired two-tailed t-test and query latency.

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "modrank/retrieval.hpp"

namespace modrank {

/// Binary relevance: query id → relevant document ids.
struct Qrels {
  std::map<std::string, std::set<std::string>> relevant;

  /// `qid 0 docid rel` lines; rel > 0 counts as relevant.
  static Qrels load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
  std::string format() const;
};

/// (1/|relevant|) Σ over relevant documents at rank i ≤ cutoff of precision@i.
/// cutoff 0 evaluates the whole ranking. Throws ContractError when relevant is empty.
double average_precision(std::span<const ScoredDoc> ranking, const std::set<std::string>& relevant,
                         std::size_t cutoff = 0);

struct MapResult {
  std::map<std::string, double> per_query;  // evaluable queries only
  double map = 0.0;
};

/// MAP over the qrels queries with at least one relevant document; queries
/// missing from the run score 0. Throws ContractError with no evaluable query.
MapResult mean_average_precision(const std::map<std::string, Ranking>& run, const Qrels& qrels,
                                 std::size_t cutoff = 0);

/// Expected AP of a uniformly random permutation of n documents with r relevant.
double random_expected_ap(std::size_t n, std::size_t r);

/// Regularized incomplete beta I_x(a, b) by Lentz's continued fraction.
double incomplete_beta(double a, double b, double x);
/// Student t cumulative distribution with `df` degrees of freedom.
double student_t_cdf(double t, double df);

struct TTest {
  double t = 0.0;
  double p = 1.0;
  std::size_t df = 0;
  /// All differences zero: t = 0 and p = 1 by convention.
  bool degenerate = false;
};

/// Student's paired t on a − b with two-tailed p.
TTest paired_t_test(std::span<const double> a, std::span<const double> b);

struct LatencyStats {
  double mean_ms = 0.0;                 // per query, over all repetitions
  double median_ms = 0.0;               // median of repetition_ms
  /// Interleaved runs only: median over repetitions of this pipeline's share
  /// of the repetition's mean across pipelines, times the median of those
  /// means. Cancels machine-speed drift between repetitions.
  double drift_corrected_ms = 0.0;
  std::vector<double> repetition_ms;   // per-query mean of each repetition
  double cv = 0.0;                      // coefficient of variation over repetitions
};

/// Keeps freed heap memory mapped (glibc only) so that the large per-batch
/// tensors are not page-faulted in again on every query. Call once at startup
/// of a process that measures latency.
void retain_freed_memory();

/// One warm-up pass, then `repetitions` timed passes of run(q) for every query
/// index q < num_queries. Single-threaded.
LatencyStats measure_latency(const std::function<void(std::size_t)>& run, std::size_t num_queries,
                             std::size_t repetitions);

/// Like measure_latency for several pipelines, interleaving them within each
/// repetition (in alternating order) so that slow drifts in machine speed
/// affect all of them alike.
std::vector<LatencyStats> measure_latency_interleaved(
    std::span<const std::function<void(std::size_t)>> runs, std::size_t num_queries,
    std::size_t repetitions);

struct MetricReport {
  std::string name;
  MapResult result;
  std::optional<TTest> test;
  std::string test_against;
  std::optional<double> latency_ms;

  /// One JSON object on a single line.
  std::string to_jsonl() const;
};

/// Writes one line per report, replacing `path` atomically.
void write_reports(const std::filesystem::path& path, std::span<const MetricReport> reports);

}  // namespace modrank
