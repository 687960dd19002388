#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "convmatch/corpus.hpp"
#include "convmatch/model.hpp"

namespace convmatch {

struct RankingResult {
  std::string response_id;
  /// Candidate ids, best first.
  std::vector<std::string> ranked_ids;
  /// Scores in candidate order (positive first, then negatives).
  std::vector<double> scores;
  /// 1-based rank of each candidate, in candidate order.
  std::vector<std::size_t> ranks;
  std::size_t rank_of_positive = 0;
};

struct MetricsReport {
  double hits_at_1 = 0.0;
  double hits_at_2 = 0.0;
  double mrr = 0.0;
  std::size_t n_instances = 0;
};

/// True when candidate a is ordered before candidate b on equal scores:
/// earlier position first in forum mode, later position first in dialogue mode,
/// then lexicographic id.
bool tie_precedes(Mode mode, const Candidate& a, const Candidate& b);

/// Sorts candidates by descending score under the tie rule. `scores` follows
/// candidate order: positive first, then negatives. Non-finite scores throw NumericError.
RankingResult rank_by_scores(const PairInstance& instance, std::span<const double> scores);

/// Scores every candidate with deterministic latents and ranks them.
RankingResult rank_candidates(const PairInstance& instance, const Model& model);
std::vector<RankingResult> rank_all(std::span<const PairInstance> instances, const Model& model);

/// Earlier candidates first for forum conversations, later first for dialogues.
RankingResult position_baseline(const PairInstance& instance);
std::vector<RankingResult> position_baseline_all(std::span<const PairInstance> instances);

/// Fraction of results whose positive ranks within the top n. Throws on empty input.
double hits_at_n(std::span<const RankingResult> results, std::size_t n);
/// Mean of 1 / rank_of_positive. Throws on empty input.
double mrr(std::span<const RankingResult> results);
MetricsReport summarize(std::span<const RankingResult> results);

std::string format_metrics(const MetricsReport& report);
std::string metrics_json(const MetricsReport& report);
/// One JSON line per instance for error analysis.
std::string rankings_jsonl(std::span<const RankingResult> results);

}  // namespace convmatch
