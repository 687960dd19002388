#include "convmatch/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include <json.hpp>

#include "convmatch/errors.hpp"

namespace convmatch {

bool tie_precedes(Mode mode, const Candidate& a, const Candidate& b) {
  if (a.position != b.position) {
    return mode == Mode::forum ? a.position < b.position : a.position > b.position;
  }
  return a.id < b.id;
}

RankingResult rank_by_scores(const PairInstance& instance, std::span<const double> scores) {
  const std::size_t n = instance.candidate_count();
  if (scores.size() != n) {
    throw UsageError("rank_by_scores: " + std::to_string(scores.size()) + " scores for " +
                     std::to_string(n) + " candidates");
  }
  for (double s : scores) {
    if (!std::isfinite(s)) {
      throw NumericError("non-finite score for response '" + instance.response_id + "'");
    }
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return tie_precedes(instance.mode, instance.candidate(a), instance.candidate(b));
  });
  RankingResult r;
  r.response_id = instance.response_id;
  r.scores.assign(scores.begin(), scores.end());
  r.ranks.assign(n, 0);
  for (std::size_t place = 0; place < n; ++place) {
    r.ranked_ids.push_back(instance.candidate(order[place]).id);
    r.ranks[order[place]] = place + 1;
  }
  r.rank_of_positive = r.ranks[0];
  return r;
}

RankingResult rank_candidates(const PairInstance& instance, const Model& model) {
  const auto scores = candidate_scores(model, instance);
  std::vector<double> totals;
  totals.reserve(scores.size());
  for (const auto& s : scores) totals.push_back(s.total);
  return rank_by_scores(instance, totals);
}

std::vector<RankingResult> rank_all(std::span<const PairInstance> instances, const Model& model) {
  std::vector<RankingResult> out;
  out.reserve(instances.size());
  for (const auto& inst : instances) out.push_back(rank_candidates(inst, model));
  return out;
}

RankingResult position_baseline(const PairInstance& instance) {
  std::vector<double> flat(instance.candidate_count(), 0.0);
  return rank_by_scores(instance, flat);
}

std::vector<RankingResult> position_baseline_all(std::span<const PairInstance> instances) {
  std::vector<RankingResult> out;
  out.reserve(instances.size());
  for (const auto& inst : instances) out.push_back(position_baseline(inst));
  return out;
}

double hits_at_n(std::span<const RankingResult> results, std::size_t n) {
  if (results.empty()) throw DataError("no ranking results to evaluate");
  if (n < 1) throw UsageError("Hits@N requires N >= 1");
  std::size_t hits = 0;
  for (const auto& r : results) hits += r.rank_of_positive <= n ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(results.size());
}

double mrr(std::span<const RankingResult> results) {
  if (results.empty()) throw DataError("no ranking results to evaluate");
  double total = 0.0;
  for (const auto& r : results) total += 1.0 / static_cast<double>(r.rank_of_positive);
  return total / static_cast<double>(results.size());
}

MetricsReport summarize(std::span<const RankingResult> results) {
  return MetricsReport{hits_at_n(results, 1), hits_at_n(results, 2), mrr(results), results.size()};
}

std::string format_metrics(const MetricsReport& report) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "hits@1=%.4f hits@2=%.4f mrr=%.4f n=%zu", report.hits_at_1,
                report.hits_at_2, report.mrr, report.n_instances);
  return buf;
}

std::string metrics_json(const MetricsReport& report) {
  nlohmann::json j;
  j["hits_at_1"] = report.hits_at_1;
  j["hits_at_2"] = report.hits_at_2;
  j["mrr"] = report.mrr;
  j["n_instances"] = report.n_instances;
  return j.dump(2) + "\n";
}

std::string rankings_jsonl(std::span<const RankingResult> results) {
  std::string out;
  for (const auto& r : results) {
    nlohmann::json j;
    j["response_id"] = r.response_id;
    j["ranked_ids"] = r.ranked_ids;
    j["scores"] = r.scores;
    j["rank_of_positive"] = r.rank_of_positive;
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace convmatch
