#include <doctest.h>

#include <cmath>
#include <limits>

#include "convmatch/errors.hpp"
#include "convmatch/eval.hpp"

using namespace convmatch;

namespace {

PairInstance instance(Mode mode, std::vector<int> positions) {
  PairInstance p;
  p.mode = mode;
  p.response_id = "r";
  p.positive = Candidate{"q0", positions[0], {}};
  for (std::size_t i = 1; i < positions.size(); ++i) {
    p.negatives.push_back(Candidate{"q" + std::to_string(i), positions[i], {}});
  }
  return p;
}

std::vector<RankingResult> with_ranks(std::vector<std::size_t> ranks) {
  std::vector<RankingResult> out;
  for (auto r : ranks) {
    RankingResult res;
    res.rank_of_positive = r;
    out.push_back(res);
  }
  return out;
}

}  // namespace

TEST_CASE("ranking by scores") {
  auto p = instance(Mode::dialogue, {3, 4, 1, 0});
  const std::vector<double> top{0.9, 0.1, 0.2, 0.3};
  CHECK(rank_by_scores(p, top).rank_of_positive == 1);

  auto q = instance(Mode::dialogue, {0, 1, 2, 3});
  const std::vector<double> s{0.4, 0.9, 0.1, 0.2};
  auto res = rank_by_scores(q, s);
  CHECK(res.rank_of_positive == 2);
  CHECK(res.ranked_ids == std::vector<std::string>{"q1", "q0", "q3", "q2"});
  CHECK(res.ranks == std::vector<std::size_t>{2, 1, 4, 3});
}

TEST_CASE("ties follow the mode's position order, then id") {
  const std::vector<double> flat{1.0, 1.0, 1.0};
  auto forum = rank_by_scores(instance(Mode::forum, {2, 0, 5}), flat);
  CHECK(forum.ranked_ids == std::vector<std::string>{"q1", "q0", "q2"});
  auto dialogue = rank_by_scores(instance(Mode::dialogue, {2, 0, 5}), flat);
  CHECK(dialogue.ranked_ids == std::vector<std::string>{"q2", "q0", "q1"});
  auto same = rank_by_scores(instance(Mode::forum, {1, 1, 1}), flat);
  CHECK(same.ranked_ids == std::vector<std::string>{"q0", "q1", "q2"});
}

TEST_CASE("non-finite scores are rejected") {
  const std::vector<double> bad{0.1, std::numeric_limits<double>::quiet_NaN()};
  CHECK_THROWS_AS(rank_by_scores(instance(Mode::forum, {0, 1}), bad), NumericError);
  const std::vector<double> wrong_size{0.1};
  CHECK_THROWS_AS(rank_by_scores(instance(Mode::forum, {0, 1}), wrong_size), UsageError);
}

TEST_CASE("hits and mrr by hand") {
  CHECK(hits_at_n(with_ranks({1, 1, 1}), 1) == 1.0);
  CHECK(hits_at_n(with_ranks({1, 2, 3, 4}), 2) == 0.5);
  CHECK(hits_at_n(with_ranks({1, 2, 3, 5}), 5) == 1.0);
  CHECK(mrr(with_ranks({1, 1})) == 1.0);
  CHECK(mrr(with_ranks({1, 2})) == 0.75);
  CHECK(mrr(with_ranks({2, 4, 5})) == doctest::Approx((0.5 + 0.25 + 0.2) / 3).epsilon(1e-15));
  CHECK(mrr(with_ranks({2, 4, 5})) == doctest::Approx(0.31666).epsilon(1e-4));

  CHECK_THROWS_AS(hits_at_n({}, 1), DataError);
  CHECK_THROWS_AS(mrr({}), DataError);
  CHECK_THROWS_AS(hits_at_n(with_ranks({1}), 0), UsageError);
}

TEST_CASE("position baseline") {
  auto forum = position_baseline(instance(Mode::forum, {0, 3, 5}));
  CHECK(forum.rank_of_positive == 1);
  auto dialogue = position_baseline(instance(Mode::dialogue, {9, 4, 2, 7}));
  CHECK(dialogue.rank_of_positive == 1);
  auto late = position_baseline(instance(Mode::forum, {9, 4, 2}));
  CHECK(late.rank_of_positive == 3);
}

TEST_CASE("a random scorer expects Hits@1 of one fifth with four negatives") {
  // Enumerate every placement of the positive among 5 candidates and every tie-free
  // score permutation: the positive is top in exactly 1/5 of them.
  std::vector<int> perm{0, 1, 2, 3, 4};
  std::size_t top = 0, count = 0;
  do {
    std::vector<double> scores(perm.begin(), perm.end());
    auto res = rank_by_scores(instance(Mode::dialogue, {0, 1, 2, 3, 4}), scores);
    top += res.rank_of_positive == 1;
    ++count;
  } while (std::next_permutation(perm.begin(), perm.end()));
  CHECK(static_cast<double>(top) / static_cast<double>(count) == 0.2);
}

TEST_CASE("metric properties over random score sets") {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.below(4);
    std::vector<int> positions(n);
    for (auto& p : positions) p = static_cast<int>(rng.below(6));
    auto inst = instance(rng.below(2) ? Mode::forum : Mode::dialogue, positions);
    std::vector<double> scores(n);
    for (auto& s : scores) s = static_cast<double>(rng.below(3));
    auto res = rank_by_scores(inst, scores);

    auto sorted = res.ranks;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < n; ++i) CHECK(sorted[i] == i + 1);

    std::vector<double> shifted;
    for (double s : scores) shifted.push_back(std::exp(s) * 3 + 1);
    CHECK(rank_by_scores(inst, shifted).ranks == res.ranks);
  }
}

TEST_CASE("summaries and report formats") {
  auto rs = with_ranks({1, 2, 1, 3});
  rs[0].response_id = "x";
  auto m = summarize(rs);
  CHECK(m.hits_at_1 == 0.5);
  CHECK(m.hits_at_2 == 0.75);
  CHECK(m.mrr == doctest::Approx((1 + 0.5 + 1 + 1.0 / 3) / 4));
  CHECK(m.n_instances == 4);
  CHECK(m.hits_at_1 <= m.hits_at_2);
  CHECK(m.mrr >= m.hits_at_1);
  CHECK(metrics_json(m).find("\"hits_at_1\"") != std::string::npos);
  CHECK(format_metrics(m).find("mrr") != std::string::npos);
  const auto lines = rankings_jsonl(rs);
  CHECK(std::count(lines.begin(), lines.end(), '\n') == 4);
}
