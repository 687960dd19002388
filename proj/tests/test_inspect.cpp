#include <doctest.h>

#include <cmath>
#include <numeric>

#include "convmatch/errors.hpp"
#include "convmatch/inspect.hpp"

using namespace convmatch;

namespace {

ModelConfig config(std::size_t V, std::size_t K, std::size_t D) {
  ModelConfig c;
  c.vocab_size = V;
  c.topics = K;
  c.roles = D;
  c.hidden = 4;
  return c;
}

BowVector one_word(std::uint32_t w) {
  BowVector b;
  b.indices = {w};
  b.counts = {1};
  b.total_count = 1;
  return b;
}

double total(std::span<const double> v) { return std::accumulate(v.begin(), v.end(), 0.0); }

}  // namespace

TEST_CASE("top words") {
  auto vocab = Vocabulary::from_tokens({"c", "a", "b"}, 1);
  const std::vector<double> hand{0.5, 0.3, 0.2};
  CHECK(top_words(hand, vocab, 2) == std::vector<std::string>{"c", "a"});
  CHECK(top_words(hand, vocab, 1) == std::vector<std::string>{"c"});
  const std::vector<double> flat{1.0 / 3, 1.0 / 3, 1.0 / 3};
  CHECK(top_words(flat, vocab, 2) == std::vector<std::string>{"a", "b"});

  Model m(config(3, 2, 2), 1);
  CHECK(top_words(m, vocab, WordKind::topic, 1, 3).size() == 3);
  CHECK(top_words(m, vocab, WordKind::topic, 0, 2) == top_words(m, vocab, WordKind::topic, 0, 2));
  CHECK_THROWS_AS(top_words(m, vocab, WordKind::discourse, 2, 1), UsageError);
}

TEST_CASE("salience labels") {
  CHECK(classify_salience("w", 0.01, 0.1).label == SalienceLabel::discourse);
  CHECK(classify_salience("w", 0.1, 0.1).label == SalienceLabel::topic);
  CHECK(classify_salience("w", 0.01, 0.1).confidence == doctest::Approx(std::log(10.0)));

  // Raising p_discourse with p_topic fixed flips topic -> discourse at most once.
  bool flipped = false;
  for (int i = 1; i <= 100; ++i) {
    const bool disc = classify_salience("w", 0.2, 0.004 * i).label == SalienceLabel::discourse;
    if (flipped) CHECK(disc);
    flipped = flipped || disc;
  }
  CHECK(flipped);

  auto vocab = Vocabulary::from_tokens({"a", "b", "c"}, 1);
  Model m(config(3, 2, 2), 2);
  const std::vector<std::string> text{"a", "zzz", "c"};
  auto recs = word_salience(text, m, vocab);
  REQUIRE(recs.size() == 3);
  CHECK(recs[1].label == SalienceLabel::unknown);
  CHECK(recs[0].label != SalienceLabel::unknown);
  CHECK(salience_html(recs).find("zzz") != std::string::npos);
  CHECK(salience_csv(recs).find("unknown") != std::string::npos);
}

TEST_CASE("discourse transitions") {
  // Word 0 pins role 1 and word 1 pins role 2 through the discourse encoder.
  Model m(config(2, 2, 3), 3);
  auto& w = m.params()[m.ids().disc_enc_w].value;
  w.fill(0.0);
  w(0, 1) = 10.0;
  w(1, 2) = 10.0;
  m.params()[m.ids().disc_enc_b].value.fill(0.0);

  PairInstance inst;
  inst.mode = Mode::dialogue;
  inst.response = one_word(1);
  inst.positive = Candidate{"q", 0, one_word(0)};
  inst.negatives = {Candidate{"n", 1, one_word(1)}};
  inst.context_q = inst.context_r = one_word(0);

  auto h = discourse_transitions(std::span(&inst, 1), m);
  CHECK(h.positive(1, 2) == 1.0);
  CHECK(total(h.positive.values()) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(h.negative(2, 2) == 1.0);
  CHECK_THROWS_AS(discourse_transitions({}, m), DataError);
}

TEST_CASE("transition distance") {
  const Matrix t{{0.8, 0.2}, {0.3, 0.7}};
  CHECK(transition_distance(Matrix{{0.4, 0.1}, {0.15, 0.35}}, t) == doctest::Approx(0.0).epsilon(1e-15));
  // Learned roles swapped relative to the planted ones.
  CHECK(transition_distance(Matrix{{0.35, 0.15}, {0.1, 0.4}}, t) < 1e-12);
  CHECK(transition_distance(Matrix{{0.5, 0.0}, {0.0, 0.5}}, t) == doctest::Approx(0.3));
  CHECK_THROWS_AS(transition_distance(Matrix(3, 3), t), UsageError);
}

TEST_CASE("similarity bins and histograms") {
  CHECK(similarity_bin(1.0, 10) == 9);
  CHECK(similarity_bin(0.0, 10) == 0);
  CHECK(similarity_bin(-0.4, 10) == 0);
  CHECK(similarity_bin(0.55, 10) == 5);
  CHECK_THROWS_AS(similarity_bin(0.5, 0), UsageError);

  SyntheticSpec spec;
  spec.transition = default_transition();
  spec.num_conversations = 5;
  auto synth = generate_synthetic(spec);
  auto vocab = Vocabulary::build(synth.conversations, 1);
  auto pairs = build_all_pairs(synth.conversations, vocab, PairOptions{4, 0}, synth.gold);
  Model m(config(vocab.size(), 4, 2), 4);
  auto h = topic_similarity_histogram(pairs, m, 10);
  CHECK(total(h.positive) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(total(h.negative) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(similarity_csv(h).find('\n') != std::string::npos);

  auto t = discourse_transitions(pairs, m);
  CHECK(std::abs(total(t.positive.values()) - 1.0) < 1e-9);
  CHECK(std::abs(total(t.negative.values()) - 1.0) < 1e-9);
  CHECK(matrix_csv(t.positive).rfind("d_q", 0) == 0);
}
