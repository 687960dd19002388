#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "convmatch/corpus.hpp"
#include "convmatch/matrix.hpp"
#include "convmatch/model.hpp"

namespace convmatch {

enum class WordKind { topic, discourse };

/// The n most probable tokens of one topic (or discourse role) row, ties lexicographic.
std::vector<std::string> top_words(const Model& model, const Vocabulary& vocab, WordKind kind,
                                   std::size_t index, std::size_t n);
/// Same ordering rule over an explicit probability row.
std::vector<std::string> top_words(std::span<const double> row, const Vocabulary& vocab,
                                   std::size_t n);

enum class SalienceLabel { topic, discourse, unknown };

struct SalienceRecord {
  std::string token;
  double p_topic = 0.0;      // max over topics of p(w | topic)
  double p_discourse = 0.0;  // max over roles of p(w | role)
  SalienceLabel label = SalienceLabel::unknown;
  double confidence = 0.0;   // |log p_topic - log p_discourse|
};

/// Discourse iff p_discourse > p_topic; equal masses count as topic.
SalienceRecord classify_salience(std::string token, double p_topic, double p_discourse);

/// One record per token in order; out-of-vocabulary tokens are labelled unknown.
std::vector<SalienceRecord> word_salience(std::span<const std::string> tokens, const Model& model,
                                          const Vocabulary& vocab);

struct TransitionHistogram {
  /// D x D proportions of (argmax role of q -> argmax role of r).
  Matrix positive;
  Matrix negative;
};

TransitionHistogram discourse_transitions(std::span<const PairInstance> instances,
                                          const Model& model);

/// Largest per-row total-variation distance between the row-normalised histogram
/// and `transition`, minimised over relabellings of the learned roles.
double transition_distance(const Matrix& histogram, const Matrix& transition);

struct SimilarityHistogram {
  std::vector<double> positive;
  std::vector<double> negative;
  std::size_t skipped = 0;
};

/// Bin of a cosine similarity on [0, 1]; negatives clamp to bin 0, 1.0 to the last bin.
std::size_t similarity_bin(double cosine, std::size_t bins);

SimilarityHistogram topic_similarity_histogram(std::span<const PairInstance> instances,
                                               const Model& model, std::size_t bins = 10);

// Report formatting.
std::string matrix_csv(const Matrix& m, std::string_view row_label = "d_q");
std::string similarity_csv(const SimilarityHistogram& h);
std::string salience_csv(std::span<const SalienceRecord> records);
std::string salience_html(std::span<const SalienceRecord> records);
std::string_view to_string(SalienceLabel label) noexcept;

}  // namespace convmatch
