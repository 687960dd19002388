#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "convmatch/autodiff.hpp"
#include "convmatch/corpus.hpp"

namespace convmatch {

struct ModelConfig {
  std::size_t topics = 50;       // K
  std::size_t roles = 5;         // D
  std::size_t vocab_size = 0;    // V
  std::size_t hidden = 64;       // width of the shared topic-encoder layer
  double gamma = 0.5;            // topic vs. discourse weight in the match score
  double margin = 10.0;          // hinge margin lambda
  double tau = 1.0;              // Gumbel-softmax temperature

  /// Throws UsageError naming the violated constraint.
  void validate() const;
  /// forum: K=50, D=5; dialogue: K=10, D=3.
  static ModelConfig defaults(Mode mode);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LatentTopic {
  std::vector<double> mu;
  std::vector<double> log_sigma;
  std::vector<double> z;
  std::vector<double> theta;
};

struct LatentDiscourse {
  std::vector<double> pi;
  std::vector<double> d;
};

struct Latents {
  LatentTopic topic;
  LatentDiscourse discourse;
};

struct MatchScores {
  double topic = 0.0;
  double discourse = 0.0;
  double total = 0.0;
};

struct LossBundle {
  double l_t = 0.0;
  double l_d = 0.0;
  double l_x = 0.0;
  double l_mi = 0.0;
  double l_m = 0.0;
  double l_total = 0.0;
};

/// Log-probabilities over the vocabulary from the three decoders.
struct WordDistributions {
  std::vector<double> topic;
  std::vector<double> discourse;
  std::vector<double> joint;
};

struct ElboTerms {
  double l_t = 0.0;
  double l_d = 0.0;
  double l_x = 0.0;
};

/// Parameter indices inside Model::params().
struct ParamIds {
  std::size_t enc_w, enc_b;            // shared encoder layer, input [x ; c] (2V -> hidden)
  std::size_t mu_w, mu_b;              // hidden -> K
  std::size_t log_sigma_w, log_sigma_b;
  std::size_t theta_w, theta_b;        // K -> K
  std::size_t topic_word_w, topic_word_b;      // K -> V
  std::size_t disc_enc_w, disc_enc_b;          // V -> D
  std::size_t disc_word_w, disc_word_b;        // D -> V
  std::size_t mi_w, mi_b;              // K -> D, p(d | z) head
  std::size_t match_topic;             // K x K
  std::size_t match_disc;              // D x D
};

class Model {
 public:
  /// Glorot-uniform weights, zero biases, drawn from Rng(seed).
  Model(ModelConfig config, std::uint64_t seed);
  /// Adopts restored parameters; names and shapes must match expected_shapes(config).
  Model(ModelConfig config, ParamStore params);

  const ModelConfig& config() const noexcept { return config_; }
  ParamStore& params() noexcept { return params_; }
  const ParamStore& params() const noexcept { return params_; }
  const ParamIds& ids() const noexcept { return ids_; }

  struct Shape {
    std::string name;
    std::size_t rows;
    std::size_t cols;
  };
  /// Parameter manifest in storage order.
  static std::vector<Shape> expected_shapes(const ModelConfig& config);

  /// Topic-word distributions: row-softmax of the topic decoder weights (K x V).
  Matrix topic_word_distribution() const;
  /// Discourse-word distributions: row-softmax of the discourse decoder weights (D x V).
  Matrix discourse_word_distribution() const;

 private:
  void bind_ids();

  ModelConfig config_;
  ParamStore params_;
  ParamIds ids_{};
};

// ---------------------------------------------------------------------------
// Single-utterance operations (value level, no dropout).

/// Encodes the utterance in its context: mu, log_sigma from the shared layer over
/// [x/|x| ; c/|c|]; z = mu when deterministic, else reparameterised; theta = softmax(f_theta(z)).
LatentTopic encode_topic(const Model& model, const BowVector& utterance, const BowVector& context,
                         Rng& rng, bool deterministic);
/// pi = softmax(f_pi(x/|x|)); d = Gumbel-softmax sample (training) or pi (deterministic).
LatentDiscourse encode_discourse(const Model& model, const BowVector& utterance, Rng& rng,
                                 bool deterministic);
Latents encode(const Model& model, const BowVector& utterance, const BowVector& context, Rng& rng,
               bool deterministic);

WordDistributions decode_words(const Model& model, std::span<const double> theta,
                               std::span<const double> d);

/// Bilinear topic and discourse scores of response r against candidate q.
MatchScores score_pair(const Model& model, const Latents& q, const Latents& r);

/// All three reconstruct the utterance; the context only conditions the topic encoder.
ElboTerms elbo_losses(const Model& model, const BowVector& utterance, const BowVector& context,
                      const Latents& latents);

/// KL(p(d | z) || Uniform(D)) with p(d | z) = softmax(f_MI(theta)).
double mi_loss(const Model& model, std::span<const double> theta);

/// sum_i max(0, margin - s_pos + s_neg[i]). Throws on empty negatives.
double margin_loss(double s_pos, std::span<const double> s_negs, double margin);

/// l_t + l_d + l_x + l_m - l_mi.
double total_loss(const LossBundle& parts) noexcept;

// ---------------------------------------------------------------------------
// Batched graph used by training and ranking.

struct ForwardOptions {
  bool training = false;
  double dropout = 0.0;
  bool compute_losses = true;
};

struct BatchGraph {
  Var loss;
  Var l_t, l_d, l_x, l_mi, l_m;
  /// Per instance, per candidate (positive first) scores.
  std::vector<std::vector<MatchScores>> scores;

  LossBundle values() const;
};

/// Builds the mean-over-batch objective. Reconstruction, KL and MI terms are averaged
/// over every utterance row (responses and candidates); the hinge term over instances.
BatchGraph build_objective(Tape& tape, const Model& model,
                           std::span<const PairInstance* const> batch, Rng& rng,
                           const ForwardOptions& options);

/// Deterministic scores of every candidate of `instance` (positive first).
std::vector<MatchScores> candidate_scores(const Model& model, const PairInstance& instance);

}  // namespace convmatch
