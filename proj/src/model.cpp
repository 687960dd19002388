#include "convmatch/model.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

#include "convmatch/errors.hpp"

namespace convmatch {

void ModelConfig::validate() const {
  if (topics < 2) throw UsageError("K (topics) must be at least 2");
  if (roles < 2) throw UsageError("D (discourse roles) must be at least 2");
  if (vocab_size < 1) throw UsageError("vocabulary size must be at least 1");
  if (hidden < 1) throw UsageError("hidden width must be at least 1");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw UsageError("gamma must lie in [0, 1]");
  if (!(margin > 0.0)) throw UsageError("lambda (margin) must be positive");
  if (!(tau > 0.0)) throw UsageError("tau must be positive");
}

ModelConfig ModelConfig::defaults(Mode mode) {
  ModelConfig c;
  if (mode == Mode::forum) {
    c.topics = 50;
    c.roles = 5;
  } else {
    c.topics = 10;
    c.roles = 3;
  }
  return c;
}

std::vector<Model::Shape> Model::expected_shapes(const ModelConfig& c) {
  const std::size_t V = c.vocab_size, K = c.topics, D = c.roles, H = c.hidden;
  return {
      {"enc.w", 2 * V, H},        {"enc.b", 1, H},
      {"mu.w", H, K},             {"mu.b", 1, K},
      {"log_sigma.w", H, K},      {"log_sigma.b", 1, K},
      {"theta.w", K, K},          {"theta.b", 1, K},
      {"topic_word.w", K, V},     {"topic_word.b", 1, V},
      {"disc_enc.w", V, D},       {"disc_enc.b", 1, D},
      {"disc_word.w", D, V},      {"disc_word.b", 1, V},
      {"mi.w", K, D},             {"mi.b", 1, D},
      {"match_topic", K, K},      {"match_disc", D, D},
  };
}

Model::Model(ModelConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  for (const auto& s : expected_shapes(config_)) {
    Matrix m(s.rows, s.cols);
    const bool bias = s.name.ends_with(".b");
    if (!bias) {
      // Glorot-uniform: a flat +-0.05 leaves the stacked bilinear path stuck at its saddle.
      const double limit = std::sqrt(6.0 / static_cast<double>(s.rows + s.cols));
      for (double& x : m.values()) x = (rng.uniform() * 2.0 - 1.0) * limit;
    }
    params_.add(s.name, std::move(m));
  }
  bind_ids();
}

Model::Model(ModelConfig config, ParamStore params) : config_(config), params_(std::move(params)) {
  config_.validate();
  const auto shapes = expected_shapes(config_);
  if (params_.size() != shapes.size()) {
    throw DataError("shape mismatch: expected " + std::to_string(shapes.size()) +
                    " parameter tensors, got " + std::to_string(params_.size()));
  }
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const auto& p = params_[i];
    const auto& s = shapes[i];
    if (p.name != s.name || p.value.rows() != s.rows || p.value.cols() != s.cols) {
      throw DataError("shape mismatch for '" + s.name + "': expected (" + std::to_string(s.rows) +
                      "x" + std::to_string(s.cols) + "), got '" + p.name + "' " +
                      p.value.shape_string());
    }
  }
  bind_ids();
}

void Model::bind_ids() {
  auto at = [&](const char* name) { return params_.index_of(name); };
  ids_ = ParamIds{at("enc.w"),        at("enc.b"),        at("mu.w"),         at("mu.b"),
                  at("log_sigma.w"),  at("log_sigma.b"),  at("theta.w"),      at("theta.b"),
                  at("topic_word.w"), at("topic_word.b"), at("disc_enc.w"),   at("disc_enc.b"),
                  at("disc_word.w"),  at("disc_word.b"),  at("mi.w"),         at("mi.b"),
                  at("match_topic"),  at("match_disc")};
}

namespace {

Matrix row_softmax(const Matrix& m) {
  Matrix out = m;
  for (std::size_t r = 0; r < out.rows(); ++r) softmax_inplace(out.row(r));
  return out;
}

}  // namespace

Matrix Model::topic_word_distribution() const {
  return row_softmax(params_[ids_.topic_word_w].value);
}

Matrix Model::discourse_word_distribution() const {
  return row_softmax(params_[ids_.disc_word_w].value);
}

// ---------------------------------------------------------------------------
// Graph construction

namespace {

/// Binds a model's parameters to a tape. Parameters become trainable leaves when
/// the tape was created over this model's store, read-only references otherwise.
class ModelGraph {
 public:
  ModelGraph(Tape& tape, const Model& model)
      : tape_(tape), model_(model), leaves_(model.params().size()) {
    trainable_ = tape.params() == &model.params();
  }

  Var leaf(std::size_t index) {
    if (!leaves_[index]) {
      leaves_[index] = trainable_ ? tape_.parameter(index)
                                  : tape_.constant_ref(model_.params()[index].value);
    }
    return *leaves_[index];
  }

  struct TopicVars {
    Var mu, log_sigma, z, theta;
  };

  TopicVars encode_topic(const SparseRows& input, Rng& rng, bool deterministic, bool training,
                         double dropout_rate) {
    const auto& id = model_.ids();
    Var h = tanh(sparse_affine(input, leaf(id.enc_w), leaf(id.enc_b)));
    h = dropout(h, dropout_rate, rng, training);
    TopicVars t;
    t.mu = affine(h, leaf(id.mu_w), leaf(id.mu_b));
    t.log_sigma = affine(h, leaf(id.log_sigma_w), leaf(id.log_sigma_b));
    t.z = sample_gaussian_reparam(t.mu, t.log_sigma, rng, deterministic);
    t.theta = softmax(affine(t.z, leaf(id.theta_w), leaf(id.theta_b)));
    return t;
  }

  struct DiscourseVars {
    Var logits, pi, d;
  };

  DiscourseVars encode_discourse(const SparseRows& x_norm, Rng& rng, bool deterministic) {
    const auto& id = model_.ids();
    DiscourseVars v;
    v.logits = sparse_affine(x_norm, leaf(id.disc_enc_w), leaf(id.disc_enc_b));
    v.pi = softmax(v.logits);
    v.d = deterministic ? v.pi : gumbel_softmax(v.logits, model_.config().tau, rng);
    return v;
  }

  Var topic_logits(Var theta) {
    return affine(theta, leaf(model_.ids().topic_word_w), leaf(model_.ids().topic_word_b));
  }

  Var discourse_logits(Var d) {
    return affine(d, leaf(model_.ids().disc_word_w), leaf(model_.ids().disc_word_b));
  }

  Var mi_logits(Var theta) { return affine(theta, leaf(model_.ids().mi_w), leaf(model_.ids().mi_b)); }

  /// Row-wise left_i^T W right_i as an n x 1 column.
  Var bilinear(Var left, std::size_t weight, Var right) {
    return row_sums(mul(matmul(left, leaf(weight)), right));
  }

  Tape& tape() { return tape_; }

 private:
  Tape& tape_;
  const Model& model_;
  std::vector<std::optional<Var>> leaves_;
  bool trainable_ = false;
};

SparseRow topic_input(const BowVector& x, const BowVector& c, std::size_t vocab) {
  SparseRow row = x.normalized();
  if (!c.empty()) {
    const SparseRow ctx = c.normalized();
    for (std::size_t e = 0; e < ctx.index.size(); ++e) {
      row.index.push_back(static_cast<std::uint32_t>(vocab + ctx.index[e]));
      row.value.push_back(ctx.value[e]);
    }
  }
  return row;
}

void check_vocab(const BowVector& b, std::size_t vocab) {
  if (!b.indices.empty() && b.indices.back() >= vocab) {
    throw UsageError("bag-of-words index " + std::to_string(b.indices.back()) +
                     " outside the model vocabulary of size " + std::to_string(vocab));
  }
}

std::vector<double> row_of(const Matrix& m, std::size_t r = 0) {
  auto s = m.row(r);
  return {s.begin(), s.end()};
}

Matrix one_row(std::span<const double> values, std::size_t expected, const char* what) {
  if (values.size() != expected) {
    throw UsageError(std::string(what) + ": expected length " + std::to_string(expected) +
                     ", got " + std::to_string(values.size()));
  }
  return Matrix::row_vector(values);
}

double dot_log(std::span<const double> logp, const BowVector& b) {
  double total = 0.0;
  for (std::size_t e = 0; e < b.indices.size(); ++e) total -= b.counts[e] * logp[b.indices[e]];
  return total;
}

}  // namespace

LatentTopic encode_topic(const Model& model, const BowVector& utterance, const BowVector& context,
                         Rng& rng, bool deterministic) {
  const std::size_t V = model.config().vocab_size;
  check_vocab(utterance, V);
  check_vocab(context, V);
  Tape tape;
  ModelGraph g(tape, model);
  SparseRows input{2 * V, {topic_input(utterance, context, V)}};
  auto t = g.encode_topic(input, rng, deterministic, false, 0.0);
  return LatentTopic{row_of(t.mu.value()), row_of(t.log_sigma.value()), row_of(t.z.value()),
                     row_of(t.theta.value())};
}

LatentDiscourse encode_discourse(const Model& model, const BowVector& utterance, Rng& rng,
                                 bool deterministic) {
  const std::size_t V = model.config().vocab_size;
  check_vocab(utterance, V);
  Tape tape;
  ModelGraph g(tape, model);
  SparseRows input{V, {utterance.normalized()}};
  auto v = g.encode_discourse(input, rng, deterministic);
  return LatentDiscourse{row_of(v.pi.value()), row_of(v.d.value())};
}

Latents encode(const Model& model, const BowVector& utterance, const BowVector& context, Rng& rng,
               bool deterministic) {
  Latents l;
  l.topic = encode_topic(model, utterance, context, rng, deterministic);
  l.discourse = encode_discourse(model, utterance, rng, deterministic);
  return l;
}

WordDistributions decode_words(const Model& model, std::span<const double> theta,
                               std::span<const double> d) {
  Tape tape;
  ModelGraph g(tape, model);
  Var th = tape.constant(one_row(theta, model.config().topics, "decode_words theta"));
  Var dd = tape.constant(one_row(d, model.config().roles, "decode_words d"));
  Var tl = g.topic_logits(th);
  Var dl = g.discourse_logits(dd);
  return WordDistributions{row_of(log_softmax(tl).value()), row_of(log_softmax(dl).value()),
                           row_of(log_softmax(add(tl, dl)).value())};
}

MatchScores score_pair(const Model& model, const Latents& q, const Latents& r) {
  const auto& c = model.config();
  const auto& p = model.params();
  auto bilinear = [](std::span<const double> left, const Matrix& w, std::span<const double> right) {
    if (left.size() != w.rows() || right.size() != w.cols()) {
      throw UsageError("score_pair: latent size does not match the matching matrix " +
                       w.shape_string());
    }
    double s = 0.0;
    for (std::size_t i = 0; i < w.rows(); ++i) {
      double inner = 0.0;
      for (std::size_t j = 0; j < w.cols(); ++j) inner += w(i, j) * right[j];
      s += left[i] * inner;
    }
    return s;
  };
  MatchScores m;
  m.topic = bilinear(r.topic.z, p[model.ids().match_topic].value, q.topic.z);
  m.discourse = bilinear(r.discourse.d, p[model.ids().match_disc].value, q.discourse.d);
  m.total = c.gamma * m.topic + (1.0 - c.gamma) * m.discourse;
  return m;
}

ElboTerms elbo_losses(const Model& model, const BowVector& utterance, const BowVector& context,
                      const Latents& latents) {
  const std::size_t V = model.config().vocab_size;
  check_vocab(utterance, V);
  check_vocab(context, V);
  const auto words = decode_words(model, latents.topic.theta, latents.discourse.d);
  ElboTerms e;
  e.l_t = dot_log(words.topic, utterance) + kl_gaussian_std(latents.topic.mu, latents.topic.log_sigma);
  e.l_d = dot_log(words.discourse, utterance) + kl_categorical_uniform(latents.discourse.pi);
  e.l_x = dot_log(words.joint, utterance);
  return e;
}

double mi_loss(const Model& model, std::span<const double> theta) {
  Tape tape;
  ModelGraph g(tape, model);
  Var th = tape.constant(one_row(theta, model.config().topics, "mi_loss theta"));
  return kl_categorical_uniform_logits(g.mi_logits(th)).value()(0, 0);
}

double margin_loss(double s_pos, std::span<const double> s_negs, double margin) {
  if (s_negs.empty()) throw UsageError("margin_loss needs at least one negative");
  double total = 0.0;
  for (double s : s_negs) total += std::max(0.0, margin - s_pos + s);
  return total;
}

double total_loss(const LossBundle& parts) noexcept {
  return parts.l_t + parts.l_d + parts.l_x + parts.l_m - parts.l_mi;
}

LossBundle BatchGraph::values() const {
  LossBundle b;
  b.l_t = l_t.scalar();
  b.l_d = l_d.scalar();
  b.l_x = l_x.scalar();
  b.l_mi = l_mi.scalar();
  b.l_m = l_m.scalar();
  b.l_total = loss.scalar();
  return b;
}

BatchGraph build_objective(Tape& tape, const Model& model,
                           std::span<const PairInstance* const> batch, Rng& rng,
                           const ForwardOptions& options) {
  if (batch.empty()) throw UsageError("empty batch");
  const auto& cfg = model.config();
  const std::size_t V = cfg.vocab_size;
  const bool deterministic = !options.training;

  SparseRows topic_in{2 * V, {}}, x_norm{V, {}}, x_counts{V, {}};
  std::vector<std::size_t> response_rows, candidate_rows;
  std::vector<std::size_t> pos_sel, neg_sel;  // indices into the flattened candidate list
  std::vector<std::size_t> first_candidate(batch.size());

  auto push_row = [&](const BowVector& x, const BowVector& c) {
    check_vocab(x, V);
    check_vocab(c, V);
    topic_in.rows.push_back(topic_input(x, c, V));
    x_norm.rows.push_back(x.normalized());
    x_counts.rows.push_back(x.as_counts());
    return x_norm.rows.size() - 1;
  };

  for (std::size_t b = 0; b < batch.size(); ++b) {
    const PairInstance& inst = *batch[b];
    const std::size_t r_row = push_row(inst.response, inst.context_r);
    first_candidate[b] = candidate_rows.size();
    for (std::size_t k = 0; k < inst.candidate_count(); ++k) {
      const std::size_t row = push_row(inst.candidate(k).bow, inst.context_q);
      response_rows.push_back(r_row);
      candidate_rows.push_back(row);
    }
    for (std::size_t k = 1; k < inst.candidate_count(); ++k) {
      pos_sel.push_back(first_candidate[b]);
      neg_sel.push_back(first_candidate[b] + k);
    }
  }

  ModelGraph g(tape, model);
  auto topic = g.encode_topic(topic_in, rng, deterministic, options.training, options.dropout);
  auto disc = g.encode_discourse(x_norm, rng, deterministic);

  Var z_r = select_rows(topic.z, response_rows);
  Var z_q = select_rows(topic.z, candidate_rows);
  Var d_r = select_rows(disc.d, response_rows);
  Var d_q = select_rows(disc.d, candidate_rows);
  Var s_topic = g.bilinear(z_r, model.ids().match_topic, z_q);
  Var s_disc = g.bilinear(d_r, model.ids().match_disc, d_q);
  Var s_total = add(scale(s_topic, cfg.gamma), scale(s_disc, 1.0 - cfg.gamma));

  BatchGraph out;
  out.scores.resize(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    for (std::size_t k = 0; k < batch[b]->candidate_count(); ++k) {
      const std::size_t i = first_candidate[b] + k;
      out.scores[b].push_back(MatchScores{s_topic.value()(i, 0), s_disc.value()(i, 0),
                                          s_total.value()(i, 0)});
    }
  }
  if (!options.compute_losses) return out;

  const double n_rows = static_cast<double>(x_norm.rows.size());
  const double n_inst = static_cast<double>(batch.size());

  Var topic_logits = g.topic_logits(topic.theta);
  Var disc_logits = g.discourse_logits(disc.d);
  // The topic decoder reconstructs the utterance; the context only conditions the encoder.
  Var l_t_rows = add(weighted_nll(log_softmax(topic_logits), x_counts),
                     kl_gaussian_std(topic.mu, topic.log_sigma));
  Var l_d_rows = add(weighted_nll(log_softmax(disc_logits), x_counts),
                     kl_categorical_uniform_logits(disc.logits));
  Var l_x_rows = weighted_nll(log_softmax(add(topic_logits, disc_logits)), x_counts);
  Var l_mi_rows = kl_categorical_uniform_logits(g.mi_logits(topic.theta));

  Var hinge = relu(add_scalar(sub(select_rows(s_total, neg_sel), select_rows(s_total, pos_sel)),
                              cfg.margin));

  out.l_t = scale(sum(l_t_rows), 1.0 / n_rows);
  out.l_d = scale(sum(l_d_rows), 1.0 / n_rows);
  out.l_x = scale(sum(l_x_rows), 1.0 / n_rows);
  out.l_mi = scale(sum(l_mi_rows), 1.0 / n_rows);
  out.l_m = scale(sum(hinge), 1.0 / n_inst);
  out.loss = sub(add(add(add(out.l_t, out.l_d), out.l_x), out.l_m), out.l_mi);
  return out;
}

std::vector<MatchScores> candidate_scores(const Model& model, const PairInstance& instance) {
  Tape tape;
  Rng unused(0);
  const PairInstance* batch[] = {&instance};
  ForwardOptions opts;
  opts.training = false;
  opts.compute_losses = false;
  return build_objective(tape, model, batch, unused, opts).scores.front();
}

}  // namespace convmatch
