#include "convmatch/inspect.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "convmatch/errors.hpp"
#include "convmatch/log.hpp"

namespace convmatch {

std::vector<std::string> top_words(std::span<const double> row, const Vocabulary& vocab,
                                   std::size_t n) {
  if (row.size() != vocab.size()) {
    throw UsageError("top_words: distribution length " + std::to_string(row.size()) +
                     " does not match vocabulary size " + std::to_string(vocab.size()));
  }
  std::vector<std::uint32_t> order(row.size());
  std::iota(order.begin(), order.end(), 0u);
  const std::size_t k = std::min(n, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::uint32_t a, std::uint32_t b) {
                      if (row[a] != row[b]) return row[a] > row[b];
                      return vocab.token(a) < vocab.token(b);
                    });
  std::vector<std::string> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back(vocab.token(order[i]));
  return out;
}

std::vector<std::string> top_words(const Model& model, const Vocabulary& vocab, WordKind kind,
                                   std::size_t index, std::size_t n) {
  if (vocab.size() != model.config().vocab_size) {
    throw DataError("vocabulary does not match the model");
  }
  const Matrix dist = kind == WordKind::topic ? model.topic_word_distribution()
                                              : model.discourse_word_distribution();
  if (index >= dist.rows()) {
    throw UsageError(std::string(kind == WordKind::topic ? "topic" : "discourse role") +
                     " index " + std::to_string(index) + " out of range [0, " +
                     std::to_string(dist.rows()) + ")");
  }
  return top_words(dist.row(index), vocab, n);
}

SalienceRecord classify_salience(std::string token, double p_topic, double p_discourse) {
  SalienceRecord r;
  r.token = std::move(token);
  r.p_topic = p_topic;
  r.p_discourse = p_discourse;
  r.label = p_discourse > p_topic ? SalienceLabel::discourse : SalienceLabel::topic;
  r.confidence = std::abs(std::log(p_topic) - std::log(p_discourse));
  return r;
}

std::vector<SalienceRecord> word_salience(std::span<const std::string> tokens, const Model& model,
                                          const Vocabulary& vocab) {
  if (vocab.size() != model.config().vocab_size) {
    throw DataError("vocabulary does not match the model");
  }
  const Matrix topic = model.topic_word_distribution();
  const Matrix disc = model.discourse_word_distribution();
  auto column_max = [](const Matrix& m, std::uint32_t col) {
    double best = 0.0;
    for (std::size_t r = 0; r < m.rows(); ++r) best = std::max(best, m(r, col));
    return best;
  };
  std::vector<SalienceRecord> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) {
    if (auto idx = vocab.index_of(t)) {
      out.push_back(classify_salience(t, column_max(topic, *idx), column_max(disc, *idx)));
    } else {
      SalienceRecord r;
      r.token = t;
      r.label = SalienceLabel::unknown;
      out.push_back(std::move(r));
    }
  }
  return out;
}

namespace {

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

void normalize_total(Matrix& m) {
  double total = 0.0;
  for (double x : m.values()) total += x;
  if (total > 0.0) {
    for (double& x : m.values()) x /= total;
  }
}

}  // namespace

TransitionHistogram discourse_transitions(std::span<const PairInstance> instances,
                                          const Model& model) {
  if (instances.empty()) throw DataError("no instances for discourse transitions");
  const std::size_t D = model.config().roles;
  TransitionHistogram h{Matrix(D, D), Matrix(D, D)};
  Rng unused(0);
  for (const auto& inst : instances) {
    const std::size_t r_role = argmax(encode_discourse(model, inst.response, unused, true).pi);
    for (std::size_t k = 0; k < inst.candidate_count(); ++k) {
      const std::size_t q_role =
          argmax(encode_discourse(model, inst.candidate(k).bow, unused, true).pi);
      (k == 0 ? h.positive : h.negative)(q_role, r_role) += 1.0;
    }
  }
  normalize_total(h.positive);
  normalize_total(h.negative);
  return h;
}

double transition_distance(const Matrix& histogram, const Matrix& transition) {
  const std::size_t D = transition.rows();
  if (!histogram.same_shape(transition) || transition.cols() != D) {
    throw UsageError("transition_distance: shape mismatch " + histogram.shape_string() + " vs " +
                     transition.shape_string());
  }
  std::vector<std::size_t> perm(D);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    // Learned role i is read as planted role perm[i].
    Matrix relabelled(D, D);
    for (std::size_t i = 0; i < D; ++i) {
      for (std::size_t j = 0; j < D; ++j) relabelled(perm[i], perm[j]) = histogram(i, j);
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < D; ++i) {
      double mass = 0.0;
      for (double x : relabelled.row(i)) mass += x;
      double tv = 1.0;
      if (mass > 0.0) {
        tv = 0.0;
        for (std::size_t j = 0; j < D; ++j) tv += std::abs(relabelled(i, j) / mass - transition(i, j));
        tv *= 0.5;
      }
      worst = std::max(worst, tv);
    }
    best = std::min(best, worst);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

std::size_t similarity_bin(double cosine, std::size_t bins) {
  if (bins < 1) throw UsageError("histogram needs at least one bin");
  if (!(cosine > 0.0)) return 0;
  const auto b = static_cast<std::size_t>(cosine * static_cast<double>(bins));
  return std::min(b, bins - 1);
}

SimilarityHistogram topic_similarity_histogram(std::span<const PairInstance> instances,
                                               const Model& model, std::size_t bins) {
  if (instances.empty()) throw DataError("no instances for topic similarity");
  if (bins < 1) throw UsageError("histogram needs at least one bin");
  SimilarityHistogram h{std::vector<double>(bins, 0.0), std::vector<double>(bins, 0.0), 0};
  Rng unused(0);
  auto norm = [](std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
  };
  for (const auto& inst : instances) {
    const auto z_r = encode_topic(model, inst.response, inst.context_r, unused, true).z;
    const double nr = norm(z_r);
    for (std::size_t k = 0; k < inst.candidate_count(); ++k) {
      const auto z_q = encode_topic(model, inst.candidate(k).bow, inst.context_q, unused, true).z;
      const double nq = norm(z_q);
      if (nr == 0.0 || nq == 0.0) {
        warn("zero-norm topic latent in response '" + inst.response_id + "'; pair skipped");
        ++h.skipped;
        continue;
      }
      double dot = 0.0;
      for (std::size_t i = 0; i < z_r.size(); ++i) dot += z_r[i] * z_q[i];
      (k == 0 ? h.positive : h.negative)[similarity_bin(dot / (nr * nq), bins)] += 1.0;
    }
  }
  for (auto* v : {&h.positive, &h.negative}) {
    const double total = std::accumulate(v->begin(), v->end(), 0.0);
    if (total > 0.0) {
      for (double& x : *v) x /= total;
    }
  }
  return h;
}

// ---------------------------------------------------------------------------
// Formatting

std::string_view to_string(SalienceLabel label) noexcept {
  switch (label) {
    case SalienceLabel::topic: return "topic";
    case SalienceLabel::discourse: return "discourse";
    default: return "unknown";
  }
}

namespace {

std::string num(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", x);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string html_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string matrix_csv(const Matrix& m, std::string_view row_label) {
  std::string out(row_label);
  for (std::size_t j = 0; j < m.cols(); ++j) out += "," + std::to_string(j);
  out += '\n';
  for (std::size_t i = 0; i < m.rows(); ++i) {
    out += std::to_string(i);
    for (std::size_t j = 0; j < m.cols(); ++j) out += "," + num(m(i, j));
    out += '\n';
  }
  return out;
}

std::string similarity_csv(const SimilarityHistogram& h) {
  std::string out = "bin_low,bin_high,positive,negative\n";
  const double width = 1.0 / static_cast<double>(h.positive.size());
  for (std::size_t b = 0; b < h.positive.size(); ++b) {
    out += num(b * width) + "," + num((b + 1) * width) + "," + num(h.positive[b]) + "," +
           num(h.negative[b]) + "\n";
  }
  return out;
}

std::string salience_csv(std::span<const SalienceRecord> records) {
  std::string out = "token,p_topic,p_discourse,label,confidence\n";
  for (const auto& r : records) {
    out += csv_field(r.token) + "," + num(r.p_topic) + "," + num(r.p_discourse) + "," +
           std::string(to_string(r.label)) + "," + num(r.confidence) + "\n";
  }
  return out;
}

std::string salience_html(std::span<const SalienceRecord> records) {
  std::string out =
      "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>word salience</title>"
      "</head>\n<body>\n<p>"
      "<span style=\"color:rgb(200,30,30)\">topic</span> / "
      "<span style=\"color:rgb(30,60,200)\">discourse</span>; "
      "darker means higher confidence</p>\n<p>";
  for (const auto& r : records) {
    std::string color = "rgba(128,128,128,1)";
    if (r.label != SalienceLabel::unknown) {
      const double alpha = std::min(1.0, 0.3 + r.confidence / 4.0);
      color = (r.label == SalienceLabel::topic ? "rgba(200,30,30," : "rgba(30,60,200,") +
              num(alpha) + ")";
    }
    out += "<span title=\"" + std::string(to_string(r.label)) + " " + num(r.confidence) +
           "\" style=\"color:" + color + "\">" + html_escape(r.token) + "</span> ";
  }
  out += "</p>\n</body></html>\n";
  return out;
}

}  // namespace convmatch
