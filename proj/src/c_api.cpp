#include "convmatch/convmatch.h"

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <new>
#include <sstream>
#include <string>

#include "convmatch/checkpoint.hpp"
#include "convmatch/corpus.hpp"
#include "convmatch/errors.hpp"
#include "convmatch/eval.hpp"
#include "convmatch/inspect.hpp"
#include "convmatch/trainer.hpp"

using namespace convmatch;

struct cm_corpus {
  std::vector<Conversation> conversations;
  std::vector<GoldPair> gold;
};

struct cm_model {
  Checkpoint ckpt;
  Model model;
};

namespace {

constexpr double kValidFraction = 0.1;
// Below this share of known tokens the corpus was almost surely built with another vocabulary.
constexpr double kMinCoverage = 0.5;

thread_local std::string last_error;

template <class F>
cm_status guarded(F&& body) {
  try {
    last_error.clear();
    body();
    return CM_OK;
  } catch (const Error& e) {
    last_error = e.what();
    return static_cast<cm_status>(e.kind());
  } catch (const std::bad_alloc&) {
    last_error = "out of memory";
  } catch (const std::exception& e) {
    last_error = std::string("internal error: ") + e.what();
  } catch (...) {
    last_error = "internal error";
  }
  return CM_ERR_INTERNAL;
}

void require(const void* p, const char* what) {
  if (p == nullptr) throw UsageError(std::string(what) + " must not be null");
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out == nullptr) throw std::bad_alloc();
  std::memcpy(out, s.data(), s.size() + 1);
  return out;
}

Mode to_mode(cm_mode m) {
  switch (m) {
    case CM_MODE_FORUM: return Mode::forum;
    case CM_MODE_DIALOGUE: return Mode::dialogue;
    default: throw UsageError("mode must be forum or dialogue");
  }
}

cm_mode from_mode(Mode m) { return m == Mode::forum ? CM_MODE_FORUM : CM_MODE_DIALOGUE; }

cm_mode corpus_mode(const std::vector<Conversation>& conversations) {
  if (conversations.empty()) return CM_MODE_AUTO;
  const Mode first = conversations.front().mode;
  for (const auto& c : conversations) {
    if (c.mode != first) return CM_MODE_AUTO;
  }
  return from_mode(first);
}

void check_coverage(const std::vector<Conversation>& conversations, const Vocabulary& vocab) {
  std::size_t total = 0, known = 0;
  for (const auto& c : conversations) {
    for (const auto& u : c.utterances) {
      for (const auto& t : u.tokens) {
        ++total;
        known += vocab.index_of(t) ? 1 : 0;
      }
    }
  }
  if (total == 0) throw DataError("corpus has no tokens");
  const double coverage = static_cast<double>(known) / static_cast<double>(total);
  if (coverage < kMinCoverage) {
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "vocabulary mismatch: only %.1f%% of corpus tokens are in the checkpoint "
                  "vocabulary (fingerprint %016llx); re-vectorize the corpus with the training "
                  "vocabulary or retrain on it",
                  100.0 * coverage, static_cast<unsigned long long>(vocab.fingerprint()));
    throw DataError(buf);
  }
}

std::vector<PairInstance> select(std::vector<PairInstance> instances, cm_split split,
                                 std::uint64_t seed) {
  if (split == CM_SPLIT_ALL) return instances;
  if (split != CM_SPLIT_TRAIN && split != CM_SPLIT_VALID) throw UsageError("unknown split");
  Split s = split_train_valid(std::move(instances), kValidFraction, seed);
  return split == CM_SPLIT_TRAIN ? std::move(s.train) : std::move(s.valid);
}

// Instances of `corpus` vectorised with the model vocabulary.
std::vector<PairInstance> model_instances(const cm_model& m, const cm_corpus& corpus,
                                          cm_split split) {
  auto conversations = filter_utterances(corpus.conversations);
  check_coverage(conversations, m.ckpt.vocab);
  auto instances = build_all_pairs(conversations, m.ckpt.vocab,
                                   PairOptions{4, m.ckpt.summary.seed}, corpus.gold);
  instances = select(std::move(instances), split, m.ckpt.summary.seed);
  if (instances.empty()) throw DataError("no ranking instances in the selected corpus split");
  return instances;
}

}  // namespace

extern "C" {

const char* cm_last_error(void) { return last_error.c_str(); }

void cm_free_string(char* s) { std::free(s); }

const char* cm_version(void) { return "1.0.0"; }

cm_status cm_corpus_load(const char* corpus_path, const char* gold_path, cm_corpus** out) {
  return guarded([&] {
    require(corpus_path, "corpus path");
    require(out, "output handle");
    auto c = std::make_unique<cm_corpus>();
    c->conversations = load_corpus(corpus_path);
    if (gold_path != nullptr) c->gold = load_gold_pairs(gold_path);
    *out = c.release();
  });
}

void cm_corpus_free(cm_corpus* corpus) { delete corpus; }

size_t cm_corpus_conversations(const cm_corpus* corpus) {
  return corpus == nullptr ? 0 : corpus->conversations.size();
}

cm_mode cm_corpus_mode(const cm_corpus* corpus) {
  return corpus == nullptr ? CM_MODE_AUTO : corpus_mode(corpus->conversations);
}

void cm_synth_options_init(cm_synth_options* options) {
  if (options == nullptr) return;
  const SyntheticSpec spec;
  options->conversations = spec.num_conversations;
  options->topics = spec.topics;
  options->roles = spec.roles;
  options->vocab_size = spec.vocab_size;
  options->mode = from_mode(spec.mode);
  options->seed = spec.seed;
  options->transition = nullptr;
}

cm_status cm_corpus_synthetic(const cm_synth_options* options, cm_corpus** out) {
  return guarded([&] {
    require(options, "options");
    require(out, "output handle");
    SyntheticSpec spec;
    spec.num_conversations = options->conversations;
    spec.topics = options->topics;
    spec.roles = options->roles;
    spec.vocab_size = options->vocab_size;
    spec.mode = to_mode(options->mode);
    spec.seed = options->seed;
    if (options->transition != nullptr) {
      spec.transition = Matrix(spec.roles, spec.roles);
      std::memcpy(spec.transition.values().data(), options->transition,
                  spec.roles * spec.roles * sizeof(double));
    } else if (spec.roles == 2) {
      spec.transition = default_transition();
    } else {
      throw UsageError("the built-in transition matrix has 2 roles; pass one for " +
                       std::to_string(spec.roles));
    }
    SyntheticCorpus syn = generate_synthetic(spec);
    auto c = std::make_unique<cm_corpus>();
    c->conversations = std::move(syn.conversations);
    c->gold = std::move(syn.gold);
    *out = c.release();
  });
}

cm_status cm_corpus_save(const cm_corpus* corpus, const char* corpus_path, const char* gold_path) {
  return guarded([&] {
    require(corpus, "corpus");
    require(corpus_path, "corpus path");
    save_corpus(corpus->conversations, corpus_path);
    if (gold_path != nullptr) save_gold_pairs(corpus->gold, gold_path);
  });
}

void cm_train_options_init(cm_train_options* options) {
  if (options == nullptr) return;
  const ModelConfig mc;
  const TrainConfig tc;
  options->mode = CM_MODE_AUTO;
  options->topics = 0;
  options->roles = 0;
  options->hidden = mc.hidden;
  options->gamma = mc.gamma;
  options->margin = mc.margin;
  options->tau = mc.tau;
  options->batch_size = tc.batch_size;
  options->dropout = tc.dropout;
  options->max_epochs = tc.max_epochs;
  options->lr = tc.initial_lr;
  options->patience = tc.patience;
  options->seed = tc.seed;
  options->clip_norm = tc.clip_norm.value_or(0.0);
  options->min_count = 15;
  options->cap = PairOptions{}.cap;
}

cm_status cm_train(const cm_corpus* corpus, const cm_train_options* options,
                   cm_epoch_callback on_epoch, void* user, const char* epoch_csv_path,
                   cm_model** out) {
  return guarded([&] {
    require(corpus, "corpus");
    require(options, "options");
    require(out, "output handle");
    const cm_mode found = corpus_mode(corpus->conversations);
    if (corpus->conversations.empty()) throw DataError("corpus has no conversations");
    cm_mode mode = options->mode;
    if (mode == CM_MODE_AUTO) {
      if (found == CM_MODE_AUTO) throw UsageError("corpus mixes modes; pass a mode explicitly");
      mode = found;
    } else if (found != CM_MODE_AUTO && found != mode) {
      throw UsageError(std::string("requested mode ") + std::string(to_string(to_mode(mode))) +
                       " but the corpus is " + std::string(to_string(to_mode(found))));
    }

    ModelConfig mc = ModelConfig::defaults(to_mode(mode));
    if (options->topics != 0) mc.topics = options->topics;
    if (options->roles != 0) mc.roles = options->roles;
    mc.hidden = options->hidden;
    mc.gamma = options->gamma;
    mc.margin = options->margin;
    mc.tau = options->tau;

    TrainConfig tc;
    tc.batch_size = options->batch_size;
    tc.dropout = options->dropout;
    tc.max_epochs = options->max_epochs;
    tc.initial_lr = options->lr;
    tc.patience = options->patience;
    tc.seed = options->seed;
    tc.clip_norm.reset();
    if (options->clip_norm > 0.0) tc.clip_norm = options->clip_norm;
    tc.validate();

    auto conversations = filter_utterances(corpus->conversations);
    Vocabulary vocab = Vocabulary::build(conversations, options->min_count);
    if (vocab.size() == 0) throw DataError("vocabulary is empty");
    mc.vocab_size = vocab.size();
    mc.validate();
    auto instances = build_all_pairs(conversations, vocab, PairOptions{options->cap, tc.seed},
                                     corpus->gold);
    Split split = split_train_valid(std::move(instances), kValidFraction, tc.seed);
    if (split.train.empty() || split.valid.empty()) {
      throw DataError("corpus yields " + std::to_string(split.train.size()) + " training and " +
                      std::to_string(split.valid.size()) +
                      " validation instances; both must be non-empty");
    }

    std::ofstream csv;
    if (epoch_csv_path != nullptr) {
      csv.open(epoch_csv_path, std::ios::binary);
      if (!csv) throw DataError(std::string("cannot write ") + epoch_csv_path);
      csv << epoch_csv_header();
    }
    auto callback = [&](const EpochRecord& r) {
      if (csv.is_open()) csv << epoch_csv_row(r) << std::flush;
      if (on_epoch != nullptr) {
        const cm_epoch_info info{r.epoch,         r.lr,         r.loss.l_t,
                                 r.loss.l_d,      r.loss.l_x,   r.loss.l_mi,
                                 r.loss.l_m,      r.loss.l_total, r.valid.hits_at_1,
                                 r.valid.hits_at_2, r.valid.mrr};
        on_epoch(&info, user);
      }
    };
    TrainResult result = train(split.train, split.valid, mc, tc, callback);

    Checkpoint ckpt;
    ckpt.config = mc;
    ckpt.mode = to_mode(mode);
    ckpt.vocab = std::move(vocab);
    ckpt.params = result.model.params();
    ckpt.summary = TrainSummary{tc.seed, result.state.history.size(), result.state.best_epoch,
                                result.state.best_valid_mrr, result.state.current_lr};
    Model model = ckpt.model();
    *out = new cm_model{std::move(ckpt), std::move(model)};
  });
}

cm_status cm_model_save(const cm_model* model, const char* path) {
  return guarded([&] {
    require(model, "model");
    require(path, "checkpoint path");
    save_checkpoint(model->ckpt, path);
  });
}

cm_status cm_model_load(const char* path, size_t expect_topics, size_t expect_roles,
                        cm_model** out) {
  return guarded([&] {
    require(path, "checkpoint path");
    require(out, "output handle");
    ModelConfig expected;
    expected.topics = expect_topics;
    expected.roles = expect_roles;
    expected.vocab_size = 0;
    expected.hidden = 0;
    const bool check = expect_topics != 0 || expect_roles != 0;
    Checkpoint ckpt = load_checkpoint(path, check ? &expected : nullptr);
    Model model = ckpt.model();
    *out = new cm_model{std::move(ckpt), std::move(model)};
  });
}

void cm_model_free(cm_model* model) { delete model; }

cm_status cm_model_describe(const cm_model* model, cm_model_info* out) {
  return guarded([&] {
    require(model, "model");
    require(out, "output");
    const auto& c = model->ckpt.config;
    const auto& s = model->ckpt.summary;
    *out = cm_model_info{from_mode(model->ckpt.mode), c.topics, c.roles, c.vocab_size, c.hidden,
                         c.gamma, c.margin, c.tau, s.seed, s.epochs_run, s.best_epoch,
                         s.best_valid_mrr, s.final_lr};
  });
}

cm_status cm_evaluate(const cm_model* model, const cm_corpus* corpus, cm_split split,
                      int position_baseline, cm_metrics* out, char** rankings_jsonl) {
  return guarded([&] {
    require(model, "model");
    require(corpus, "corpus");
    require(out, "output");
    const auto instances = model_instances(*model, *corpus, split);
    const auto results = position_baseline != 0 ? position_baseline_all(instances)
                                                : rank_all(instances, model->model);
    const MetricsReport r = summarize(results);
    if (rankings_jsonl != nullptr) *rankings_jsonl = dup_string(convmatch::rankings_jsonl(results));
    *out = cm_metrics{r.hits_at_1, r.hits_at_2, r.mrr, r.n_instances};
  });
}

cm_status cm_metrics_json(const cm_metrics* metrics, char** out) {
  return guarded([&] {
    require(metrics, "metrics");
    require(out, "output");
    *out = dup_string(metrics_json(
        MetricsReport{metrics->hits_at_1, metrics->hits_at_2, metrics->mrr, metrics->n_instances}));
  });
}

cm_status cm_score_all(const cm_model* model, const cm_corpus* corpus, double** scores,
                       size_t* count) {
  return guarded([&] {
    require(model, "model");
    require(corpus, "corpus");
    require(scores, "output");
    require(count, "output");
    std::vector<double> all;
    for (const auto& inst : model_instances(*model, *corpus, CM_SPLIT_ALL)) {
      for (const auto& s : candidate_scores(model->model, inst)) all.push_back(s.total);
    }
    auto* buf = static_cast<double*>(std::malloc(std::max<std::size_t>(1, all.size()) * sizeof(double)));
    if (buf == nullptr) throw std::bad_alloc();
    std::copy(all.begin(), all.end(), buf);
    *scores = buf;
    *count = all.size();
  });
}

void cm_free_doubles(double* values) { std::free(values); }

cm_status cm_inspect_topwords(const cm_model* model, cm_word_kind kind, size_t index, size_t n,
                              char** out) {
  return guarded([&] {
    require(model, "model");
    require(out, "output");
    if (kind != CM_WORDS_TOPIC && kind != CM_WORDS_DISCOURSE) throw UsageError("unknown word kind");
    const auto words = top_words(model->model, model->ckpt.vocab,
                                 kind == CM_WORDS_TOPIC ? WordKind::topic : WordKind::discourse,
                                 index, n);
    std::string text;
    for (const auto& w : words) text += w + "\n";
    *out = dup_string(text);
  });
}

cm_status cm_inspect_salience(const cm_model* model, const char* text, char** csv, char** html) {
  return guarded([&] {
    require(model, "model");
    require(text, "text");
    std::istringstream in(text);
    std::vector<std::string> tokens;
    for (std::string t; in >> t;) tokens.push_back(t);
    if (tokens.empty()) throw UsageError("salience text has no tokens");
    const auto records = word_salience(tokens, model->model, model->ckpt.vocab);
    if (csv != nullptr) *csv = dup_string(salience_csv(records));
    if (html != nullptr) *html = dup_string(salience_html(records));
  });
}

cm_status cm_inspect_transitions(const cm_model* model, const cm_corpus* corpus, cm_split split,
                                 char** positive_csv, char** negative_csv) {
  return guarded([&] {
    require(model, "model");
    require(corpus, "corpus");
    const auto h = discourse_transitions(model_instances(*model, *corpus, split), model->model);
    if (positive_csv != nullptr) *positive_csv = dup_string(matrix_csv(h.positive));
    if (negative_csv != nullptr) *negative_csv = dup_string(matrix_csv(h.negative));
  });
}

cm_status cm_inspect_topicsim(const cm_model* model, const cm_corpus* corpus, cm_split split,
                              size_t bins, char** csv) {
  return guarded([&] {
    require(model, "model");
    require(corpus, "corpus");
    require(csv, "output");
    const auto h =
        topic_similarity_histogram(model_instances(*model, *corpus, split), model->model, bins);
    *csv = dup_string(similarity_csv(h));
  });
}

}  // extern "C"
