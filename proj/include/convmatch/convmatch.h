#ifndef CONVMATCH_CONVMATCH_H
#define CONVMATCH_CONVMATCH_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define CM_API __declspec(dllexport)
#else
#define CM_API __attribute__((visibility("default")))
#endif

/* Status codes double as process exit codes. */
typedef enum {
  CM_OK = 0,
  CM_ERR_USAGE = 1,
  CM_ERR_DATA = 2,
  CM_ERR_NUMERIC = 3,
  CM_ERR_INTERNAL = 4
} cm_status;

typedef enum { CM_MODE_FORUM = 0, CM_MODE_DIALOGUE = 1, CM_MODE_AUTO = -1 } cm_mode;
typedef enum { CM_SPLIT_ALL = 0, CM_SPLIT_TRAIN = 1, CM_SPLIT_VALID = 2 } cm_split;
typedef enum { CM_WORDS_TOPIC = 0, CM_WORDS_DISCOURSE = 1 } cm_word_kind;

typedef struct cm_corpus cm_corpus;
typedef struct cm_model cm_model;

/* Message of the last failed call on this thread; "" when none. */
CM_API const char* cm_last_error(void);
/* Releases strings returned through char** out-parameters. */
CM_API void cm_free_string(char* s);
CM_API const char* cm_version(void);

/* ---- corpus ---------------------------------------------------------- */

/* gold_path may be NULL. */
CM_API cm_status cm_corpus_load(const char* corpus_path, const char* gold_path, cm_corpus** out);
CM_API void cm_corpus_free(cm_corpus* corpus);
CM_API size_t cm_corpus_conversations(const cm_corpus* corpus);
/* CM_MODE_AUTO when the conversations mix modes. */
CM_API cm_mode cm_corpus_mode(const cm_corpus* corpus);

typedef struct {
  size_t conversations;
  size_t topics;
  size_t roles;
  size_t vocab_size;
  cm_mode mode;
  uint64_t seed;
  /* Row-major roles x roles; NULL selects the built-in identity-heavy matrix. */
  const double* transition;
} cm_synth_options;

CM_API void cm_synth_options_init(cm_synth_options* options);
CM_API cm_status cm_corpus_synthetic(const cm_synth_options* options, cm_corpus** out);
/* gold_path may be NULL. */
CM_API cm_status cm_corpus_save(const cm_corpus* corpus, const char* corpus_path,
                                const char* gold_path);

/* ---- training -------------------------------------------------------- */

typedef struct {
  cm_mode mode; /* CM_MODE_AUTO: taken from the corpus */
  size_t topics; /* 0: mode default */
  size_t roles;  /* 0: mode default */
  size_t hidden;
  double gamma;
  double margin;
  double tau;
  size_t batch_size;
  double dropout;
  size_t max_epochs;
  double lr;
  size_t patience;
  uint64_t seed;
  double clip_norm; /* <= 0 disables clipping */
  size_t min_count; /* tokens rarer than this are dropped; default 15 */
  size_t cap;
} cm_train_options;

typedef struct {
  size_t epoch;
  double lr;
  double l_t, l_d, l_x, l_mi, l_m, l_total;
  double valid_hits_at_1, valid_hits_at_2, valid_mrr;
} cm_epoch_info;

typedef void (*cm_epoch_callback)(const cm_epoch_info* info, void* user);

CM_API void cm_train_options_init(cm_train_options* options);
/* Splits the corpus by conversation (one tenth held out), trains, and returns the
   best-validation model. epoch_csv_path may be NULL. */
CM_API cm_status cm_train(const cm_corpus* corpus, const cm_train_options* options,
                          cm_epoch_callback on_epoch, void* user, const char* epoch_csv_path,
                          cm_model** out);

/* ---- checkpoints ----------------------------------------------------- */

CM_API cm_status cm_model_save(const cm_model* model, const char* path);
/* expect_topics / expect_roles of 0 accept whatever the file holds. */
CM_API cm_status cm_model_load(const char* path, size_t expect_topics, size_t expect_roles,
                               cm_model** out);
CM_API void cm_model_free(cm_model* model);

typedef struct {
  cm_mode mode;
  size_t topics, roles, vocab_size, hidden;
  double gamma, margin, tau;
  uint64_t seed;
  size_t epochs_run, best_epoch;
  double best_valid_mrr, final_lr;
} cm_model_info;

CM_API cm_status cm_model_describe(const cm_model* model, cm_model_info* out);

/* ---- evaluation ------------------------------------------------------ */

typedef struct {
  double hits_at_1;
  double hits_at_2;
  double mrr;
  size_t n_instances;
} cm_metrics;

/* Vectorises the corpus with the model vocabulary. position_baseline != 0 ranks by
   position only. rankings_jsonl may be NULL. */
CM_API cm_status cm_evaluate(const cm_model* model, const cm_corpus* corpus, cm_split split,
                             int position_baseline, cm_metrics* out, char** rankings_jsonl);
CM_API cm_status cm_metrics_json(const cm_metrics* metrics, char** out);

/* Scores of every candidate of every instance, concatenated in instance order. */
CM_API cm_status cm_score_all(const cm_model* model, const cm_corpus* corpus, double** scores,
                              size_t* count);
CM_API void cm_free_doubles(double* values);

/* ---- inspection ------------------------------------------------------ */

/* One token per line. */
CM_API cm_status cm_inspect_topwords(const cm_model* model, cm_word_kind kind, size_t index,
                                     size_t n, char** out);
/* text is whitespace-separated tokens. */
CM_API cm_status cm_inspect_salience(const cm_model* model, const char* text, char** csv,
                                     char** html);
CM_API cm_status cm_inspect_transitions(const cm_model* model, const cm_corpus* corpus,
                                        cm_split split, char** positive_csv,
                                        char** negative_csv);
CM_API cm_status cm_inspect_topicsim(const cm_model* model, const cm_corpus* corpus,
                                     cm_split split, size_t bins, char** csv);

#ifdef __cplusplus
}
#endif

#endif
