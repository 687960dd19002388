// convmatch: train, evaluate, and inspect initiation-response matching models.
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <string>

#include <CLI11.hpp>

#include "convmatch/convmatch.h"

namespace {

struct Failure {
  cm_status status;
};

void check(cm_status s) {
  if (s != CM_OK) throw Failure{s};
}

struct CorpusDeleter {
  void operator()(cm_corpus* c) const { cm_corpus_free(c); }
};
struct ModelDeleter {
  void operator()(cm_model* m) const { cm_model_free(m); }
};
struct StringDeleter {
  void operator()(char* s) const { cm_free_string(s); }
};
using CorpusPtr = std::unique_ptr<cm_corpus, CorpusDeleter>;
using ModelPtr = std::unique_ptr<cm_model, ModelDeleter>;
using StringPtr = std::unique_ptr<char, StringDeleter>;

int usage(const std::string& message) {
  std::fprintf(stderr, "error: %s\n", message.c_str());
  return CM_ERR_USAGE;
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!(out << text)) {
    std::fprintf(stderr, "error: cannot write %s\n", path.c_str());
    throw Failure{CM_ERR_DATA};
  }
}

CorpusPtr load_corpus(const std::string& path, const std::string& gold) {
  cm_corpus* c = nullptr;
  check(cm_corpus_load(path.c_str(), gold.empty() ? nullptr : gold.c_str(), &c));
  return CorpusPtr(c);
}

ModelPtr load_model(const std::string& path, std::size_t k, std::size_t d) {
  cm_model* m = nullptr;
  check(cm_model_load(path.c_str(), k, d, &m));
  return ModelPtr(m);
}

StringPtr take(char* s) { return StringPtr(s); }

const std::map<std::string, cm_mode> kModes{{"forum", CM_MODE_FORUM},
                                            {"dialogue", CM_MODE_DIALOGUE}};
const std::map<std::string, cm_split> kSplits{
    {"all", CM_SPLIT_ALL}, {"train", CM_SPLIT_TRAIN}, {"valid", CM_SPLIT_VALID}};

void print_epoch(const cm_epoch_info* r, void*) {
  std::printf(
      "epoch %zu lr=%.6g l_t=%.6f l_d=%.6f l_x=%.6f l_mi=%.6f l_m=%.6f loss=%.6f "
      "valid_hits@1=%.4f valid_hits@2=%.4f valid_mrr=%.4f\n",
      r->epoch, r->lr, r->l_t, r->l_d, r->l_x, r->l_mi, r->l_m, r->l_total, r->valid_hits_at_1,
      r->valid_hits_at_2, r->valid_mrr);
  std::fflush(stdout);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Rank candidate initiations for responses with latent topics and discourse roles"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(cm_version()));

  std::string corpus, gold, out, report, checkpoint, mode_name, split_name = "all";
  cm_train_options topt;
  cm_train_options_init(&topt);
  bool quiet = false;

  auto* train = app.add_subcommand("train", "train a model and write a checkpoint");
  train->add_option("--corpus", corpus, "conversation corpus (JSON lines)")->required();
  train->add_option("--gold-pairs", gold, "explicit ranking instances (JSON lines)");
  train->add_option("--mode", mode_name, "forum or dialogue (default: from the corpus)")
      ->check(CLI::IsMember({"forum", "dialogue"}));
  train->add_option("--k", topt.topics, "topics (forum 50, dialogue 10)");
  train->add_option("--d", topt.roles, "discourse roles (forum 5, dialogue 3)");
  train->add_option("--hidden", topt.hidden, "topic encoder width")->capture_default_str();
  train->add_option("--gamma", topt.gamma, "topic weight in the match score, in [0, 1]")
      ->capture_default_str();
  train->add_option("--lambda", topt.margin, "hinge margin")->capture_default_str();
  train->add_option("--tau", topt.tau, "Gumbel-softmax temperature")->capture_default_str();
  train->add_option("--batch", topt.batch_size, "instances per batch")->capture_default_str();
  train->add_option("--dropout", topt.dropout, "dropout on the topic encoder")
      ->capture_default_str();
  train->add_option("--lr", topt.lr, "initial learning rate")->capture_default_str();
  train->add_option("--epochs", topt.max_epochs, "maximum epochs")->capture_default_str();
  train->add_option("--patience", topt.patience, "epochs without validation gain before stopping")
      ->capture_default_str();
  train->add_option("--seed", topt.seed, "seed for init, shuffling, sampling and the split")
      ->capture_default_str();
  train->add_option("--clip", topt.clip_norm, "max gradient norm, 0 disables")
      ->capture_default_str();
  train->add_option("--min-count", topt.min_count, "minimum token frequency")
      ->capture_default_str();
  train->add_option("--out", out, "checkpoint to write")->required();
  train->add_option("--report", report, "epoch log CSV (default: <out>.epochs.csv)");
  train->add_flag("--quiet", quiet, "no per-epoch lines");

  std::size_t expect_k = 0, expect_d = 0;
  std::string baseline;
  std::string rankings;
  auto* eval = app.add_subcommand("eval", "Hits@1, Hits@2 and MRR of a checkpoint on a corpus");
  eval->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
  eval->add_option("--corpus", corpus, "conversation corpus (JSON lines)")->required();
  eval->add_option("--gold-pairs", gold, "explicit ranking instances (JSON lines)");
  eval->add_option("--split", split_name, "all, or the train/valid side of the training split")
      ->check(CLI::IsMember({"all", "train", "valid"}))
      ->capture_default_str();
  eval->add_option("--baseline", baseline, "rank with a baseline instead of the model")
      ->check(CLI::IsMember({"position"}));
  eval->add_option("--k", expect_k, "reject checkpoints with a different topic count");
  eval->add_option("--d", expect_d, "reject checkpoints with a different role count");
  eval->add_option("--report", report, "metrics JSON file");
  eval->add_option("--rankings", rankings, "per-instance rankings (JSON lines)");

  std::string sub, kind = "topic", text;
  std::size_t index = 0, n = 10, bins = 10;
  auto* inspect = app.add_subcommand("inspect", "reports over a trained checkpoint");
  inspect->add_option("report", sub, "topwords | salience | transitions | topicsim")
      ->required()
      ->check(CLI::IsMember({"topwords", "salience", "transitions", "topicsim"}));
  inspect->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
  inspect->add_option("--corpus", corpus, "corpus for transitions and topicsim");
  inspect->add_option("--gold-pairs", gold, "explicit ranking instances (JSON lines)");
  inspect->add_option("--split", split_name, "all, train or valid")
      ->check(CLI::IsMember({"all", "train", "valid"}))
      ->capture_default_str();
  inspect->add_option("--kind", kind, "topwords: topic or discourse")
      ->check(CLI::IsMember({"topic", "discourse"}))
      ->capture_default_str();
  inspect->add_option("--k-index", index, "topwords: topic or role index")->capture_default_str();
  inspect->add_option("--n", n, "topwords: how many tokens")->capture_default_str();
  inspect->add_option("--text", text, "salience: whitespace-tokenised utterance");
  inspect->add_option("--bins", bins, "topicsim: histogram bins")->capture_default_str();
  inspect->add_option("--out", out, "output prefix (default: stdout)");

  cm_synth_options sopt;
  cm_synth_options_init(&sopt);
  std::string synth_mode = "dialogue";
  auto* synth = app.add_subcommand("synth", "write a corpus with planted topics and roles");
  synth->add_option("--out", out, "corpus to write")->required();
  synth->add_option("--gold-pairs", gold, "gold pairs to write");
  synth->add_option("--n", sopt.conversations, "conversations")->capture_default_str();
  synth->add_option("--k", sopt.topics, "planted topics")->capture_default_str();
  synth->add_option("--d", sopt.roles, "planted roles (2 unless a transition is given)")
      ->capture_default_str();
  synth->add_option("--vocab", sopt.vocab_size, "vocabulary size")->capture_default_str();
  synth->add_option("--mode", synth_mode, "forum or dialogue")
      ->check(CLI::IsMember({"forum", "dialogue"}))
      ->capture_default_str();
  synth->add_option("--seed", sopt.seed, "generator seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return CM_ERR_USAGE;
  }

  try {
    if (*train) {
      if (!mode_name.empty()) topt.mode = kModes.at(mode_name);
      const auto c = load_corpus(corpus, gold);
      const std::string log = report.empty() ? out + ".epochs.csv" : report;
      cm_model* raw = nullptr;
      check(cm_train(c.get(), &topt, quiet ? nullptr : print_epoch, nullptr, log.c_str(), &raw));
      ModelPtr m(raw);
      check(cm_model_save(m.get(), out.c_str()));
      cm_model_info info{};
      check(cm_model_describe(m.get(), &info));
      std::printf("best epoch %zu of %zu, valid_mrr=%.4f; wrote %s and %s\n", info.best_epoch,
                  info.epochs_run, info.best_valid_mrr, out.c_str(), log.c_str());
    } else if (*eval) {
      const auto m = load_model(checkpoint, expect_k, expect_d);
      const auto c = load_corpus(corpus, gold);
      cm_metrics metrics{};
      char* ranked = nullptr;
      check(cm_evaluate(m.get(), c.get(), kSplits.at(split_name), !baseline.empty(), &metrics,
                        rankings.empty() ? nullptr : &ranked));
      const auto ranked_text = take(ranked);
      std::printf("%s hits@1=%.4f hits@2=%.4f mrr=%.4f n=%zu\n",
                  baseline.empty() ? "model" : "position", metrics.hits_at_1, metrics.hits_at_2,
                  metrics.mrr, metrics.n_instances);
      if (!report.empty()) {
        char* json = nullptr;
        check(cm_metrics_json(&metrics, &json));
        write_file(report, take(json).get());
      }
      if (!rankings.empty()) write_file(rankings, ranked_text.get());
    } else if (*inspect) {
      const auto m = load_model(checkpoint, 0, 0);
      auto emit = [&](const std::string& suffix, const char* body) {
        if (out.empty()) {
          if (!suffix.empty()) std::printf("# %s\n", suffix.c_str());
          std::fputs(body, stdout);
        } else {
          const std::string path = out + (suffix.empty() ? "" : "." + suffix);
          write_file(path, body);
          std::printf("wrote %s\n", path.c_str());
        }
      };
      auto need_corpus = [&] {
        if (corpus.empty()) throw CLI::ValidationError("--corpus", "required by " + sub);
        return load_corpus(corpus, gold);
      };
      if (sub == "topwords") {
        char* words = nullptr;
        check(cm_inspect_topwords(m.get(), kind == "topic" ? CM_WORDS_TOPIC : CM_WORDS_DISCOURSE,
                                  index, n, &words));
        emit("", take(words).get());
      } else if (sub == "salience") {
        if (text.empty()) return usage("salience needs --text");
        char *csv = nullptr, *html = nullptr;
        check(cm_inspect_salience(m.get(), text.c_str(), &csv, &html));
        const auto csv_text = take(csv);
        const auto html_text = take(html);
        emit("csv", csv_text.get());
        emit("html", html_text.get());
      } else if (sub == "transitions") {
        const auto c = need_corpus();
        char *pos = nullptr, *neg = nullptr;
        check(cm_inspect_transitions(m.get(), c.get(), kSplits.at(split_name), &pos, &neg));
        const auto pos_text = take(pos);
        const auto neg_text = take(neg);
        emit("positive.csv", pos_text.get());
        emit("negative.csv", neg_text.get());
      } else {
        const auto c = need_corpus();
        char* csv = nullptr;
        check(cm_inspect_topicsim(m.get(), c.get(), kSplits.at(split_name), bins, &csv));
        emit("csv", take(csv).get());
      }
    } else if (*synth) {
      sopt.mode = kModes.at(synth_mode);
      cm_corpus* raw = nullptr;
      check(cm_corpus_synthetic(&sopt, &raw));
      CorpusPtr c(raw);
      check(cm_corpus_save(c.get(), out.c_str(), gold.empty() ? nullptr : gold.c_str()));
      std::printf("wrote %zu conversations to %s\n", cm_corpus_conversations(c.get()), out.c_str());
    }
  } catch (const Failure& f) {
    if (*cm_last_error() != '\0') std::fprintf(stderr, "error: %s\n", cm_last_error());
    return f.status;
  } catch (const CLI::ValidationError& e) {
    return usage(e.what());
  }
  return CM_OK;
}
