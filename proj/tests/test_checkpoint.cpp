#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "convmatch/checkpoint.hpp"
#include "convmatch/errors.hpp"
#include "convmatch/eval.hpp"

using namespace convmatch;

namespace {

struct Fixture {
  SyntheticCorpus synth;
  Vocabulary vocab;
  std::vector<PairInstance> pairs;
  Checkpoint ckpt;

  Fixture() {
    SyntheticSpec spec;
    spec.transition = default_transition();
    spec.num_conversations = 6;
    synth = generate_synthetic(spec);
    vocab = Vocabulary::build(synth.conversations, 1);
    pairs = build_all_pairs(synth.conversations, vocab, PairOptions{4, 0}, synth.gold);

    ckpt.config.vocab_size = vocab.size();
    ckpt.config.topics = 4;
    ckpt.config.roles = 2;
    ckpt.config.hidden = 8;
    ckpt.vocab = vocab;
    Model m(ckpt.config, 12);
    Rng rng(3);
    for (auto& p : m.params()) {
      for (double& v : p.value.values()) v += rng.normal() * 0.1;
    }
    ckpt.params = m.params();
    ckpt.summary = TrainSummary{12, 7, 4, 0.5, 0.05};
  }
};

}  // namespace

TEST_CASE("serialise then parse preserves scores and bytes") {
  Fixture f;
  const std::string bytes = serialize_checkpoint(f.ckpt);
  CHECK(bytes.rfind("CONVMATCH-CHECKPOINT 1\n", 0) == 0);
  Checkpoint back = parse_checkpoint(bytes);
  CHECK(serialize_checkpoint(back) == bytes);
  CHECK(back.config == f.ckpt.config);
  CHECK(back.vocab.tokens() == f.vocab.tokens());
  CHECK(back.summary.best_epoch == 4);

  const Model a = f.ckpt.model(), b = back.model();
  for (const auto& inst : f.pairs) {
    const auto sa = candidate_scores(a, inst), sb = candidate_scores(b, inst);
    for (std::size_t i = 0; i < sa.size(); ++i) CHECK(std::abs(sa[i].total - sb[i].total) <= 1e-12);
  }
}

TEST_CASE("file round trip") {
  Fixture f;
  const std::string path = "checkpoint_roundtrip.ckpt";
  save_checkpoint(f.ckpt, path);
  Checkpoint back = load_checkpoint(path);
  CHECK(serialize_checkpoint(back) == serialize_checkpoint(f.ckpt));
  std::remove(path.c_str());
  CHECK_THROWS_WITH_AS(load_checkpoint("/nonexistent/x.ckpt"), doctest::Contains("cannot open"),
                       DataError);
}

TEST_CASE("corrupt, version and shape errors are distinct") {
  Fixture f;
  const std::string bytes = serialize_checkpoint(f.ckpt);

  CHECK_THROWS_WITH_AS(parse_checkpoint(bytes.substr(0, bytes.size() - 9)),
                       doctest::Contains("corrupt checkpoint"), DataError);
  CHECK_THROWS_WITH_AS(parse_checkpoint(bytes.substr(0, 30)), doctest::Contains("corrupt checkpoint"),
                       DataError);
  CHECK_THROWS_WITH_AS(parse_checkpoint("garbage"), doctest::Contains("corrupt checkpoint"), DataError);

  std::string v2 = bytes;
  v2.replace(0, std::string("CONVMATCH-CHECKPOINT 1").size(), "CONVMATCH-CHECKPOINT 2");
  CHECK_THROWS_WITH_AS(parse_checkpoint(v2), doctest::Contains("version"), DataError);

  ModelConfig want = f.ckpt.config;
  want.topics = 10;
  CHECK_THROWS_WITH_AS(parse_checkpoint(bytes, &want), doctest::Contains("shape mismatch"), DataError);
}

TEST_CASE("a K=50 checkpoint refuses a K=10 request") {
  Checkpoint big;
  big.config.vocab_size = 20;
  big.config.topics = 50;
  big.config.roles = 5;
  big.config.hidden = 4;
  std::vector<std::string> toks;
  for (int i = 0; i < 20; ++i) toks.push_back("w" + std::to_string(i));
  big.vocab = Vocabulary::from_tokens(toks, 1);
  big.params = Model(big.config, 1).params();
  ModelConfig want = big.config;
  want.topics = 10;
  want.roles = 3;
  CHECK_THROWS_WITH_AS(parse_checkpoint(serialize_checkpoint(big), &want),
                       doctest::Contains("shape mismatch"), DataError);
}
