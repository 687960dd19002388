#include "convmatch/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "convmatch/errors.hpp"
#include "convmatch/log.hpp"
#include "convmatch/rng.hpp"

namespace convmatch {

using json = nlohmann::json;

std::string_view to_string(Mode mode) noexcept {
  return mode == Mode::forum ? "forum" : "dialogue";
}

std::string_view to_string(Speaker speaker) noexcept { return speaker == Speaker::a ? "a" : "b"; }

Mode parse_mode(std::string_view text) {
  if (text == "forum") return Mode::forum;
  if (text == "dialogue") return Mode::dialogue;
  throw UsageError("unknown mode '" + std::string(text) + "' (expected forum|dialogue)");
}

const Utterance* Conversation::find(std::string_view utterance_id) const {
  for (const auto& u : utterances) {
    if (u.id == utterance_id) return &u;
  }
  return nullptr;
}

void reindex_positions(Conversation& conversation) {
  int next_a = 0, next_b = 0;
  for (auto& u : conversation.utterances) {
    u.conversation_id = conversation.id;
    u.position = u.speaker == Speaker::a ? next_a++ : next_b++;
  }
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary Vocabulary::build(std::span<const Conversation> conversations, std::size_t min_count) {
  if (min_count < 1) throw UsageError("min_count must be at least 1");
  std::unordered_map<std::string, std::size_t> freq;
  std::size_t total = 0;
  for (const auto& c : conversations) {
    for (const auto& u : c.utterances) {
      for (const auto& t : u.tokens) {
        ++freq[t];
        ++total;
      }
    }
  }
  if (total == 0) throw DataError("empty corpus");
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [token, n] : freq) {
    if (n >= min_count) kept.emplace_back(token, n);
  }
  if (kept.empty()) throw DataError("vocabulary empty");
  std::sort(kept.begin(), kept.end(), [](const auto& x, const auto& y) {
    return x.second != y.second ? x.second > y.second : x.first < y.first;
  });
  std::vector<std::string> tokens;
  tokens.reserve(kept.size());
  for (auto& [token, n] : kept) tokens.push_back(std::move(token));
  return from_tokens(std::move(tokens), min_count);
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens, std::size_t min_count) {
  Vocabulary v;
  v.min_count_ = min_count;
  v.tokens_ = std::move(tokens);
  v.index_.reserve(v.tokens_.size());
  for (std::uint32_t i = 0; i < v.tokens_.size(); ++i) {
    if (!v.index_.emplace(v.tokens_[i], i).second) {
      throw DataError("duplicate vocabulary token '" + v.tokens_[i] + "'");
    }
  }
  return v;
}

std::optional<std::uint32_t> Vocabulary::index_of(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::uint64_t Vocabulary::fingerprint() const noexcept {
  std::uint64_t h = fnv1a64("convmatch-vocab");
  for (const auto& t : tokens_) {
    h = fnv1a64(t, h);
    h = fnv1a64(std::string_view("\0", 1), h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Bag of words

SparseRow BowVector::normalized() const {
  SparseRow row;
  row.index = indices;
  row.value.reserve(counts.size());
  for (auto c : counts) row.value.push_back(static_cast<double>(c) / total_count);
  return row;
}

SparseRow BowVector::as_counts() const {
  SparseRow row;
  row.index = indices;
  row.value.assign(counts.begin(), counts.end());
  return row;
}

BowVector vectorize(std::span<const std::string> tokens, const Vocabulary& vocab) {
  std::map<std::uint32_t, std::uint32_t> counts;
  for (const auto& t : tokens) {
    if (auto idx = vocab.index_of(t)) ++counts[*idx];
  }
  if (counts.empty()) throw DataError("empty BoW");
  BowVector bow;
  for (auto [idx, n] : counts) {
    bow.indices.push_back(idx);
    bow.counts.push_back(n);
    bow.total_count += n;
  }
  return bow;
}

BowVector merge(std::span<const BowVector* const> parts) {
  std::map<std::uint32_t, std::uint32_t> counts;
  for (const BowVector* p : parts) {
    for (std::size_t i = 0; i < p->indices.size(); ++i) counts[p->indices[i]] += p->counts[i];
  }
  BowVector bow;
  for (auto [idx, n] : counts) {
    bow.indices.push_back(idx);
    bow.counts.push_back(n);
    bow.total_count += n;
  }
  return bow;
}

// ---------------------------------------------------------------------------
// Filtering

LengthBounds LengthBounds::defaults(Mode mode) {
  if (mode == Mode::forum) return LengthBounds{7, 45};
  return LengthBounds{5, std::nullopt};
}

namespace {

bool has_two_speakers(const Conversation& c) {
  bool a = false, b = false;
  for (const auto& u : c.utterances) (u.speaker == Speaker::a ? a : b) = true;
  return a && b;
}

Conversation filter_one(Conversation c, const LengthBounds& bounds) {
  std::erase_if(c.utterances, [&](const Utterance& u) {
    const std::size_t n = u.tokens.size();
    return n < bounds.min_len || (bounds.max_len && n > *bounds.max_len);
  });
  reindex_positions(c);
  return c;
}

}  // namespace

std::vector<Conversation> filter_utterances(std::vector<Conversation> conversations,
                                            const LengthBounds& bounds) {
  if (bounds.min_len < 1) throw UsageError("min_len must be at least 1");
  std::vector<Conversation> out;
  out.reserve(conversations.size());
  for (auto& c : conversations) {
    Conversation kept = filter_one(std::move(c), bounds);
    if (kept.utterances.size() >= 2) out.push_back(std::move(kept));
  }
  return out;
}

std::vector<Conversation> filter_utterances(std::vector<Conversation> conversations) {
  std::vector<Conversation> out;
  out.reserve(conversations.size());
  for (auto& c : conversations) {
    const LengthBounds bounds = LengthBounds::defaults(c.mode);
    Conversation kept = filter_one(std::move(c), bounds);
    if (kept.utterances.size() >= 2) out.push_back(std::move(kept));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pair construction

namespace {

struct PairRequest {
  std::size_t response;
  std::string positive_id;
  const std::vector<std::string>* negative_ids = nullptr;
};

Candidate make_candidate(const Utterance& u, const BowVector& bow) {
  return Candidate{u.id, u.position, bow};
}

}  // namespace

std::vector<PairInstance> build_pairs(const Conversation& conversation, const Vocabulary& vocab,
                                      const PairOptions& options, std::span<const GoldPair> gold) {
  if (options.cap < 1) throw UsageError("negative cap must be at least 1");
  const auto& utts = conversation.utterances;

  std::vector<std::optional<BowVector>> bows(utts.size());
  for (std::size_t i = 0; i < utts.size(); ++i) {
    try {
      bows[i] = vectorize(utts[i].tokens, vocab);
    } catch (const DataError&) {
      warn("skipping utterance '" + utts[i].id + "' in conversation '" + conversation.id +
           "': empty BoW after vocabulary filtering");
    }
  }

  auto index_of = [&](std::string_view id) -> std::optional<std::size_t> {
    for (std::size_t i = 0; i < utts.size(); ++i) {
      if (utts[i].id == id) return i;
    }
    return std::nullopt;
  };

  std::vector<const BowVector*> side_a, side_b, everyone;
  for (std::size_t i = 0; i < utts.size(); ++i) {
    if (!bows[i]) continue;
    (utts[i].speaker == Speaker::a ? side_a : side_b).push_back(&*bows[i]);
    everyone.push_back(&*bows[i]);
  }
  BowVector context_q, context_r;
  if (conversation.mode == Mode::forum) {
    context_q = merge(side_a);
    context_r = merge(side_b);
  } else {
    context_q = merge(everyone);
    context_r = context_q;
  }

  std::vector<PairRequest> requests;
  if (!gold.empty()) {
    for (const auto& g : gold) {
      if (auto r = index_of(g.response_id)) {
        requests.push_back({*r, g.positive_id, g.negative_ids.empty() ? nullptr : &g.negative_ids});
      }
    }
  } else {
    for (std::size_t i = 0; i < utts.size(); ++i) {
      if (utts[i].quoted_id && utts[i].speaker == Speaker::b) {
        requests.push_back({i, *utts[i].quoted_id, nullptr});
      }
    }
  }

  Rng rng(mix_seed(options.seed, fnv1a64(conversation.id)));
  std::vector<PairInstance> out;
  for (const auto& req : requests) {
    const Utterance& response = utts[req.response];
    auto pos = index_of(req.positive_id);
    if (!pos || !bows[req.response] || !bows[*pos] || utts[*pos].speaker != Speaker::a ||
        *pos == req.response) {
      warn("conversation '" + conversation.id + "': no valid positive for response '" +
           response.id + "'");
      continue;
    }
    if (conversation.mode == Mode::dialogue && *pos > req.response) {
      warn("conversation '" + conversation.id + "': initiation '" + req.positive_id +
           "' follows its response '" + response.id + "'");
      continue;
    }

    std::vector<std::size_t> negatives;
    if (req.negative_ids != nullptr) {
      for (const auto& id : *req.negative_ids) {
        auto n = index_of(id);
        if (!n || !bows[*n] || *n == *pos) continue;
        if (negatives.size() < options.cap) negatives.push_back(*n);
      }
    } else if (conversation.mode == Mode::forum) {
      std::vector<std::size_t> pool;
      for (std::size_t i = 0; i < utts.size(); ++i) {
        if (i != *pos && bows[i] && utts[i].speaker == Speaker::a) pool.push_back(i);
      }
      rng.shuffle(std::span(pool));
      pool.resize(std::min(pool.size(), options.cap));
      std::sort(pool.begin(), pool.end());
      negatives = std::move(pool);
    } else {
      for (std::size_t i = req.response; i-- > 0 && negatives.size() < options.cap;) {
        if (i != *pos && bows[i] && utts[i].speaker == Speaker::a) negatives.push_back(i);
      }
    }
    if (negatives.empty()) {
      warn("conversation '" + conversation.id + "': response '" + response.id +
           "' has no negative candidates; instance dropped");
      continue;
    }

    PairInstance inst;
    inst.conversation_id = conversation.id;
    inst.mode = conversation.mode;
    inst.response_id = response.id;
    inst.response = *bows[req.response];
    inst.positive = make_candidate(utts[*pos], *bows[*pos]);
    for (auto n : negatives) inst.negatives.push_back(make_candidate(utts[n], *bows[n]));
    inst.context_q = context_q;
    inst.context_r = context_r;
    out.push_back(std::move(inst));
  }
  return out;
}

std::vector<PairInstance> build_all_pairs(std::span<const Conversation> conversations,
                                          const Vocabulary& vocab, const PairOptions& options,
                                          std::span<const GoldPair> gold) {
  std::unordered_map<std::string, std::vector<GoldPair>> gold_by_conv;
  if (!gold.empty()) {
    std::unordered_map<std::string, std::string> conv_of;
    for (const auto& c : conversations) {
      for (const auto& u : c.utterances) conv_of.emplace(u.id, c.id);
    }
    for (const auto& g : gold) {
      auto it = conv_of.find(g.response_id);
      if (it == conv_of.end()) {
        warn("gold pair response '" + g.response_id + "' not found in corpus");
        continue;
      }
      gold_by_conv[it->second].push_back(g);
    }
  }
  std::vector<PairInstance> out;
  for (const auto& c : conversations) {
    std::vector<PairInstance> pairs;
    if (gold.empty()) {
      pairs = build_pairs(c, vocab, options);
    } else {
      auto it = gold_by_conv.find(c.id);
      if (it == gold_by_conv.end()) continue;
      pairs = build_pairs(c, vocab, options, it->second);
    }
    for (auto& p : pairs) out.push_back(std::move(p));
  }
  return out;
}

Split split_train_valid(std::vector<PairInstance> instances, double valid_fraction,
                        std::uint64_t seed) {
  if (!(valid_fraction >= 0.0 && valid_fraction < 1.0)) {
    throw UsageError("valid_fraction must lie in [0, 1)");
  }
  if (instances.size() < 10) throw DataError("corpus too small to split");
  std::vector<std::string> ids;
  {
    std::set<std::string> seen;
    for (const auto& inst : instances) seen.insert(inst.conversation_id);
    ids.assign(seen.begin(), seen.end());
  }
  Rng rng(seed);
  rng.shuffle(std::span(ids));
  const auto n_valid = static_cast<std::size_t>(std::llround(valid_fraction * ids.size()));
  std::set<std::string> valid_ids(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_valid));
  Split split;
  for (auto& inst : instances) {
    (valid_ids.contains(inst.conversation_id) ? split.valid : split.train).push_back(std::move(inst));
  }
  return split;
}

// ---------------------------------------------------------------------------
// Files

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw DataError("write failed for '" + path.string() + "'");
}

template <class F>
void for_each_line(std::string_view text, F&& f) {
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) continue;
    f(line, line_no);
  }
}

Conversation parse_conversation(const json& j) {
  Conversation c;
  c.id = j.at("id").get<std::string>();
  c.mode = parse_mode(j.at("mode").get<std::string>());
  std::set<std::string> seen;
  for (const auto& ju : j.at("utterances")) {
    Utterance u;
    u.id = ju.at("id").get<std::string>();
    if (!seen.insert(u.id).second) {
      throw DataError("duplicate utterance id '" + u.id + "'");
    }
    const auto speaker = ju.at("speaker").get<std::string>();
    if (speaker == "a") {
      u.speaker = Speaker::a;
    } else if (speaker == "b") {
      u.speaker = Speaker::b;
    } else {
      throw DataError("speaker must be \"a\" or \"b\", got \"" + speaker + "\"");
    }
    u.tokens = ju.at("tokens").get<std::vector<std::string>>();
    if (auto q = ju.find("quoted_utterance_id"); q != ju.end() && !q->is_null()) {
      u.quoted_id = q->get<std::string>();
    }
    if (u.tokens.empty()) {
      warn("conversation '" + c.id + "': dropping utterance '" + u.id + "' with no tokens");
      continue;
    }
    c.utterances.push_back(std::move(u));
  }
  reindex_positions(c);
  return c;
}

}  // namespace

std::vector<Conversation> parse_corpus(std::string_view jsonl, std::string_view source) {
  std::vector<Conversation> out;
  std::set<std::string> ids;
  for_each_line(jsonl, [&](std::string_view line, std::size_t line_no) {
    Conversation c;
    try {
      c = parse_conversation(json::parse(line));
    } catch (const std::exception& e) {
      throw DataError(std::string(source) + ":" + std::to_string(line_no) +
                      ": malformed conversation record: " + e.what());
    }
    if (!ids.insert(c.id).second) {
      throw DataError(std::string(source) + ":" + std::to_string(line_no) +
                      ": duplicate conversation id '" + c.id + "'");
    }
    if (c.utterances.size() < 2 || !has_two_speakers(c)) {
      warn("conversation '" + c.id + "' needs utterances from two speakers; dropped");
      return;
    }
    out.push_back(std::move(c));
  });
  return out;
}

std::vector<Conversation> load_corpus(const std::filesystem::path& path) {
  return parse_corpus(read_file(path), path.string());
}

std::string format_corpus(std::span<const Conversation> conversations) {
  std::string text;
  for (const auto& c : conversations) {
    json j;
    j["id"] = c.id;
    j["mode"] = to_string(c.mode);
    j["utterances"] = json::array();
    for (const auto& u : c.utterances) {
      json ju;
      ju["id"] = u.id;
      ju["speaker"] = to_string(u.speaker);
      ju["tokens"] = u.tokens;
      if (u.quoted_id) ju["quoted_utterance_id"] = *u.quoted_id;
      j["utterances"].push_back(std::move(ju));
    }
    text += j.dump();
    text += '\n';
  }
  return text;
}

void save_corpus(std::span<const Conversation> conversations, const std::filesystem::path& path) {
  write_file(path, format_corpus(conversations));
}

std::vector<GoldPair> parse_gold_pairs(std::string_view jsonl, std::string_view source) {
  std::vector<GoldPair> out;
  for_each_line(jsonl, [&](std::string_view line, std::size_t line_no) {
    try {
      const json j = json::parse(line);
      GoldPair g;
      g.response_id = j.at("response_id").get<std::string>();
      g.positive_id = j.at("positive_id").get<std::string>();
      if (auto n = j.find("negative_ids"); n != j.end()) {
        g.negative_ids = n->get<std::vector<std::string>>();
      }
      out.push_back(std::move(g));
    } catch (const std::exception& e) {
      throw DataError(std::string(source) + ":" + std::to_string(line_no) +
                      ": malformed gold pair: " + e.what());
    }
  });
  return out;
}

std::vector<GoldPair> load_gold_pairs(const std::filesystem::path& path) {
  return parse_gold_pairs(read_file(path), path.string());
}

void save_gold_pairs(std::span<const GoldPair> pairs, const std::filesystem::path& path) {
  std::string text;
  for (const auto& g : pairs) {
    json j;
    j["response_id"] = g.response_id;
    j["positive_id"] = g.positive_id;
    j["negative_ids"] = g.negative_ids;
    text += j.dump();
    text += '\n';
  }
  write_file(path, text);
}

// ---------------------------------------------------------------------------
// Synthetic corpora

Matrix default_transition() { return Matrix{{0.85, 0.15}, {0.25, 0.75}}; }

namespace {

void validate_stochastic(const Matrix& t, std::size_t roles) {
  if (t.rows() != roles || t.cols() != roles) {
    throw UsageError("invalid stochastic matrix: expected " + std::to_string(roles) + "x" +
                     std::to_string(roles) + ", got " + t.shape_string());
  }
  for (std::size_t r = 0; r < roles; ++r) {
    double total = 0.0;
    for (double x : t.row(r)) {
      if (!(x >= 0.0)) throw UsageError("invalid stochastic matrix: negative entry");
      total += x;
    }
    if (std::abs(total - 1.0) > 1e-9) {
      throw UsageError("invalid stochastic matrix: row " + std::to_string(r) + " sums to " +
                       std::to_string(total));
    }
  }
}

class SyntheticWriter {
 public:
  SyntheticWriter(const SyntheticSpec& spec, SyntheticCorpus& out)
      : spec_(spec), out_(out), block_(spec.vocab_size / (spec.topics + spec.roles)) {}

  std::vector<std::string> tokens(std::size_t topic, std::size_t role, Rng& rng) const {
    const std::size_t n =
        spec_.min_tokens + static_cast<std::size_t>(rng.below(spec_.max_tokens - spec_.min_tokens + 1));
    std::vector<std::string> words;
    words.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      const bool from_topic = rng.uniform() < spec_.topic_word_fraction;
      const auto w = rng.below(block_);
      words.push_back(from_topic ? "t" + std::to_string(topic) + "w" + std::to_string(w)
                                 : "r" + std::to_string(role) + "w" + std::to_string(w));
    }
    return words;
  }

  Utterance& add(Conversation& c, Speaker speaker, std::size_t topic, std::size_t role, Rng& rng) {
    Utterance u;
    u.id = c.id + "-u" + std::to_string(c.utterances.size());
    u.conversation_id = c.id;
    u.speaker = speaker;
    u.tokens = tokens(topic, role, rng);
    out_.topic_of[u.id] = topic;
    out_.role_of[u.id] = role;
    c.utterances.push_back(std::move(u));
    return c.utterances.back();
  }

  std::size_t other_topic(std::span<const double> mixture, std::size_t excluded, Rng& rng) const {
    std::vector<double> w(mixture.begin(), mixture.end());
    w[excluded] = 0.0;
    return rng.categorical(w);
  }

 private:
  const SyntheticSpec& spec_;
  SyntheticCorpus& out_;
  std::size_t block_;
};

}  // namespace

SyntheticCorpus generate_synthetic(const SyntheticSpec& spec) {
  if (spec.topics < 2 || spec.roles < 1) throw UsageError("synthetic corpus needs >= 2 topics and >= 1 role");
  if (spec.vocab_size < spec.topics + spec.roles) throw UsageError("blocks do not fit");
  validate_stochastic(spec.transition, spec.roles);
  if (spec.cap < 1 || spec.min_new_turns < spec.cap + 1 || spec.max_new_turns < spec.min_new_turns) {
    throw UsageError("synthetic turns per exchange must be at least cap + 1");
  }
  if (spec.min_tokens < 1 || spec.max_tokens < spec.min_tokens) {
    throw UsageError("invalid synthetic utterance length range");
  }
  if (spec.slot_bias.empty()) throw UsageError("slot_bias must be non-empty");

  SyntheticCorpus out;
  SyntheticWriter writer(spec, out);
  const std::size_t width = std::to_string(spec.num_conversations).size();
  const std::size_t slots = spec.cap + 1;

  for (std::size_t ci = 0; ci < spec.num_conversations; ++ci) {
    Rng rng(mix_seed(spec.seed, ci));
    Conversation conv;
    std::string num = std::to_string(ci);
    conv.id = "c" + std::string(width - num.size(), '0') + num;
    conv.mode = spec.mode;

    std::vector<double> mixture(spec.topics);
    for (double& m : mixture) m = rng.exponential();

    std::vector<double> slot_weights(slots, 0.0);
    for (std::size_t s = 0; s < slots && s < spec.slot_bias.size(); ++s) slot_weights[s] = spec.slot_bias[s];

    const std::size_t exchanges = spec.mode == Mode::forum ? 1 : std::max<std::size_t>(1, spec.exchanges);
    for (std::size_t e = 0; e < exchanges; ++e) {
      const std::size_t n_new =
          spec.min_new_turns + static_cast<std::size_t>(rng.below(spec.max_new_turns - spec.min_new_turns + 1));
      // Slot counted from the newest turn (dialogue) or the first turn (forum).
      const std::size_t slot = rng.categorical(slot_weights);
      const std::size_t pos_offset = spec.mode == Mode::dialogue ? n_new - 1 - slot : slot;
      const std::size_t topic = rng.categorical(mixture);
      const auto role = static_cast<std::size_t>(rng.below(spec.roles));

      std::string positive_id;
      for (std::size_t j = 0; j < n_new; ++j) {
        if (j == pos_offset) {
          positive_id = writer.add(conv, Speaker::a, topic, role, rng).id;
        } else {
          const std::size_t t = writer.other_topic(mixture, topic, rng);
          writer.add(conv, Speaker::a, t, static_cast<std::size_t>(rng.below(spec.roles)), rng);
        }
      }
      const std::size_t response_role = rng.categorical(spec.transition.row(role));
      Utterance& response = writer.add(conv, Speaker::b, topic, response_role, rng);
      response.quoted_id = positive_id;
      out.gold.push_back(GoldPair{response.id, positive_id, {}});
    }
    reindex_positions(conv);
    out.conversations.push_back(std::move(conv));
  }
  return out;
}

}  // namespace convmatch
