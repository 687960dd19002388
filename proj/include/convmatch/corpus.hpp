#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "convmatch/matrix.hpp"

namespace convmatch {

/// side a: opinion holder (forum) or customer (dialogue); side b: challenger or seller.
enum class Speaker { a, b };

/// forum: quotation-reply pairs within one post; dialogue: question-answer turns.
enum class Mode { forum, dialogue };

std::string_view to_string(Mode mode) noexcept;
std::string_view to_string(Speaker speaker) noexcept;
Mode parse_mode(std::string_view text);

struct Utterance {
  std::string id;
  std::string conversation_id;
  Speaker speaker = Speaker::a;
  /// 0-based index within this speaker's turns of the conversation.
  int position = 0;
  std::vector<std::string> tokens;
  /// Reply-to link: the quoted utterance (forum) or the answered question (dialogue).
  std::optional<std::string> quoted_id;
};

struct Conversation {
  std::string id;
  Mode mode = Mode::forum;
  std::vector<Utterance> utterances;

  const Utterance* find(std::string_view utterance_id) const;
};

/// Recomputes per-speaker positions from the utterance order.
void reindex_positions(Conversation& conversation);

/// Explicit ranking instance for pre-paired corpora. Empty negative_ids means
/// "derive negatives with the conversation's mode rule".
struct GoldPair {
  std::string response_id;
  std::string positive_id;
  std::vector<std::string> negative_ids;
};

class Vocabulary {
 public:
  Vocabulary() = default;

  /// Keeps tokens with corpus frequency >= min_count, ordered by descending
  /// frequency then lexicographically.
  static Vocabulary build(std::span<const Conversation> conversations, std::size_t min_count);
  /// Restores a vocabulary from its ordered token list.
  static Vocabulary from_tokens(std::vector<std::string> tokens, std::size_t min_count);

  std::optional<std::uint32_t> index_of(std::string_view token) const;
  const std::string& token(std::uint32_t index) const { return tokens_.at(index); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  std::size_t size() const noexcept { return tokens_.size(); }
  std::size_t min_count() const noexcept { return min_count_; }
  /// Order-sensitive hash of the token list.
  std::uint64_t fingerprint() const noexcept;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::uint32_t> index_;
  std::size_t min_count_ = 1;
};

/// Sparse term counts with strictly increasing indices.
struct BowVector {
  std::vector<std::uint32_t> indices;
  std::vector<std::uint32_t> counts;
  std::uint32_t total_count = 0;

  bool empty() const noexcept { return total_count == 0; }
  /// Counts divided by total_count (empty row for an empty vector).
  SparseRow normalized() const;
  SparseRow as_counts() const;

  friend bool operator==(const BowVector&, const BowVector&) = default;
};

/// Drops out-of-vocabulary tokens and aggregates counts. Throws DataError("empty BoW")
/// when nothing survives.
BowVector vectorize(std::span<const std::string> tokens, const Vocabulary& vocab);
BowVector merge(std::span<const BowVector* const> parts);

struct LengthBounds {
  std::size_t min_len = 1;
  std::optional<std::size_t> max_len;

  /// forum: [7, 45]; dialogue: [5, unbounded).
  static LengthBounds defaults(Mode mode);
};

/// Removes utterances whose token count is outside the bounds, re-indexes positions
/// and drops conversations left with fewer than two utterances.
std::vector<Conversation> filter_utterances(std::vector<Conversation> conversations,
                                            const LengthBounds& bounds);
/// Same, with each conversation's mode defaults.
std::vector<Conversation> filter_utterances(std::vector<Conversation> conversations);

struct Candidate {
  std::string id;
  int position = 0;
  BowVector bow;
};

struct PairInstance {
  std::string conversation_id;
  Mode mode = Mode::forum;
  std::string response_id;
  BowVector response;
  Candidate positive;
  std::vector<Candidate> negatives;
  BowVector context_r;
  BowVector context_q;

  std::size_t candidate_count() const noexcept { return 1 + negatives.size(); }
  /// Candidate i: 0 is the positive, 1.. are negatives.
  const Candidate& candidate(std::size_t i) const { return i == 0 ? positive : negatives.at(i - 1); }
};

struct PairOptions {
  std::size_t cap = 4;
  std::uint64_t seed = 0;
};

/// Builds ranking instances for one conversation. Forum: negatives are sampled
/// without replacement from the other side-a utterances, seeded per conversation;
/// contexts are all side-a (c_q) and all side-b (c_r) utterances. Dialogue:
/// negatives are the newest `cap` side-a utterances preceding the response,
/// skipping the positive; both contexts are the whole thread. When `gold` is
/// given, only those pairs are built.
std::vector<PairInstance> build_pairs(const Conversation& conversation, const Vocabulary& vocab,
                                      const PairOptions& options,
                                      std::span<const GoldPair> gold = {});

/// build_pairs over a corpus; gold pairs are matched to conversations by response id.
std::vector<PairInstance> build_all_pairs(std::span<const Conversation> conversations,
                                          const Vocabulary& vocab, const PairOptions& options,
                                          std::span<const GoldPair> gold = {});

struct Split {
  std::vector<PairInstance> train;
  std::vector<PairInstance> valid;
};

/// Seeded split by conversation id; round(fraction * #conversations) go to valid.
Split split_train_valid(std::vector<PairInstance> instances, double valid_fraction,
                        std::uint64_t seed);

// ---------------------------------------------------------------------------
// Files

/// One JSON conversation per line. Malformed records raise DataError naming the line.
std::vector<Conversation> load_corpus(const std::filesystem::path& path);
std::vector<Conversation> parse_corpus(std::string_view jsonl, std::string_view source = "<memory>");
void save_corpus(std::span<const Conversation> conversations, const std::filesystem::path& path);
std::string format_corpus(std::span<const Conversation> conversations);

std::vector<GoldPair> load_gold_pairs(const std::filesystem::path& path);
std::vector<GoldPair> parse_gold_pairs(std::string_view jsonl, std::string_view source = "<memory>");
void save_gold_pairs(std::span<const GoldPair> pairs, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Planted-structure corpora

struct SyntheticSpec {
  std::size_t num_conversations = 200;
  std::size_t topics = 4;
  std::size_t roles = 2;
  /// roles x roles; row i is the response-role distribution given initiation role i.
  Matrix transition;
  std::size_t vocab_size = 30;
  std::uint64_t seed = 0;
  Mode mode = Mode::dialogue;
  /// Probability that a token comes from the utterance's topic block
  /// (otherwise from its role block).
  double topic_word_fraction = 0.5;
  std::size_t min_tokens = 8;
  std::size_t max_tokens = 14;
  /// Initiation-response exchanges per dialogue (forum posts always get one).
  std::size_t exchanges = 5;  // 200 dialogues -> 1000 instances
  /// Side-a utterances added per exchange; at least cap + 1.
  std::size_t min_new_turns = 5;
  std::size_t max_new_turns = 7;
  std::size_t cap = 4;
  /// Weight of the positive sitting at each candidate slot, counted from the
  /// newest (dialogue) or earliest (forum) candidate.
  std::vector<double> slot_bias = {0.40, 0.25, 0.15, 0.12, 0.08};
};

struct SyntheticCorpus {
  std::vector<Conversation> conversations;
  std::vector<GoldPair> gold;
  /// Planted labels per utterance id.
  std::map<std::string, std::size_t> topic_of;
  std::map<std::string, std::size_t> role_of;
};

/// Each utterance draws words from one topic block and one role block of the vocabulary.
/// Positives share the response's topic and the response role follows `transition`;
/// other candidates carry different topics. Fully determined by spec.seed.
SyntheticCorpus generate_synthetic(const SyntheticSpec& spec);

/// The 2-role identity-heavy transition used by the acceptance corpus.
Matrix default_transition();

}  // namespace convmatch
