#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "convmatch/corpus.hpp"
#include "convmatch/model.hpp"

namespace convmatch {

inline constexpr int kCheckpointVersion = 1;

struct TrainSummary {
  std::uint64_t seed = 0;
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  double best_valid_mrr = 0.0;
  double final_lr = 0.0;
};

struct Checkpoint {
  ModelConfig config;
  Mode mode = Mode::dialogue;
  Vocabulary vocab;
  ParamStore params;
  TrainSummary summary;

  Model model() const { return Model(config, params); }
};

/// Magic line, one JSON header line (config, vocabulary, tensor manifest), then
/// every tensor as little-endian float64 in manifest order.
std::string serialize_checkpoint(const Checkpoint& ckpt);

/// Throws DataError: "corrupt checkpoint" for malformed or truncated input, a version
/// message for unknown versions, "shape mismatch" when tensors disagree with the
/// stored config or with `expected` (K, D, V, hidden) when given.
Checkpoint parse_checkpoint(std::string_view bytes, const ModelConfig* expected = nullptr);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path, const ModelConfig* expected = nullptr);

}  // namespace convmatch
