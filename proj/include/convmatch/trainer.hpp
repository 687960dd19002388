#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "convmatch/eval.hpp"
#include "convmatch/model.hpp"

namespace convmatch {

struct TrainConfig {
  std::size_t batch_size = 32;
  double dropout = 0.5;
  std::size_t max_epochs = 200;
  double initial_lr = 0.1;
  double lr_decay_factor = 0.5;
  std::size_t decay_every = 3;  // consecutive non-improving epochs per decay
  double min_lr = 1e-4;
  std::size_t patience = 10;
  std::uint64_t seed = 0;
  bool deterministic_eval = true;
  /// Max global gradient norm; unset means no clipping. On by default because
  /// unclipped count-weighted reconstruction gradients blow up log sigma at lr 0.1.
  std::optional<double> clip_norm = 5.0;

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  LossBundle loss;
  MetricsReport valid;
};

struct TrainState {
  std::size_t epoch = 0;
  double current_lr = 0.0;
  double best_valid_mrr = 0.0;
  std::size_t best_epoch = 0;
  std::size_t epochs_since_best = 0;
  std::vector<EpochRecord> history;
};

struct TrainResult {
  Model model;  // best-validation snapshot
  TrainState state;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Mini-batch SGD with validation-MRR early stopping. Throws NumericError on a
/// non-finite batch loss, naming the epoch and batch.
TrainResult train(std::span<const PairInstance> train_set, std::span<const PairInstance> valid_set,
                  const ModelConfig& model_config, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

/// theta -= lr * grad for every parameter, then zeroes the gradients.
void sgd_step(ParamStore& params, double lr);

/// Learning rate for the next epoch. Decays by the configured factor every
/// `decay_every` non-improving epochs, never below min_lr, never upward.
double lr_schedule(const TrainState& state, const TrainConfig& config);

/// Rescales gradients so their global L2 norm is at most max_norm. Returns the pre-clip norm.
double clip_gradients(ParamStore& params, double max_norm);

std::string format_epoch_line(const EpochRecord& record);
std::string epoch_csv_header();
std::string epoch_csv_row(const EpochRecord& record);

}  // namespace convmatch
