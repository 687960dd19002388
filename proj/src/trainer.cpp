#include "convmatch/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <optional>

#include "convmatch/errors.hpp"

namespace convmatch {

void TrainConfig::validate() const {
  if (batch_size < 1) throw UsageError("batch size must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw UsageError("dropout must lie in [0, 1)");
  if (!(initial_lr >= 0.0) || !std::isfinite(initial_lr)) {
    throw UsageError("learning rate must be finite and >= 0");
  }
  if (!(lr_decay_factor > 0.0 && lr_decay_factor <= 1.0)) {
    throw UsageError("lr decay factor must lie in (0, 1]");
  }
  if (decay_every < 1) throw UsageError("decay interval must be >= 1");
  if (max_epochs < 1) throw UsageError("epochs must be >= 1");
  if (patience < 1) throw UsageError("patience must be >= 1");
  if (clip_norm && !(*clip_norm > 0.0)) throw UsageError("clip norm must be > 0");
}

void sgd_step(ParamStore& params, double lr) {
  for (auto& p : params) {
    auto w = p.value.values();
    const auto g = p.grad.values();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
  }
  params.zero_grads();
}

double lr_schedule(const TrainState& state, const TrainConfig& config) {
  const double lr = state.current_lr;
  const std::size_t stall = state.epochs_since_best;
  if (stall == 0 || stall % config.decay_every != 0) return lr;
  // A rate already under the floor (e.g. frozen training) is left alone.
  return std::min(lr, std::max(lr * config.lr_decay_factor, config.min_lr));
}

double clip_gradients(ParamStore& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (double g : p.grad.values()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& p : params) {
      for (double& g : p.grad.values()) g *= s;
    }
  }
  return norm;
}

namespace {

bool all_finite(const LossBundle& b) {
  return std::isfinite(b.l_t) && std::isfinite(b.l_d) && std::isfinite(b.l_x) &&
         std::isfinite(b.l_mi) && std::isfinite(b.l_m) && std::isfinite(b.l_total);
}

void accumulate(LossBundle& into, const LossBundle& b, double w) {
  into.l_t += w * b.l_t;
  into.l_d += w * b.l_d;
  into.l_x += w * b.l_x;
  into.l_mi += w * b.l_mi;
  into.l_m += w * b.l_m;
  into.l_total += w * b.l_total;
}

}  // namespace

TrainResult train(std::span<const PairInstance> train_set, std::span<const PairInstance> valid_set,
                  const ModelConfig& model_config, const TrainConfig& config,
                  const EpochCallback& on_epoch) {
  model_config.validate();
  config.validate();
  if (train_set.empty()) throw DataError("training split is empty");
  if (valid_set.empty()) throw DataError("validation split is empty");

  Model model(model_config, mix_seed(config.seed, 1));
  Rng shuffle_rng(mix_seed(config.seed, 2));
  Rng forward_rng(mix_seed(config.seed, 3));
  model.params().zero_grads();

  TrainState state;
  state.current_lr = config.initial_lr;
  ParamStore best = model.params();
  bool have_best = false;

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  const ForwardOptions fwd{true, config.dropout, true};

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    state.epoch = epoch;
    shuffle_rng.shuffle(std::span<std::size_t>(order));

    LossBundle epoch_loss;
    std::vector<const PairInstance*> batch;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++batch_index) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      batch.clear();
      for (std::size_t i = start; i < stop; ++i) batch.push_back(&train_set[order[i]]);

      auto where = [&] {
        return "epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_index) +
               " (instances " + std::to_string(start) + ".." + std::to_string(stop - 1) +
               ", first response '" + batch.front()->response_id + "')";
      };
      Tape tape(&model.params());
      std::optional<BatchGraph> graph;
      try {
        graph = build_objective(tape, model, batch, forward_rng, fwd);
      } catch (const NumericError& e) {
        // Debug builds trap non-finite values on the tape before the loss exists.
        throw NumericError(std::string(e.what()) + " at " + where());
      }
      const LossBundle values = graph->values();
      if (!all_finite(values)) throw NumericError("non-finite loss at " + where());
      tape.backward(graph->loss);
      if (config.clip_norm) clip_gradients(model.params(), *config.clip_norm);
      sgd_step(model.params(), state.current_lr);
      accumulate(epoch_loss, values,
                 static_cast<double>(stop - start) / static_cast<double>(order.size()));
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = state.current_lr;
    rec.loss = epoch_loss;
    rec.valid = summarize(rank_all(valid_set, model));

    if (!have_best || rec.valid.mrr > state.best_valid_mrr) {
      have_best = true;
      state.best_valid_mrr = rec.valid.mrr;
      state.best_epoch = epoch;
      state.epochs_since_best = 0;
      best = model.params();
    } else {
      ++state.epochs_since_best;
    }
    state.history.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (state.epochs_since_best >= config.patience) break;
    state.current_lr = lr_schedule(state, config);
  }

  best.zero_grads();
  return TrainResult{Model(model_config, std::move(best)), std::move(state)};
}

std::string format_epoch_line(const EpochRecord& r) {
  char buf[320];
  std::snprintf(buf, sizeof buf,
                "epoch %zu lr=%.6g l_t=%.6f l_d=%.6f l_x=%.6f l_mi=%.6f l_m=%.6f l_total=%.6f "
                "valid_hits@1=%.4f valid_hits@2=%.4f valid_mrr=%.4f",
                r.epoch, r.lr, r.loss.l_t, r.loss.l_d, r.loss.l_x, r.loss.l_mi, r.loss.l_m,
                r.loss.l_total, r.valid.hits_at_1, r.valid.hits_at_2, r.valid.mrr);
  return buf;
}

std::string epoch_csv_header() {
  return "epoch,lr,l_t,l_d,l_x,l_mi,l_m,l_total,valid_hits_at_1,valid_hits_at_2,valid_mrr\n";
}

std::string epoch_csv_row(const EpochRecord& r) {
  char buf[320];
  std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                r.epoch, r.lr, r.loss.l_t, r.loss.l_d, r.loss.l_x, r.loss.l_mi, r.loss.l_m,
                r.loss.l_total, r.valid.hits_at_1, r.valid.hits_at_2, r.valid.mrr);
  return buf;
}

}  // namespace convmatch
