#pragma once

// Training phases: predictor regression, noise-model reconstruction
// pretraining, and noise-model training against a frozen predictor.

#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "noisemap/models.hpp"
#include "noisemap/phantom.hpp"
#include "noisemap/unoise.hpp"

namespace noisemap {

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 4;
  double lr0 = 1e-4;
  double lr_decay_factor = 10.0;
  std::size_t lr_decay_every = 10;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

// Step decay: lr0 / decay_factor^floor(epoch / decay_every).
double lr_at(const TrainConfig& config, std::size_t epoch);

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One bias-corrected Adam update over every trainable tensor of `params`,
// reading each tensor's accumulated gradient. Throws TrainingError naming the
// tensor if a gradient is non-finite; nothing is updated in that case.
void adam_step(ModelParams& params, AdamState& state, double lr, const TrainConfig& config);

// Same update on one flat buffer; state vectors are resized on first use.
void adam_update(std::span<float> param, std::span<const float> grad, std::vector<double>& m,
                 std::vector<double>& v, std::uint64_t step, double lr, const TrainConfig& config);

struct EpochRecord {
  std::size_t epoch = 0;  // 0 is the evaluation before any update
  double lr = 0.0;
  double train_loss = std::numeric_limits<double>::quiet_NaN();
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  double val_mae = std::numeric_limits<double>::quiet_NaN();
  double mean_mask = std::numeric_limits<double>::quiet_NaN();
  double prediction_term = std::numeric_limits<double>::quiet_NaN();
  double noise_term = std::numeric_limits<double>::quiet_NaN();
};

struct TrainHistory {
  std::string phase;
  EpochRecord initial;
  std::vector<EpochRecord> epochs;  // epochs[i].epoch == i + 1
};

class TrainingDiverged : public TrainingError {
 public:
  TrainingDiverged(const std::string& what, TrainHistory history)
      : TrainingError(what), history_(std::move(history)) {}
  const TrainHistory& history() const { return history_; }

 private:
  TrainHistory history_;
};

struct TrainResult {
  ModelParams params;
  TrainHistory history;
  std::size_t selected_epoch = 0;
};

// Called after every epoch; lets the CLI stream JSON-lines logs.
using EpochCallback = std::function<void(const EpochRecord&)>;

// The order in which an epoch visits the training split: a permutation of
// [0, n) determined by (seed, epoch).
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch);

// Mean-squared-error regression. Returns the parameters of the epoch with the
// lowest validation MAE.
TrainResult train_predictor(const Dataset& data, const PredictorSpec& spec,
                            const TrainConfig& config, const EpochCallback& on_epoch = {});

// Reconstruction pretraining with a voxel-wise MSE; returns the final epoch.
TrainResult pretrain_noise(const Dataset& data, const NoiseModelSpec& spec,
                           const TrainConfig& config, const EpochCallback& on_epoch = {});

// Trains the noise model against the frozen predictor. `noise_init` is either a
// fresh model or the result of transfer_trunk(pretrained). Returns the final
// epoch.
TrainResult train_noise(const ModelParams& predictor, const ModelParams& noise_init,
                        const Dataset& data, const TrainConfig& config,
                        const UNoiseConfig& unoise, const EpochCallback& on_epoch = {});

// Predictions for a list of subjects in batches of `batch_size`.
std::vector<double> predict_subjects(const ModelParams& predictor, const Dataset& data,
                                     std::span<const std::size_t> ids,
                                     std::size_t batch_size = 8);

// Per-epoch seed of the per-voxel noise draw for one training subject.
std::uint64_t noise_draw_seed(std::uint64_t seed, std::size_t epoch, std::size_t subject_id);

}  // namespace noisemap
