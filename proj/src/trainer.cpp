#include "noisemap/trainer.hpp"

#include <algorithm>
#include <cmath>

#include "noisemap/rng.hpp"

namespace noisemap {

namespace {

constexpr std::uint64_t kStreamInit = 11;
constexpr std::uint64_t kStreamShuffle = 12;
constexpr std::uint64_t kStreamNoise = 13;
constexpr std::uint64_t kStreamEvalNoise = 14;

struct Batch {
  Tensorf images;
  Tensorf labels;
  std::vector<std::size_t> ids;
};

Batch make_subject_batch(const Dataset& data, std::span<const std::size_t> ids) {
  std::vector<const Volume*> vols;
  std::vector<float> ages;
  for (std::size_t id : ids) {
    vols.push_back(&data.subject(id).volume);
    ages.push_back(static_cast<float>(data.subject(id).age));
  }
  return {make_batch(vols), Tensorf(Shape{ids.size()}, std::move(ages)),
          std::vector<std::size_t>(ids.begin(), ids.end())};
}

template <typename Fn>
void for_each_batch(std::span<const std::size_t> ids, std::size_t batch_size, Fn&& fn) {
  for (std::size_t start = 0; start < ids.size(); start += batch_size) {
    const std::size_t len = std::min(batch_size, ids.size() - start);
    fn(ids.subspan(start, len));
  }
}

std::vector<std::size_t> permuted(const std::vector<std::size_t>& ids, std::uint64_t seed,
                                  std::size_t epoch) {
  const auto order = epoch_order(ids.size(), seed, epoch);
  std::vector<std::size_t> out(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) out[i] = ids[order[i]];
  return out;
}

void zero_grads(ModelParams& p) {
  for (auto& t : p.tensors) t.value.zero_grad();
}

NoiseDraw<float> batch_draw(const Dims& dims, std::span<const std::size_t> ids,
                            const std::function<std::uint64_t(std::size_t)>& seed_of) {
  std::vector<float> eps;
  eps.reserve(ids.size() * dims.voxels());
  for (std::size_t id : ids) {
    const auto v = standard_normal(dims.voxels(), seed_of(id));
    eps.insert(eps.end(), v.begin(), v.end());
  }
  return {ids.empty() ? 0 : seed_of(ids.front()),
          Tensorf({ids.size(), 1, dims.d, dims.h, dims.w}, std::move(eps))};
}

const std::vector<std::size_t>& validation_ids(const Dataset& data) {
  return data.split.val.empty() ? data.split.train : data.split.val;
}

void require_splits(const Dataset& data, const char* who, bool need_val) {
  if (data.split.train.empty()) throw TrainingError(std::string(who) + ": empty train split");
  if (need_val && data.split.val.empty()) {
    throw TrainingError(std::string(who) + ": empty validation split");
  }
}

// Divergence: validation loss above 10x its initial value three epochs running.
class DivergenceGuard {
 public:
  explicit DivergenceGuard(double initial) : initial_(initial) {}
  bool update(double val_loss) {
    streak_ = (!std::isfinite(val_loss) || val_loss > 10.0 * initial_) ? streak_ + 1 : 0;
    return streak_ >= 3;
  }

 private:
  double initial_;
  int streak_ = 0;
};

// Runs one epoch of updates. A non-finite forward value means the run has
// already diverged, so it is reported as such rather than as a tensor error.
template <typename Fn>
void train_batches(const char* who, std::size_t epoch, const TrainHistory& history,
                   std::span<const std::size_t> order, std::size_t batch_size, Fn&& fn) {
  try {
    for_each_batch(order, batch_size, fn);
  } catch (const NonFiniteError& e) {
    throw TrainingDiverged(std::string(who) + ": non-finite values in epoch " +
                               std::to_string(epoch + 1) + " (" + e.what() + ")",
                           history);
  }
}

struct PredictorEval {
  double loss = 0.0;
  double mae = 0.0;
};

PredictorEval evaluate_predictor(const ModelParams& params, const Dataset& data,
                                 std::span<const std::size_t> ids, std::size_t batch_size) {
  const auto preds = predict_subjects(params, data, ids, batch_size);
  PredictorEval e;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const double d = preds[i] - data.subject(ids[i]).age;
    e.loss += d * d;
    e.mae += std::abs(d);
  }
  e.loss /= static_cast<double>(ids.size());
  e.mae /= static_cast<double>(ids.size());
  return e;
}

double evaluate_reconstruction(const ModelParams& params, const Dataset& data,
                               std::span<const std::size_t> ids, std::size_t batch_size) {
  double total = 0.0;
  std::size_t count = 0;
  for_each_batch(ids, batch_size, [&](std::span<const std::size_t> chunk) {
    const Batch b = make_subject_batch(data, chunk);
    const Tensorf out = reconstruct(params, b.images);
    const auto x = b.images.data();
    const auto y = out.data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double d = static_cast<double>(y[i]) - x[i];
      total += d * d;
    }
    count += x.size();
  });
  return total / static_cast<double>(count);
}

struct NoiseEval {
  double total = 0.0;
  double prediction = 0.0;
  double noise = 0.0;
  double mean_mask = 0.0;
};

NoiseEval evaluate_noise(const ModelParams& predictor, const ModelParams& noise,
                         const Dataset& data, std::span<const std::size_t> ids,
                         std::size_t batch_size, const UNoiseConfig& ucfg, std::uint64_t seed) {
  NoiseEval e;
  double mask_sum = 0.0;
  std::size_t mask_count = 0;
  for_each_batch(ids, batch_size, [&](std::span<const std::size_t> chunk) {
    const Batch b = make_subject_batch(data, chunk);
    const Tensorf mask = noise_mask(noise, b.images);
    for (float m : mask.data()) mask_sum += m;
    mask_count += mask.numel();
    const auto draw = batch_draw(data.spec.shape, chunk, [&](std::size_t id) {
      return derive_seed(seed, {kStreamEvalNoise, id});
    });
    const Tensorf noisy = apply_noise(b.images, mask, ucfg, draw);
    const auto loss = unoise_loss(predict_age(predictor, noisy), b.labels, mask, ucfg);
    const double w = static_cast<double>(chunk.size());
    e.prediction += loss.prediction_term * w;
    e.noise += loss.noise_term * w;
  });
  const double n = static_cast<double>(ids.size());
  e.prediction /= n;
  e.noise /= n;
  e.total = e.prediction + ucfg.r * e.noise;
  e.mean_mask = mask_sum / static_cast<double>(mask_count);
  return e;
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw TrainingError("train config: epochs must be >= 1");
  if (batch_size < 1) throw TrainingError("train config: batch_size must be >= 1");
  if (!(lr0 > 0.0)) throw TrainingError("train config: lr0 must be positive");
  if (!(lr_decay_factor > 1.0)) throw TrainingError("train config: lr_decay_factor must be > 1");
  if (lr_decay_every < 1) throw TrainingError("train config: lr_decay_every must be >= 1");
  if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0) || !(adam_beta2 > 0.0 && adam_beta2 < 1.0)) {
    throw TrainingError("train config: Adam betas must lie in (0, 1)");
  }
  if (!(adam_eps > 0.0)) throw TrainingError("train config: adam_eps must be positive");
}

double lr_at(const TrainConfig& config, std::size_t epoch) {
  const auto steps = static_cast<double>(epoch / config.lr_decay_every);
  return config.lr0 / std::pow(config.lr_decay_factor, steps);
}

void adam_update(std::span<float> param, std::span<const float> grad, std::vector<double>& m,
                 std::vector<double>& v, std::uint64_t step, double lr,
                 const TrainConfig& config) {
  if (m.size() != param.size()) m.assign(param.size(), 0.0);
  if (v.size() != param.size()) v.assign(param.size(), 0.0);
  const double b1 = config.adam_beta1, b2 = config.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    m[i] = b1 * m[i] + (1.0 - b1) * g;
    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
    const double mhat = m[i] / c1;
    const double vhat = v[i] / c2;
    param[i] = static_cast<float>(param[i] - lr * mhat / (std::sqrt(vhat) + config.adam_eps));
  }
}

void adam_step(ModelParams& params, AdamState& state, double lr, const TrainConfig& config) {
  for (const auto& t : params.tensors) {
    if (!t.value.requires_grad() || !t.value.has_grad()) continue;
    const auto g = t.value.grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!std::isfinite(g[i])) {
        throw TrainingError("adam: non-finite gradient in tensor '" + t.name + "' at index " +
                            std::to_string(i));
      }
    }
  }
  if (state.m.size() != params.tensors.size()) {
    state.m.assign(params.tensors.size(), {});
    state.v.assign(params.tensors.size(), {});
  }
  ++state.step;
  for (std::size_t k = 0; k < params.tensors.size(); ++k) {
    Tensorf& t = params.tensors[k].value;
    if (!t.requires_grad()) continue;
    std::vector<float> zeros;
    std::span<const float> g = t.grad();
    if (g.empty()) {
      zeros.assign(t.numel(), 0.0f);
      g = zeros;
    }
    adam_update(t.data_mut(), g, state.m[k], state.v[k], state.step, lr, config);
  }
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  return shuffled_indices(n, derive_seed(seed, {kStreamShuffle, epoch}));
}

std::uint64_t noise_draw_seed(std::uint64_t seed, std::size_t epoch, std::size_t subject_id) {
  return derive_seed(seed, {kStreamNoise, epoch, subject_id});
}

std::vector<double> predict_subjects(const ModelParams& predictor, const Dataset& data,
                                     std::span<const std::size_t> ids, std::size_t batch_size) {
  std::vector<double> out;
  out.reserve(ids.size());
  for_each_batch(ids, std::max<std::size_t>(batch_size, 1), [&](std::span<const std::size_t> c) {
    const Batch b = make_subject_batch(data, c);
    const Tensorf preds = predict_age(predictor, b.images);
    for (float v : preds.data()) out.push_back(v);
  });
  return out;
}

TrainResult train_predictor(const Dataset& data, const PredictorSpec& spec,
                            const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  spec.validate();
  require_splits(data, "train_predictor", true);
  if (!(spec.input_shape == data.spec.shape)) {
    throw TrainingError("train_predictor: spec input " + spec.input_shape.str() +
                        " does not match dataset " + data.spec.shape.str());
  }

  ModelParams params = init_predictor(spec, derive_seed(config.seed, {kStreamInit}));
  // The output head starts at the mean training label so the regression does
  // not spend its first epochs climbing from 0 to the age range.
  {
    double mean_age = 0.0;
    for (std::size_t id : data.split.train) mean_age += data.subject(id).age;
    mean_age /= static_cast<double>(data.split.train.size());
    params.get("head.b").data_mut()[0] = static_cast<float>(mean_age);
  }
  params.set_trainable(true);
  AdamState adam;

  TrainHistory history;
  history.phase = "predictor";
  const auto& val = data.split.val;
  const PredictorEval initial = evaluate_predictor(params, data, val, config.batch_size);
  history.initial = {0, lr_at(config, 0), std::nan(""), initial.loss, initial.mae};
  DivergenceGuard guard(initial.loss);

  TrainResult result{params.clone(), {}, 0};
  double best_mae = initial.mae;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = lr_at(config, epoch);
    const auto order = permuted(data.split.train, config.seed, epoch);
    double loss_sum = 0.0;
    train_batches("train_predictor", epoch, history, order, config.batch_size,
                  [&](std::span<const std::size_t> ids) {
      const Batch b = make_subject_batch(data, ids);
      zero_grads(params);
      const Tensorf loss = mse(predict_age(params, b.images), b.labels);
      backward(loss);
      adam_step(params, adam, lr, config);
      loss_sum += loss.item() * static_cast<double>(ids.size());
    });
    const PredictorEval e = evaluate_predictor(params, data, val, config.batch_size);
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.val_loss = e.loss;
    rec.val_mae = e.mae;
    history.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (e.mae < best_mae) {
      best_mae = e.mae;
      result.params = params.clone();
      result.selected_epoch = epoch + 1;
    }
    if (guard.update(e.loss)) {
      throw TrainingDiverged("train_predictor: validation loss diverged at epoch " +
                                 std::to_string(epoch + 1),
                             history);
    }
  }
  result.params.set_trainable(false);
  result.history = std::move(history);
  return result;
}

TrainResult pretrain_noise(const Dataset& data, const NoiseModelSpec& spec,
                           const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  spec.validate();
  require_splits(data, "pretrain_noise", false);
  if (!(spec.input_shape == data.spec.shape)) {
    throw TrainingError("pretrain_noise: spec input " + spec.input_shape.str() +
                        " does not match dataset " + data.spec.shape.str());
  }
  ModelParams params = init_noise_model(spec, derive_seed(config.seed, {kStreamInit}));
  params.set_trainable(true);
  AdamState adam;

  TrainHistory history;
  history.phase = "pretrain-noise";
  const auto& val = validation_ids(data);
  const double initial = evaluate_reconstruction(params, data, val, config.batch_size);
  history.initial = {0, lr_at(config, 0), std::nan(""), initial};
  DivergenceGuard guard(initial);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = lr_at(config, epoch);
    const auto order = permuted(data.split.train, config.seed, epoch);
    double loss_sum = 0.0;
    train_batches("pretrain_noise", epoch, history, order, config.batch_size,
                  [&](std::span<const std::size_t> ids) {
      const Batch b = make_subject_batch(data, ids);
      zero_grads(params);
      const Tensorf loss = mse(reconstruct(params, b.images), b.images);
      backward(loss);
      adam_step(params, adam, lr, config);
      loss_sum += loss.item() * static_cast<double>(ids.size());
    });
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.val_loss = evaluate_reconstruction(params, data, val, config.batch_size);
    history.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (guard.update(rec.val_loss)) {
      throw TrainingDiverged("pretrain_noise: validation loss diverged at epoch " +
                                 std::to_string(epoch + 1),
                             history);
    }
  }
  params.set_trainable(false);
  return {std::move(params), std::move(history), config.epochs};
}

TrainResult train_noise(const ModelParams& predictor, const ModelParams& noise_init,
                        const Dataset& data, const TrainConfig& config, const UNoiseConfig& ucfg,
                        const EpochCallback& on_epoch) {
  config.validate();
  ucfg.validate();
  require_splits(data, "train_noise", false);
  if (!predictor.is_predictor()) throw TrainingError("train_noise: predictor has wrong kind");
  if (!noise_init.is_noise_model()) throw TrainingError("train_noise: noise model has wrong kind");
  if (predictor.fingerprint != fingerprint_of(predictor.spec)) {
    throw FingerprintError(fingerprint_of(predictor.spec), predictor.fingerprint);
  }
  if (!(input_shape_of(predictor.spec) == data.spec.shape) ||
      !(input_shape_of(noise_init.spec) == data.spec.shape)) {
    throw TrainingError("train_noise: model input shapes do not match dataset " +
                        data.spec.shape.str());
  }

  const Digest theta_before = params_digest(predictor);
  ModelParams frozen = predictor.clone();
  frozen.set_trainable(false);
  ModelParams noise = noise_init.clone();
  noise.set_trainable(true);
  AdamState adam;

  TrainHistory history;
  history.phase = "train-noise";
  const auto& val = validation_ids(data);
  auto record_eval = [&](EpochRecord& rec) {
    const NoiseEval e =
        evaluate_noise(frozen, noise, data, val, config.batch_size, ucfg, config.seed);
    rec.val_loss = e.total;
    rec.prediction_term = e.prediction;
    rec.noise_term = e.noise;
    rec.mean_mask = e.mean_mask;
  };
  history.initial.lr = lr_at(config, 0);
  record_eval(history.initial);
  DivergenceGuard guard(history.initial.val_loss);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = lr_at(config, epoch);
    const auto order = permuted(data.split.train, config.seed, epoch);
    double loss_sum = 0.0;
    train_batches("train_noise", epoch, history, order, config.batch_size,
                  [&](std::span<const std::size_t> ids) {
      const Batch b = make_subject_batch(data, ids);
      zero_grads(noise);
      const Tensorf mask = noise_mask(noise, b.images);
      const auto draw = batch_draw(data.spec.shape, ids, [&](std::size_t id) {
        return noise_draw_seed(config.seed, epoch, id);
      });
      const Tensorf noisy = apply_noise(b.images, mask, ucfg, draw);
      const auto loss = unoise_loss(predict_age(frozen, noisy), b.labels, mask, ucfg);
      backward(loss.total);
      adam_step(noise, adam, lr, config);
      loss_sum += loss.total.item() * static_cast<double>(ids.size());
    });
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    record_eval(rec);
    history.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (guard.update(rec.val_loss)) {
      throw TrainingDiverged("train_noise: validation loss diverged at epoch " +
                                 std::to_string(epoch + 1),
                             history);
    }
  }

  if (params_digest(frozen) != theta_before || params_digest(predictor) != theta_before) {
    throw TrainingError("train_noise: frozen predictor parameters were modified");
  }
  noise.set_trainable(false);
  return {std::move(noise), std::move(history), config.epochs};
}

}  // namespace noisemap
