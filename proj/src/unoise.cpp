#include "noisemap/unoise.hpp"

#include <cmath>
#include <sstream>

#include "noisemap/rng.hpp"

namespace noisemap {

namespace {

template <typename T>
void check_open_unit(std::span<const T> mask) {
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!(mask[i] > T(0) && mask[i] < T(1))) {
      throw UNoiseError("mask value " + std::to_string(static_cast<double>(mask[i])) +
                        " at flat index " + std::to_string(i) + " is outside (0, 1)");
    }
  }
}

void check_amplitudes(const UNoiseConfig& cfg) {
  if (!(cfg.v_min >= 0.0) || !(cfg.v_max >= cfg.v_min)) {
    throw UNoiseError("noise amplitudes need 0 <= v_min <= v_max");
  }
}

}  // namespace

void UNoiseConfig::validate() const {
  if (!(v_min >= 0.0)) throw UNoiseError("v_min must be >= 0");
  if (!(v_max > v_min)) {
    throw UNoiseError("v_max (" + std::to_string(v_max) + ") must exceed v_min (" +
                      std::to_string(v_min) + ")");
  }
  if (!(r >= 0.0)) throw UNoiseError("r must be >= 0");
}

template <typename T>
NoiseDraw<T> NoiseDraw<T>::sample(const Shape& shape, std::uint64_t seed) {
  const auto values = standard_normal(shape_numel(shape), seed);
  return {seed, Tensor<T>(shape, std::vector<T>(values.begin(), values.end()))};
}

template <typename T>
Tensor<T> apply_noise(const Tensor<T>& x, const Tensor<T>& mask, const UNoiseConfig& cfg,
                      const NoiseDraw<T>& draw) {
  check_amplitudes(cfg);
  if (x.shape() != mask.shape() || x.shape() != draw.epsilon.shape()) {
    throw ShapeError("apply_noise: image " + shape_string(x.shape()) + ", mask " +
                     shape_string(mask.shape()) + " and noise " +
                     shape_string(draw.epsilon.shape()) + " must agree");
  }
  check_open_unit(mask.data());
  const T span = static_cast<T>(cfg.v_max - cfg.v_min);
  const T offset = static_cast<T>(cfg.v_min);
  if (cfg.eq1_literal) {
    return add_scalar(add(x, mul(scalar_mul(mask, span), draw.epsilon)), offset);
  }
  const Tensor<T> amplitude = add_scalar(scalar_mul(mask, span), offset);
  return add(x, mul(amplitude, draw.epsilon));
}

Volume apply_noise(const Volume& x, const Volume& mask, const UNoiseConfig& cfg,
                   std::uint64_t seed) {
  if (!(x.dims == mask.dims)) {
    throw ShapeError("apply_noise: image " + x.dims.str() + " and mask " + mask.dims.str() +
                     " differ");
  }
  const Shape shape{x.dims.d, x.dims.h, x.dims.w};
  const Tensorf xt(shape, x.data);
  const Tensorf mt(shape, mask.data);
  const Tensorf out = apply_noise(xt, mt, cfg, NoiseDraw<float>::sample(shape, seed));
  return Volume(x.dims, std::vector<float>(out.data().begin(), out.data().end()));
}

template <typename T>
UNoiseLoss<T> unoise_loss(const Tensor<T>& pred_noisy, const Tensor<T>& labels,
                          const Tensor<T>& mask, const UNoiseConfig& cfg) {
  if (pred_noisy.shape() != labels.shape()) {
    throw ShapeError("unoise_loss: predictions " + shape_string(pred_noisy.shape()) +
                     " and labels " + shape_string(labels.shape()) + " differ");
  }
  if (!(cfg.r >= 0.0)) throw UNoiseError("unoise_loss: r must be >= 0");
  check_open_unit(mask.data());

  // Overflow inside an op surfaces as NonFiniteError from that op; rethrow it
  // naming the loss term.
  auto term = [](const char* name, auto&& fn) {
    try {
      return fn();
    } catch (const NonFiniteError& e) {
      throw NonFiniteError(std::string("unoise_loss: ") + name + " term is non-finite (" +
                               e.what() + ")",
                           e.index());
    }
  };
  const Tensor<T> prediction = term("prediction", [&] { return mse(pred_noisy, labels); });
  const Tensor<T> neg_log =
      term("noise", [&] { return scalar_mul(mean(log(mask)), T(-1)); });
  UNoiseLoss<T> out;
  out.prediction_term = static_cast<double>(prediction.item());
  out.noise_term = static_cast<double>(neg_log.item());
  if (!std::isfinite(out.prediction_term) || !std::isfinite(out.noise_term)) {
    std::ostringstream os;
    os << "unoise_loss: non-finite loss (prediction term " << out.prediction_term
       << ", noise term " << out.noise_term << ")";
    throw NonFiniteError(os.str(), 0);
  }
  out.total = add(prediction, scalar_mul(neg_log, static_cast<T>(cfg.r)));
  return out;
}

double noise_loss_grad_sanity(double mask_value, double r) {
  if (!(mask_value > 0.0 && mask_value < 1.0)) {
    throw UNoiseError("noise_loss_grad_sanity: mask value must lie in (0, 1)");
  }
  return -r / mask_value;
}

template struct NoiseDraw<float>;
template struct NoiseDraw<double>;
template Tensor<float> apply_noise<float>(const Tensor<float>&, const Tensor<float>&,
                                          const UNoiseConfig&, const NoiseDraw<float>&);
template Tensor<double> apply_noise<double>(const Tensor<double>&, const Tensor<double>&,
                                            const UNoiseConfig&, const NoiseDraw<double>&);
template UNoiseLoss<float> unoise_loss<float>(const Tensor<float>&, const Tensor<float>&,
                                              const Tensor<float>&, const UNoiseConfig&);
template UNoiseLoss<double> unoise_loss<double>(const Tensor<double>&, const Tensor<double>&,
                                                const Tensor<double>&, const UNoiseConfig&);

}  // namespace noisemap
