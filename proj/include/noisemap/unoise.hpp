#pragma once

// Noisy-image construction and the joint noise/prediction loss.
//
//   x_noisy = x + (mask * (v_max - v_min) + v_min) * eps,   eps ~ N(0, 1) per voxel
//   L       = mean_batch (f(x_noisy) - y)^2  +  r * mean(-log mask)
//
// The mask is the noise model's per-voxel output in (0, 1); a voxel that can
// take a lot of noise without moving the prediction is unimportant.

#include <cstdint>
#include <stdexcept>
#include <string>

#include "noisemap/tensor.hpp"
#include "noisemap/volume.hpp"

namespace noisemap {

struct UNoiseConfig {
  double v_min = 1.0;
  double v_max = 5.0;
  double r = 0.1;
  // Offset v_min added outside the noise amplitude, x + mask*(v_max-v_min)*eps + v_min.
  bool eq1_literal = false;

  void validate() const;
};

class UNoiseError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename T>
struct NoiseDraw {
  std::uint64_t seed = 0;
  Tensor<T> epsilon;

  static NoiseDraw sample(const Shape& shape, std::uint64_t seed);
};

// Differentiable with respect to `mask`; epsilon is a constant.
template <typename T>
Tensor<T> apply_noise(const Tensor<T>& x, const Tensor<T>& mask, const UNoiseConfig& cfg,
                      const NoiseDraw<T>& draw);

Volume apply_noise(const Volume& x, const Volume& mask, const UNoiseConfig& cfg,
                   std::uint64_t seed);

template <typename T>
struct UNoiseLoss {
  Tensor<T> total;
  double prediction_term = 0.0;  // mean squared error of the noisy-input predictions
  double noise_term = 0.0;       // mean of -log(mask), before weighting by r
};

template <typename T>
UNoiseLoss<T> unoise_loss(const Tensor<T>& pred_noisy, const Tensor<T>& labels,
                          const Tensor<T>& mask, const UNoiseConfig& cfg);

// d/dm of the weighted noise term -r*log(m); negative whenever r > 0.
double noise_loss_grad_sanity(double mask_value, double r);

}  // namespace noisemap
