#pragma once

// The two networks: the age regressor and the encoder-decoder noise model.
//
// Predictor: 2x average-pool of the input, 3^3 stem conv, 2x pool, then
// `n_res_blocks` residual units (two 3^3 convs with an identity skip). The
// first unit is followed by another 2x pool; channels double at the middle
// unit. Global average pool and a linear layer give one age per subject.
//
// Noise model: `n_blocks` encoder levels (conv, then 2x pool), a bottleneck
// conv, and `n_blocks` decoder levels (nearest 2x upsample, concatenation with
// the encoder skip, conv). A 1x1x1 head gives one channel, read either as a
// reconstruction (identity) or as a noise mask (sigmoid).

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "noisemap/digest.hpp"
#include "noisemap/tensor.hpp"
#include "noisemap/volume.hpp"

namespace noisemap {

struct PredictorSpec {
  std::size_t in_channels = 1;
  std::size_t base_channels = 8;
  std::size_t n_res_blocks = 4;
  Dims input_shape{32, 32, 32};

  std::size_t n_downsamples() const { return 3; }
  void validate() const;
  std::string canonical() const;
  Digest fingerprint() const;
};

struct NoiseModelSpec {
  std::size_t n_blocks = 3;
  std::size_t first_channels = 8;
  Dims input_shape{32, 32, 32};
  bool skip_connections = true;

  void validate() const;
  std::string canonical() const;
  Digest fingerprint() const;
};

using ArchSpec = std::variant<PredictorSpec, NoiseModelSpec>;

Digest fingerprint_of(const ArchSpec& spec);
Dims input_shape_of(const ArchSpec& spec);

struct NamedTensor {
  std::string name;
  Tensorf value;
};

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FingerprintError : public ModelError {
 public:
  FingerprintError(const Digest& expected, const Digest& found);
  const Digest& expected() const { return expected_; }
  const Digest& found() const { return found_; }

 private:
  Digest expected_;
  Digest found_;
};

class ParamFileError : public ModelError {
 public:
  ParamFileError(const std::filesystem::path& path, std::uint64_t offset, const std::string& why);
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

struct ModelParams {
  ArchSpec spec;
  Digest fingerprint{};
  std::uint64_t rng_seed = 0;
  std::vector<NamedTensor> tensors;

  bool is_predictor() const { return std::holds_alternative<PredictorSpec>(spec); }
  bool is_noise_model() const { return std::holds_alternative<NoiseModelSpec>(spec); }

  const Tensorf& get(const std::string& name) const;
  Tensorf& get(const std::string& name);
  std::size_t parameter_count() const;

  // Deep copy; the returned tensors share no storage with this one.
  ModelParams clone() const;
  void set_trainable(bool on);
  std::vector<Tensorf> trainable() const;
};

inline constexpr const char* kHeadPrefix = "head.";

ModelParams init_predictor(const PredictorSpec& spec, std::uint64_t seed);

// Trunk gets fan-in scaled weights; the 1x1x1 head is zero so a fresh model
// outputs a constant 0 (reconstruction) or 0.5 (mask).
ModelParams init_noise_model(const NoiseModelSpec& spec, std::uint64_t seed);

// Copies every trunk tensor of `pretrained` and re-initializes the head.
ModelParams transfer_trunk(const ModelParams& pretrained);

// Digest over trunk tensor names and values (head excluded).
Digest trunk_digest(const ModelParams& params);
// Digest over all tensor names and values.
Digest params_digest(const ModelParams& params);

// Stacks equally-shaped volumes into [N,1,D,H,W].
Tensorf make_batch(const std::vector<const Volume*>& volumes);

Tensorf predict_age(const ModelParams& params, const Tensorf& batch);  // [N]

// Encoder-decoder trunk plus 1x1x1 head, no output activation: [N,1,D,H,W].
Tensorf noise_model_logits(const ModelParams& params, const Tensorf& batch);
Tensorf reconstruct(const ModelParams& params, const Tensorf& batch);

// Mask values are squashed into [kMaskEpsilon, 1 - kMaskEpsilon] so they stay
// strictly inside (0, 1) in single precision.
inline constexpr float kMaskEpsilon = 1e-6f;
Tensorf noise_mask(const ModelParams& params, const Tensorf& batch);

void save_params(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_params(const std::filesystem::path& path, const ArchSpec& expected);

}  // namespace noisemap
