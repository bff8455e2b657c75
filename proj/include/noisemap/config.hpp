#pragma once

// Strict JSON run configuration. Every key is optional; unknown keys and type
// mismatches are rejected with the offending JSON path.
//
// Top level:
//   seed, n_subjects, threads, pretrain,
//   v_min, v_max, r, eq1_literal,            (noise model objective)
//   fraction, sigma,                        (population pipeline)
//   phantom {shape, age_lo, age_hi, ventricle_gain, hippo_decay, noise_std, distractor_count}
//   split {train, val, test}
//   predictor {base_channels, n_res_blocks}
//   noise_model {n_blocks, first_channels, skip_connections}
//   train_predictor / pretrain_noise / train_noise
//       {epochs, batch_size, lr0, lr_decay_factor, lr_decay_every, adam_beta1, adam_beta2, adam_eps}
//   occlusion {patch_size, stride, fill ("mean"|"zero"), batch_size, subjects}

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "noisemap/eval.hpp"
#include "noisemap/importance.hpp"
#include "noisemap/io.hpp"
#include "noisemap/models.hpp"
#include "noisemap/phantom.hpp"
#include "noisemap/trainer.hpp"
#include "noisemap/unoise.hpp"

namespace noisemap {

class ConfigError : public std::invalid_argument {
 public:
  ConfigError(const std::string& json_path, const std::string& why)
      : std::invalid_argument(json_path + ": " + why), path_(json_path) {}
  const std::string& json_path() const { return path_; }

 private:
  std::string path_;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t n_subjects = 200;
  int threads = 0;  // 0 keeps the OpenMP default
  bool pretrain = true;
  PhantomSpec phantom;
  SplitFractions split;
  PredictorSpec predictor;
  NoiseModelSpec noise_model;
  TrainConfig train_predictor;
  TrainConfig pretrain_noise;
  TrainConfig train_noise{.batch_size = 2};
  UNoiseConfig unoise;
  PipelineConfig pipeline;
  OcclusionConfig occlusion;
  std::size_t occlusion_subjects = 5;

  // Propagates the phantom shape into the model specs and validates everything.
  void finalize();
  // Per-phase training seed derived from `seed`.
  std::uint64_t phase_seed(const std::string& phase) const;
};

RunConfig parse_config(const Json& j);
RunConfig load_config(const std::filesystem::path& path);
Json config_to_json(const RunConfig& c);

// Human-readable list of every key with its default, for --help.
std::string config_defaults_help();

}  // namespace noisemap
