#pragma once

// Per-subject importance maps and the population pipeline:
// average -> keep the lowest-tolerated-noise fraction -> Gaussian smoothing.
//
// Maps hold raw tolerated noise (the mask head output), so lower means more
// important. Only the PGM display export inverts intensity.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "noisemap/digest.hpp"
#include "noisemap/models.hpp"
#include "noisemap/phantom.hpp"
#include "noisemap/volume.hpp"

namespace noisemap {

inline constexpr const char* kPipelineVersion = "aggregate-threshold-smooth/1";

class ImportanceError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ImportanceMap {
  Volume tolerated_noise;  // values in (0, 1)
  std::size_t subject_id = 0;
  Digest model_fingerprint{};
};

struct PopulationMap {
  Volume mean;  // voxel-wise mean tolerated noise
  std::size_t n_subjects = 0;
  std::vector<std::size_t> subjects;  // ascending
  Digest model_fingerprint{};
  double threshold_fraction = 0.10;
  double smoothing_sigma = 1.0;
  std::optional<Volume> binary_map;    // 1 on the selected lowest-noise voxels
  std::optional<Volume> smoothed_map;  // gaussian_smooth(binary_map)
};

// Deterministic forward pass of the noise model; no noise draw is involved.
ImportanceMap extract_map(const ModelParams& noise_model, const Volume& volume,
                          std::size_t subject_id = 0);

// Extracts maps for several subjects of a dataset, batching the forward passes.
std::vector<ImportanceMap> extract_maps(const ModelParams& noise_model, const Dataset& data,
                                        std::span<const std::size_t> ids,
                                        std::size_t batch_size = 4);

// Voxel-wise mean. Summation runs in ascending subject order in double, so
// the result does not depend on the order of `maps`.
PopulationMap aggregate(std::span<const ImportanceMap> maps);

// Marks exactly ceil(fraction * V) voxels holding the smallest values; ties go
// to the lower linear index.
Volume threshold_lowest(const Volume& map, double fraction);

// Separable Gaussian, radius max(1, ceil(3 sigma)), normalized taps, zero padding
// (so constant volumes are attenuated within `radius` of the border).
Volume gaussian_smooth(const Volume& vol, double sigma);
int gaussian_radius(double sigma);
std::vector<double> gaussian_taps(double sigma);

struct PipelineConfig {
  double fraction = 0.10;
  double sigma = 1.0;

  void validate() const;
};

// The only public way to build a finished population map: the stage order is
// fixed here and smoothing always acts on the thresholded map.
PopulationMap run_population_pipeline(std::span<const ImportanceMap> maps,
                                      const PipelineConfig& config = {});

// Writes <dir>/importance_mean.vol, importance_binary.vol, importance_smoothed.vol,
// importance.json and, when `pgm_slices` is set, slices/slice_NNN.pgm (axial,
// bright = important).
std::vector<std::filesystem::path> export_map(const PopulationMap& map,
                                              const std::filesystem::path& dir,
                                              bool pgm_slices = true);

// One 8-bit P5 image per axial slice, linearly scaled over the volume range;
// `invert` maps the smallest value to white.
std::vector<std::filesystem::path> write_pgm_slices(const Volume& vol,
                                                    const std::filesystem::path& dir,
                                                    bool invert);

}  // namespace noisemap
