#pragma once

// Regression accuracy, localization against phantom ground truth and an
// exhaustive occlusion oracle.

#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "json.hpp"
#include "noisemap/models.hpp"
#include "noisemap/volume.hpp"

namespace noisemap {

class EvalError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

double mae(std::span<const double> preds, std::span<const double> labels);

// MAE of always predicting the mean of `train_labels`.
double mean_predictor_mae(std::span<const double> train_labels,
                          std::span<const double> test_labels);

enum class FillMode { Mean, Zero };

struct OcclusionConfig {
  std::size_t patch_size = 3;
  std::size_t stride = 1;
  FillMode fill = FillMode::Mean;
  std::size_t batch_size = 32;  // occluded copies per forward pass

  void validate() const;
};

// Patch origins along one axis: 0, stride, ... while the patch fits.
std::size_t occlusion_positions(std::size_t extent, const OcclusionConfig& cfg);

// Per voxel: mean over the patches covering it of
//   (pred(occluded) - y)^2 - (pred(clean) - y)^2.
// Voxels covered by no patch get 0. The clean prediction is computed once.
Volume occlusion_map(const ModelParams& predictor, const Volume& volume, double y,
                     const OcclusionConfig& cfg = {});

// Spearman rank correlation with average ranks for ties. NaN when either
// input is constant.
double spearman(std::span<const float> a, std::span<const float> b);

struct LocalizationReport {
  double precision_at_k = 0.0;
  double recall_at_k = 0.0;
  double random_baseline = 0.0;  // truth fraction
  double rank_correlation = std::numeric_limits<double>::quiet_NaN();
  std::size_t k = 0;
  std::size_t truth_voxels = 0;
};

// Selects the ceil(fraction * V) most important voxels of `candidate` (the
// lowest values when `low_is_important`), ties by index. When `oracle` is
// given (higher = more important), rank_correlation is the Spearman
// correlation between candidate importance and the oracle.
LocalizationReport localization_report(const Volume& candidate, const Volume& truth,
                                       double fraction, bool low_is_important,
                                       const Volume* oracle = nullptr);

struct RegionContrast {
  double truth_mean = 0.0;
  double background_mean = 0.0;
};

// Mean of `map` over truth (> 0.5) voxels and over the rest.
RegionContrast region_contrast(const Volume& map, const Volume& truth);

nlohmann::ordered_json report_json(const LocalizationReport& r);

}  // namespace noisemap
