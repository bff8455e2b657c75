#pragma once

// Synthetic "aging" phantoms with known ground truth.
//
// A phantom is an ellipsoidal tissue body containing two age-dependent
// structures (a central cavity whose radius grows linearly with age and a
// Gaussian blob whose peak decays linearly with age) plus age-independent
// distractor blobs and voxel noise. Distractors and noise depend only on the
// seed, so two phantoms with the same seed differ only in the age structures.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "noisemap/volume.hpp"

namespace noisemap {

struct PhantomSpec {
  Dims shape{32, 32, 32};
  double age_lo = 44.0;
  double age_hi = 73.0;
  double ventricle_gain = 0.12;  // cavity radius growth, voxels per year
  double hippo_decay = 0.04;     // blob peak loss, intensity per year
  double noise_std = 0.1;
  std::size_t distractor_count = 4;

  void validate() const;
  std::string canonical() const;
  std::string hash() const;  // hex sha256 of canonical()
};

class PhantomError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Sample {
  std::size_t subject_id = 0;
  std::uint64_t seed = 0;
  double age = 0.0;
  Volume volume;      // normalized to zero mean, unit variance
  Volume truth_mask;  // 1 where the expected intensity depends on age
  std::size_t cavity_voxels = 0;
  double blob_peak = 0.0;
};

// Geometry shared by all phantoms of a spec.
struct PhantomLayout {
  double center[3];        // cavity and body center (z, y, x)
  double body_axes[3];     // tissue ellipsoid semi-axes
  double cavity_shape[3];  // cavity semi-axes per unit radius
  double cavity_r0;        // radius at age_lo
  double blob_center[3];
  double blob_sigma;
  double blob_peak0;  // peak at age_lo
};

PhantomLayout phantom_layout(const PhantomSpec& spec);
double cavity_radius(const PhantomSpec& spec, double age);
double blob_peak(const PhantomSpec& spec, double age);

// Un-normalized rendering; what generate_phantom normalizes.
Volume render_phantom_raw(const PhantomSpec& spec, double age, std::uint64_t seed);

// Summed field of the distractor blobs; depends on the seed only.
Volume render_distractors(const PhantomSpec& spec, std::uint64_t seed);

Volume truth_mask(const PhantomSpec& spec);

Sample generate_phantom(const PhantomSpec& spec, double age, std::uint64_t seed,
                        std::size_t subject_id = 0);

struct SplitFractions {
  double train = 0.75;
  double val = 0.10;
  double test = 0.15;
};

struct DatasetSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
  SplitFractions fractions;
};

struct Dataset {
  PhantomSpec spec;
  std::uint64_t seed = 0;
  std::vector<Sample> samples;  // samples[i].subject_id == i
  DatasetSplit split;

  const Sample& subject(std::size_t id) const { return samples.at(id); }
};

DatasetSplit make_split(std::size_t n, std::uint64_t seed, const SplitFractions& fractions = {});

Dataset generate_dataset(const PhantomSpec& spec, std::size_t n, std::uint64_t seed,
                         const SplitFractions& fractions = {});

}  // namespace noisemap
