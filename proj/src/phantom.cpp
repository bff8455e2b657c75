#include "noisemap/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "noisemap/digest.hpp"
#include "noisemap/rng.hpp"

namespace noisemap {

namespace {

constexpr double kBodyIntensity = 1.0;
constexpr double kBlobCutoffSigmas = 4.5;
constexpr std::uint64_t kStreamDistractors = 1;
constexpr std::uint64_t kStreamNoise = 2;
constexpr std::uint64_t kStreamAges = 3;
constexpr std::uint64_t kStreamSplit = 4;

double ellipsoid_level(const double c[3], const double axes[3], double z, double y, double x) {
  const double dz = (z - c[0]) / axes[0];
  const double dy = (y - c[1]) / axes[1];
  const double dx = (x - c[2]) / axes[2];
  return dz * dz + dy * dy + dx * dx;
}

double blob_value(const PhantomLayout& l, double peak, double z, double y, double x) {
  const double dz = z - l.blob_center[0];
  const double dy = y - l.blob_center[1];
  const double dx = x - l.blob_center[2];
  const double r2 = dz * dz + dy * dy + dx * dx;
  const double cut = kBlobCutoffSigmas * l.blob_sigma;
  if (r2 > cut * cut) return 0.0;
  return peak * std::exp(-r2 / (2.0 * l.blob_sigma * l.blob_sigma));
}

// Noise-free, distractor-free age structure at one voxel.
double age_structure(const PhantomSpec& spec, const PhantomLayout& l, double age, double z,
                     double y, double x, bool* in_cavity = nullptr) {
  double v = 0.0;
  if (ellipsoid_level(l.center, l.body_axes, z, y, x) <= 1.0) v = kBodyIntensity;
  const double r = cavity_radius(spec, age);
  const double axes[3] = {r * l.cavity_shape[0], r * l.cavity_shape[1], r * l.cavity_shape[2]};
  const bool cavity = ellipsoid_level(l.center, axes, z, y, x) <= 1.0;
  if (cavity) v = 0.0;
  if (in_cavity) *in_cavity = cavity;
  return v + blob_value(l, blob_peak(spec, age), z, y, x);
}

struct Distractor {
  double center[3];
  double sigma;
  double amplitude;
};

std::vector<Distractor> draw_distractors(const PhantomSpec& spec, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {kStreamDistractors}));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double dims[3] = {static_cast<double>(spec.shape.d), static_cast<double>(spec.shape.h),
                          static_cast<double>(spec.shape.w)};
  std::vector<Distractor> out(spec.distractor_count);
  for (auto& d : out) {
    for (int a = 0; a < 3; ++a) d.center[a] = dims[a] * (0.2 + 0.6 * unit(rng));
    d.sigma = 1.0 + 1.5 * unit(rng);
    d.amplitude = (unit(rng) < 0.5 ? -1.0 : 1.0) * (0.4 + 0.6 * unit(rng));
  }
  return out;
}

double distractor_value(const std::vector<Distractor>& ds, double z, double y, double x) {
  double v = 0.0;
  for (const auto& d : ds) {
    const double dz = z - d.center[0], dy = y - d.center[1], dx = x - d.center[2];
    v += d.amplitude * std::exp(-(dz * dz + dy * dy + dx * dx) / (2.0 * d.sigma * d.sigma));
  }
  return v;
}

std::vector<double> render_raw_double(const PhantomSpec& spec, double age, std::uint64_t seed,
                                      std::size_t* cavity_count) {
  const PhantomLayout l = phantom_layout(spec);
  const auto ds = draw_distractors(spec, seed);
  const Dims& s = spec.shape;
  std::vector<double> out(s.voxels());
  Rng rng(derive_seed(seed, {kStreamNoise}));
  std::normal_distribution<double> noise(0.0, spec.noise_std);
  std::size_t count = 0;
  std::size_t i = 0;
  for (std::size_t z = 0; z < s.d; ++z) {
    for (std::size_t y = 0; y < s.h; ++y) {
      for (std::size_t x = 0; x < s.w; ++x, ++i) {
        bool cav = false;
        const double zz = static_cast<double>(z), yy = static_cast<double>(y),
                     xx = static_cast<double>(x);
        double v = age_structure(spec, l, age, zz, yy, xx, &cav);
        count += cav ? 1 : 0;
        v += distractor_value(ds, zz, yy, xx);
        v += noise(rng);
        out[i] = v;
      }
    }
  }
  if (cavity_count) *cavity_count = count;
  return out;
}

}  // namespace

void PhantomSpec::validate() const {
  if (shape.d < 8 || shape.h < 8 || shape.w < 8) {
    throw PhantomError("phantom: shape " + shape.str() + " is too small (min 8 per axis)");
  }
  if (!(age_lo < age_hi)) throw PhantomError("phantom: age_lo must be below age_hi");
  if (!(ventricle_gain > 0.0)) throw PhantomError("phantom: ventricle_gain must be positive");
  if (!(hippo_decay > 0.0)) throw PhantomError("phantom: hippo_decay must be positive");
  if (!(noise_std >= 0.0)) throw PhantomError("phantom: noise_std must be non-negative");

  const PhantomLayout l = phantom_layout(*this);
  const double dims[3] = {static_cast<double>(shape.d), static_cast<double>(shape.h),
                          static_cast<double>(shape.w)};
  const double r = cavity_radius(*this, age_hi);
  for (int a = 0; a < 3; ++a) {
    const double ext = r * l.cavity_shape[a];
    if (l.center[a] - ext < 0.0 || l.center[a] + ext > dims[a] - 1.0 || ext >= l.body_axes[a]) {
      throw PhantomError("phantom: cavity radius " + std::to_string(r) + " at age " +
                         std::to_string(age_hi) + " does not fit the volume");
    }
    const double reach = 3.0 * l.blob_sigma;
    if (l.blob_center[a] - reach < 0.0 || l.blob_center[a] + reach > dims[a] - 1.0) {
      throw PhantomError("phantom: blob does not fit the volume " + shape.str());
    }
  }
  if (!(blob_peak(*this, age_hi) > 0.0)) {
    throw PhantomError("phantom: hippo_decay drives the blob peak to zero before age_hi");
  }
}

std::string PhantomSpec::canonical() const {
  std::ostringstream os;
  os.precision(17);
  os << "phantom/v1;shape=" << shape.str() << ";age=" << age_lo << "," << age_hi
     << ";gain=" << ventricle_gain << ";decay=" << hippo_decay << ";noise=" << noise_std
     << ";distractors=" << distractor_count;
  return os.str();
}

std::string PhantomSpec::hash() const { return to_hex(sha256(canonical())); }

PhantomLayout phantom_layout(const PhantomSpec& spec) {
  PhantomLayout l{};
  const double dims[3] = {static_cast<double>(spec.shape.d), static_cast<double>(spec.shape.h),
                          static_cast<double>(spec.shape.w)};
  for (int a = 0; a < 3; ++a) {
    l.center[a] = (dims[a] - 1.0) / 2.0;
    l.body_axes[a] = 0.44 * dims[a];
  }
  l.cavity_shape[0] = 0.6;
  l.cavity_shape[1] = 0.75;
  l.cavity_shape[2] = 1.0;
  l.cavity_r0 = 0.09 * std::min({dims[0], dims[1], dims[2]});
  l.blob_center[0] = l.center[0];
  l.blob_center[1] = 0.22 * dims[1];
  l.blob_center[2] = l.center[2];
  l.blob_sigma = 0.045 * std::min({dims[0], dims[1], dims[2]});
  l.blob_peak0 = 2.0;
  return l;
}

double cavity_radius(const PhantomSpec& spec, double age) {
  return phantom_layout(spec).cavity_r0 + spec.ventricle_gain * (age - spec.age_lo);
}

double blob_peak(const PhantomSpec& spec, double age) {
  return phantom_layout(spec).blob_peak0 - spec.hippo_decay * (age - spec.age_lo);
}

Volume render_phantom_raw(const PhantomSpec& spec, double age, std::uint64_t seed) {
  spec.validate();
  const auto raw = render_raw_double(spec, age, seed, nullptr);
  Volume v(spec.shape);
  for (std::size_t i = 0; i < raw.size(); ++i) v.data[i] = static_cast<float>(raw[i]);
  return v;
}

Volume render_distractors(const PhantomSpec& spec, std::uint64_t seed) {
  const auto ds = draw_distractors(spec, seed);
  Volume v(spec.shape);
  for (std::size_t z = 0; z < spec.shape.d; ++z)
    for (std::size_t y = 0; y < spec.shape.h; ++y)
      for (std::size_t x = 0; x < spec.shape.w; ++x)
        v.at(z, y, x) = static_cast<float>(distractor_value(
            ds, static_cast<double>(z), static_cast<double>(y), static_cast<double>(x)));
  return v;
}

Volume truth_mask(const PhantomSpec& spec) {
  spec.validate();
  const PhantomLayout l = phantom_layout(spec);
  const double threshold = 0.1 * spec.noise_std;
  Volume mask(spec.shape);
  for (std::size_t z = 0; z < spec.shape.d; ++z) {
    for (std::size_t y = 0; y < spec.shape.h; ++y) {
      for (std::size_t x = 0; x < spec.shape.w; ++x) {
        const double zz = static_cast<double>(z), yy = static_cast<double>(y),
                     xx = static_cast<double>(x);
        const double lo = age_structure(spec, l, spec.age_lo, zz, yy, xx);
        const double hi = age_structure(spec, l, spec.age_hi, zz, yy, xx);
        mask.at(z, y, x) = std::abs(hi - lo) > threshold ? 1.0f : 0.0f;
      }
    }
  }
  return mask;
}

Sample generate_phantom(const PhantomSpec& spec, double age, std::uint64_t seed,
                        std::size_t subject_id) {
  spec.validate();
  if (!(age >= spec.age_lo && age <= spec.age_hi)) {
    throw PhantomError("phantom: age " + std::to_string(age) + " outside [" +
                       std::to_string(spec.age_lo) + ", " + std::to_string(spec.age_hi) + "]");
  }
  Sample s;
  s.subject_id = subject_id;
  s.seed = seed;
  s.age = age;
  s.blob_peak = blob_peak(spec, age);
  const auto raw = render_raw_double(spec, age, seed, &s.cavity_voxels);

  double mean = 0.0;
  for (double v : raw) mean += v;
  mean /= static_cast<double>(raw.size());
  double var = 0.0;
  for (double v : raw) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(raw.size()));
  if (!(sd > 0.0)) throw PhantomError("phantom: degenerate constant volume");
  s.volume = Volume(spec.shape);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    s.volume.data[i] = static_cast<float>((raw[i] - mean) / sd);
  }
  s.truth_mask = truth_mask(spec);
  return s;
}

DatasetSplit make_split(std::size_t n, std::uint64_t seed, const SplitFractions& f) {
  if (f.train <= 0.0 || f.val <= 0.0 || f.test <= 0.0 ||
      std::abs(f.train + f.val + f.test - 1.0) > 1e-9) {
    throw PhantomError("split: fractions must be positive and sum to 1");
  }
  const auto n_train = static_cast<std::size_t>(std::llround(f.train * static_cast<double>(n)));
  const auto n_val = static_cast<std::size_t>(std::llround(f.val * static_cast<double>(n)));
  if (n_train == 0 || n_val == 0 || n_train + n_val >= n) {
    throw PhantomError("split: " + std::to_string(n) + " subjects cannot populate every split");
  }
  const auto order = shuffled_indices(n, derive_seed(seed, {kStreamSplit}));
  DatasetSplit split;
  split.fractions = f;
  split.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  split.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                   order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  split.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
  for (auto* part : {&split.train, &split.val, &split.test}) std::sort(part->begin(), part->end());
  return split;
}

Dataset generate_dataset(const PhantomSpec& spec, std::size_t n, std::uint64_t seed,
                         const SplitFractions& fractions) {
  spec.validate();
  if (n < 20) throw PhantomError("dataset: need at least 20 subjects, got " + std::to_string(n));
  Dataset ds;
  ds.spec = spec;
  ds.seed = seed;
  ds.split = make_split(n, seed, fractions);

  Rng age_rng(derive_seed(seed, {kStreamAges}));
  std::uniform_real_distribution<double> age_dist(spec.age_lo, spec.age_hi);
  std::vector<double> ages(n);
  for (auto& a : ages) a = age_dist(age_rng);

  ds.samples.resize(n);
  const auto count = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t i = 0; i < count; ++i) {
    const auto id = static_cast<std::size_t>(i);
    ds.samples[id] = generate_phantom(spec, ages[id], derive_seed(seed, {id}), id);
  }
  return ds;
}

}  // namespace noisemap
