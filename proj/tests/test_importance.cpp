#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "noisemap/importance.hpp"
#include "noisemap/io.hpp"
#include "test_util.hpp"

using namespace noisemap;
namespace fs = std::filesystem;
using noisemap::testing::random_volume;

namespace {

std::size_t count_set(const Volume& v) {
  return static_cast<std::size_t>(std::count(v.data.begin(), v.data.end(), 1.0f));
}

ImportanceMap make_map(Volume v, std::size_t id, std::uint8_t fp = 1) {
  ImportanceMap m;
  m.tolerated_noise = std::move(v);
  m.subject_id = id;
  m.model_fingerprint.fill(fp);
  return m;
}

// Direct dense 3D convolution with the outer product of the 1D taps.
Volume dense_smooth_oracle(const Volume& in, double sigma) {
  const auto t = gaussian_taps(sigma);
  const int r = static_cast<int>(t.size() / 2);
  const Dims d = in.dims;
  Volume out(d);
  for (int z = 0; z < int(d.d); ++z)
    for (int y = 0; y < int(d.h); ++y)
      for (int x = 0; x < int(d.w); ++x) {
        double acc = 0.0;
        for (int a = -r; a <= r; ++a)
          for (int b = -r; b <= r; ++b)
            for (int c = -r; c <= r; ++c) {
              const int zz = z + a, yy = y + b, xx = x + c;
              if (zz < 0 || yy < 0 || xx < 0 || zz >= int(d.d) || yy >= int(d.h) || xx >= int(d.w)) continue;
              acc += t[a + r] * t[b + r] * t[c + r] * in.at(zz, yy, xx);
            }
        out.at(z, y, x) = static_cast<float>(acc);
      }
  return out;
}

}  // namespace

TEST(Threshold, FullFractionMarksEverything) {
  const auto v = random_volume({4, 5, 6}, 1);
  EXPECT_EQ(count_set(threshold_lowest(v, 1.0)), v.size());
}

TEST(Threshold, RampMarksLeadingIndices) {
  Volume v({10, 10, 10});
  std::iota(v.data.begin(), v.data.end(), 0.0f);
  const auto b = threshold_lowest(v, 0.10);
  for (std::size_t i = 0; i < v.size(); ++i) ASSERT_EQ(b.data[i], i < 100 ? 1.0f : 0.0f);
}

TEST(Threshold, TiesBrokenByIndex) {
  Volume v({1, 1, 10}, 0.5f);
  v.data[7] = 0.1f;
  const auto b = threshold_lowest(v, 0.3);  // 3 voxels: index 7, then 0 and 1
  EXPECT_EQ(b.data, (std::vector<float>{1, 1, 0, 0, 0, 0, 0, 1, 0, 0}));
}

TEST(Threshold, ExactCountAndSortOracleAcrossRandomVolumes) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const Dims d{3 + seed % 5, 4 + seed % 3, 5};
    auto v = random_volume(d, seed);
    // Quantize to create many ties.
    for (float& x : v.data) x = std::round(x * 8.0f) / 8.0f;
    const double fraction = 0.03 + 0.023 * double(seed);
    const auto b = threshold_lowest(v, std::min(fraction, 1.0));
    const std::size_t k = static_cast<std::size_t>(std::ceil(std::min(fraction, 1.0) * v.size() - 1e-9));
    ASSERT_EQ(count_set(b), k) << "seed " << seed;

    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto c) { return v.data[a] < v.data[c]; });
    Volume oracle(d, 0.0f);
    for (std::size_t i = 0; i < k; ++i) oracle.data[idx[i]] = 1.0f;
    ASSERT_EQ(b.data, oracle.data) << "seed " << seed;
  }
}

TEST(Threshold, InvalidFraction) {
  const auto v = random_volume({2, 2, 2}, 3);
  EXPECT_THROW(threshold_lowest(v, 0.0), ImportanceError);
  EXPECT_THROW(threshold_lowest(v, 1.5), ImportanceError);
}

TEST(Smooth, MatchesDenseConvolutionOracle) {
  Volume impulse({11, 11, 11}, 0.0f);
  impulse.at(5, 5, 5) = 1.0f;
  const auto s = gaussian_smooth(impulse, 1.0);
  const auto o = dense_smooth_oracle(impulse, 1.0);
  for (std::size_t i = 0; i < s.size(); ++i) ASSERT_NEAR(s.data[i], o.data[i], 1e-6);
  // Normalized discrete analog of (2 pi)^(-3/2): the cube of the centre tap.
  const auto t = gaussian_taps(1.0);
  EXPECT_NEAR(s.at(5, 5, 5), t[3] * t[3] * t[3], 1e-7);
  EXPECT_NEAR(s.at(5, 5, 5), std::pow(2.0 * M_PI, -1.5), 2e-3);

  const auto rnd = random_volume({7, 8, 9}, 4);
  const auto a = gaussian_smooth(rnd, 1.3), b = dense_smooth_oracle(rnd, 1.3);
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_NEAR(a.data[i], b.data[i], 1e-6);
}

TEST(Smooth, PreservesMassOfInteriorImpulse) {
  Volume impulse({13, 13, 13}, 0.0f);
  impulse.at(6, 6, 6) = 2.5f;
  const auto s = gaussian_smooth(impulse, 1.0);
  double mass = 0.0;
  for (float v : s.data) mass += v;
  EXPECT_NEAR(mass, 2.5, 1e-6);
}

TEST(Smooth, ConstantInteriorUnchangedBorderAttenuated) {
  const Volume c({10, 10, 10}, 3.0f);
  const auto s = gaussian_smooth(c, 1.0);
  EXPECT_NEAR(s.at(5, 5, 5), 3.0f, 1e-6);
  EXPECT_LT(s.at(0, 0, 0), 3.0f);
}

TEST(Smooth, TinySigmaIsIdentity) {
  const auto v = random_volume({5, 6, 7}, 5);
  EXPECT_EQ(gaussian_radius(1e-6), 1);
  const auto s = gaussian_smooth(v, 1e-6);
  for (std::size_t i = 0; i < v.size(); ++i) ASSERT_NEAR(s.data[i], v.data[i], 1e-6);
  EXPECT_THROW(gaussian_smooth(v, 0.0), ImportanceError);
}

TEST(Aggregate, SingleMapIsItself) {
  const auto v = random_volume({3, 4, 5}, 6, 0.01, 0.99);
  const std::vector<ImportanceMap> maps{make_map(v, 0)};
  EXPECT_EQ(aggregate(maps).mean.data, v.data);
}

TEST(Aggregate, ComplementaryMapsAverageToHalf) {
  const auto v = random_volume({3, 4, 5}, 7, 0.01, 0.99);
  Volume w = v;
  for (float& x : w.data) x = 1.0f - x;
  const std::vector<ImportanceMap> maps{make_map(v, 0), make_map(w, 1)};
  for (float x : aggregate(maps).mean.data) ASSERT_NEAR(x, 0.5f, 1e-7);
}

TEST(Aggregate, MatchesStreamingMeanOracle) {
  std::vector<ImportanceMap> maps;
  for (std::size_t i = 0; i < 100; ++i) maps.push_back(make_map(random_volume({6, 6, 6}, 100 + i, 0.01, 0.99), i));
  const auto pop = aggregate(maps);
  // Welford-style running mean, a different summation scheme.
  std::vector<double> running(216, 0.0);
  for (std::size_t k = 0; k < maps.size(); ++k)
    for (std::size_t i = 0; i < 216; ++i)
      running[i] += (maps[k].tolerated_noise.data[i] - running[i]) / double(k + 1);
  for (std::size_t i = 0; i < 216; ++i) ASSERT_NEAR(pop.mean.data[i], running[i], 1e-6);
  EXPECT_EQ(pop.n_subjects, 100u);
}

TEST(Aggregate, PermutationInvariant) {
  std::vector<ImportanceMap> maps;
  for (std::size_t i = 0; i < 12; ++i) maps.push_back(make_map(random_volume({4, 4, 4}, 200 + i), i));
  const auto a = aggregate(maps);
  std::reverse(maps.begin(), maps.end());
  std::swap(maps[2], maps[7]);
  const auto b = aggregate(maps);
  EXPECT_EQ(a.mean.data, b.mean.data);
  EXPECT_EQ(a.subjects, b.subjects);
}

TEST(Aggregate, RejectsMixedFingerprintsAndShapes) {
  const auto v = random_volume({2, 2, 2}, 8);
  EXPECT_THROW(aggregate(std::vector<ImportanceMap>{make_map(v, 0, 1), make_map(v, 1, 2)}), ImportanceError);
  EXPECT_THROW(aggregate(std::vector<ImportanceMap>{make_map(v, 0), make_map(random_volume({2, 2, 3}, 9), 1)}),
               ImportanceError);
  EXPECT_THROW(aggregate(std::vector<ImportanceMap>{}), ImportanceError);
}

TEST(Pipeline, StagesRunInFixedOrder) {
  std::vector<ImportanceMap> maps;
  for (std::size_t i = 0; i < 3; ++i) maps.push_back(make_map(random_volume({6, 6, 6}, 300 + i), i));
  const auto pop = run_population_pipeline(maps);
  const auto mean = aggregate(maps).mean;
  EXPECT_EQ(pop.binary_map->data, threshold_lowest(mean, 0.10).data);
  EXPECT_EQ(pop.smoothed_map->data, gaussian_smooth(threshold_lowest(mean, 0.10), 1.0).data);
  EXPECT_EQ(pop.threshold_fraction, 0.10);
  EXPECT_EQ(pop.smoothing_sigma, 1.0);
}

TEST(Extract, ZeroHeadModelGivesHalfAndIsDeterministic) {
  NoiseModelSpec spec;
  spec.input_shape = {16, 16, 16};
  const auto model = init_noise_model(spec, 1);
  const auto v = random_volume({16, 16, 16}, 10);
  const auto a = extract_map(model, v, 4), b = extract_map(model, v, 4);
  EXPECT_EQ(a.tolerated_noise.data, b.tolerated_noise.data);
  for (float x : a.tolerated_noise.data) ASSERT_EQ(x, 0.5f);
  EXPECT_EQ(a.model_fingerprint, spec.fingerprint());
}

TEST(Extract, RejectsBadModelOrShape) {
  NoiseModelSpec spec;
  spec.input_shape = {16, 16, 16};
  auto model = init_noise_model(spec, 2);
  EXPECT_THROW(extract_map(model, random_volume({16, 16, 8}, 11)), ImportanceError);
  model.fingerprint[0] ^= 1;
  EXPECT_THROW(extract_map(model, random_volume({16, 16, 16}, 12)), FingerprintError);
}

TEST(Export, WritesVolumesSidecarAndSlices) {
  std::vector<ImportanceMap> maps;
  for (std::size_t i = 0; i < 2; ++i) maps.push_back(make_map(random_volume({12, 5, 4}, 400 + i), 10 + i));
  const auto pop = run_population_pipeline(maps);
  const fs::path dir = fs::path(::testing::TempDir()) / "noisemap_export";
  fs::remove_all(dir);
  export_map(pop, dir);
  EXPECT_EQ(read_volume(dir / "importance_mean.vol").data, pop.mean.data);
  EXPECT_EQ(read_volume(dir / "importance_smoothed.vol").data, pop.smoothed_map->data);
  const auto side = read_json(dir / "importance.json");
  EXPECT_EQ(side.at("fraction").get<double>(), 0.10);
  EXPECT_EQ(side.at("sigma").get<double>(), 1.0);
  EXPECT_EQ(side.at("subjects").get<std::vector<std::size_t>>(), (std::vector<std::size_t>{10, 11}));
  EXPECT_EQ(side.at("pipeline_version").get<std::string>(), kPipelineVersion);
  EXPECT_EQ(side.at("model_fingerprint").get<std::string>().size(), 64u);
  for (int z = 0; z < 12; ++z) {
    char name[32];
    std::snprintf(name, sizeof name, "slice_%03d.pgm", z);
    const fs::path p = dir / "slices" / name;
    ASSERT_TRUE(fs::exists(p)) << p;
    std::ifstream in(p, std::ios::binary);
    std::string magic;
    int w, h, maxv;
    in >> magic >> w >> h >> maxv;
    EXPECT_EQ(magic, "P5");
    EXPECT_EQ(w, 4);
    EXPECT_EQ(h, 5);
    EXPECT_EQ(maxv, 255);
  }
  EXPECT_FALSE(fs::exists(dir / "slices" / "slice_012.pgm"));
}

TEST(Export, PgmInvertsSoLowNoiseIsBright) {
  Volume v({1, 1, 2});
  v.data = {0.1f, 0.9f};
  const fs::path dir = fs::path(::testing::TempDir()) / "noisemap_pgm";
  fs::remove_all(dir);
  const auto files = write_pgm_slices(v, dir, true);
  std::ifstream in(files.at(0), std::ios::binary);
  std::string header;
  for (int i = 0; i < 3; ++i) std::getline(in, header);
  unsigned char px[2];
  in.read(reinterpret_cast<char*>(px), 2);
  EXPECT_EQ(px[0], 255);
  EXPECT_EQ(px[1], 0);
}
