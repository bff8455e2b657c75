#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "noisemap/eval.hpp"
#include "test_util.hpp"

using namespace noisemap;
using noisemap::testing::random_volume;

namespace {

PredictorSpec small_predictor() {
  PredictorSpec p;
  p.input_shape = {16, 16, 16};
  return p;
}

// Predictor whose output is the head bias alone.
ModelParams constant_predictor(float value) {
  auto p = init_predictor(small_predictor(), 1);
  for (float& w : p.get("head.w").data_mut()) w = 0.0f;
  p.get("head.b").data_mut()[0] = value;
  return p;
}

}  // namespace

TEST(Mae, BasicIdentities) {
  const std::vector<double> y{50, 60, 70};
  EXPECT_EQ(mae(y, y), 0.0);
  const std::vector<double> shifted{52, 62, 72};
  EXPECT_DOUBLE_EQ(mae(shifted, y), 2.0);
  EXPECT_THROW(mae(std::vector<double>{}, std::vector<double>{}), EvalError);
  EXPECT_THROW(mae(y, std::vector<double>{1.0}), EvalError);
}

TEST(Mae, MatchesRecomputation) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(40, 80);
  std::vector<double> p(257), y(257);
  for (auto& v : p) v = u(rng);
  for (auto& v : y) v = u(rng);
  long double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::fabs(static_cast<long double>(p[i]) - y[i]);
  EXPECT_NEAR(mae(p, y), double(s / p.size()), 1e-12);
}

TEST(Mae, MeanPredictorBaseline) {
  const std::vector<double> train{40, 60}, test{45, 55, 50};
  EXPECT_DOUBLE_EQ(mean_predictor_mae(train, test), (5.0 + 5.0 + 0.0) / 3.0);
}

TEST(Occlusion, ConstantPredictorGivesZeroMap) {
  const auto p = constant_predictor(58.0f);
  const auto v = random_volume({16, 16, 16}, 2, -1, 1);
  OcclusionConfig cfg;
  cfg.patch_size = 4;
  cfg.stride = 4;
  const auto m = occlusion_map(p, v, 60.0, cfg);
  for (float x : m.data) ASSERT_EQ(x, 0.0f);
}

TEST(Occlusion, WholeVolumePatchIsUniform) {
  const auto p = init_predictor(small_predictor(), 5);
  const auto v = random_volume({16, 16, 16}, 3, -1, 1);
  OcclusionConfig cfg;
  cfg.patch_size = 16;
  cfg.fill = FillMode::Zero;
  const double y = 1.0;
  const auto m = occlusion_map(p, v, y, cfg);
  const double clean = predict_age(p, make_batch({&v})).data()[0];
  const Volume zeros({16, 16, 16}, 0.0f);
  const double occluded = predict_age(p, make_batch({&zeros})).data()[0];
  const double expected = (occluded - y) * (occluded - y) - (clean - y) * (clean - y);
  for (float x : m.data) ASSERT_NEAR(x, expected, 1e-5 * std::max(1.0, std::abs(expected)));
}

TEST(Occlusion, MatchesUnbatchedOracle) {
  const auto p = init_predictor(small_predictor(), 6);
  const auto v = random_volume({16, 16, 16}, 4, -1, 1);
  OcclusionConfig cfg;
  cfg.patch_size = 6;
  cfg.stride = 5;
  cfg.batch_size = 3;
  const double y = 0.5;
  const auto m = occlusion_map(p, v, y, cfg);

  const double c = predict_age(p, make_batch({&v})).data()[0];
  const float fill = static_cast<float>(volume_stats(v).mean);
  std::vector<double> sum(v.size(), 0.0), cnt(v.size(), 0.0);
  for (std::size_t z0 = 0; z0 + 6 <= 16; z0 += 5)
    for (std::size_t y0 = 0; y0 + 6 <= 16; y0 += 5)
      for (std::size_t x0 = 0; x0 + 6 <= 16; x0 += 5) {
        Volume o = v;
        for (std::size_t z = z0; z < z0 + 6; ++z)
          for (std::size_t yy = y0; yy < y0 + 6; ++yy)
            for (std::size_t x = x0; x < x0 + 6; ++x) o.at(z, yy, x) = fill;
        const double q = predict_age(p, make_batch({&o})).data()[0];
        const double d = (q - y) * (q - y) - (c - y) * (c - y);
        for (std::size_t z = z0; z < z0 + 6; ++z)
          for (std::size_t yy = y0; yy < y0 + 6; ++yy)
            for (std::size_t x = x0; x < x0 + 6; ++x) {
              sum[v.index(z, yy, x)] += d;
              cnt[v.index(z, yy, x)] += 1;
            }
      }
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double expected = cnt[i] > 0 ? sum[i] / cnt[i] : 0.0;
    ASSERT_NEAR(m.data[i], expected, 1e-5 * std::max(1.0, std::abs(expected))) << i;
  }
}

TEST(Occlusion, PatchLargerThanVolumeRejected) {
  const auto p = constant_predictor(1.0f);
  OcclusionConfig cfg;
  cfg.patch_size = 17;
  EXPECT_THROW(occlusion_map(p, random_volume({16, 16, 16}, 5), 1.0, cfg), EvalError);
  cfg.patch_size = 3;
  cfg.stride = 0;
  EXPECT_THROW(occlusion_map(p, random_volume({16, 16, 16}, 5), 1.0, cfg), EvalError);
}

TEST(Spearman, SelfAndMonotoneInvariance) {
  const auto a = random_volume({5, 5, 5}, 6, -2, 2);
  EXPECT_NEAR(spearman(a.data, a.data), 1.0, 1e-12);
  std::vector<float> t = a.data, neg = a.data;
  for (float& x : t) x = std::exp(3.0f * x) + 7.0f;
  for (float& x : neg) x = -x;
  EXPECT_NEAR(spearman(a.data, t), 1.0, 1e-12);
  EXPECT_NEAR(spearman(a.data, neg), -1.0, 1e-12);
}

TEST(Spearman, TiesUseAverageRanks) {
  // Hand-computed: ranks a = (1, 2.5, 2.5, 4), b = (1, 2, 3, 4).
  const std::vector<float> a{1, 2, 2, 3}, b{1, 2, 3, 4};
  const double ra[] = {1, 2.5, 2.5, 4}, rb[] = {1, 2, 3, 4};
  double sab = 0, saa = 0, sbb = 0;
  for (int i = 0; i < 4; ++i) {
    sab += (ra[i] - 2.5) * (rb[i] - 2.5);
    saa += (ra[i] - 2.5) * (ra[i] - 2.5);
    sbb += (rb[i] - 2.5) * (rb[i] - 2.5);
  }
  EXPECT_NEAR(spearman(a, b), sab / std::sqrt(saa * sbb), 1e-12);
  EXPECT_TRUE(std::isnan(spearman(std::vector<float>{1, 1, 1}, std::vector<float>{1, 2, 3})));
}

TEST(Localization, IndicatorCandidateIsPerfect) {
  Volume truth({6, 6, 6}, 0.0f);
  for (std::size_t i = 10; i < 37; ++i) truth.data[i] = 1.0f;
  Volume candidate = truth;
  for (float& x : candidate.data) x = 1.0f - x;  // low = important
  const auto r = localization_report(candidate, truth, 27.0 / 216.0, true);
  EXPECT_DOUBLE_EQ(r.precision_at_k, 1.0);
  EXPECT_DOUBLE_EQ(r.recall_at_k, 1.0);
  EXPECT_DOUBLE_EQ(r.random_baseline, 27.0 / 216.0);
  const auto h = localization_report(truth, truth, 27.0 / 216.0, false, &truth);
  EXPECT_DOUBLE_EQ(h.precision_at_k, 1.0);
  EXPECT_NEAR(h.rank_correlation, 1.0, 1e-12);
}

TEST(Localization, RandomCandidatePrecisionNearTruthFraction) {
  Volume truth({10, 10, 10}, 0.0f);
  for (std::size_t i = 0; i < 1000; i += 5) truth.data[i] = 1.0f;  // fraction 0.2
  const std::size_t trials = 50;
  double mean_precision = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    mean_precision += localization_report(random_volume(truth.dims, 500 + t), truth, 0.1, true).precision_at_k;
  }
  mean_precision /= trials;
  // Hypergeometric draw of k = 100 voxels: sd of one precision <= sqrt(p(1-p)/k).
  const double sd = std::sqrt(0.2 * 0.8 / 100.0 / trials);
  EXPECT_NEAR(mean_precision, 0.2, 3.0 * sd);
}

TEST(Localization, Errors) {
  const Volume truth({2, 2, 2}, 0.0f);
  EXPECT_THROW(localization_report(truth, truth, 0.5, true), EvalError);
  EXPECT_THROW(localization_report(Volume({2, 2, 3}), truth, 0.5, true), EvalError);
}

TEST(RegionContrast, Means) {
  Volume truth({1, 1, 4}), map({1, 1, 4});
  truth.data = {1, 1, 0, 0};
  map.data = {0.1f, 0.3f, 0.6f, 0.8f};
  const auto rc = region_contrast(map, truth);
  EXPECT_NEAR(rc.truth_mean, 0.2, 1e-7);
  EXPECT_NEAR(rc.background_mean, 0.7, 1e-7);
}
