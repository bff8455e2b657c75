#include <gtest/gtest.h>

#include <cmath>

#include "noisemap/kernels.hpp"
#include "test_util.hpp"

namespace nk = noisemap::kernels;
using noisemap::testing::uniform_values;

namespace {

struct ConvCase {
  nk::Conv3dGeometry g;
  const char* name;
};

std::vector<ConvCase> conv_cases() {
  std::vector<ConvCase> cases;
  auto geo = [](std::size_t n, std::size_t ci, std::size_t co, std::size_t d, std::size_t h,
                std::size_t w, std::size_t k, std::size_t s, std::size_t p) {
    nk::Conv3dGeometry g;
    g.batch = n;
    g.in_channels = ci;
    g.out_channels = co;
    g.in_d = d;
    g.in_h = h;
    g.in_w = w;
    g.k_d = g.k_h = g.k_w = k;
    g.stride = s;
    g.padding = p;
    return g;
  };
  cases.push_back({geo(2, 3, 4, 8, 8, 8, 3, 1, 1), "same_3x3x3"});
  cases.push_back({geo(1, 2, 5, 7, 6, 9, 3, 1, 0), "valid_odd_dims"});
  cases.push_back({geo(2, 4, 3, 9, 8, 7, 3, 2, 1), "stride2"});
  cases.push_back({geo(1, 3, 2, 6, 6, 6, 1, 1, 0), "pointwise"});
  cases.push_back({geo(1, 2, 2, 5, 5, 5, 2, 1, 2), "padding_exceeds_kernel"});
  cases.push_back({geo(3, 1, 1, 4, 5, 6, 3, 1, 1), "single_channel"});
  return cases;
}

template <typename T>
double max_abs_diff(const std::vector<T>& a, const std::vector<T>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

}  // namespace

class ConvParity : public ::testing::TestWithParam<ConvCase> {};

TEST_P(ConvParity, ForwardMatchesReference) {
  const auto& g = GetParam().g;
  const auto in = uniform_values<double>(g.batch * g.in_channels * g.in_volume(), 1);
  const auto k = uniform_values<double>(g.out_channels * g.in_channels * g.kernel_volume(), 2);
  const auto b = uniform_values<double>(g.out_channels, 3);
  std::vector<double> fast(g.batch * g.out_channels * g.out_volume());
  std::vector<double> ref(fast.size());
  nk::conv3d_forward<double>(g, in, k, b, fast);
  nk::reference::conv3d_forward<double>(g, in, k, b, ref);
  EXPECT_LT(max_abs_diff(fast, ref), 1e-12);
}

TEST_P(ConvParity, BackwardInputMatchesReference) {
  const auto& g = GetParam().g;
  const auto go = uniform_values<double>(g.batch * g.out_channels * g.out_volume(), 4);
  const auto k = uniform_values<double>(g.out_channels * g.in_channels * g.kernel_volume(), 5);
  // Both start from the same nonzero buffer to check accumulation.
  const auto start = uniform_values<double>(g.batch * g.in_channels * g.in_volume(), 6);
  auto fast = start, ref = start;
  nk::conv3d_backward_input<double>(g, go, k, fast);
  nk::reference::conv3d_backward_input<double>(g, go, k, ref);
  EXPECT_LT(max_abs_diff(fast, ref), 1e-12);
}

TEST_P(ConvParity, BackwardParamsMatchesReference) {
  const auto& g = GetParam().g;
  const auto go = uniform_values<double>(g.batch * g.out_channels * g.out_volume(), 7);
  const auto in = uniform_values<double>(g.batch * g.in_channels * g.in_volume(), 8);
  std::vector<double> gk(g.out_channels * g.in_channels * g.kernel_volume(), 0.5);
  std::vector<double> gb(g.out_channels, -0.25);
  auto rk = gk, rb = gb;
  nk::conv3d_backward_params<double>(g, go, in, gk, gb);
  nk::reference::conv3d_backward_params<double>(g, go, in, rk, rb);
  EXPECT_LT(max_abs_diff(gk, rk), 1e-11);
  EXPECT_LT(max_abs_diff(gb, rb), 1e-12);
}

TEST_P(ConvParity, FloatForwardCloseToDouble) {
  const auto& g = GetParam().g;
  const auto in = uniform_values<float>(g.batch * g.in_channels * g.in_volume(), 9);
  const auto k = uniform_values<float>(g.out_channels * g.in_channels * g.kernel_volume(), 10);
  std::vector<float> fast(g.batch * g.out_channels * g.out_volume());
  std::vector<float> ref(fast.size());
  nk::conv3d_forward<float>(g, in, k, {}, fast);
  nk::reference::conv3d_forward<float>(g, in, k, {}, ref);
  EXPECT_LT(max_abs_diff(fast, ref), 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Geometries, ConvParity, ::testing::ValuesIn(conv_cases()),
                         [](const auto& info) { return std::string(info.param.name); });

TEST(Kernels, ResultsIndependentOfThreadCount) {
  nk::Conv3dGeometry g;
  g.batch = 2;
  g.in_channels = 4;
  g.out_channels = 6;
  g.in_d = g.in_h = g.in_w = 12;
  g.k_d = g.k_h = g.k_w = 3;
  g.padding = 1;
  const auto in = uniform_values<float>(g.batch * g.in_channels * g.in_volume(), 11);
  const auto k = uniform_values<float>(g.out_channels * g.in_channels * g.kernel_volume(), 12);
  const auto go = uniform_values<float>(g.batch * g.out_channels * g.out_volume(), 13);

  auto run = [&](int threads) {
    nk::set_num_threads(threads);
    std::vector<float> out(go.size()), gi(in.size()), gk(k.size()), gb(g.out_channels);
    nk::conv3d_forward<float>(g, in, k, {}, out);
    nk::conv3d_backward_input<float>(g, go, k, gi);
    nk::conv3d_backward_params<float>(g, go, in, gk, gb);
    out.insert(out.end(), gi.begin(), gi.end());
    out.insert(out.end(), gk.begin(), gk.end());
    out.insert(out.end(), gb.begin(), gb.end());
    return out;
  };
  const int saved = nk::num_threads();
  const auto one = run(1);
  const auto three = run(3);
  nk::set_num_threads(saved);
  EXPECT_EQ(one, three);
}

TEST(Kernels, PoolMatchesReferenceAndAverages) {
  const std::size_t planes = 3, d = 4, h = 6, w = 8;
  const auto in = uniform_values<double>(planes * d * h * w, 14);
  std::vector<double> fast(planes * 2 * 3 * 4), ref(fast.size());
  nk::pool_avg3d_forward<double>(planes, d, h, w, 2, in, fast);
  nk::reference::pool_avg3d_forward<double>(planes, d, h, w, 2, in, ref);
  EXPECT_LT(max_abs_diff(fast, ref), 1e-14);
  const double expected = (in[0] + in[1] + in[w] + in[w + 1] + in[h * w] + in[h * w + 1] +
                           in[h * w + w] + in[h * w + w + 1]) /
                          8.0;
  EXPECT_NEAR(fast[0], expected, 1e-14);
}

TEST(Kernels, PoolBackwardSpreadsEvenly) {
  std::vector<double> go{8.0};
  std::vector<double> gi(8, 1.0);
  nk::pool_avg3d_backward<double>(1, 2, 2, 2, 2, go, gi);
  for (double v : gi) EXPECT_DOUBLE_EQ(v, 2.0);
}

TEST(Kernels, UpsampleMatchesReferenceAndBackwardSums) {
  const std::size_t planes = 2, d = 2, h = 3, w = 2;
  const auto in = uniform_values<double>(planes * d * h * w, 15);
  std::vector<double> fast(planes * 8 * d * h * w), ref(fast.size());
  nk::upsample_nearest3d_forward<double>(planes, d, h, w, 2, in, fast);
  nk::reference::upsample_nearest3d_forward<double>(planes, d, h, w, 2, in, ref);
  EXPECT_EQ(fast, ref);

  std::vector<double> go(fast.size(), 1.0), gi(in.size(), 0.0);
  nk::upsample_nearest3d_backward<double>(planes, d, h, w, 2, go, gi);
  for (double v : gi) EXPECT_DOUBLE_EQ(v, 8.0);
}
