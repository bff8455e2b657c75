#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "noisemap/kernels.hpp"
#include "noisemap/models.hpp"

namespace {

namespace k = noisemap::kernels;

std::vector<float> filled(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::vector<float> v(n);
  for (float& x : v) x = u(rng);
  return v;
}

// Shapes taken from the first encoder level of the noise model at 32^3.
k::Conv3dGeometry encoder_geometry(std::size_t size, std::size_t cin, std::size_t cout) {
  k::Conv3dGeometry g;
  g.batch = 4;
  g.in_channels = cin;
  g.out_channels = cout;
  g.in_d = g.in_h = g.in_w = size;
  g.k_d = g.k_h = g.k_w = 3;
  g.padding = 1;
  return g;
}

struct ConvBuffers {
  explicit ConvBuffers(const k::Conv3dGeometry& g)
      : in(filled(g.batch * g.in_channels * g.in_volume(), 1)),
        w(filled(g.out_channels * g.in_channels * g.kernel_volume(), 2)),
        b(filled(g.out_channels, 3)),
        out(g.batch * g.out_channels * g.out_volume()),
        grad_in(in.size()),
        grad_w(w.size()),
        grad_b(b.size()) {}
  std::vector<float> in, w, b, out, grad_in, grad_w, grad_b;
};

void set_macs(benchmark::State& state, const k::Conv3dGeometry& g) {
  const double macs = double(g.batch) * g.out_channels * g.in_channels * g.out_volume() *
                      g.kernel_volume();
  state.counters["GMAC/s"] =
      benchmark::Counter(macs, benchmark::Counter::kIsIterationInvariantRate, benchmark::Counter::kIs1000);
}

template <bool Reference>
void BM_ConvForward(benchmark::State& state) {
  const auto g = encoder_geometry(state.range(0), state.range(1), state.range(2));
  ConvBuffers buf(g);
  for (auto _ : state) {
    if constexpr (Reference) {
      k::reference::conv3d_forward<float>(g, buf.in, buf.w, buf.b, buf.out);
    } else {
      k::conv3d_forward<float>(g, buf.in, buf.w, buf.b, buf.out);
    }
    benchmark::DoNotOptimize(buf.out.data());
  }
  set_macs(state, g);
}

template <bool Reference>
void BM_ConvBackwardInput(benchmark::State& state) {
  const auto g = encoder_geometry(state.range(0), state.range(1), state.range(2));
  ConvBuffers buf(g);
  for (auto _ : state) {
    if constexpr (Reference) {
      k::reference::conv3d_backward_input<float>(g, buf.out, buf.w, buf.grad_in);
    } else {
      k::conv3d_backward_input<float>(g, buf.out, buf.w, buf.grad_in);
    }
    benchmark::DoNotOptimize(buf.grad_in.data());
  }
  set_macs(state, g);
}

template <bool Reference>
void BM_ConvBackwardParams(benchmark::State& state) {
  const auto g = encoder_geometry(state.range(0), state.range(1), state.range(2));
  ConvBuffers buf(g);
  for (auto _ : state) {
    if constexpr (Reference) {
      k::reference::conv3d_backward_params<float>(g, buf.out, buf.in, buf.grad_w, buf.grad_b);
    } else {
      k::conv3d_backward_params<float>(g, buf.out, buf.in, buf.grad_w, buf.grad_b);
    }
    benchmark::DoNotOptimize(buf.grad_w.data());
  }
  set_macs(state, g);
}

template <bool Reference>
void BM_Pool(benchmark::State& state) {
  const std::size_t n = state.range(0), planes = 64;
  const auto in = filled(planes * n * n * n, 4);
  std::vector<float> out(in.size() / 8);
  for (auto _ : state) {
    if constexpr (Reference) {
      k::reference::pool_avg3d_forward<float>(planes, n, n, n, 2, in, out);
    } else {
      k::pool_avg3d_forward<float>(planes, n, n, n, 2, in, out);
    }
    benchmark::DoNotOptimize(out.data());
  }
  state.SetBytesProcessed(state.iterations() * static_cast<std::int64_t>(in.size() * sizeof(float)));
}

// One full forward and backward pass of the default noise model on a batch of four.
void BM_NoiseModelStep(benchmark::State& state) {
  noisemap::NoiseModelSpec spec;
  auto params = noisemap::init_noise_model(spec, 1);
  params.set_trainable(true);
  const auto x = filled(4 * spec.input_shape.voxels(), 5);
  const noisemap::Tensorf batch({4, 1, spec.input_shape.d, spec.input_shape.h, spec.input_shape.w}, x);
  for (auto _ : state) {
    for (auto& t : params.tensors) t.value.zero_grad();
    noisemap::backward(noisemap::mean(noisemap::noise_mask(params, batch)));
  }
}


}  // namespace

BENCHMARK(BM_ConvForward<false>)->Args({32, 8, 8})->Args({16, 16, 16})->Args({32, 1, 8});
BENCHMARK(BM_ConvForward<true>)->Args({32, 8, 8})->Args({16, 16, 16})->Args({32, 1, 8});
BENCHMARK(BM_ConvBackwardInput<false>)->Args({32, 8, 8})->Args({16, 16, 16});
BENCHMARK(BM_ConvBackwardInput<true>)->Args({32, 8, 8})->Args({16, 16, 16});
BENCHMARK(BM_ConvBackwardParams<false>)->Args({32, 8, 8})->Args({16, 16, 16});
BENCHMARK(BM_ConvBackwardParams<true>)->Args({32, 8, 8})->Args({16, 16, 16});
BENCHMARK(BM_Pool<false>)->Arg(32);
BENCHMARK(BM_Pool<true>)->Arg(32);
BENCHMARK(BM_NoiseModelStep)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
