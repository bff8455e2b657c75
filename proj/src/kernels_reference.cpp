// Serial nested-loop kernels. Kept deliberately literal; they are the oracle the
// parallel kernels are tested and benchmarked against.

#include "noisemap/kernels.hpp"

#include <cstdint>

namespace noisemap::kernels::reference {

namespace {

using Index = std::int64_t;

template <typename T>
T at_input(const Conv3dGeometry& g, std::span<const T> in, Index n, Index c, Index z, Index y,
           Index x) {
  if (z < 0 || y < 0 || x < 0) return T(0);
  if (z >= static_cast<Index>(g.in_d) || y >= static_cast<Index>(g.in_h) ||
      x >= static_cast<Index>(g.in_w)) {
    return T(0);
  }
  return in[(((n * g.in_channels + c) * g.in_d + z) * g.in_h + y) * g.in_w + x];
}

}  // namespace

template <typename T>
void conv3d_forward(const Conv3dGeometry& g, std::span<const T> in, std::span<const T> kernel,
                    std::span<const T> bias, std::span<T> out) {
  const Index s = g.stride, p = g.padding;
  const Index OD = g.out_d(), OH = g.out_h(), OW = g.out_w();
  for (Index n = 0; n < static_cast<Index>(g.batch); ++n) {
    for (Index co = 0; co < static_cast<Index>(g.out_channels); ++co) {
      for (Index z = 0; z < OD; ++z) {
        for (Index y = 0; y < OH; ++y) {
          for (Index x = 0; x < OW; ++x) {
            T acc = bias.empty() ? T(0) : bias[co];
            for (Index ci = 0; ci < static_cast<Index>(g.in_channels); ++ci) {
              for (Index a = 0; a < static_cast<Index>(g.k_d); ++a) {
                for (Index b = 0; b < static_cast<Index>(g.k_h); ++b) {
                  for (Index c = 0; c < static_cast<Index>(g.k_w); ++c) {
                    const T w =
                        kernel[(((co * g.in_channels + ci) * g.k_d + a) * g.k_h + b) * g.k_w + c];
                    acc += w * at_input(g, in, n, ci, z * s + a - p, y * s + b - p, x * s + c - p);
                  }
                }
              }
            }
            out[(((n * g.out_channels + co) * OD + z) * OH + y) * OW + x] = acc;
          }
        }
      }
    }
  }
}

template <typename T>
void conv3d_backward_input(const Conv3dGeometry& g, std::span<const T> grad_out,
                           std::span<const T> kernel, std::span<T> grad_in) {
  const Index s = g.stride, p = g.padding;
  const Index OD = g.out_d(), OH = g.out_h(), OW = g.out_w();
  for (Index n = 0; n < static_cast<Index>(g.batch); ++n) {
    for (Index co = 0; co < static_cast<Index>(g.out_channels); ++co) {
      for (Index z = 0; z < OD; ++z) {
        for (Index y = 0; y < OH; ++y) {
          for (Index x = 0; x < OW; ++x) {
            const T go = grad_out[(((n * g.out_channels + co) * OD + z) * OH + y) * OW + x];
            for (Index ci = 0; ci < static_cast<Index>(g.in_channels); ++ci) {
              for (Index a = 0; a < static_cast<Index>(g.k_d); ++a) {
                for (Index b = 0; b < static_cast<Index>(g.k_h); ++b) {
                  for (Index c = 0; c < static_cast<Index>(g.k_w); ++c) {
                    const Index iz = z * s + a - p, iy = y * s + b - p, ix = x * s + c - p;
                    if (iz < 0 || iy < 0 || ix < 0 || iz >= static_cast<Index>(g.in_d) ||
                        iy >= static_cast<Index>(g.in_h) || ix >= static_cast<Index>(g.in_w)) {
                      continue;
                    }
                    const T w =
                        kernel[(((co * g.in_channels + ci) * g.k_d + a) * g.k_h + b) * g.k_w + c];
                    grad_in[(((n * g.in_channels + ci) * g.in_d + iz) * g.in_h + iy) * g.in_w +
                            ix] += w * go;
                  }
                }
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv3d_backward_params(const Conv3dGeometry& g, std::span<const T> grad_out,
                            std::span<const T> in, std::span<T> grad_kernel,
                            std::span<T> grad_bias) {
  const Index s = g.stride, p = g.padding;
  const Index OD = g.out_d(), OH = g.out_h(), OW = g.out_w();
  for (Index n = 0; n < static_cast<Index>(g.batch); ++n) {
    for (Index co = 0; co < static_cast<Index>(g.out_channels); ++co) {
      for (Index z = 0; z < OD; ++z) {
        for (Index y = 0; y < OH; ++y) {
          for (Index x = 0; x < OW; ++x) {
            const T go = grad_out[(((n * g.out_channels + co) * OD + z) * OH + y) * OW + x];
            if (!grad_bias.empty()) grad_bias[co] += go;
            if (grad_kernel.empty()) continue;
            for (Index ci = 0; ci < static_cast<Index>(g.in_channels); ++ci) {
              for (Index a = 0; a < static_cast<Index>(g.k_d); ++a) {
                for (Index b = 0; b < static_cast<Index>(g.k_h); ++b) {
                  for (Index c = 0; c < static_cast<Index>(g.k_w); ++c) {
                    grad_kernel[(((co * g.in_channels + ci) * g.k_d + a) * g.k_h + b) * g.k_w +
                                c] +=
                        go * at_input(g, in, n, ci, z * s + a - p, y * s + b - p, x * s + c - p);
                  }
                }
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void pool_avg3d_forward(std::size_t planes, std::size_t d, std::size_t h, std::size_t w,
                        std::size_t window, std::span<const T> in, std::span<T> out) {
  const std::size_t od = d / window, oh = h / window, ow = w / window;
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t z = 0; z < od; ++z) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t x = 0; x < ow; ++x) {
          T s = 0;
          for (std::size_t a = 0; a < window; ++a) {
            for (std::size_t b = 0; b < window; ++b) {
              for (std::size_t c = 0; c < window; ++c) {
                s += in[((p * d + z * window + a) * h + y * window + b) * w + x * window + c];
              }
            }
          }
          out[((p * od + z) * oh + y) * ow + x] = s / static_cast<T>(window * window * window);
        }
      }
    }
  }
}

template <typename T>
void upsample_nearest3d_forward(std::size_t planes, std::size_t d, std::size_t h, std::size_t w,
                                std::size_t factor, std::span<const T> in, std::span<T> out) {
  const std::size_t D = d * factor, H = h * factor, W = w * factor;
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t z = 0; z < D; ++z) {
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
          out[((p * D + z) * H + y) * W + x] =
              in[((p * d + z / factor) * h + y / factor) * w + x / factor];
        }
      }
    }
  }
}

#define NOISEMAP_INSTANTIATE(T)                                                                  \
  template void conv3d_forward<T>(const Conv3dGeometry&, std::span<const T>, std::span<const T>, \
                                  std::span<const T>, std::span<T>);                             \
  template void conv3d_backward_input<T>(const Conv3dGeometry&, std::span<const T>,              \
                                         std::span<const T>, std::span<T>);                      \
  template void conv3d_backward_params<T>(const Conv3dGeometry&, std::span<const T>,             \
                                          std::span<const T>, std::span<T>, std::span<T>);       \
  template void pool_avg3d_forward<T>(std::size_t, std::size_t, std::size_t, std::size_t,        \
                                      std::size_t, std::span<const T>, std::span<T>);            \
  template void upsample_nearest3d_forward<T>(std::size_t, std::size_t, std::size_t,             \
                                              std::size_t, std::size_t, std::span<const T>,      \
                                              std::span<T>);

NOISEMAP_INSTANTIATE(float)
NOISEMAP_INSTANTIATE(double)

#undef NOISEMAP_INSTANTIATE

}  // namespace noisemap::kernels::reference
