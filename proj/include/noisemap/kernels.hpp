#pragma once

// Dense 3D kernels over NCDHW row-major buffers.
//
// Every kernel exists twice: the OpenMP version in `noisemap::kernels` used by
// the autodiff ops, and a serial nested-loop version in
// `noisemap::kernels::reference` used only by tests and the benchmark. The
// parallel kernels partition work so that each output element is owned by a
// single thread and summed in a fixed order, so results do not depend on the
// thread count.

#include <cstddef>
#include <span>

namespace noisemap::kernels {

struct Conv3dGeometry {
  std::size_t batch = 1;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t in_d = 1, in_h = 1, in_w = 1;
  std::size_t k_d = 1, k_h = 1, k_w = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t out_d() const { return (in_d + 2 * padding - k_d) / stride + 1; }
  std::size_t out_h() const { return (in_h + 2 * padding - k_h) / stride + 1; }
  std::size_t out_w() const { return (in_w + 2 * padding - k_w) / stride + 1; }
  std::size_t in_volume() const { return in_d * in_h * in_w; }
  std::size_t out_volume() const { return out_d() * out_h() * out_w(); }
  std::size_t kernel_volume() const { return k_d * k_h * k_w; }
};

// out = conv(in, kernel) + bias. `out` is overwritten.
template <typename T>
void conv3d_forward(const Conv3dGeometry& g, std::span<const T> in, std::span<const T> kernel,
                    std::span<const T> bias, std::span<T> out);

// grad_in += conv^T(grad_out, kernel)
template <typename T>
void conv3d_backward_input(const Conv3dGeometry& g, std::span<const T> grad_out,
                           std::span<const T> kernel, std::span<T> grad_in);

// grad_kernel += correlate(grad_out, in); grad_bias += sum(grad_out). Either
// output span may be empty to skip it.
template <typename T>
void conv3d_backward_params(const Conv3dGeometry& g, std::span<const T> grad_out,
                            std::span<const T> in, std::span<T> grad_kernel,
                            std::span<T> grad_bias);

// planes = batch * channels; each plane is d*h*w.
template <typename T>
void pool_avg3d_forward(std::size_t planes, std::size_t d, std::size_t h, std::size_t w,
                        std::size_t window, std::span<const T> in, std::span<T> out);
template <typename T>
void pool_avg3d_backward(std::size_t planes, std::size_t d, std::size_t h, std::size_t w,
                         std::size_t window, std::span<const T> grad_out, std::span<T> grad_in);

// d, h, w are the input (small) dims.
template <typename T>
void upsample_nearest3d_forward(std::size_t planes, std::size_t d, std::size_t h, std::size_t w,
                                std::size_t factor, std::span<const T> in, std::span<T> out);
template <typename T>
void upsample_nearest3d_backward(std::size_t planes, std::size_t d, std::size_t h,
                                 std::size_t w, std::size_t factor, std::span<const T> grad_out,
                                 std::span<T> grad_in);

void set_num_threads(int n);
int num_threads();

namespace reference {

template <typename T>
void conv3d_forward(const Conv3dGeometry& g, std::span<const T> in, std::span<const T> kernel,
                    std::span<const T> bias, std::span<T> out);
template <typename T>
void conv3d_backward_input(const Conv3dGeometry& g, std::span<const T> grad_out,
                           std::span<const T> kernel, std::span<T> grad_in);
template <typename T>
void conv3d_backward_params(const Conv3dGeometry& g, std::span<const T> grad_out,
                            std::span<const T> in, std::span<T> grad_kernel,
                            std::span<T> grad_bias);
template <typename T>
void pool_avg3d_forward(std::size_t planes, std::size_t d, std::size_t h, std::size_t w,
                        std::size_t window, std::span<const T> in, std::span<T> out);
template <typename T>
void upsample_nearest3d_forward(std::size_t planes, std::size_t d, std::size_t h, std::size_t w,
                                std::size_t factor, std::span<const T> in, std::span<T> out);

}  // namespace reference
}  // namespace noisemap::kernels
