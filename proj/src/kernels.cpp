#include "noisemap/kernels.hpp"

#include <algorithm>
#include <cstdint>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace noisemap::kernels {

namespace {

using Index = std::int64_t;

// Output columns [lo, hi) whose input column ow*stride + tap - padding lies in [0, in_w).
struct ColumnRange {
  Index lo = 0;
  Index hi = 0;
};

ColumnRange valid_columns(Index out_w, Index in_w, Index stride, Index tap, Index padding) {
  const Index shift = tap - padding;
  Index lo = 0;
  if (shift < 0) lo = (-shift + stride - 1) / stride;
  Index hi = 0;
  if (in_w - 1 - shift >= 0) hi = (in_w - 1 - shift) / stride + 1;
  hi = std::min(hi, out_w);
  return {lo, std::max(lo, hi)};
}

// kStride == 0 means "use the runtime stride".
template <int kStride, typename T>
void forward_impl(const Conv3dGeometry& g, const T* in, const T* kernel, const T* bias, T* out) {
  const Index stride = kStride == 0 ? static_cast<Index>(g.stride) : kStride;
  const Index pad = static_cast<Index>(g.padding);
  const Index D = g.in_d, H = g.in_h, W = g.in_w;
  const Index KD = g.k_d, KH = g.k_h, KW = g.k_w;
  const Index OD = g.out_d(), OH = g.out_h(), OW = g.out_w();
  const Index IV = D * H * W, OV = OD * OH * OW, KV = KD * KH * KW;
  const Index CI = g.in_channels, CO = g.out_channels;
  const Index jobs = static_cast<Index>(g.batch) * CO;

  std::vector<ColumnRange> cols(KW);
  for (Index c = 0; c < KW; ++c) cols[c] = valid_columns(OW, W, stride, c, pad);

#pragma omp parallel for schedule(static)
  for (Index job = 0; job < jobs; ++job) {
    const Index n = job / CO;
    const Index co = job % CO;
    T* o = out + job * OV;
    std::fill(o, o + OV, bias ? bias[co] : T(0));
    for (Index ci = 0; ci < CI; ++ci) {
      const T* x = in + (n * CI + ci) * IV;
      const T* kk = kernel + (co * CI + ci) * KV;
      for (Index od = 0; od < OD; ++od) {
        for (Index a = 0; a < KD; ++a) {
          const Index id = od * stride + a - pad;
          if (id < 0 || id >= D) continue;
          for (Index oh = 0; oh < OH; ++oh) {
            T* orow = o + (od * OH + oh) * OW;
            for (Index b = 0; b < KH; ++b) {
              const Index ih = oh * stride + b - pad;
              if (ih < 0 || ih >= H) continue;
              const T* xrow = x + (id * H + ih) * W;
              for (Index c = 0; c < KW; ++c) {
                const T w = kk[(a * KH + b) * KW + c];
                const Index shift = c - pad;
                for (Index ow = cols[c].lo; ow < cols[c].hi; ++ow) {
                  orow[ow] += w * xrow[ow * stride + shift];
                }
              }
            }
          }
        }
      }
    }
  }
}

template <int kStride, typename T>
void backward_input_impl(const Conv3dGeometry& g, const T* grad_out, const T* kernel,
                         T* grad_in) {
  const Index stride = kStride == 0 ? static_cast<Index>(g.stride) : kStride;
  const Index pad = static_cast<Index>(g.padding);
  const Index D = g.in_d, H = g.in_h, W = g.in_w;
  const Index KD = g.k_d, KH = g.k_h, KW = g.k_w;
  const Index OD = g.out_d(), OH = g.out_h(), OW = g.out_w();
  const Index IV = D * H * W, OV = OD * OH * OW, KV = KD * KH * KW;
  const Index CI = g.in_channels, CO = g.out_channels;
  const Index jobs = static_cast<Index>(g.batch) * CI;

  std::vector<ColumnRange> cols(KW);
  for (Index c = 0; c < KW; ++c) cols[c] = valid_columns(OW, W, stride, c, pad);

#pragma omp parallel for schedule(static)
  for (Index job = 0; job < jobs; ++job) {
    const Index n = job / CI;
    const Index ci = job % CI;
    T* gi = grad_in + job * IV;
    for (Index co = 0; co < CO; ++co) {
      const T* go = grad_out + (n * CO + co) * OV;
      const T* kk = kernel + (co * CI + ci) * KV;
      for (Index od = 0; od < OD; ++od) {
        for (Index a = 0; a < KD; ++a) {
          const Index id = od * stride + a - pad;
          if (id < 0 || id >= D) continue;
          for (Index oh = 0; oh < OH; ++oh) {
            const T* gorow = go + (od * OH + oh) * OW;
            for (Index b = 0; b < KH; ++b) {
              const Index ih = oh * stride + b - pad;
              if (ih < 0 || ih >= H) continue;
              T* girow = gi + (id * H + ih) * W;
              for (Index c = 0; c < KW; ++c) {
                const T w = kk[(a * KH + b) * KW + c];
                const Index shift = c - pad;
                for (Index ow = cols[c].lo; ow < cols[c].hi; ++ow) {
                  girow[ow * stride + shift] += w * gorow[ow];
                }
              }
            }
          }
        }
      }
    }
  }
}

template <int kStride, typename T>
void backward_kernel_impl(const Conv3dGeometry& g, const T* grad_out, const T* in,
                          T* grad_kernel) {
  const Index stride = kStride == 0 ? static_cast<Index>(g.stride) : kStride;
  const Index pad = static_cast<Index>(g.padding);
  const Index D = g.in_d, H = g.in_h, W = g.in_w;
  const Index KD = g.k_d, KH = g.k_h, KW = g.k_w;
  const Index OD = g.out_d(), OH = g.out_h(), OW = g.out_w();
  const Index IV = D * H * W, OV = OD * OH * OW, KV = KD * KH * KW;
  const Index CI = g.in_channels, CO = g.out_channels;
  const Index N = g.batch;
  const Index jobs = CO * CI;

  std::vector<ColumnRange> cols(KW);
  for (Index c = 0; c < KW; ++c) cols[c] = valid_columns(OW, W, stride, c, pad);

#pragma omp parallel for schedule(static)
  for (Index job = 0; job < jobs; ++job) {
    const Index co = job / CI;
    const Index ci = job % CI;
    std::vector<double> acc(KV, 0.0);
    for (Index n = 0; n < N; ++n) {
      const T* go = grad_out + (n * CO + co) * OV;
      const T* x = in + (n * CI + ci) * IV;
      for (Index od = 0; od < OD; ++od) {
        for (Index a = 0; a < KD; ++a) {
          const Index id = od * stride + a - pad;
          if (id < 0 || id >= D) continue;
          for (Index oh = 0; oh < OH; ++oh) {
            const T* gorow = go + (od * OH + oh) * OW;
            for (Index b = 0; b < KH; ++b) {
              const Index ih = oh * stride + b - pad;
              if (ih < 0 || ih >= H) continue;
              const T* xrow = x + (id * H + ih) * W;
              for (Index c = 0; c < KW; ++c) {
                const Index shift = c - pad;
                T row = 0;
                for (Index ow = cols[c].lo; ow < cols[c].hi; ++ow) {
                  row += gorow[ow] * xrow[ow * stride + shift];
                }
                acc[(a * KH + b) * KW + c] += row;
              }
            }
          }
        }
      }
    }
    T* gk = grad_kernel + job * KV;
    for (Index t = 0; t < KV; ++t) gk[t] += static_cast<T>(acc[t]);
  }
}


// Stride-1 fast path. The input is zero-padded once and the output is computed
// in a "wide" layout whose rows have the padded input's pitch, so every kernel
// tap becomes one contiguous multiply-add over a flat range at a fixed offset.
struct WideLayout {
  Index pd, ph, pw;     // padding per axis
  Index Dp, Hp, Wp;     // padded input dims
  Index OD, OH, OW;     // output dims
  Index span;           // length of the wide output range that maps to valid outputs
  Index plane() const { return Dp * Hp * Wp; }
};

WideLayout make_wide(Index D, Index H, Index W, Index KD, Index KH, Index KW, Index pd,
                     Index ph, Index pw) {
  WideLayout l{};
  l.pd = pd;
  l.ph = ph;
  l.pw = pw;
  l.Dp = D + 2 * pd;
  l.Hp = H + 2 * ph;
  l.Wp = W + 2 * pw;
  l.OD = l.Dp - KD + 1;
  l.OH = l.Hp - KH + 1;
  l.OW = l.Wp - KW + 1;
  l.span = ((l.OD - 1) * l.Hp + (l.OH - 1)) * l.Wp + l.OW;
  return l;
}

template <typename T>
std::vector<T> pad_planes(const T* in, Index planes, Index D, Index H, Index W,
                          const WideLayout& l) {
  std::vector<T> out(static_cast<std::size_t>(planes * l.plane()), T(0));
#pragma omp parallel for schedule(static)
  for (Index p = 0; p < planes; ++p) {
    const T* x = in + p * D * H * W;
    T* o = out.data() + p * l.plane();
    for (Index z = 0; z < D; ++z) {
      for (Index y = 0; y < H; ++y) {
        std::copy(x + (z * H + y) * W, x + (z * H + y + 1) * W,
                  o + ((z + l.pd) * l.Hp + (y + l.ph)) * l.Wp + l.pw);
      }
    }
  }
  return out;
}

constexpr Index kChunk = 2048;

// out[n, co] = bias[co] + sum_ci sum_tap w * xp[n, ci] shifted; written in
// compact layout. If `accumulate`, adds into out instead of overwriting.
template <typename T>
void wide_conv(const T* xp, Index batch, Index CI, Index CO, Index KD, Index KH, Index KW,
               const WideLayout& l, const T* kernel, const T* bias, T* out, bool accumulate) {
  const Index KV = KD * KH * KW;
  const Index OV = l.OD * l.OH * l.OW;
  std::vector<Index> offsets(KV);
  for (Index a = 0; a < KD; ++a)
    for (Index b = 0; b < KH; ++b)
      for (Index c = 0; c < KW; ++c) offsets[(a * KH + b) * KW + c] = (a * l.Hp + b) * l.Wp + c;
  const Index jobs = batch * CO;
#pragma omp parallel for schedule(static)
  for (Index job = 0; job < jobs; ++job) {
    const Index n = job / CO;
    const Index co = job % CO;
    std::vector<T> acc(kChunk);
    T* o = out + job * OV;
    for (Index j0 = 0; j0 < l.span; j0 += kChunk) {
      const Index len = std::min(kChunk, l.span - j0);
      std::fill(acc.begin(), acc.begin() + len, bias ? bias[co] : T(0));
      T* __restrict a = acc.data();
      for (Index ci = 0; ci < CI; ++ci) {
        const T* x = xp + (n * CI + ci) * l.plane() + j0;
        const T* kk = kernel + (co * CI + ci) * KV;
        for (Index t = 0; t < KV; ++t) {
          const T w = kk[t];
          const T* __restrict src = x + offsets[t];
          for (Index i = 0; i < len; ++i) a[i] += w * src[i];
        }
      }
      // scatter valid positions of the chunk
      for (Index i = 0; i < len; ++i) {
        const Index j = j0 + i;
        const Index ow = j % l.Wp;
        const Index rest = j / l.Wp;
        const Index oh = rest % l.Hp;
        const Index od = rest / l.Hp;
        if (ow >= l.OW || oh >= l.OH) continue;
        T& dst = o[(od * l.OH + oh) * l.OW + ow];
        dst = accumulate ? dst + a[i] : a[i];
      }
    }
  }
}

template <typename T>
void forward_stride1(const Conv3dGeometry& g, const T* in, const T* kernel, const T* bias,
                     T* out) {
  const Index p = g.padding;
  const WideLayout l = make_wide(g.in_d, g.in_h, g.in_w, g.k_d, g.k_h, g.k_w, p, p, p);
  const auto xp = pad_planes(in, g.batch * g.in_channels, g.in_d, g.in_h, g.in_w, l);
  wide_conv(xp.data(), g.batch, g.in_channels, g.out_channels, g.k_d, g.k_h, g.k_w, l, kernel,
            bias, out, false);
}

// Input gradient of a stride-1 conv is a full correlation of grad_out with the
// flipped, channel-transposed kernel.
template <typename T>
void backward_input_stride1(const Conv3dGeometry& g, const T* grad_out, const T* kernel,
                            T* grad_in) {
  const Index KD = g.k_d, KH = g.k_h, KW = g.k_w, KV = KD * KH * KW;
  const Index CI = g.in_channels, CO = g.out_channels;
  const Index p = g.padding;
  std::vector<T> flipped(static_cast<std::size_t>(CI * CO * KV));
  for (Index co = 0; co < CO; ++co)
    for (Index ci = 0; ci < CI; ++ci)
      for (Index t = 0; t < KV; ++t)
        flipped[(ci * CO + co) * KV + (KV - 1 - t)] = kernel[(co * CI + ci) * KV + t];
  const WideLayout l = make_wide(g.out_d(), g.out_h(), g.out_w(), KD, KH, KW, KD - 1 - p,
                                 KH - 1 - p, KW - 1 - p);
  const auto gp = pad_planes(grad_out, g.batch * CO, g.out_d(), g.out_h(), g.out_w(), l);
  wide_conv(gp.data(), g.batch, CO, CI, KD, KH, KW, l, flipped.data(),
            static_cast<const T*>(nullptr), grad_in, true);
}

// Dot product with a fixed set of independent lane accumulators, so it
// vectorizes without reassociating and stays deterministic.
template <typename T>
T lane_dot(const T* __restrict a, const T* __restrict b, Index len) {
  constexpr Index kLanes = 16;
  T lanes[kLanes] = {};
  Index i = 0;
  for (; i + kLanes <= len; i += kLanes) {
    for (Index k = 0; k < kLanes; ++k) lanes[k] += a[i + k] * b[i + k];
  }
  T tail = 0;
  for (; i < len; ++i) tail += a[i] * b[i];
  T sum = 0;
  for (Index k = 0; k < kLanes; ++k) sum += lanes[k];
  return sum + tail;
}

template <typename T>
void backward_kernel_stride1(const Conv3dGeometry& g, const T* grad_out, const T* in,
                             T* grad_kernel) {
  const Index p = g.padding;
  const Index KD = g.k_d, KH = g.k_h, KW = g.k_w, KV = KD * KH * KW;
  const Index CI = g.in_channels, CO = g.out_channels, N = g.batch;
  const WideLayout l = make_wide(g.in_d, g.in_h, g.in_w, KD, KH, KW, p, p, p);
  const auto xp = pad_planes(in, N * CI, g.in_d, g.in_h, g.in_w, l);
  // grad_out scattered into the wide layout, zeros in the junk columns
  std::vector<T> gw(static_cast<std::size_t>(N * CO * l.span), T(0));
  const Index OV = l.OD * l.OH * l.OW;
#pragma omp parallel for schedule(static)
  for (Index q = 0; q < N * CO; ++q) {
    const T* go = grad_out + q * OV;
    T* dst = gw.data() + q * l.span;
    for (Index od = 0; od < l.OD; ++od)
      for (Index oh = 0; oh < l.OH; ++oh)
        std::copy(go + (od * l.OH + oh) * l.OW, go + (od * l.OH + oh + 1) * l.OW,
                  dst + (od * l.Hp + oh) * l.Wp);
  }
  std::vector<Index> offsets(KV);
  for (Index a = 0; a < KD; ++a)
    for (Index b = 0; b < KH; ++b)
      for (Index c = 0; c < KW; ++c) offsets[(a * KH + b) * KW + c] = (a * l.Hp + b) * l.Wp + c;
  const Index jobs = CO * CI;
#pragma omp parallel for schedule(static)
  for (Index job = 0; job < jobs; ++job) {
    const Index co = job / CI;
    const Index ci = job % CI;
    std::vector<double> acc(KV, 0.0);
    for (Index n = 0; n < N; ++n) {
      const T* gsrc = gw.data() + (n * CO + co) * l.span;
      const T* x = xp.data() + (n * CI + ci) * l.plane();
      for (Index j0 = 0; j0 < l.span; j0 += kChunk) {
        const Index len = std::min(kChunk, l.span - j0);
        const T* __restrict gch = gsrc + j0;
        for (Index t = 0; t < KV; ++t) {
          acc[t] += lane_dot(gch, x + j0 + offsets[t], len);
        }
      }
    }
    T* gk = grad_kernel + job * KV;
    for (Index t = 0; t < KV; ++t) gk[t] += static_cast<T>(acc[t]);
  }
}

bool wide_path_applies(const Conv3dGeometry& g) {
  return g.stride == 1 && g.padding < g.k_d && g.padding < g.k_h && g.padding < g.k_w;
}

}  // namespace

template <typename T>
void conv3d_forward(const Conv3dGeometry& g, std::span<const T> in, std::span<const T> kernel,
                    std::span<const T> bias, std::span<T> out) {
  const T* b = bias.empty() ? nullptr : bias.data();
  if (wide_path_applies(g)) {
    forward_stride1(g, in.data(), kernel.data(), b, out.data());
  } else if (g.stride == 1) {
    forward_impl<1>(g, in.data(), kernel.data(), b, out.data());
  } else {
    forward_impl<0>(g, in.data(), kernel.data(), b, out.data());
  }
}

template <typename T>
void conv3d_backward_input(const Conv3dGeometry& g, std::span<const T> grad_out,
                           std::span<const T> kernel, std::span<T> grad_in) {
  if (wide_path_applies(g)) {
    backward_input_stride1(g, grad_out.data(), kernel.data(), grad_in.data());
  } else if (g.stride == 1) {
    backward_input_impl<1>(g, grad_out.data(), kernel.data(), grad_in.data());
  } else {
    backward_input_impl<0>(g, grad_out.data(), kernel.data(), grad_in.data());
  }
}

template <typename T>
void conv3d_backward_params(const Conv3dGeometry& g, std::span<const T> grad_out,
                            std::span<const T> in, std::span<T> grad_kernel,
                            std::span<T> grad_bias) {
  if (!grad_kernel.empty()) {
    if (wide_path_applies(g)) {
      backward_kernel_stride1(g, grad_out.data(), in.data(), grad_kernel.data());
    } else if (g.stride == 1) {
      backward_kernel_impl<1>(g, grad_out.data(), in.data(), grad_kernel.data());
    } else {
      backward_kernel_impl<0>(g, grad_out.data(), in.data(), grad_kernel.data());
    }
  }
  if (!grad_bias.empty()) {
    const Index CO = g.out_channels;
    const Index OV = g.out_volume();
    const Index N = g.batch;
#pragma omp parallel for schedule(static)
    for (Index co = 0; co < CO; ++co) {
      double acc = 0.0;
      for (Index n = 0; n < N; ++n) {
        const T* go = grad_out.data() + (n * CO + co) * OV;
        T plane = 0;
        for (Index i = 0; i < OV; ++i) plane += go[i];
        acc += plane;
      }
      grad_bias[co] += static_cast<T>(acc);
    }
  }
}

template <typename T>
void pool_avg3d_forward(std::size_t planes, std::size_t d, std::size_t h, std::size_t w,
                        std::size_t window, std::span<const T> in, std::span<T> out) {
  const Index od = d / window, oh = h / window, ow = w / window;
  const Index win = window;
  const T scale = T(1) / static_cast<T>(window * window * window);
  const Index IV = d * h * w, OV = od * oh * ow;
  const Index P = planes;
  const Index H = h, W = w;
#pragma omp parallel for schedule(static)
  for (Index p = 0; p < P; ++p) {
    const T* x = in.data() + p * IV;
    T* o = out.data() + p * OV;
    for (Index z = 0; z < od; ++z) {
      for (Index y = 0; y < oh; ++y) {
        for (Index q = 0; q < ow; ++q) {
          T s = 0;
          for (Index a = 0; a < win; ++a) {
            for (Index b = 0; b < win; ++b) {
              const T* row = x + ((z * win + a) * H + (y * win + b)) * W + q * win;
              for (Index c = 0; c < win; ++c) s += row[c];
            }
          }
          o[(z * oh + y) * ow + q] = s * scale;
        }
      }
    }
  }
}

template <typename T>
void pool_avg3d_backward(std::size_t planes, std::size_t d, std::size_t h, std::size_t w,
                         std::size_t window, std::span<const T> grad_out, std::span<T> grad_in) {
  const Index od = d / window, oh = h / window, ow = w / window;
  const Index win = window;
  const T scale = T(1) / static_cast<T>(window * window * window);
  const Index IV = d * h * w, OV = od * oh * ow;
  const Index P = planes;
  const Index H = h, W = w;
#pragma omp parallel for schedule(static)
  for (Index p = 0; p < P; ++p) {
    T* gi = grad_in.data() + p * IV;
    const T* go = grad_out.data() + p * OV;
    for (Index z = 0; z < od; ++z) {
      for (Index y = 0; y < oh; ++y) {
        for (Index q = 0; q < ow; ++q) {
          const T v = go[(z * oh + y) * ow + q] * scale;
          for (Index a = 0; a < win; ++a) {
            for (Index b = 0; b < win; ++b) {
              T* row = gi + ((z * win + a) * H + (y * win + b)) * W + q * win;
              for (Index c = 0; c < win; ++c) row[c] += v;
            }
          }
        }
      }
    }
  }
}

template <typename T>
void upsample_nearest3d_forward(std::size_t planes, std::size_t d, std::size_t h, std::size_t w,
                                std::size_t factor, std::span<const T> in, std::span<T> out) {
  const Index f = factor;
  const Index D = d * f, H = h * f, W = w * f;
  const Index IV = d * h * w, OV = D * H * W;
  const Index P = planes;
  const Index ih = h, iw = w;
#pragma omp parallel for schedule(static)
  for (Index p = 0; p < P; ++p) {
    const T* x = in.data() + p * IV;
    T* o = out.data() + p * OV;
    for (Index z = 0; z < D; ++z) {
      for (Index y = 0; y < H; ++y) {
        const T* xrow = x + ((z / f) * ih + (y / f)) * iw;
        T* orow = o + (z * H + y) * W;
        for (Index q = 0; q < W; ++q) orow[q] = xrow[q / f];
      }
    }
  }
}

template <typename T>
void upsample_nearest3d_backward(std::size_t planes, std::size_t d, std::size_t h,
                                 std::size_t w, std::size_t factor, std::span<const T> grad_out,
                                 std::span<T> grad_in) {
  const Index f = factor;
  const Index D = d * f, H = h * f, W = w * f;
  const Index IV = d * h * w, OV = D * H * W;
  const Index P = planes;
  const Index ih = h, iw = w;
#pragma omp parallel for schedule(static)
  for (Index p = 0; p < P; ++p) {
    T* gi = grad_in.data() + p * IV;
    const T* go = grad_out.data() + p * OV;
    for (Index z = 0; z < D; ++z) {
      for (Index y = 0; y < H; ++y) {
        T* girow = gi + ((z / f) * ih + (y / f)) * iw;
        const T* gorow = go + (z * H + y) * W;
        for (Index q = 0; q < W; ++q) girow[q / f] += gorow[q];
      }
    }
  }
}

void set_num_threads(int n) {
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

int num_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
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
  template void pool_avg3d_backward<T>(std::size_t, std::size_t, std::size_t, std::size_t,       \
                                       std::size_t, std::span<const T>, std::span<T>);           \
  template void upsample_nearest3d_forward<T>(std::size_t, std::size_t, std::size_t,             \
                                              std::size_t, std::size_t, std::span<const T>,      \
                                              std::span<T>);                                     \
  template void upsample_nearest3d_backward<T>(std::size_t, std::size_t, std::size_t,            \
                                               std::size_t, std::size_t, std::span<const T>,     \
                                               std::span<T>);

NOISEMAP_INSTANTIATE(float)
NOISEMAP_INSTANTIATE(double)

#undef NOISEMAP_INSTANTIATE

}  // namespace noisemap::kernels
