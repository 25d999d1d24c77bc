#pragma once

#include "caduf/kernels.hpp"

namespace caduf {

// Images in this layer are plain rank-3 tensors (C,H,W) with no grad.

enum class PadMode { replicate, circular };

inline i64 wrap_index(i64 i, i64 n, PadMode mode) {
    if (mode == PadMode::replicate) return clamp_val(i, i64(0), n - 1);
    i64 m = i % n;
    return m < 0 ? m + n : m;
}

// True 2-D convolution per channel: out[i,j] = sum_{u,v} k[u,v] * x[i-u', j-v']
// with the kernel indexed from its center.
inline Tensor blur(const Tensor& x, const BlurKernel& k, PadMode mode) {
    check(x.rank() == 3, "blur: image must be (C,H,W)");
    i64 C = x.dim(0), H = x.dim(1), W = x.dim(2);
    check(k.h <= H && k.w <= W, "blur: kernel larger than image");
    i64 ch = k.h / 2, cw = k.w / 2;
    Tensor out = Tensor::zeros({C, H, W});
    for (i64 c = 0; c < C; ++c) {
        const double* src = x.data() + c * H * W;
        double* dst = out.data() + c * H * W;
        for (i64 i = 0; i < H; ++i)
            for (i64 j = 0; j < W; ++j) {
                double acc = 0.0;
                for (i64 u = 0; u < k.h; ++u) {
                    i64 y = wrap_index(i - (u - ch), H, mode);
                    for (i64 v = 0; v < k.w; ++v) {
                        i64 xx = wrap_index(j - (v - cw), W, mode);
                        acc += k.k[u * k.w + v] * src[y * W + xx];
                    }
                }
                dst[i * W + j] = acc;
            }
    }
    return out;
}

namespace detail {

inline double keys_cubic(double t) {
    // Keys interpolation kernel, a = -0.5
    double a = -0.5;
    double x = std::abs(t);
    if (x < 1.0) return (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0;
    if (x < 2.0) return a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a;
    return 0.0;
}

// Tap set for 1-D resampling from n_in to n_out samples, pixel-center
// convention. Downscaling widens the kernel by the scale ratio
// (antialiasing); weights are normalized per output sample.
struct ResampleTaps {
    i64 first;                   // index of the first source sample
    std::vector<double> w;       // weights, one per tap
};

inline void make_taps(i64 n_in, i64 n_out, std::vector<ResampleTaps>& taps) {
    double ratio = double(n_in) / double(n_out);
    double support = ratio > 1.0 ? 2.0 * ratio : 2.0;
    double inv = ratio > 1.0 ? 1.0 / ratio : 1.0;
    taps.resize(static_cast<size_t>(n_out));
    for (i64 i = 0; i < n_out; ++i) {
        double center = (double(i) + 0.5) * ratio - 0.5;
        i64 lo = static_cast<i64>(std::ceil(center - support));
        i64 hi = static_cast<i64>(std::floor(center + support));
        ResampleTaps& t = taps[static_cast<size_t>(i)];
        t.first = lo;
        t.w.clear();
        double sum = 0.0;
        for (i64 m = lo; m <= hi; ++m) {
            double v = keys_cubic((double(m) - center) * inv);
            t.w.push_back(v);
            sum += v;
        }
        check(sum > 0.0, "resample: degenerate tap set");
        for (double& v : t.w) v /= sum;
    }
}

}  // namespace detail

// Separable Keys bicubic resize (a = -0.5), antialiased when shrinking,
// replicate boundaries.
inline Tensor bicubic_resize(const Tensor& x, i64 Ho, i64 Wo) {
    check(x.rank() == 3, "bicubic_resize: image must be (C,H,W)");
    check(Ho >= 1 && Wo >= 1, "bicubic_resize: bad output dims");
    i64 C = x.dim(0), H = x.dim(1), W = x.dim(2);
    std::vector<detail::ResampleTaps> row_taps, col_taps;
    detail::make_taps(W, Wo, col_taps);
    detail::make_taps(H, Ho, row_taps);

    Tensor mid = Tensor::zeros({C, H, Wo});
    for (i64 c = 0; c < C; ++c)
        for (i64 i = 0; i < H; ++i) {
            const double* src = x.data() + (c * H + i) * W;
            double* dst = mid.data() + (c * H + i) * Wo;
            for (i64 j = 0; j < Wo; ++j) {
                const detail::ResampleTaps& t = col_taps[static_cast<size_t>(j)];
                double acc = 0.0;
                for (size_t m = 0; m < t.w.size(); ++m)
                    acc += t.w[m] * src[clamp_val(t.first + i64(m), i64(0), W - 1)];
                dst[j] = acc;
            }
        }
    Tensor out = Tensor::zeros({C, Ho, Wo});
    for (i64 c = 0; c < C; ++c)
        for (i64 j = 0; j < Wo; ++j)
            for (i64 i = 0; i < Ho; ++i) {
                const detail::ResampleTaps& t = row_taps[static_cast<size_t>(i)];
                double acc = 0.0;
                for (size_t m = 0; m < t.w.size(); ++m)
                    acc += t.w[m] *
                           mid.data()[(c * H + clamp_val(t.first + i64(m), i64(0), H - 1)) * Wo + j];
                out.data()[(c * Ho + i) * Wo + j] = acc;
            }
    return out;
}

inline Tensor bicubic_downsample(const Tensor& x, i64 s) {
    check(x.rank() == 3, "bicubic_downsample: image must be (C,H,W)");
    check(s >= 1, "bicubic_downsample: scale must be >= 1");
    check(x.dim(1) % s == 0 && x.dim(2) % s == 0,
          "bicubic_downsample: dims must be divisible by scale");
    return bicubic_resize(x, x.dim(1) / s, x.dim(2) / s);
}

// The 1-D antialiased bicubic weights used when shrinking by integer s;
// identical for every output sample (constant phase (s-1)/2).
inline std::vector<double> bicubic_down_taps(i64 s, i64& first) {
    std::vector<detail::ResampleTaps> taps;
    detail::make_taps(4 * s, 4, taps);  // any divisible size gives the same taps
    first = taps[1].first - s;          // relative to s*i
    return taps[1].w;
}

}  // namespace caduf
