#pragma once

#include "caduf/fft.hpp"
#include "caduf/resample.hpp"

namespace caduf {

struct WienerConfig {
    double epsilon = 1e-3;
    PadMode boundary = PadMode::replicate;  // replicate = padded production mode
    i64 pad_margin = -1;                    // <0: auto = kernel radius + 8
};

// epsilon rule: min of 0.001 and the noise estimate, floored at 1e-8 so a
// zero estimate cannot blow up spectral divisions.
inline double wiener_epsilon(double noise_std_estimate) {
    check(noise_std_estimate >= 0.0, "wiener_epsilon: estimate must be >= 0");
    return std::max(1e-8, std::min(0.001, noise_std_estimate));
}

// Robust noise estimate: median absolute horizontal first difference,
// scaled for Gaussian noise (MAD / 0.6745, differences carry sqrt(2) sigma).
inline double estimate_noise_std(const Tensor& y) {
    check(y.rank() == 3, "estimate_noise_std: image must be (C,H,W)");
    i64 C = y.dim(0), H = y.dim(1), W = y.dim(2);
    check(W >= 2, "estimate_noise_std: image too narrow");
    std::vector<double> diffs;
    diffs.reserve(static_cast<size_t>(C * H * (W - 1)));
    for (i64 c = 0; c < C; ++c)
        for (i64 i = 0; i < H; ++i) {
            const double* row = y.data() + (c * H + i) * W;
            for (i64 j = 0; j + 1 < W; ++j) diffs.push_back(std::abs(row[j + 1] - row[j]));
        }
    size_t mid = diffs.size() / 2;
    std::nth_element(diffs.begin(), diffs.begin() + mid, diffs.end());
    double med = diffs[mid];
    return med / (0.6745 * std::sqrt(2.0));
}

namespace detail {

// One channel of circular Wiener deconvolution at the image's own size.
inline void wiener_channel(const double* y, double* out, i64 H, i64 W, const BlurKernel& k,
                           double eps) {
    std::vector<std::complex<double>> yc(static_cast<size_t>(H * W));
    for (i64 i = 0; i < H * W; ++i) yc[static_cast<size_t>(i)] = y[i];
    // kernel zero-padded with its center tap at the origin (circular shift)
    std::vector<std::complex<double>> kc(static_cast<size_t>(H * W), 0.0);
    i64 ch = k.h / 2, cw = k.w / 2;
    for (i64 u = 0; u < k.h; ++u)
        for (i64 v = 0; v < k.w; ++v) {
            i64 i = ((u - ch) % H + H) % H;
            i64 j = ((v - cw) % W + W) % W;
            kc[static_cast<size_t>(i * W + j)] += k.k[u * k.w + v];
        }
    std::vector<std::complex<double>> Y, K, X;
    fft2(yc, Y, H, W, false);
    fft2(kc, K, H, W, false);
    X.resize(Y.size());
    for (size_t i = 0; i < Y.size(); ++i) {
        double denom = std::norm(K[i]) + eps;
        if (denom <= 0.0 || !std::isfinite(denom))
            throw numeric_error("wiener: degenerate spectral denominator");
        X[i] = std::conj(K[i]) * Y[i] / denom;
    }
    std::vector<std::complex<double>> x;
    fft2(X, x, H, W, true);
    double imag_max = 0.0;
    for (i64 i = 0; i < H * W; ++i) {
        imag_max = std::max(imag_max, std::abs(x[static_cast<size_t>(i)].imag()));
        out[i] = x[static_cast<size_t>(i)].real();
    }
    if (imag_max > 1e-10)
        throw numeric_error("wiener: inverse FFT left a non-real residue");
}

}  // namespace detail

// Regularized inverse filter: y_w = F^-1( conj(F(k)) F(y) / (|F(k)|^2 + eps) ).
// Replicate mode pads y by a margin, deconvolves circularly at the padded
// size, and crops, which suppresses wrap-around ringing on natural images.
inline Tensor wiener(const Tensor& y, const BlurKernel& k, const WienerConfig& cfg) {
    check(y.rank() == 3, "wiener: image must be (C,H,W)");
    check(cfg.epsilon >= 0.0, "wiener: epsilon must be >= 0");
    i64 C = y.dim(0), H = y.dim(1), W = y.dim(2);
    if (cfg.boundary == PadMode::circular) {
        check(k.h <= H && k.w <= W, "wiener: kernel larger than image");
        Tensor out = Tensor::zeros({C, H, W});
        for (i64 c = 0; c < C; ++c)
            detail::wiener_channel(y.data() + c * H * W, out.data() + c * H * W, H, W, k,
                                   cfg.epsilon);
        return out;
    }
    i64 margin = cfg.pad_margin >= 0 ? cfg.pad_margin : std::max(k.h, k.w) / 2 + 8;
    i64 Hp = H + 2 * margin, Wp = W + 2 * margin;
    check(k.h <= Hp && k.w <= Wp, "wiener: kernel larger than padded image");
    Tensor padded = Tensor::zeros({C, Hp, Wp});
    for (i64 c = 0; c < C; ++c)
        for (i64 i = 0; i < Hp; ++i)
            for (i64 j = 0; j < Wp; ++j)
                padded.data()[(c * Hp + i) * Wp + j] =
                    y.data()[(c * H + clamp_val(i - margin, i64(0), H - 1)) * W +
                             clamp_val(j - margin, i64(0), W - 1)];
    Tensor dec = Tensor::zeros({C, Hp, Wp});
    for (i64 c = 0; c < C; ++c)
        detail::wiener_channel(padded.data() + c * Hp * Wp, dec.data() + c * Hp * Wp, Hp, Wp,
                               k, cfg.epsilon);
    Tensor out = Tensor::zeros({C, H, W});
    for (i64 c = 0; c < C; ++c)
        for (i64 i = 0; i < H; ++i)
            std::copy(dec.data() + (c * Hp + i + margin) * Wp + margin,
                      dec.data() + (c * Hp + i + margin) * Wp + margin + W,
                      out.data() + (c * H + i) * W);
    return out;
}

}  // namespace caduf
