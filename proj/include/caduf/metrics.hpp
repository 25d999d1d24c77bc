#pragma once

#include "caduf/kernels.hpp"

namespace caduf {

// PSNR over all values (RGB together), peak default 1, capped at 99 dB.
inline double psnr(const Tensor& u, const Tensor& v, double peak = 1.0) {
    check(u.shape() == v.shape(), "psnr: shape mismatch");
    double mse = 0.0;
    for (i64 i = 0; i < u.numel(); ++i) {
        double d = u.data()[i] - v.data()[i];
        mse += d * d;
    }
    mse /= double(u.numel());
    if (mse <= 0.0) return 99.0;
    double db = 10.0 * std::log10(peak * peak / mse);
    return std::min(db, 99.0);
}

// Structural similarity, 11x11 Gaussian window sigma 1.5, K1=0.01, K2=0.03,
// dynamic range 1; windows fully inside the image (valid region); averaged
// over channels and positions.
inline double ssim(const Tensor& u, const Tensor& v) {
    check(u.shape() == v.shape(), "ssim: shape mismatch");
    check(u.rank() == 3, "ssim: image must be (C,H,W)");
    i64 C = u.dim(0), H = u.dim(1), W = u.dim(2);
    const i64 win = 11, rad = 5;
    check(H >= win && W >= win, "ssim: image smaller than the 11x11 window");
    double wk[win * win];
    {
        double s = 0.0;
        for (i64 i = 0; i < win; ++i)
            for (i64 j = 0; j < win; ++j) {
                double dy = double(i - rad), dx = double(j - rad);
                wk[i * win + j] = std::exp(-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5));
                s += wk[i * win + j];
            }
        for (double& x : wk) x /= s;
    }
    const double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
    double acc = 0.0;
    i64 count = 0;
    for (i64 c = 0; c < C; ++c) {
        const double* up = u.data() + c * H * W;
        const double* vp = v.data() + c * H * W;
        for (i64 i = 0; i + win <= H; ++i)
            for (i64 j = 0; j + win <= W; ++j) {
                double mu = 0, mv = 0, suu = 0, svv = 0, suv = 0;
                for (i64 a = 0; a < win; ++a)
                    for (i64 b = 0; b < win; ++b) {
                        double wgt = wk[a * win + b];
                        double uu = up[(i + a) * W + j + b];
                        double vv = vp[(i + a) * W + j + b];
                        mu += wgt * uu;
                        mv += wgt * vv;
                        suu += wgt * uu * uu;
                        svv += wgt * vv * vv;
                        suv += wgt * uu * vv;
                    }
                double var_u = suu - mu * mu, var_v = svv - mv * mv;
                double cov = suv - mu * mv;
                double val = ((2 * mu * mv + C1) * (2 * cov + C2)) /
                             ((mu * mu + mv * mv + C1) * (var_u + var_v + C2));
                acc += val;
                ++count;
            }
    }
    return acc / double(count);
}

// --- MAC accounting ---
// conv: Cout*Hout*Wout*Cin*kh*kw; deformable adds 4 per sampled tap;
// dynamic filter: (2p+1)^2 per output value; pixel_shuffle free; one FFT
// transform: 5*H*W*log2(H*W).

inline i64 conv_macs(i64 cin, i64 cout, i64 kh, i64 kw, i64 hout, i64 wout) {
    return cout * hout * wout * cin * kh * kw;
}

inline i64 deformable_macs(i64 cin, i64 cout, i64 kh, i64 kw, i64 hout, i64 wout) {
    // GEMM part plus 4 bilinear MACs per sampled tap (per input channel)
    return conv_macs(cin, cout, kh, kw, hout, wout) + 4 * cin * kh * kw * hout * wout;
}

inline i64 dfn_macs(i64 channels, i64 p, i64 hout, i64 wout) {
    return channels * hout * wout * (2 * p + 1) * (2 * p + 1);
}

inline double fft_macs(i64 H, i64 W) {
    double hw = double(H) * double(W);
    return 5.0 * hw * std::log2(hw);
}

struct MetricsRow {
    std::string id;
    double psnr_db = 0.0;
    double ssim_val = 0.0;
    double macs = 0.0;
};

}  // namespace caduf
