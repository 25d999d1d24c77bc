#pragma once

#include "caduf/resample.hpp"

namespace caduf {

// Procedural photo-like test scenes: smooth background gradient, crisp-edged
// ellipses and rectangles, a localized oriented texture patch, light final
// antialiasing. Deterministic given the rng.
inline Tensor synth_image(Rng& rng, i64 H, i64 W) {
    check(H >= 8 && W >= 8, "synth_image: too small");
    Tensor img = Tensor::zeros({3, H, W});
    double gx[3], gy[3], g0[3];
    for (int c = 0; c < 3; ++c) {
        g0[c] = rng.uniform(0.25, 0.75);
        gx[c] = rng.uniform(-0.3, 0.3);
        gy[c] = rng.uniform(-0.3, 0.3);
    }
    for (i64 c = 0; c < 3; ++c)
        for (i64 i = 0; i < H; ++i)
            for (i64 j = 0; j < W; ++j)
                img.data()[(c * H + i) * W + j] =
                    g0[c] + gy[c] * (double(i) / H - 0.5) + gx[c] * (double(j) / W - 0.5);

    i64 n_shapes = 14 + rng.uniform_int(0, 10);
    for (i64 sidx = 0; sidx < n_shapes; ++sidx) {
        double cy = rng.uniform(0.0, double(H));
        double cx = rng.uniform(0.0, double(W));
        bool thin = rng.uniform() < 0.25;  // bar-like structures
        double ry = (thin ? rng.uniform(0.01, 0.03) : rng.uniform(0.04, 0.3)) * H;
        double rx = rng.uniform(0.05, 0.35) * W;
        double theta = rng.uniform(0.0, M_PI);
        double col[3] = {rng.uniform(0.02, 0.98), rng.uniform(0.02, 0.98),
                         rng.uniform(0.02, 0.98)};
        double soft = rng.uniform(0.15, 0.45);  // edge width in pixels
        bool rect = thin || rng.uniform() < 0.4;
        double ct = std::cos(theta), st = std::sin(theta);
        for (i64 i = 0; i < H; ++i)
            for (i64 j = 0; j < W; ++j) {
                double dy = (i - cy), dx = (j - cx);
                double u = (ct * dx + st * dy) / rx;
                double v = (-st * dx + ct * dy) / ry;
                double d = rect ? std::max(std::abs(u), std::abs(v)) : std::sqrt(u * u + v * v);
                // signed distance to the unit contour, in pixels (approx)
                double m = (1.0 - d) * std::min(rx, ry);
                double a = 1.0 / (1.0 + std::exp(-m / soft));
                if (a < 1e-4) continue;
                for (i64 c = 0; c < 3; ++c) {
                    double& p = img.data()[(c * H + i) * W + j];
                    p = (1.0 - a) * p + a * col[c];
                }
            }
    }

    // localized oriented texture patch (keeps most of the image smooth so
    // difference-based noise estimates stay meaningful)
    {
        double cy = rng.uniform(0.2, 0.8) * H, cx = rng.uniform(0.2, 0.8) * W;
        double hy = rng.uniform(0.15, 0.3) * H, hx = rng.uniform(0.15, 0.3) * W;
        double freq = rng.uniform(0.3, 0.9);
        double tang = rng.uniform(0.0, M_PI);
        double amp = rng.uniform(0.03, 0.08);
        double tc = std::cos(tang), ts = std::sin(tang);
        for (i64 c = 0; c < 3; ++c)
            for (i64 i = 0; i < H; ++i)
                for (i64 j = 0; j < W; ++j) {
                    double wy = std::abs(i - cy) / hy, wx = std::abs(j - cx) / hx;
                    double window = 1.0 / ((1.0 + std::exp((wy - 1.0) * 6.0)) *
                                           (1.0 + std::exp((wx - 1.0) * 6.0)));
                    if (window < 1e-3) continue;
                    double phase = freq * (tc * j + ts * i);
                    img.data()[(c * H + i) * W + j] += window * amp * std::sin(phase);
                }
    }

    for (double& v : img.values()) v = clamp_val(v, 0.0, 1.0);
    return img;
}

}  // namespace caduf
