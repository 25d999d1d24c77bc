#include <catch2/catch_amalgamated.hpp>
#include <complex>

#include "caduf/degradation.hpp"
#include "caduf/fft.hpp"
#include "caduf/metrics.hpp"
#include "caduf/synthimg.hpp"
#include "testutil.hpp"

using namespace caduf;
using testutil::max_abs_diff;

namespace {

// Independent circular-convolution oracle: kernel embedded with its center
// at the origin, pointwise spectral product.
Tensor fft_blur_oracle(const Tensor& x, const BlurKernel& k) {
    i64 C = x.dim(0), H = x.dim(1), W = x.dim(2);
    std::vector<std::complex<double>> kc(static_cast<size_t>(H * W), 0.0);
    for (i64 u = 0; u < k.h; ++u)
        for (i64 v = 0; v < k.w; ++v) {
            i64 i = (((u - k.h / 2) % H) + H) % H;
            i64 j = (((v - k.w / 2) % W) + W) % W;
            kc[static_cast<size_t>(i * W + j)] += k.k[u * k.w + v];
        }
    std::vector<std::complex<double>> K;
    fft2(kc, K, H, W, false);
    Tensor out = Tensor::zeros({C, H, W});
    for (i64 c = 0; c < C; ++c) {
        std::vector<std::complex<double>> xc(static_cast<size_t>(H * W));
        for (i64 i = 0; i < H * W; ++i) xc[static_cast<size_t>(i)] = x.data()[c * H * W + i];
        std::vector<std::complex<double>> X, Y, y;
        fft2(xc, X, H, W, false);
        Y.resize(X.size());
        for (size_t i = 0; i < X.size(); ++i) Y[i] = X[i] * K[i];
        fft2(Y, y, H, W, true);
        for (i64 i = 0; i < H * W; ++i) out.data()[c * H * W + i] = y[static_cast<size_t>(i)].real();
    }
    return out;
}

double keys_ref(double t) {
    double a = -0.5, x = std::abs(t);
    if (x < 1) return (a + 2) * x * x * x - (a + 3) * x * x + 1;
    if (x < 2) return a * x * x * x - 5 * a * x * x + 8 * a * x - 4 * a;
    return 0;
}

// Independent bicubic reference: direct O(n^2) weighted sums along each
// axis, no tap windows, replicate boundaries.
Tensor bicubic_ref(const Tensor& x, i64 Ho, i64 Wo) {
    i64 C = x.dim(0), H = x.dim(1), W = x.dim(2);
    auto axis_weights = [](i64 n_in, i64 n_out, i64 i) {
        double ratio = double(n_in) / double(n_out);
        double scale = ratio > 1.0 ? ratio : 1.0;
        double center = (i + 0.5) * ratio - 0.5;
        std::vector<double> w(static_cast<size_t>(n_in) + 24, 0.0);  // index m+12
        double sum = 0.0;
        for (i64 m = -12; m < n_in + 12; ++m) {
            double v = keys_ref((double(m) - center) / scale);
            w[static_cast<size_t>(m + 12)] = v;
            sum += v;
        }
        for (double& v : w) v /= sum;
        return w;
    };
    Tensor out = Tensor::zeros({C, Ho, Wo});
    for (i64 i = 0; i < Ho; ++i) {
        auto wr = axis_weights(H, Ho, i);
        for (i64 j = 0; j < Wo; ++j) {
            auto wc = axis_weights(W, Wo, j);
            for (i64 c = 0; c < C; ++c) {
                double acc = 0.0;
                for (i64 u = -12; u < H + 12; ++u) {
                    double rw = wr[static_cast<size_t>(u + 12)];
                    if (rw == 0.0) continue;
                    i64 ui = clamp_val(u, i64(0), H - 1);
                    for (i64 v = -12; v < W + 12; ++v) {
                        double cw = wc[static_cast<size_t>(v + 12)];
                        if (cw == 0.0) continue;
                        i64 vi = clamp_val(v, i64(0), W - 1);
                        acc += rw * cw * x.data()[(c * H + ui) * W + vi];
                    }
                }
                out.data()[(c * Ho + i) * Wo + j] = acc;
            }
        }
    }
    return out;
}

}  // namespace

TEST_CASE("gaussian kernel basics") {
    BlurKernel k = gaussian_kernel(0.2, 13);
    k.validate();
    REQUIRE(k.h == 13);
    REQUIRE(k.at(6, 6) > 0.99);

    BlurKernel g = gaussian_kernel(1.3);
    g.validate();
    REQUIRE(g.h == 2 * 4 + 1);  // 2*ceil(3*1.3)+1
    for (i64 i = 0; i < g.h; ++i)
        for (i64 j = 0; j < g.w; ++j) {
            REQUIRE(g.at(i, j) == Catch::Approx(g.at(j, i)).epsilon(1e-14));
            REQUIRE(g.at(i, j) ==
                    Catch::Approx(g.at(g.h - 1 - i, g.w - 1 - j)).epsilon(1e-14));
        }
    REQUIRE_THROWS_AS(gaussian_kernel(-1.0), input_error);
    REQUIRE_THROWS_AS(gaussian_kernel(1.0, 4), input_error);
}

TEST_CASE("linear motion kernel") {
    SECTION("length 1 is a delta") {
        BlurKernel k = linear_motion_kernel(37.0, 1.0);
        REQUIRE(k.h == 1);
        REQUIRE(k.k[0] == 1.0);
    }
    SECTION("angle 0 length 5 stays on the center row with 5 taps") {
        BlurKernel k = linear_motion_kernel(0.0, 5.0);
        k.validate();
        REQUIRE(k.h == 5);
        i64 nonzero = 0;
        for (i64 i = 0; i < k.h; ++i)
            for (i64 j = 0; j < k.w; ++j)
                if (k.at(i, j) > 0) {
                    REQUIRE(i == k.h / 2);
                    ++nonzero;
                }
        REQUIRE(nonzero == 5);
    }
    SECTION("angle 90 stays on the center column") {
        BlurKernel k = linear_motion_kernel(90.0, 7.0);
        for (i64 i = 0; i < k.h; ++i)
            for (i64 j = 0; j < k.w; ++j)
                if (k.at(i, j) > 1e-12) REQUIRE(j == k.w / 2);
    }
    SECTION("bad arguments") {
        REQUIRE_THROWS_AS(linear_motion_kernel(180.0, 5.0), input_error);
        REQUIRE_THROWS_AS(linear_motion_kernel(-1.0, 5.0), input_error);
        REQUIRE_THROWS_AS(linear_motion_kernel(0.0, 0.5), input_error);
    }
}

TEST_CASE("trajectory kernel support distribution") {
    i64 fit15 = 0;
    const i64 n = 1000;
    for (i64 i = 0; i < n; ++i) {
        Rng rng(5000 + i);
        BlurKernel k = trajectory_kernel(rng, 0.8, 1e-3);
        k.validate();
        REQUIRE(k.h >= 11);
        REQUIRE(k.h <= 45);
        REQUIRE(k.h % 2 == 1);
        REQUIRE(k.w % 2 == 1);
        if (k.h <= 15 && k.w <= 15) ++fit15;
    }
    // minimum anxiety produces compact streaks
    REQUIRE(double(fit15) / double(n) >= 0.90);

    // high anxiety spreads out
    i64 wide = 0;
    for (i64 i = 0; i < 100; ++i) {
        Rng rng(9000 + i);
        BlurKernel k = trajectory_kernel(rng, 0.8, 1e-2);
        k.validate();
        if (k.h > 15) ++wide;
    }
    REQUIRE(wide > 80);
}

TEST_CASE("compose kernels") {
    SECTION("delta is the identity element") {
        BlurKernel g = gaussian_kernel(1.1);
        BlurKernel c = compose_kernels(g, delta_kernel());
        REQUIRE(c.h == g.h);
        REQUIRE(max_abs_diff(Tensor::from({g.h * g.w}, c.k), Tensor::from({g.h * g.w}, g.k)) <
                1e-15);
    }
    SECTION("gaussian composed with gaussian is gaussian") {
        // sigmas chosen well above the sampling limit so the discrete
        // composition matches the continuous identity tightly
        double s1 = 1.0, s2 = 0.8;
        BlurKernel c = compose_kernels(gaussian_kernel(s1), gaussian_kernel(s2));
        c.validate();
        BlurKernel ref = gaussian_kernel(std::sqrt(s1 * s1 + s2 * s2), c.h);
        double worst = 0.0;
        for (size_t i = 0; i < c.k.size(); ++i)
            worst = std::max(worst, std::abs(c.k[i] - ref.k[i]));
        REQUIRE(worst < 1e-3);
    }
}

TEST_CASE("blur operator") {
    Rng rng(31);
    Tensor x = synth_image(rng, 32, 40);
    SECTION("delta leaves the image unchanged") {
        REQUIRE(max_abs_diff(blur(x, delta_kernel(), PadMode::replicate), x) == 0.0);
    }
    SECTION("constant image stays constant") {
        Tensor cimg = Tensor::filled({3, 16, 16}, 0.37);
        Tensor out = blur(cimg, gaussian_kernel(1.5), PadMode::replicate);
        REQUIRE(max_abs_diff(out, cimg) < 1e-12);
    }
    SECTION("circular mode equals the FFT oracle") {
        BlurKernel k = compose_kernels(gaussian_kernel(0.9), linear_motion_kernel(30.0, 4.0));
        Tensor a = blur(x, k, PadMode::circular);
        Tensor b = fft_blur_oracle(x, k);
        REQUIRE(max_abs_diff(a, b) < 1e-10);
    }
    SECTION("kernel larger than image rejected") {
        REQUIRE_THROWS_AS(blur(Tensor::zeros({3, 4, 4}), gaussian_kernel(2.0), PadMode::replicate),
                          input_error);
    }
}

TEST_CASE("bicubic resize") {
    Rng rng(37);
    Tensor x = synth_image(rng, 24, 36);
    SECTION("constant preserved") {
        Tensor cimg = Tensor::filled({3, 16, 24}, 0.61);
        REQUIRE(max_abs_diff(bicubic_downsample(cimg, 2), Tensor::filled({3, 8, 12}, 0.61)) <
                1e-12);
        REQUIRE(max_abs_diff(bicubic_resize(cimg, 20, 30), Tensor::filled({3, 20, 30}, 0.61)) <
                1e-12);
    }
    SECTION("scale 1 is the identity") {
        REQUIRE(max_abs_diff(bicubic_downsample(x, 1), x) < 1e-12);
    }
    SECTION("downsample agrees with the direct reference") {
        for (i64 s : {i64(2), i64(4)}) {
            Tensor a = bicubic_downsample(x, s);
            Tensor b = bicubic_ref(x, 24 / s, 36 / s);
            REQUIRE(a.shape() == b.shape());
            REQUIRE(max_abs_diff(a, b) < 1e-10);
        }
    }
    SECTION("upsample agrees with the direct reference") {
        Tensor a = bicubic_resize(x, 48, 72);
        Tensor b = bicubic_ref(x, 48, 72);
        REQUIRE(max_abs_diff(a, b) < 1e-10);
    }
    SECTION("fractional resize agrees with the direct reference") {
        Tensor a = bicubic_resize(x, 17, 29);
        Tensor b = bicubic_ref(x, 17, 29);
        REQUIRE(max_abs_diff(a, b) < 1e-10);
    }
    SECTION("indivisible dims rejected") {
        REQUIRE_THROWS_AS(bicubic_downsample(Tensor::zeros({3, 15, 16}), 2), input_error);
    }
}

TEST_CASE("sample spec ranges") {
    Rng rng(41);
    for (int i = 0; i < 500; ++i) {
        DegradationSpec sm2 = sample_spec(rng, KernelFamily::gaussian_sm, 2);
        REQUIRE(sm2.sigma >= 0.2); REQUIRE(sm2.sigma <= 2.0);
        REQUIRE(sm2.motion.kind == MotionSpec::Kind::linear);
        REQUIRE(sm2.motion.angle_deg >= 0.0); REQUIRE(sm2.motion.angle_deg < 180.0);
        REQUIRE(sm2.motion.length >= 1.0); REQUIRE(sm2.motion.length <= 9.0);
        REQUIRE(sm2.noise_std == 0.0);

        DegradationSpec sm4 = sample_spec(rng, KernelFamily::gaussian_sm, 4);
        REQUIRE(sm4.sigma <= 4.0);
        REQUIRE(sm4.motion.length <= 15.0);

        DegradationSpec cm2 = sample_spec(rng, KernelFamily::gaussian_cm, 2);
        REQUIRE(cm2.sigma >= 0.2); REQUIRE(cm2.sigma <= 1.0);
        REQUIRE(cm2.motion.kind == MotionSpec::Kind::trajectory);
        REQUIRE(cm2.motion.anxiety >= 1e-3); REQUIRE(cm2.motion.anxiety <= 1e-2);
        REQUIRE(cm2.motion.exposure == 0.8);
        REQUIRE(cm2.noise_std == 0.01);

        DegradationSpec cm4 = sample_spec(rng, KernelFamily::gaussian_cm, 4);
        REQUIRE(cm4.sigma <= 2.0);
    }
}

TEST_CASE("synthesize pipeline") {
    Rng rng(43);
    Tensor x = synth_image(rng, 64, 64);

    SECTION("delta kernel, no noise: y equals plain bicubic downsample") {
        DegradationSpec spec;
        spec.scale = 2;
        spec.sigma = 1e-6;  // forces the gaussian to a pure delta
        spec.motion.kind = MotionSpec::Kind::none;
        spec.noise_std = 0.0;
        SamplePair sp = synthesize(x, spec, nullptr);
        REQUIRE(sp.k.at(sp.k.h / 2, sp.k.w / 2) == 1.0);
        REQUIRE(max_abs_diff(sp.y, bicubic_downsample(x, 2)) == 0.0);
        REQUIRE(psnr(sp.y, bicubic_downsample(x, 2)) == 99.0);
    }
    SECTION("anchor uses the fixed blur of the right width") {
        DegradationSpec spec;
        spec.scale = 2;
        spec.sigma = 1.4;
        SamplePair sp = synthesize(x, spec, nullptr);
        Tensor expect =
            bicubic_downsample(blur(x, gaussian_kernel(0.8), PadMode::replicate), 2);
        REQUIRE(max_abs_diff(sp.y_anchor, expect) == 0.0);
        REQUIRE(anchor_sigma(4) == 1.8);
        REQUIRE(sp.y.dim(1) == 32);
        REQUIRE(sp.y_anchor.dim(1) == 32);
    }
    SECTION("noise statistics") {
        Rng big_rng(47);
        Tensor big = synth_image(big_rng, 400, 400);
        DegradationSpec spec;
        spec.scale = 2;
        spec.sigma = 0.5;
        spec.noise_std = 0.01;
        spec.master_seed = 99;
        SamplePair noisy = synthesize(big, spec, nullptr);
        spec.noise_std = 0.0;
        SamplePair clean = synthesize(big, spec, nullptr);
        REQUIRE(noisy.y.numel() >= 100000);
        double var = 0.0;
        for (i64 i = 0; i < noisy.y.numel(); ++i) {
            double d = noisy.y.data()[i] - clean.y.data()[i];
            var += d * d;
        }
        double std_emp = std::sqrt(var / double(noisy.y.numel()));
        REQUIRE(std_emp >= 0.009);
        REQUIRE(std_emp <= 0.011);
    }
    SECTION("fixed seed is bit deterministic") {
        Rng srng(53);
        DegradationSpec spec = sample_spec(srng, KernelFamily::gaussian_cm, 2);
        spec.master_seed = 1234;
        SamplePair a = synthesize(x, spec, nullptr);
        SamplePair b = synthesize(x, spec, nullptr);
        REQUIRE(a.y.values() == b.y.values());
        REQUIRE(a.k.k == b.k.k);
        REQUIRE(a.y_anchor.values() == b.y_anchor.values());
    }
    SECTION("invalid specs rejected") {
        DegradationSpec spec;
        spec.scale = 3;
        REQUIRE_THROWS_AS(synthesize(x, spec, nullptr), input_error);
        spec.scale = 2;
        spec.sigma = -1.0;
        REQUIRE_THROWS_AS(synthesize(x, spec, nullptr), input_error);
        spec.sigma = 1.0;
        // 31 is not divisible by the scale
        REQUIRE_THROWS_AS(synthesize(synth_image(rng, 30, 31), spec, nullptr), input_error);
    }
}

TEST_CASE("synthetic images are plausible") {
    Rng rng(59);
    Tensor a = synth_image(rng, 48, 48);
    for (double v : a.values()) {
        REQUIRE(v >= 0.0);
        REQUIRE(v <= 1.0);
    }
    Rng rng2(59);
    Tensor b = synth_image(rng2, 48, 48);
    REQUIRE(a.values() == b.values());
    // images have actual structure: nontrivial dynamic range
    double lo = 1.0, hi = 0.0;
    for (double v : a.values()) { lo = std::min(lo, v); hi = std::max(hi, v); }
    REQUIRE(hi - lo > 0.2);
}
