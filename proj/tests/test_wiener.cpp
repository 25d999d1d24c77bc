#include <catch2/catch_amalgamated.hpp>

#include "caduf/degradation.hpp"
#include "caduf/metrics.hpp"
#include "caduf/synthimg.hpp"
#include "caduf/wiener.hpp"
#include "testutil.hpp"

using namespace caduf;
using testutil::max_abs_diff;

TEST_CASE("epsilon rule") {
    REQUIRE(wiener_epsilon(0.01) == 0.001);
    REQUIRE(wiener_epsilon(0.0001) == 0.0001);
    REQUIRE(wiener_epsilon(0.0) == 1e-8);
    REQUIRE(wiener_epsilon(0.001) == 0.001);
    REQUIRE_THROWS_AS(wiener_epsilon(-0.1), input_error);
}

TEST_CASE("noise estimator") {
    SECTION("constant image estimates zero") {
        REQUIRE(estimate_noise_std(Tensor::filled({3, 20, 20}, 0.5)) == 0.0);
    }
    SECTION("pure gaussian noise") {
        Rng rng(61);
        Tensor img = Tensor::filled({3, 200, 200}, 0.5);
        Tensor noisy = add_noise(img, 0.01, rng);
        double est = estimate_noise_std(noisy);
        REQUIRE(est >= 0.008);
        REQUIRE(est <= 0.012);
    }
    SECTION("natural image plus noise stays within 2x") {
        Rng rng(67);
        Tensor img = synth_image(rng, 256, 256);
        Tensor noisy = add_noise(img, 0.01, rng);
        double est = estimate_noise_std(noisy);
        REQUIRE(est >= 0.005);
        REQUIRE(est <= 0.02);
    }
}

TEST_CASE("wiener closed forms with a delta kernel") {
    Rng rng(71);
    Tensor y = synth_image(rng, 24, 24);
    WienerConfig cfg;
    cfg.boundary = PadMode::circular;
    SECTION("epsilon 0 returns the input exactly") {
        cfg.epsilon = 0.0;
        Tensor out = wiener(y, delta_kernel(), cfg);
        REQUIRE(max_abs_diff(out, y) < 1e-13);
    }
    SECTION("epsilon 0.5 divides by 1.5") {
        cfg.epsilon = 0.5;
        Tensor out = wiener(y, delta_kernel(), cfg);
        Tensor expect = Tensor::from(y.shape(), y.values());
        for (double& v : expect.values()) v /= 1.5;
        REQUIRE(max_abs_diff(out, expect) < 1e-13);
    }
}

TEST_CASE("circular round trip exceeds 60 dB") {
    Rng rng(73);
    Tensor x = synth_image(rng, 48, 48);
    BlurKernel k = gaussian_kernel(1.0);
    Tensor blurred = blur(x, k, PadMode::circular);
    WienerConfig cfg;
    cfg.epsilon = 1e-8;
    cfg.boundary = PadMode::circular;
    Tensor rec = wiener(blurred, k, cfg);
    REQUIRE(psnr(rec, x) > 60.0);
}

TEST_CASE("padded mode keeps dims and reduces blur on noisy inputs") {
    // strong-blur regime: prefiltering must beat the blurred input on average
    Rng rng(79);
    i64 improved = 0;
    double mean_blurred = 0.0, mean_wiener = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = synth_image(rng, 64, 64);
        BlurKernel k = gaussian_kernel(rng.uniform(1.6, 2.4));
        Tensor y = blur(x, k, PadMode::replicate);
        Tensor noisy = add_noise(y, 0.01, rng);
        WienerConfig cfg;
        cfg.epsilon = wiener_epsilon(estimate_noise_std(noisy));
        cfg.boundary = PadMode::replicate;
        Tensor yw = wiener(noisy, k, cfg);
        REQUIRE(yw.shape() == x.shape());
        double p_blur = psnr(noisy, x);
        double p_wien = psnr(yw, x);
        mean_blurred += p_blur;
        mean_wiener += p_wien;
        if (p_wien > p_blur) ++improved;
    }
    mean_blurred /= 20.0;
    mean_wiener /= 20.0;
    INFO("mean blurred " << mean_blurred << " dB vs wiener " << mean_wiener << " dB, improved "
                         << improved << "/20");
    REQUIRE(mean_wiener >= mean_blurred);
    REQUIRE(improved >= 12);
}

TEST_CASE("regularization monotonically caps amplification") {
    BlurKernel k = gaussian_kernel(1.2);
    // amplification factor max |K| / (|K|^2 + eps) over the spectrum
    auto amp = [&](double eps) {
        i64 H = 32, W = 32;
        std::vector<std::complex<double>> kc(static_cast<size_t>(H * W), 0.0);
        for (i64 u = 0; u < k.h; ++u)
            for (i64 v = 0; v < k.w; ++v) {
                i64 i = (((u - k.h / 2) % H) + H) % H;
                i64 j = (((v - k.w / 2) % W) + W) % W;
                kc[static_cast<size_t>(i * W + j)] += k.k[u * k.w + v];
            }
        std::vector<std::complex<double>> K;
        fft2(kc, K, H, W, false);
        double m = 0.0;
        for (auto& v : K) m = std::max(m, std::abs(v) / (std::norm(v) + eps));
        return m;
    };
    double prev = amp(1e-8);
    for (double eps : {1e-6, 1e-4, 1e-2, 1.0}) {
        double cur = amp(eps);
        REQUIRE(cur <= prev + 1e-12);
        prev = cur;
    }
}

TEST_CASE("wiener input validation") {
    WienerConfig cfg;
    cfg.boundary = PadMode::circular;
    REQUIRE_THROWS_AS(wiener(Tensor::zeros({3, 4, 4}), gaussian_kernel(3.0), cfg), input_error);
}
