#pragma once

#include <functional>
#include <optional>

#include "caduf/resample.hpp"

namespace caduf {

enum class KernelFamily { gaussian_sm, gaussian_cm };

struct MotionSpec {
    enum class Kind { none, linear, trajectory } kind = Kind::none;
    double angle_deg = 0.0;   // linear
    double length = 1.0;      // linear
    u64 seed = 0;             // trajectory
    double exposure = 0.8;    // trajectory
    double anxiety = 1e-3;    // trajectory
};

struct DegradationSpec {
    i64 scale = 2;
    double sigma = 1.0;
    MotionSpec motion;
    double noise_std = 0.0;
    u64 master_seed = 0;

    void validate() const {
        check(scale == 2 || scale == 4, "degradation spec: scale must be 2 or 4");
        check(sigma > 0.0, "degradation spec: sigma must be positive");
        check(noise_std >= 0.0, "degradation spec: noise std must be >= 0");
        if (motion.kind == MotionSpec::Kind::linear)
            check(motion.length >= 1.0, "degradation spec: motion length >= 1");
    }
};

// sigma of the fixed anchor blur k^D per scale
inline double anchor_sigma(i64 scale) {
    check(scale == 2 || scale == 4, "anchor_sigma: scale must be 2 or 4");
    return scale == 2 ? 0.8 : 1.8;
}

inline BlurKernel anchor_kernel(i64 scale) { return gaussian_kernel(anchor_sigma(scale)); }

inline BlurKernel build_kernel(const DegradationSpec& spec) {
    spec.validate();
    BlurKernel g = gaussian_kernel(spec.sigma);
    switch (spec.motion.kind) {
        case MotionSpec::Kind::none:
            return g;
        case MotionSpec::Kind::linear:
            return compose_kernels(g, linear_motion_kernel(spec.motion.angle_deg,
                                                           spec.motion.length));
        case MotionSpec::Kind::trajectory: {
            Rng trng(spec.motion.seed);
            return compose_kernels(
                g, trajectory_kernel(trng, spec.motion.exposure, spec.motion.anxiety));
        }
    }
    throw input_error("degradation spec: unknown motion kind");
}

inline DegradationSpec sample_spec(Rng& rng, KernelFamily family, i64 scale) {
    check(scale == 2 || scale == 4, "sample_spec: scale must be 2 or 4");
    DegradationSpec spec;
    spec.scale = scale;
    if (family == KernelFamily::gaussian_sm) {
        spec.sigma = rng.uniform(0.2, scale == 2 ? 2.0 : 4.0);
        spec.motion.kind = MotionSpec::Kind::linear;
        spec.motion.angle_deg = rng.uniform(0.0, 180.0);
        spec.motion.length = rng.uniform(1.0, scale == 2 ? 9.0 : 15.0);
        spec.noise_std = 0.0;
    } else {
        spec.sigma = rng.uniform(0.2, scale == 2 ? 1.0 : 2.0);
        spec.motion.kind = MotionSpec::Kind::trajectory;
        spec.motion.seed = rng.next_u64();
        spec.motion.exposure = 0.8;
        double R = rng.uniform();
        spec.motion.anxiety = std::pow(10.0, R) / 1000.0;
        spec.noise_std = 0.01;
    }
    return spec;
}

// AWGN per channel; LR intensities are NOT clipped to [0,1], keeping the
// degradation exactly linear plus noise.
inline Tensor add_noise(const Tensor& x, double std_dev, Rng& rng) {
    Tensor out = Tensor::from(x.shape(), x.values());
    if (std_dev > 0.0)
        for (double& v : out.values()) v += std_dev * rng.normal();
    return out;
}

struct SamplePair {
    Tensor x;    // HR, (3,H,W), values in [0,1]
    Tensor y;    // LR observation
    Tensor y_anchor;  // privileged anchor y_D*
    BlurKernel k;
    BlurKernel klow;
    DegradationSpec spec;
};

using KlowFitter =
    std::function<BlurKernel(const BlurKernel& k, i64 scale, const Tensor& hr_patch)>;

// y = [x * k] downsampled + noise; y_D* = [x * k^D] downsampled.
inline SamplePair synthesize(const Tensor& x, const DegradationSpec& spec,
                             const KlowFitter& fit_klow) {
    spec.validate();
    check(x.rank() == 3 && x.dim(0) == 3, "synthesize: x must be (3,H,W)");
    check(x.dim(1) % spec.scale == 0 && x.dim(2) % spec.scale == 0,
          "synthesize: dims must be divisible by scale");
    SamplePair out;
    out.x = x;
    out.spec = spec;
    out.k = build_kernel(spec);
    out.k.validate();
    u64 ns = spec.master_seed ^ 0x6a09e667f3bcc909ULL;
    Rng noise_rng(splitmix64(ns));
    Tensor clean = bicubic_downsample(blur(x, out.k, PadMode::replicate), spec.scale);
    out.y = add_noise(clean, spec.noise_std, noise_rng);
    out.y_anchor = bicubic_downsample(blur(x, anchor_kernel(spec.scale), PadMode::replicate),
                                      spec.scale);
    if (fit_klow) out.klow = fit_klow(out.k, spec.scale, x);
    return out;
}

}  // namespace caduf
