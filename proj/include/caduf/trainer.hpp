#pragma once

#include <chrono>
#include <cstdio>
#include <thread>

#include "caduf/cascade.hpp"
#include "caduf/degradation.hpp"
#include "caduf/metrics.hpp"
#include "caduf/synthimg.hpp"

namespace caduf {

// ---- geometric augmentation ----

inline Tensor flip_h(const Tensor& x) {
    check(x.rank() == 3, "flip_h: image must be (C,H,W)");
    i64 C = x.dim(0), H = x.dim(1), W = x.dim(2);
    Tensor out = Tensor::zeros({C, H, W});
    for (i64 c = 0; c < C; ++c)
        for (i64 i = 0; i < H; ++i)
            for (i64 j = 0; j < W; ++j)
                out.data()[(c * H + i) * W + j] = x.data()[(c * H + i) * W + (W - 1 - j)];
    return out;
}

inline Tensor flip_v(const Tensor& x) {
    check(x.rank() == 3, "flip_v: image must be (C,H,W)");
    i64 C = x.dim(0), H = x.dim(1), W = x.dim(2);
    Tensor out = Tensor::zeros({C, H, W});
    for (i64 c = 0; c < C; ++c)
        for (i64 i = 0; i < H; ++i)
            for (i64 j = 0; j < W; ++j)
                out.data()[(c * H + i) * W + j] = x.data()[(c * H + (H - 1 - i)) * W + j];
    return out;
}

// quarter turn counterclockwise: (i,j) -> (W-1-j, i)
inline Tensor rot90(const Tensor& x) {
    check(x.rank() == 3, "rot90: image must be (C,H,W)");
    i64 C = x.dim(0), H = x.dim(1), W = x.dim(2);
    Tensor out = Tensor::zeros({C, W, H});
    for (i64 c = 0; c < C; ++c)
        for (i64 i = 0; i < H; ++i)
            for (i64 j = 0; j < W; ++j)
                out.data()[(c * W + (W - 1 - j)) * H + i] = x.data()[(c * H + i) * W + j];
    return out;
}

struct AugmentConfig {
    bool flip = true;
    bool rotate = true;
    bool rescale = true;
};

// Independent random h/v flips, quarter turns, and a bicubic rescale by a
// factor in [0.5, 1.25], applied before patch cropping. When min_side is
// given, factors that would leave the image smaller than a crop of that
// size are redrawn.
inline Tensor augment(const Tensor& x, Rng& rng, const AugmentConfig& ac = {}, i64 min_side = 0) {
    check(x.rank() == 3, "augment: image must be (C,H,W)");
    check(min_side <= std::min(x.dim(1), x.dim(2)),
          "augment: image smaller than the requested patch");
    Tensor out = x;
    if (ac.flip) {
        if (rng.uniform() < 0.5) out = flip_h(out);
        if (rng.uniform() < 0.5) out = flip_v(out);
    }
    if (ac.rotate) {
        i64 q = rng.uniform_int(0, 3);
        for (i64 t = 0; t < q; ++t) out = rot90(out);
    }
    if (ac.rescale) {
        i64 H = out.dim(1), W = out.dim(2);
        for (int attempt = 0;; ++attempt) {
            double f = rng.uniform(0.5, 1.25);
            i64 h2 = std::llround(double(H) * f), w2 = std::llround(double(W) * f);
            if (std::min(h2, w2) >= std::max<i64>(min_side, 4)) {
                out = bicubic_resize(out, h2, w2);
                break;
            }
            check(attempt < 200, "augment: image cannot hold the patch at any legal factor");
        }
    }
    return out;
}

// ---- batch assembly ----

struct TrainPhase {
    i64 epochs = 1;
    double lr = 1e-4;
    double alpha = 0.1;
    double beta = 0.1;
};

// Warm-up weighted toward the deblur anchor, then the long low-alpha phase
// whose learning rate drops for the final stretch.
inline std::vector<TrainPhase> paper_phases() {
    return {{20, 1e-4, 0.6, 0.3}, {90, 1e-4, 0.1, 0.1}, {30, 1e-5, 0.1, 0.1}};
}

struct TrainConfig {
    std::vector<TrainPhase> phases = paper_phases();
    i64 batch = 64;
    i64 batches_per_epoch = 3000;
    i64 patch_hr = 0;  // 0: scale * 48
    AugmentConfig aug;
    KernelFamily family = KernelFamily::gaussian_sm;
    u64 seed = 1;
    i64 workers = 1;
    i64 val_count = 4;    // held-out tail of the corpus; 0 disables validation
    bool fixed_specs = false;  // overfit mode: corpus image i always gets spec i
    bool true_noise_epsilon = true;  // prefilter from the synthesized noise level

    i64 patch_side(i64 scale) const { return patch_hr > 0 ? patch_hr : scale * 48; }

    void validate(i64 scale) const {
        check(!phases.empty(), "train config: no phases");
        for (const TrainPhase& p : phases) {
            check(p.epochs >= 1, "train config: phase epochs must be >= 1");
            check(p.lr > 0.0, "train config: lr must be positive");
            check(p.alpha > 0.0 && p.beta > 0.0 && p.alpha + p.beta < 1.0,
                  "train config: weights must satisfy alpha,beta > 0, alpha+beta < 1");
        }
        check(batch >= 1 && batches_per_epoch >= 1, "train config: batch sizes must be >= 1");
        check(patch_side(scale) % scale == 0, "train config: patch side must divide by scale");
        check(workers >= 1, "train config: workers must be >= 1");
        check(val_count >= 0, "train config: val_count must be >= 0");
    }
};

// Largest kernel the sampled family can produce at this scale.
inline i64 family_max_kernel_side(KernelFamily family, i64 scale) {
    check(scale == 2 || scale == 4, "family_max_kernel_side: scale must be 2 or 4");
    if (family == KernelFamily::gaussian_sm) {
        i64 g = gaussian_kernel(scale == 2 ? 2.0 : 4.0).h;
        double len = scale == 2 ? 9.0 : 15.0;
        i64 m = 2 * static_cast<i64>(std::ceil((len - 1.0) / 2.0)) + 1;
        return g + m - 1;
    }
    i64 g = gaussian_kernel(scale == 2 ? 1.0 : 2.0).h;
    return g + 45 - 1;  // trajectory canvas cap
}

// Shared-system least-squares fitter for the sampled kernel family, keyed
// off fixed synthetic probe patches so every worker fits identically.
inline KlowFitter make_klow_fitter(i64 scale, KernelFamily family, u64 seed) {
    i64 side = scale == 2 ? 192 : 256;
    Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<Tensor> probes = {synth_image(rng, side, side)};
    auto solver = std::make_shared<KlowSolver>(scale, probes,
                                               family_max_kernel_side(family, scale));
    return [solver](const BlurKernel& k, i64, const Tensor&) { return solver->fit(k).klow; };
}

struct Batch {
    Tensor x;          // (N,3,H,W) clean HR patches
    Tensor y;          // (N,3,h,w) degraded LR
    Tensor y_w;        // (N,3,h,w) Wiener-prefiltered LR
    Tensor y_anchor;   // (N,3,h,w) anchor targets
    Tensor x_down;     // (N,3,h,w) plain downsampled clean patches
    std::vector<SamplePair> samples;
};

namespace detail {

inline void synth_one(const std::vector<Tensor>& corpus, const TrainConfig& cfg, i64 scale,
                      const KlowFitter& fitter, i64 gsi, SamplePair& out, Tensor& y_w) {
    Rng rng = Rng::for_sample(cfg.seed, static_cast<u64>(gsi));
    i64 ph = cfg.patch_side(scale);
    i64 pick = cfg.fixed_specs ? gsi % static_cast<i64>(corpus.size())
                               : rng.uniform_int(0, static_cast<i64>(corpus.size()) - 1);
    Tensor img = augment(corpus[static_cast<size_t>(pick)], rng, cfg.aug, ph);
    i64 H = img.dim(1), W = img.dim(2);
    i64 r0 = H == ph ? 0 : rng.uniform_int(0, H - ph);
    i64 c0 = W == ph ? 0 : rng.uniform_int(0, W - ph);
    Tensor patch = Tensor::zeros({img.dim(0), ph, ph});
    for (i64 c = 0; c < img.dim(0); ++c)
        for (i64 i = 0; i < ph; ++i)
            for (i64 j = 0; j < ph; ++j)
                patch.data()[(c * ph + i) * ph + j] =
                    img.data()[(c * H + r0 + i) * W + c0 + j];

    DegradationSpec spec;
    if (cfg.fixed_specs) {
        Rng spec_rng =
            Rng::for_sample(cfg.seed ^ 0xa5a5a5a5a5a5a5a5ULL, static_cast<u64>(pick));
        spec = sample_spec(spec_rng, cfg.family, scale);
        spec.master_seed = spec_rng.next_u64();
    } else {
        spec = sample_spec(rng, cfg.family, scale);
        spec.master_seed = rng.next_u64();
    }

    out = synthesize(patch, spec, fitter);
    WienerConfig wc;
    wc.epsilon = wiener_epsilon(cfg.true_noise_epsilon ? spec.noise_std
                                                       : estimate_noise_std(out.y));
    y_w = wiener(out.y, out.klow, wc);
}

inline Batch stack_batch(std::vector<SamplePair> samples, const std::vector<Tensor>& yw,
                         i64 scale) {
    NoGradGuard ng;
    i64 N = static_cast<i64>(samples.size());
    i64 ph = samples[0].x.dim(1), pl = ph / scale;
    Batch b;
    b.x = Tensor::zeros({N, 3, ph, ph});
    b.y = Tensor::zeros({N, 3, pl, pl});
    b.y_w = Tensor::zeros({N, 3, pl, pl});
    b.y_anchor = Tensor::zeros({N, 3, pl, pl});
    b.x_down = Tensor::zeros({N, 3, pl, pl});
    for (i64 i = 0; i < N; ++i) {
        const SamplePair& sp = samples[static_cast<size_t>(i)];
        std::copy(sp.x.values().begin(), sp.x.values().end(),
                  b.x.values().begin() + i * 3 * ph * ph);
        std::copy(sp.y.values().begin(), sp.y.values().end(),
                  b.y.values().begin() + i * 3 * pl * pl);
        std::copy(yw[static_cast<size_t>(i)].values().begin(),
                  yw[static_cast<size_t>(i)].values().end(),
                  b.y_w.values().begin() + i * 3 * pl * pl);
        std::copy(sp.y_anchor.values().begin(), sp.y_anchor.values().end(),
                  b.y_anchor.values().begin() + i * 3 * pl * pl);
        Tensor xd = bicubic_downsample(sp.x, scale);
        std::copy(xd.values().begin(), xd.values().end(),
                  b.x_down.values().begin() + i * 3 * pl * pl);
    }
    b.samples = std::move(samples);
    return b;
}

}  // namespace detail

// Deterministic batch synthesis: every sample derives its own rng stream
// from (seed, global sample index), so the result is byte-identical for any
// worker count.
inline Batch make_batch(const std::vector<Tensor>& corpus, const TrainConfig& cfg, i64 scale,
                        const KlowFitter& fitter, i64 batch_index) {
    check(!corpus.empty(), "make_batch: corpus is empty");
    cfg.validate(scale);
    i64 N = cfg.batch;
    Batch b;
    b.samples.resize(static_cast<size_t>(N));
    std::vector<Tensor> yw(static_cast<size_t>(N));
    i64 gsi0 = batch_index * N;

    auto run = [&](i64 lo, i64 hi) {
        for (i64 i = lo; i < hi; ++i)
            detail::synth_one(corpus, cfg, scale, fitter, gsi0 + i,
                              b.samples[static_cast<size_t>(i)], yw[static_cast<size_t>(i)]);
    };
    i64 nw = std::min<i64>(cfg.workers, N);
    if (nw <= 1) {
        run(0, N);
    } else {
        std::vector<std::thread> pool;
        i64 chunk = (N + nw - 1) / nw;
        for (i64 w = 0; w < nw; ++w) {
            i64 lo = w * chunk, hi = std::min(N, lo + chunk);
            if (lo < hi) pool.emplace_back(run, lo, hi);
        }
        for (std::thread& t : pool) t.join();
    }
    return detail::stack_batch(std::move(b.samples), yw, scale);
}

// ---- training loop ----

struct LossRow {
    i64 step = 0;
    i64 phase = 0;
    double lr = 0.0;
    double l_d = 0.0, l_u = 0.0, l_f = 0.0, total = 0.0;
};

inline std::string loss_csv_header() { return "step, phase, lr, L_D, L_U, L_F, total"; }

inline std::string loss_csv_row(const LossRow& r) {
    char buf[192];
    std::snprintf(buf, sizeof buf, "%lld, %lld, %.10g, %.10g, %.10g, %.10g, %.10g",
                  static_cast<long long>(r.step), static_cast<long long>(r.phase), r.lr, r.l_d,
                  r.l_u, r.l_f, r.total);
    return buf;
}

struct TrainResult {
    std::vector<LossRow> log;        // one row per step
    std::vector<double> grad_norm;   // global gradient 2-norm per step
    std::vector<double> val_psnr;    // mean held-out PSNR per epoch (empty if disabled)
    i64 steps = 0;
    double wall_seconds = 0.0;
};

// Two-phase (or N-phase) training per the published schedule. Phase
// transitions change only (lr, alpha, beta); optimizer moments persist.
// Loss rows are streamed to log_stream as CSV when given. A non-finite loss
// aborts with a diagnostic.
inline TrainResult train(const CascadeConfig& ccfg, CascadeParams& P,
                         const std::vector<Tensor>& corpus, const TrainConfig& tcfg,
                         std::FILE* log_stream = nullptr) {
    ccfg.validate();
    tcfg.validate(ccfg.scale);
    check(!corpus.empty(), "train: corpus is empty");
    check(static_cast<i64>(corpus.size()) > tcfg.val_count,
          "train: corpus smaller than the validation split");
    auto t0 = std::chrono::steady_clock::now();

    std::vector<Tensor> train_set(corpus.begin(), corpus.end() - tcfg.val_count);
    std::vector<Tensor> val_set(corpus.end() - tcfg.val_count, corpus.end());

    KlowFitter fitter;
    if (ccfg.use_wiener_input) fitter = make_klow_fitter(ccfg.scale, tcfg.family, tcfg.seed);

    i64 ph = tcfg.patch_side(ccfg.scale);
    Projector proj;
    const Projector* proj_ptr = nullptr;
    if (ccfg.use_projection) {
        DownsampleOperator A = make_downsample_operator(ccfg.scale, anchor_kernel(ccfg.scale));
        proj = exact_projector(A, ph, ph);
        proj_ptr = &proj;
    }

    // fixed validation samples: one frozen spec per held-out image
    std::vector<SamplePair> val_samples;
    std::vector<Tensor> val_yw;
    for (size_t i = 0; i < val_set.size(); ++i) {
        Rng vr = Rng::for_sample(tcfg.seed ^ 0x76e15d3efefdcbbfULL, static_cast<u64>(i));
        const Tensor& img = val_set[i];
        check(img.dim(1) >= ph && img.dim(2) >= ph, "train: validation image below patch size");
        i64 r0 = (img.dim(1) - ph) / 2, c0 = (img.dim(2) - ph) / 2;
        Tensor patch = Tensor::zeros({img.dim(0), ph, ph});
        for (i64 c = 0; c < img.dim(0); ++c)
            for (i64 a = 0; a < ph; ++a)
                for (i64 bj = 0; bj < ph; ++bj)
                    patch.data()[(c * ph + a) * ph + bj] =
                        img.data()[(c * img.dim(1) + r0 + a) * img.dim(2) + c0 + bj];
        DegradationSpec spec = sample_spec(vr, tcfg.family, ccfg.scale);
        spec.master_seed = vr.next_u64();
        SamplePair sp = synthesize(patch, spec, fitter);
        WienerConfig wc;
        wc.epsilon = wiener_epsilon(tcfg.true_noise_epsilon ? spec.noise_std
                                                            : estimate_noise_std(sp.y));
        val_yw.push_back(ccfg.use_wiener_input ? wiener(sp.y, sp.klow, wc) : Tensor());
        val_samples.push_back(std::move(sp));
    }

    // fixed-sample fast path: with augmentation off and patches equal to the
    // corpus images, the sample for stream index g depends only on
    // g mod corpus size, so synthesis runs once per image
    bool cacheable = tcfg.fixed_specs && !tcfg.aug.flip && !tcfg.aug.rotate && !tcfg.aug.rescale;
    for (const Tensor& t : train_set)
        cacheable = cacheable && t.dim(1) == ph && t.dim(2) == ph;
    std::vector<SamplePair> cache_sp;
    std::vector<Tensor> cache_yw;
    if (cacheable) {
        cache_sp.resize(train_set.size());
        cache_yw.resize(train_set.size());
        for (size_t i = 0; i < train_set.size(); ++i)
            detail::synth_one(train_set, tcfg, ccfg.scale, fitter, static_cast<i64>(i),
                              cache_sp[i], cache_yw[i]);
    }
    auto get_batch = [&](i64 batch_index) {
        if (!cacheable) return make_batch(train_set, tcfg, ccfg.scale, fitter, batch_index);
        i64 n = static_cast<i64>(train_set.size());
        std::vector<SamplePair> sp(static_cast<size_t>(tcfg.batch));
        std::vector<Tensor> yw(static_cast<size_t>(tcfg.batch));
        for (i64 i = 0; i < tcfg.batch; ++i) {
            size_t idx = static_cast<size_t>((batch_index * tcfg.batch + i) % n);
            sp[static_cast<size_t>(i)] = cache_sp[idx];
            yw[static_cast<size_t>(i)] = cache_yw[idx];
        }
        return detail::stack_batch(std::move(sp), yw, ccfg.scale);
    };

    TrainResult res;
    Adam opt;
    if (log_stream) std::fprintf(log_stream, "%s\n", loss_csv_header().c_str());

    i64 step = 0;
    for (size_t phase = 0; phase < tcfg.phases.size(); ++phase) {
        const TrainPhase& p = tcfg.phases[phase];
        opt.config().lr = p.lr;
        for (i64 epoch = 0; epoch < p.epochs; ++epoch) {
            for (i64 bi = 0; bi < tcfg.batches_per_epoch; ++bi, ++step) {
                Batch b = get_batch(step);
                P.store.zero_grad();
                CascadeOutput out = cascade_forward(ccfg, P, b.y, b.y_w, proj_ptr);
                const Tensor& ld_target = ccfg.use_pi_anchor ? b.y_anchor : b.x_down;
                Tensor ld = charbonnier_sum(out.y_D, ld_target, 1e-3);
                Tensor lu = charbonnier_sum(out.x_U, b.x, 1e-3);
                Tensor lf = charbonnier_sum(out.x_hat, b.x, 1e-3);
                Tensor loss = add(add(mul_scalar(ld, p.alpha), mul_scalar(lu, p.beta)),
                                  mul_scalar(lf, 1.0 - p.alpha - p.beta));
                LossRow row{step, static_cast<i64>(phase), p.lr,    ld.item(),
                            lu.item(), lf.item(),           loss.item()};
                if (!std::isfinite(row.total))
                    throw numeric_error("train: non-finite loss at step " +
                                        std::to_string(step) + " (phase " +
                                        std::to_string(phase) + ")");
                backward(loss);
                double gn = 0.0;
                for (auto& [name, t] : P.store.items)
                    if (t.node().requires_grad)
                        for (double g : t.node().grad) gn += g * g;
                res.grad_norm.push_back(std::sqrt(gn));
                opt.step(P.store);
                res.log.push_back(row);
                if (log_stream)
                    std::fprintf(log_stream, "%s\n", loss_csv_row(row).c_str());
            }
            if (!val_samples.empty()) {
                NoGradGuard ng;
                double acc = 0.0;
                for (size_t i = 0; i < val_samples.size(); ++i) {
                    const SamplePair& sp = val_samples[i];
                    auto lift = [](const Tensor& t) {
                        return reshape(t, {1, t.dim(0), t.dim(1), t.dim(2)});
                    };
                    CascadeOutput out = cascade_forward(
                        ccfg, P, lift(sp.y),
                        val_yw[i].defined() ? lift(val_yw[i]) : Tensor(), proj_ptr);
                    acc += psnr(out.x_hat, lift(sp.x));
                }
                res.val_psnr.push_back(acc / double(val_samples.size()));
            }
        }
    }
    res.steps = step;
    res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

}  // namespace caduf
