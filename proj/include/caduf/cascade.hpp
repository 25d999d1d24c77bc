#pragma once

#include "caduf/metrics.hpp"
#include "caduf/operator_fit.hpp"
#include "caduf/wiener.hpp"

namespace caduf {

// The four-stage cascade: motion-corrected extraction E, deblurring D,
// projection-constrained upsampling U, and refinement F. Feature tensors
// live at LR dims; only the dynamic-filter heads cross into HR.
struct CascadeConfig {
    i64 scale = 2;
    i64 width = 64;        // trunk width; extractor uses width at scale 1, width/2 below
    i64 nb_d = 8;
    i64 nb_u = 16;
    i64 nb_f = 4;
    i64 dilation = 2;
    i64 p = 2;             // dynamic filter half-size, (2p+1)^2 taps
    bool use_wiener_input = true;
    bool use_e = true;
    bool use_pi_anchor = true;      // trainer: anchor the D loss to the clean target
    bool use_projection = true;
    bool propagate_features = true; // false: sub-modules exchange images only
    bool use_d = true;
    bool use_f = true;
    bool freeze_alignment = false;  // offsets pinned to 0, modulation to 1

    i64 half_width() const { return width / 2; }
    i64 taps() const { return (2 * p + 1) * (2 * p + 1); }

    bool d_takes_features() const { return propagate_features && use_e; }
    i64 u_feat_count() const {
        return propagate_features ? i64(use_e) + i64(use_d) : 0;
    }
    i64 f_feat_count() const {
        return propagate_features ? i64(use_e) + i64(use_d) + 1 : 0;
    }

    void validate() const {
        check(scale >= 1, "cascade: scale must be >= 1");
        check(width >= 8, "cascade: width must be >= 8");
        check(width % 2 == 0, "cascade: width must be even");
        check(width % (scale * scale) == 0,
              "cascade: width must be divisible by scale^2 for the HR residual head");
        check(nb_d >= 1 && nb_u >= 1 && nb_f >= 1, "cascade: block counts must be >= 1");
        check(dilation >= 1 && p >= 1, "cascade: dilation and p must be >= 1");
    }
};

struct CascadeParams {
    ParamStore store;
    // extractor: one branch's weights, shared by the y and y_w branches
    Tensor e_c1_w, e_c1_b;
    Tensor e_d2_w, e_d2_b, e_c2_w, e_c2_b;
    Tensor e_d3_w, e_d3_b, e_c3_w, e_c3_b;
    Tensor e_u2_w, e_u2_b, e_m2_w, e_m2_b;
    Tensor e_u1_w, e_u1_b, e_m1_w, e_m1_b;
    Tensor e_r1_w, e_r1_b, e_r2_w, e_r2_b;
    Tensor e_off1_w, e_off1_b, e_off2_w, e_off2_b, e_dc_w;
    Tensor e_fuse_w, e_fuse_b;
    // deblur
    Tensor d_entry_w, d_entry_b;
    std::vector<Tensor> d_a_w, d_a_b, d_b_w, d_b_b;
    Tensor d_c_w, d_c_b, d_r_w, d_r_b;
    // upsample
    Tensor u_entry_w, u_entry_b, u_fuse_w, u_fuse_b;
    std::vector<Tensor> u_a_w, u_a_b, u_b_w, u_b_b;
    Tensor u_c_w, u_c_b, u_r_w, u_r_b;
    // refine
    Tensor f_entry_w, f_entry_b, f_fuse_w, f_fuse_b;
    std::vector<Tensor> f_a_w, f_a_b, f_b_w, f_b_b;
    Tensor f_c_w, f_c_b, f_r_w, f_r_b;
};

namespace detail {

inline Tensor reg_conv(ParamStore& ps, const std::string& name, i64 cout, i64 cin, i64 k,
                       Rng& rng, bool zero = false) {
    Tensor w = Tensor::zeros({cout, cin, k, k});
    if (!zero) init_fan_in_uniform(w, rng);
    return ps.add(name + ".w", w);
}

inline Tensor reg_bias(ParamStore& ps, const std::string& name, i64 cout) {
    return ps.add(name + ".b", Tensor::zeros({cout}));
}

}  // namespace detail

inline CascadeParams make_cascade_params(const CascadeConfig& cfg, u64 seed) {
    cfg.validate();
    CascadeParams P;
    ParamStore& ps = P.store;
    Rng rng(seed);
    i64 W = cfg.width, W2 = cfg.half_width(), s = cfg.scale, T = cfg.taps();

    if (cfg.use_e) {
        P.e_c1_w = detail::reg_conv(ps, "e.c1", W, 3, 5, rng);
        P.e_c1_b = detail::reg_bias(ps, "e.c1", W);
        P.e_d2_w = detail::reg_conv(ps, "e.d2", W2, W, 3, rng);
        P.e_d2_b = detail::reg_bias(ps, "e.d2", W2);
        P.e_c2_w = detail::reg_conv(ps, "e.c2", W2, W2, 3, rng);
        P.e_c2_b = detail::reg_bias(ps, "e.c2", W2);
        P.e_d3_w = detail::reg_conv(ps, "e.d3", W2, W2, 3, rng);
        P.e_d3_b = detail::reg_bias(ps, "e.d3", W2);
        P.e_c3_w = detail::reg_conv(ps, "e.c3", W2, W2, 3, rng);
        P.e_c3_b = detail::reg_bias(ps, "e.c3", W2);
        P.e_u2_w = detail::reg_conv(ps, "e.u2", 4 * W2, W2, 3, rng);
        P.e_u2_b = detail::reg_bias(ps, "e.u2", 4 * W2);
        P.e_m2_w = detail::reg_conv(ps, "e.m2", W2, 2 * W2, 3, rng);
        P.e_m2_b = detail::reg_bias(ps, "e.m2", W2);
        P.e_u1_w = detail::reg_conv(ps, "e.u1", 4 * W, W2, 3, rng);
        P.e_u1_b = detail::reg_bias(ps, "e.u1", 4 * W);
        P.e_m1_w = detail::reg_conv(ps, "e.m1", W, 2 * W, 3, rng);
        P.e_m1_b = detail::reg_bias(ps, "e.m1", W);
        P.e_r1_w = detail::reg_conv(ps, "e.r1", W, W, 3, rng);
        P.e_r1_b = detail::reg_bias(ps, "e.r1", W);
        P.e_r2_w = detail::reg_conv(ps, "e.r2", W, W, 3, rng);
        P.e_r2_b = detail::reg_bias(ps, "e.r2", W);
        P.e_off1_w = detail::reg_conv(ps, "e.off1", W, 2 * W, 3, rng);
        P.e_off1_b = detail::reg_bias(ps, "e.off1", W);
        P.e_off2_w = detail::reg_conv(ps, "e.off2", 27, W, 3, rng, /*zero=*/true);
        P.e_off2_b = detail::reg_bias(ps, "e.off2", 27);
        P.e_dc_w = detail::reg_conv(ps, "e.dc", W, W, 3, rng);
        P.e_fuse_w = detail::reg_conv(ps, "e.fuse", W, 2 * W, 1, rng);
        P.e_fuse_b = detail::reg_bias(ps, "e.fuse", W);
    }

    if (cfg.use_d) {
        if (!cfg.d_takes_features()) {
            P.d_entry_w = detail::reg_conv(ps, "d.entry", W, 3, 3, rng);
            P.d_entry_b = detail::reg_bias(ps, "d.entry", W);
        }
        for (i64 i = 0; i < cfg.nb_d; ++i) {
            std::string n = "d.block" + std::to_string(i);
            P.d_a_w.push_back(detail::reg_conv(ps, n + ".a", W, W, 3, rng));
            P.d_a_b.push_back(detail::reg_bias(ps, n + ".a", W));
            P.d_b_w.push_back(detail::reg_conv(ps, n + ".b", W, W, 3, rng));
            P.d_b_b.push_back(detail::reg_bias(ps, n + ".b", W));
        }
        P.d_c_w = detail::reg_conv(ps, "d.head_c", T, W, 3, rng, true);
        P.d_c_b = detail::reg_bias(ps, "d.head_c", T);
        P.d_c_b.data()[T / 2] = 1.0;  // identity filter at init
        P.d_r_w = detail::reg_conv(ps, "d.head_r", 3, W, 3, rng, true);
        P.d_r_b = detail::reg_bias(ps, "d.head_r", 3);
    }

    if (cfg.u_feat_count() == 0) {
        P.u_entry_w = detail::reg_conv(ps, "u.entry", W, 3, 3, rng);
        P.u_entry_b = detail::reg_bias(ps, "u.entry", W);
    } else {
        P.u_fuse_w = detail::reg_conv(ps, "u.fuse", W, cfg.u_feat_count() * W, 1, rng);
        P.u_fuse_b = detail::reg_bias(ps, "u.fuse", W);
    }
    for (i64 i = 0; i < cfg.nb_u; ++i) {
        std::string n = "u.block" + std::to_string(i);
        P.u_a_w.push_back(detail::reg_conv(ps, n + ".a", W, W, 3, rng));
        P.u_a_b.push_back(detail::reg_bias(ps, n + ".a", W));
        P.u_b_w.push_back(detail::reg_conv(ps, n + ".b", W, W, 3, rng));
        P.u_b_b.push_back(detail::reg_bias(ps, n + ".b", W));
    }
    P.u_c_w = detail::reg_conv(ps, "u.head_c", T * s * s, W, 3, rng);
    P.u_c_b = detail::reg_bias(ps, "u.head_c", T * s * s);
    for (i64 i = 0; i < T * s * s; ++i)  // nearest-neighbour warm start
        if (i / (s * s) == T / 2) P.u_c_b.data()[i] = 1.0;
    P.u_r_w = detail::reg_conv(ps, "u.head_r", 3, W / (s * s), 3, rng);
    P.u_r_b = detail::reg_bias(ps, "u.head_r", 3);

    if (cfg.use_f) {
        if (cfg.f_feat_count() == 0) {
            P.f_entry_w = detail::reg_conv(ps, "f.entry", W, 3 * s * s, 3, rng);
            P.f_entry_b = detail::reg_bias(ps, "f.entry", W);
        } else {
            P.f_fuse_w = detail::reg_conv(ps, "f.fuse", W, cfg.f_feat_count() * W, 1, rng);
            P.f_fuse_b = detail::reg_bias(ps, "f.fuse", W);
        }
        for (i64 i = 0; i < cfg.nb_f; ++i) {
            std::string n = "f.block" + std::to_string(i);
            P.f_a_w.push_back(detail::reg_conv(ps, n + ".a", W, W, 3, rng));
            P.f_a_b.push_back(detail::reg_bias(ps, n + ".a", W));
            P.f_b_w.push_back(detail::reg_conv(ps, n + ".b", W, W, 3, rng));
            P.f_b_b.push_back(detail::reg_bias(ps, n + ".b", W));
        }
        P.f_c_w = detail::reg_conv(ps, "f.head_c", T * s * s, W, 3, rng, true);
        P.f_c_b = detail::reg_bias(ps, "f.head_c", T * s * s);
        for (i64 i = 0; i < T * s * s; ++i)
            if (i / (s * s) == T / 2) P.f_c_b.data()[i] = 1.0;
        P.f_r_w = detail::reg_conv(ps, "f.head_r", 3, W / (s * s), 3, rng, true);
        P.f_r_b = detail::reg_bias(ps, "f.head_r", 3);
    }
    return P;
}

// Analytic parameter count for a config; must equal the store's total.
inline i64 cascade_param_count(const CascadeConfig& cfg) {
    i64 W = cfg.width, W2 = cfg.half_width(), s = cfg.scale, T = cfg.taps();
    auto conv = [](i64 cout, i64 cin, i64 k) { return cout * cin * k * k + cout; };
    i64 n = 0;
    if (cfg.use_e) {
        n += conv(W, 3, 5);                            // c1
        n += conv(W2, W, 3) + conv(W2, W2, 3);         // d2, c2
        n += conv(W2, W2, 3) + conv(W2, W2, 3);        // d3, c3
        n += conv(4 * W2, W2, 3) + conv(W2, 2 * W2, 3);  // u2, m2
        n += conv(4 * W, W2, 3) + conv(W, 2 * W, 3);   // u1, m1
        n += 2 * conv(W, W, 3);                        // r1, r2
        n += conv(W, 2 * W, 3) + conv(27, W, 3);       // off1, off2
        n += W * W * 3 * 3;                            // dc (no bias)
        n += conv(W, 2 * W, 1);                        // fuse
    }
    if (cfg.use_d) {
        if (!cfg.d_takes_features()) n += conv(W, 3, 3);
        n += cfg.nb_d * 2 * conv(W, W, 3);
        n += conv(T, W, 3) + conv(3, W, 3);
    }
    if (cfg.u_feat_count() == 0) n += conv(W, 3, 3);
    else n += conv(W, cfg.u_feat_count() * W, 1);
    n += cfg.nb_u * 2 * conv(W, W, 3);
    n += conv(T * s * s, W, 3) + conv(3, W / (s * s), 3);
    if (cfg.use_f) {
        if (cfg.f_feat_count() == 0) n += conv(W, 3 * s * s, 3);
        else n += conv(W, cfg.f_feat_count() * W, 1);
        n += cfg.nb_f * 2 * conv(W, W, 3);
        n += conv(T * s * s, W, 3) + conv(3, W / (s * s), 3);
    }
    return n;
}

struct CascadeOutput {
    Tensor y_w;    // the input actually filtered (y when the prefilter is off)
    Tensor h_E, h_D, h_U;
    Tensor y_D;    // LR
    Tensor x_U;    // HR
    Tensor x_hat;  // HR
};

namespace detail {

inline Tensor conv_lrelu(const Tensor& x, const Tensor& w, const Tensor& b, i64 stride = 1,
                         i64 dil = 1) {
    return leaky_relu(conv2d(x, w, b, stride, dil, true), 0.2);
}

inline Tensor res_block(const Tensor& x, const Tensor& wa, const Tensor& ba, const Tensor& wb,
                        const Tensor& bb, i64 dil) {
    Tensor t = conv_lrelu(x, wa, ba, 1, dil);
    return add(x, conv2d(t, wb, bb));
}

inline Tensor extract_branch(const CascadeParams& P, const Tensor& img) {
    Tensor f1 = conv_lrelu(img, P.e_c1_w, P.e_c1_b);
    Tensor t2 = conv_lrelu(f1, P.e_d2_w, P.e_d2_b, 2);
    Tensor f2 = conv_lrelu(t2, P.e_c2_w, P.e_c2_b);
    Tensor t3 = conv_lrelu(f2, P.e_d3_w, P.e_d3_b, 2);
    Tensor f3 = conv_lrelu(t3, P.e_c3_w, P.e_c3_b);
    Tensor u2 = leaky_relu(pixel_shuffle(conv2d(f3, P.e_u2_w, P.e_u2_b), 2), 0.2);
    Tensor g2 = conv_lrelu(concat_channels({f2, u2}), P.e_m2_w, P.e_m2_b);
    Tensor u1 = leaky_relu(pixel_shuffle(conv2d(g2, P.e_u1_w, P.e_u1_b), 2), 0.2);
    Tensor g1 = conv_lrelu(concat_channels({f1, u1}), P.e_m1_w, P.e_m1_b);
    Tensor r1 = conv_lrelu(g1, P.e_r1_w, P.e_r1_b);
    return conv_lrelu(r1, P.e_r2_w, P.e_r2_b);
}

}  // namespace detail

// Multi-scale extraction with deformable alignment of the blurred branch
// toward the prefiltered branch.
inline Tensor extract_E(const CascadeConfig& cfg, const CascadeParams& P, const Tensor& y,
                        const Tensor& y_w) {
    check_same_shape(y, y_w, "extract_E");
    check(y.dim(2) % 4 == 0 && y.dim(3) % 4 == 0,
          "extract_E: input dims must be divisible by 4");
    Tensor by = detail::extract_branch(P, y);
    Tensor bw = detail::extract_branch(P, y_w);
    Tensor offsets, modulation;
    if (cfg.freeze_alignment) {
        offsets = Tensor::zeros({by.dim(0), 18, by.dim(2), by.dim(3)});
        modulation = Tensor::filled({by.dim(0), 9, by.dim(2), by.dim(3)}, 1.0);
    } else {
        Tensor oh = detail::conv_lrelu(concat_channels({by, bw}), P.e_off1_w, P.e_off1_b);
        Tensor pred = conv2d(oh, P.e_off2_w, P.e_off2_b);
        offsets = channel_slice(pred, 0, 18);
        modulation = sigmoid(channel_slice(pred, 18, 27));
    }
    Tensor aligned = leaky_relu(deformable_conv2d(by, P.e_dc_w, offsets, modulation), 0.2);
    return detail::conv_lrelu(concat_channels({aligned, bw}), P.e_fuse_w, P.e_fuse_b);
}

// Deblur: residual trunk over the incoming features, dynamic-filter head
// applied to y_w at LR scale.
inline std::pair<Tensor, Tensor> run_D(const CascadeConfig& cfg, const CascadeParams& P,
                                       const Tensor& h_in, const Tensor& y_w) {
    Tensor h = h_in.defined() ? h_in : detail::conv_lrelu(y_w, P.d_entry_w, P.d_entry_b);
    for (i64 i = 0; i < cfg.nb_d; ++i)
        h = detail::res_block(h, P.d_a_w[size_t(i)], P.d_a_b[size_t(i)], P.d_b_w[size_t(i)],
                              P.d_b_b[size_t(i)], cfg.dilation);
    Tensor c = conv2d(h, P.d_c_w, P.d_c_b);
    Tensor r = conv2d(h, P.d_r_w, P.d_r_b);
    Tensor y_d = dynamic_local_filter(y_w, c, r, cfg.p, 1);
    return {h, y_d};
}

// Upsample: fused features, residual trunk, dynamic filters pixel-shuffled
// to HR, then (optionally) the data-consistency projection.
inline std::pair<Tensor, Tensor> run_U(const CascadeConfig& cfg, const CascadeParams& P,
                                       const Tensor& h_e, const Tensor& h_d, const Tensor& y_d,
                                       const Projector* proj) {
    check(!cfg.use_projection || proj != nullptr,
          "run_U: projection enabled but no projector given");
    std::vector<Tensor> feats;
    if (h_e.defined()) feats.push_back(h_e);
    if (h_d.defined()) feats.push_back(h_d);
    Tensor h;
    if (feats.empty()) h = detail::conv_lrelu(y_d, P.u_entry_w, P.u_entry_b);
    else h = detail::conv_lrelu(feats.size() == 1 ? feats[0] : concat_channels(feats),
                                P.u_fuse_w, P.u_fuse_b);
    for (i64 i = 0; i < cfg.nb_u; ++i)
        h = detail::res_block(h, P.u_a_w[size_t(i)], P.u_a_b[size_t(i)], P.u_b_w[size_t(i)],
                              P.u_b_b[size_t(i)], cfg.dilation);
    Tensor c = pixel_shuffle(conv2d(h, P.u_c_w, P.u_c_b), cfg.scale);
    Tensor r = conv2d(pixel_shuffle(h, cfg.scale), P.u_r_w, P.u_r_b);
    Tensor p_out = dynamic_local_filter(y_d, c, r, cfg.p, cfg.scale);
    Tensor x_u = (cfg.use_projection && proj) ? project(p_out, y_d, *proj) : p_out;
    return {h, x_u};
}

// Refine: fused features, residual trunk, dynamic filtering of x_U with HR
// neighborhoods.
inline Tensor run_F(const CascadeConfig& cfg, const CascadeParams& P, const Tensor& h_e,
                    const Tensor& h_d, const Tensor& h_u, const Tensor& x_u) {
    std::vector<Tensor> feats;
    if (h_e.defined()) feats.push_back(h_e);
    if (h_d.defined()) feats.push_back(h_d);
    if (h_u.defined()) feats.push_back(h_u);
    Tensor h;
    if (feats.empty())
        h = detail::conv_lrelu(pixel_unshuffle(x_u, cfg.scale), P.f_entry_w, P.f_entry_b);
    else
        h = detail::conv_lrelu(feats.size() == 1 ? feats[0] : concat_channels(feats),
                               P.f_fuse_w, P.f_fuse_b);
    for (i64 i = 0; i < cfg.nb_f; ++i)
        h = detail::res_block(h, P.f_a_w[size_t(i)], P.f_a_b[size_t(i)], P.f_b_w[size_t(i)],
                              P.f_b_b[size_t(i)], cfg.dilation);
    Tensor c = pixel_shuffle(conv2d(h, P.f_c_w, P.f_c_b), cfg.scale);
    Tensor r = conv2d(pixel_shuffle(h, cfg.scale), P.f_r_w, P.f_r_b);
    return dynamic_local_filter(x_u, c, r, cfg.p, 1);
}

// Batched forward over (N,3,H,W) inputs with a precomputed prefiltered
// input. Flags reroute the stages for the ablation family.
inline CascadeOutput cascade_forward(const CascadeConfig& cfg, const CascadeParams& P,
                                     const Tensor& y, const Tensor& y_w_in,
                                     const Projector* proj) {
    cfg.validate();
    check(y.rank() == 4 && y.dim(1) == 3, "cascade: input must be (N,3,H,W)");
    Tensor y_w = cfg.use_wiener_input ? y_w_in : y;
    check(y_w.defined(), "cascade: prefiltered input missing");
    check_same_shape(y, y_w, "cascade");

    CascadeOutput out;
    out.y_w = y_w;
    if (cfg.use_e) out.h_E = extract_E(cfg, P, y, y_w);

    Tensor d_in = cfg.d_takes_features() ? out.h_E : Tensor();
    if (cfg.use_d) {
        auto [hd, yd] = run_D(cfg, P, d_in, y_w);
        out.h_D = hd;
        out.y_D = yd;
    } else {
        out.y_D = y_w;
    }

    Tensor ue = (cfg.propagate_features && cfg.use_e) ? out.h_E : Tensor();
    Tensor ud = (cfg.propagate_features && cfg.use_d) ? out.h_D : Tensor();
    auto [hu, xu] = run_U(cfg, P, ue, ud, out.y_D, proj);
    out.h_U = hu;
    out.x_U = xu;

    if (cfg.use_f) {
        Tensor uf = cfg.propagate_features ? out.h_U : Tensor();
        out.x_hat = run_F(cfg, P, ue, ud, uf, out.x_U);
    } else {
        out.x_hat = out.x_U;
    }
    return out;
}

// Single-image forward: runs the prefilter internally with the default
// epsilon rule.
inline CascadeOutput cascade_forward(const CascadeConfig& cfg, const CascadeParams& P,
                                     const Tensor& y, const BlurKernel& k_l,
                                     const Projector* proj) {
    check(y.rank() == 3, "cascade: single-image input must be (C,H,W)");
    auto lift = [](const Tensor& t) { return reshape(t, {1, t.dim(0), t.dim(1), t.dim(2)}); };
    Tensor y_w;
    if (cfg.use_wiener_input) {
        WienerConfig wc;
        wc.epsilon = wiener_epsilon(estimate_noise_std(y));
        y_w = lift(wiener(y, k_l, wc));
    }
    return cascade_forward(cfg, P, lift(y), y_w, proj);
}

// Composite training loss: alpha*L_D + beta*L_U + (1-alpha-beta)*L_F with
// Charbonnier terms (sum reduction).
inline Tensor caduf_loss(const CascadeOutput& out, const Tensor& y_anchor, const Tensor& x,
                         double alpha, double beta, double eps = 1e-3) {
    check(alpha > 0.0 && beta > 0.0 && alpha + beta < 1.0,
          "caduf_loss: weights must satisfy alpha,beta > 0 and alpha+beta < 1");
    Tensor ld = charbonnier_sum(out.y_D, y_anchor, eps);
    Tensor lu = charbonnier_sum(out.x_U, x, eps);
    Tensor lf = charbonnier_sum(out.x_hat, x, eps);
    return add(add(mul_scalar(ld, alpha), mul_scalar(lu, beta)),
               mul_scalar(lf, 1.0 - alpha - beta));
}

// Analytic multiply-accumulate count of one forward pass at the given LR
// dims (network only; the prefilter's FFT cost is separate).
inline i64 cascade_macs(const CascadeConfig& cfg, i64 hl, i64 wl) {
    cfg.validate();
    i64 W = cfg.width, W2 = cfg.half_width(), s = cfg.scale, T = cfg.taps();
    i64 h2 = hl / 2, w2 = wl / 2, h4 = hl / 4, w4 = wl / 4;
    i64 hh = hl * s, wh = wl * s;
    i64 n = 0;
    if (cfg.use_e) {
        i64 branch = 0;
        branch += conv_macs(3, W, 5, 5, hl, wl);
        branch += conv_macs(W, W2, 3, 3, h2, w2) + conv_macs(W2, W2, 3, 3, h2, w2);
        branch += conv_macs(W2, W2, 3, 3, h4, w4) + conv_macs(W2, W2, 3, 3, h4, w4);
        branch += conv_macs(W2, 4 * W2, 3, 3, h4, w4) + conv_macs(2 * W2, W2, 3, 3, h2, w2);
        branch += conv_macs(W2, 4 * W, 3, 3, h2, w2) + conv_macs(2 * W, W, 3, 3, hl, wl);
        branch += 2 * conv_macs(W, W, 3, 3, hl, wl);
        n += 2 * branch;
        if (!cfg.freeze_alignment)
            n += conv_macs(2 * W, W, 3, 3, hl, wl) + conv_macs(W, 27, 3, 3, hl, wl);
        n += deformable_macs(W, W, 3, 3, hl, wl);
        n += conv_macs(2 * W, W, 1, 1, hl, wl);
    }
    if (cfg.use_d) {
        if (!cfg.d_takes_features()) n += conv_macs(3, W, 3, 3, hl, wl);
        n += cfg.nb_d * 2 * conv_macs(W, W, 3, 3, hl, wl);
        n += conv_macs(W, T, 3, 3, hl, wl) + conv_macs(W, 3, 3, 3, hl, wl);
        n += dfn_macs(3, cfg.p, hl, wl);
    }
    if (cfg.u_feat_count() == 0) n += conv_macs(3, W, 3, 3, hl, wl);
    else n += conv_macs(cfg.u_feat_count() * W, W, 1, 1, hl, wl);
    n += cfg.nb_u * 2 * conv_macs(W, W, 3, 3, hl, wl);
    n += conv_macs(W, T * s * s, 3, 3, hl, wl) + conv_macs(W / (s * s), 3, 3, 3, hh, wh);
    n += dfn_macs(3, cfg.p, hh, wh);
    if (cfg.use_f) {
        if (cfg.f_feat_count() == 0) n += conv_macs(3 * s * s, W, 3, 3, hl, wl);
        else n += conv_macs(cfg.f_feat_count() * W, W, 1, 1, hl, wl);
        n += cfg.nb_f * 2 * conv_macs(W, W, 3, 3, hl, wl);
        n += conv_macs(W, T * s * s, 3, 3, hl, wl) + conv_macs(W / (s * s), 3, 3, 3, hh, wh);
        n += dfn_macs(3, cfg.p, hh, wh);
    }
    return n;
}

}  // namespace caduf
