#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <numbers>

#include "caduf/adam.hpp"
#include "caduf/degradation.hpp"
#include "caduf/ops.hpp"

namespace caduf {

// The degradation operator A: blur by the anchor kernel, then antialiased
// bicubic downsample. Realized as one strided stencil so it is a plain
// linear map; matches the two-stage path exactly away from borders.
struct DownsampleOperator {
    i64 scale = 1;
    BlurKernel kd;
    i64 off_r = 0, off_c = 0;  // offset of stencil[0][0] relative to (s*i, s*j)
    i64 sh = 0, sw = 0;
    std::vector<double> stencil;
};

inline DownsampleOperator make_downsample_operator(i64 scale, const BlurKernel& kd) {
    check(scale >= 1, "downsample operator: scale must be >= 1");
    kd.validate();
    i64 first = 0;
    std::vector<double> w = bicubic_down_taps(scale, first);
    i64 len = static_cast<i64>(w.size());
    DownsampleOperator A;
    A.scale = scale;
    A.kd = kd;
    A.sh = len + kd.h - 1;
    A.sw = len + kd.w - 1;
    A.off_r = first - (kd.h - 1) / 2;
    A.off_c = first - (kd.w - 1) / 2;
    A.stencil.assign(static_cast<size_t>(A.sh * A.sw), 0.0);
    // out[i] = sum_m w[m] b[s*i+first+m], b[p] = sum_u kd[u] x[p-u+c]
    // => taps at offset (first + m - u + c) carry kd[u]*w[m]
    for (i64 uy = 0; uy < kd.h; ++uy)
        for (i64 ux = 0; ux < kd.w; ++ux) {
            double kv = kd.k[static_cast<size_t>(uy * kd.w + ux)];
            if (kv == 0.0) continue;
            for (i64 my = 0; my < len; ++my)
                for (i64 mx = 0; mx < len; ++mx)
                    A.stencil[static_cast<size_t>((my - uy + kd.h - 1) * A.sw +
                                                  (mx - ux + kd.w - 1))] +=
                        kv * w[static_cast<size_t>(my)] * w[static_cast<size_t>(mx)];
        }
    return A;
}

namespace detail {

inline void apply_A_plane(const DownsampleOperator& A, const double* src, i64 H, i64 W,
                          double* dst, i64 Hl, i64 Wl) {
    for (i64 i = 0; i < Hl; ++i)
        for (i64 j = 0; j < Wl; ++j) {
            double acc = 0.0;
            for (i64 a = 0; a < A.sh; ++a) {
                i64 y = clamp_val(A.scale * i + A.off_r + a, i64(0), H - 1);
                const double* row = src + y * W;
                const double* st = A.stencil.data() + a * A.sw;
                for (i64 c = 0; c < A.sw; ++c)
                    acc += st[c] * row[clamp_val(A.scale * j + A.off_c + c, i64(0), W - 1)];
            }
            dst[i * Wl + j] = acc;
        }
}

inline void apply_A_plane_adjoint(const DownsampleOperator& A, const double* gout, i64 Hl,
                                  i64 Wl, double* gin, i64 H, i64 W) {
    for (i64 i = 0; i < Hl; ++i)
        for (i64 j = 0; j < Wl; ++j) {
            double g = gout[i * Wl + j];
            if (g == 0.0) continue;
            for (i64 a = 0; a < A.sh; ++a) {
                i64 y = clamp_val(A.scale * i + A.off_r + a, i64(0), H - 1);
                double* row = gin + y * W;
                const double* st = A.stencil.data() + a * A.sw;
                for (i64 c = 0; c < A.sw; ++c)
                    row[clamp_val(A.scale * j + A.off_c + c, i64(0), W - 1)] += st[c] * g;
            }
        }
}

}  // namespace detail

// Differentiable application of A. Accepts (C,H,W) or (N,C,H,W) and keeps
// the rank.
inline Tensor apply_A(const DownsampleOperator& A, const Tensor& x) {
    check(x.rank() == 3 || x.rank() == 4, "apply_A: image must be rank 3 or 4");
    i64 s = A.scale;
    i64 H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
    check(H % s == 0 && W % s == 0, "apply_A: dims must be divisible by the scale");
    i64 B = x.numel() / (H * W);
    i64 Hl = H / s, Wl = W / s;
    Shape out_shape = x.shape();
    out_shape[x.rank() - 2] = Hl;
    out_shape[x.rank() - 1] = Wl;
    std::vector<double> out(static_cast<size_t>(B * Hl * Wl));
    for (i64 b = 0; b < B; ++b)
        detail::apply_A_plane(A, x.data() + b * H * W, H, W, out.data() + b * Hl * Wl, Hl, Wl);
    DownsampleOperator cap = A;
    return make_op(out_shape, std::move(out), {x},
                   [x, cap, B, H, W, Hl, Wl](TensorData& n) {
                       if (!x.node().requires_grad) return;
                       x.node().ensure_grad();
                       for (i64 b = 0; b < B; ++b)
                           detail::apply_A_plane_adjoint(cap, n.grad.data() + b * Hl * Wl, Hl,
                                                         Wl, x.node().grad.data() + b * H * W,
                                                         H, W);
                   });
}

// ---- exact pseudoinverse backend ----

struct ExactPinv {
    i64 scale = 1;
    i64 hh = 0, wh = 0, hl = 0, wl = 0;
    std::shared_ptr<Eigen::MatrixXd> amat;  // (hl*wl, hh*wh)
    std::shared_ptr<Eigen::MatrixXd> pinv;  // (hh*wh, hl*wl)
    double sv_min = 0.0, sv_max = 0.0;
};

// Dense SVD pseudoinverse of A flattened over one channel plane of the given
// high-resolution dims. Deliberately small-scale: the matrix is explicit.
inline ExactPinv exact_pinv(const DownsampleOperator& A, i64 hh, i64 wh) {
    check(hh >= A.scale && wh >= A.scale, "exact_pinv: dims too small");
    check(hh % A.scale == 0 && wh % A.scale == 0, "exact_pinv: dims not divisible by scale");
    check(hh * wh <= 64 * 64, "exact_pinv: dims too large for the dense backend");
    ExactPinv P;
    P.scale = A.scale;
    P.hh = hh; P.wh = wh;
    P.hl = hh / A.scale; P.wl = wh / A.scale;
    i64 m = P.hl * P.wl, n = hh * wh;
    P.amat = std::make_shared<Eigen::MatrixXd>(Eigen::MatrixXd::Zero(m, n));
    for (i64 i = 0; i < P.hl; ++i)
        for (i64 j = 0; j < P.wl; ++j) {
            i64 r = i * P.wl + j;
            for (i64 a = 0; a < A.sh; ++a) {
                i64 y = clamp_val(A.scale * i + A.off_r + a, i64(0), hh - 1);
                for (i64 c = 0; c < A.sw; ++c) {
                    i64 xx = clamp_val(A.scale * j + A.off_c + c, i64(0), wh - 1);
                    (*P.amat)(r, y * wh + xx) += A.stencil[static_cast<size_t>(a * A.sw + c)];
                }
            }
        }
    Eigen::BDCSVD<Eigen::MatrixXd> svd(*P.amat, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Eigen::VectorXd& sv = svd.singularValues();
    P.sv_max = sv.size() ? sv(0) : 0.0;
    P.sv_min = sv.size() ? sv(sv.size() - 1) : 0.0;
    double tol = std::numeric_limits<double>::epsilon() * double(std::max(m, n)) * P.sv_max;
    Eigen::VectorXd inv_sv(sv.size());
    for (i64 i = 0; i < sv.size(); ++i) inv_sv(i) = sv(i) > tol ? 1.0 / sv(i) : 0.0;
    P.pinv = std::make_shared<Eigen::MatrixXd>(svd.matrixV() * inv_sv.asDiagonal() *
                                               svd.matrixU().transpose());
    return P;
}

// Differentiable dense matrix application of the pseudoinverse; accepts
// (C,hl,wl) or (N,C,hl,wl).
inline Tensor pinv_apply(const ExactPinv& P, const Tensor& y) {
    check(y.rank() == 3 || y.rank() == 4, "pinv_apply: image must be rank 3 or 4");
    check(y.dim(y.rank() - 2) == P.hl && y.dim(y.rank() - 1) == P.wl,
          "pinv_apply: dims do not match the fitted operator");
    i64 m = P.hl * P.wl, n = P.hh * P.wh;
    i64 B = y.numel() / m;
    Shape out_shape = y.shape();
    out_shape[y.rank() - 2] = P.hh;
    out_shape[y.rank() - 1] = P.wh;
    std::vector<double> out(static_cast<size_t>(B * n));
    Eigen::Map<const Eigen::MatrixXd> in_m(y.data(), m, B);
    Eigen::Map<Eigen::MatrixXd> out_m(out.data(), n, B);
    out_m.noalias() = (*P.pinv) * in_m;
    std::shared_ptr<Eigen::MatrixXd> mat = P.pinv;
    return make_op(out_shape, std::move(out), {y}, [y, mat, m, n, B](TensorData& nd) {
        if (!y.node().requires_grad) return;
        y.node().ensure_grad();
        Eigen::Map<const Eigen::MatrixXd> go(nd.grad.data(), n, B);
        Eigen::Map<Eigen::MatrixXd> gi(y.node().grad.data(), m, B);
        gi.noalias() += mat->transpose() * go;
    });
}

// ---- projection (data-consistent upsample correction) ----

using PinvFn = std::function<Tensor(const Tensor&)>;

struct Projector {
    DownsampleOperator op;
    PinvFn pinv;  // LR -> HR, differentiable
};

inline Projector exact_projector(const DownsampleOperator& op, i64 hh, i64 wh) {
    auto pv = std::make_shared<ExactPinv>(exact_pinv(op, hh, wh));
    return Projector{op, [pv](const Tensor& y) { return pinv_apply(*pv, y); }};
}

// x_U = (I - A+A) x_p + A+ y_D, evaluated literally so learned (nonlinear)
// backends follow the same formula.
inline Tensor project(const Tensor& x_p, const Tensor& y_d, const Projector& proj) {
    check(x_p.rank() == y_d.rank(), "project: rank mismatch");
    i64 s = proj.op.scale;
    check(x_p.dim(x_p.rank() - 2) == s * y_d.dim(y_d.rank() - 2) &&
              x_p.dim(x_p.rank() - 1) == s * y_d.dim(y_d.rank() - 1),
          "project: image dims do not match the operator scale");
    Tensor axp = apply_A(proj.op, x_p);
    check_same_shape(axp, y_d, "project");
    Tensor back = proj.pinv(axp);
    Tensor anchor = proj.pinv(y_d);
    return add(sub(x_p, back), anchor);
}

// ---- LR-space kernel fitting ----

inline Tensor mean_squared_diff(const Tensor& a, const Tensor& b) {
    Tensor d = sub(a, b);
    return mul_scalar(sum(mul(d, d)), 1.0 / double(a.numel()));
}

namespace detail {

// y = M v with a fixed (non-learned) matrix.
inline Tensor matvec_fixed(const std::shared_ptr<const Eigen::MatrixXd>& M, const Tensor& v) {
    check(v.numel() == M->cols(), "matvec: size mismatch");
    std::vector<double> out(static_cast<size_t>(M->rows()));
    Eigen::Map<const Eigen::VectorXd> vin(v.data(), v.numel());
    Eigen::Map<Eigen::VectorXd> vout(out.data(), M->rows());
    vout.noalias() = (*M) * vin;
    return make_op({M->rows()}, std::move(out), {v}, [v, M](TensorData& n) {
        if (!v.node().requires_grad) return;
        v.node().ensure_grad();
        Eigen::Map<const Eigen::VectorXd> go(n.grad.data(), M->rows());
        Eigen::Map<Eigen::VectorXd> gi(v.node().grad.data(), v.numel());
        gi.noalias() += M->transpose() * go;
    });
}

// Rows of the least-squares system for one patch: for each interior LR pixel
// p, the taps of z around p in convolution orientation; the target is the
// true degradation at p.
struct KlowSystem {
    std::shared_ptr<Eigen::MatrixXd> G;  // rows x support^2
    Eigen::VectorXd t;
    i64 margin = 0;  // interior margin the rows were drawn from
};

inline i64 klow_support(i64 max_side, i64 s) {
    i64 side = (max_side + s - 1) / s;
    if (side % 2 == 0) side += 1;
    return side + 2;
}

inline KlowSystem build_klow_system(const BlurKernel& k, i64 s, const std::vector<Tensor>& patches,
                                    i64 support, i64 margin = 0) {
    i64 cL = support / 2, n = support * support;
    if (margin == 0) margin = cL + (std::max(k.h, k.w) / 2 + s - 1) / s + 4;
    check(margin >= cL, "fit_klow: margin smaller than the tap radius");
    i64 rows = 0;
    for (const Tensor& x : patches) {
        check(x.rank() == 3, "fit_klow: patches must be (C,H,W)");
        check(x.dim(1) % s == 0 && x.dim(2) % s == 0, "fit_klow: patch dims not divisible");
        i64 hl = x.dim(1) / s, wl = x.dim(2) / s;
        check(hl > 2 * margin && wl > 2 * margin, "fit_klow: patches too small for the supports");
        rows += x.dim(0) * (hl - 2 * margin) * (wl - 2 * margin);
    }
    KlowSystem sys;
    sys.margin = margin;
    sys.G = std::make_shared<Eigen::MatrixXd>(rows, n);
    sys.t.resize(rows);
    i64 r = 0;
    for (const Tensor& x : patches) {
        i64 C = x.dim(0), hl = x.dim(1) / s, wl = x.dim(2) / s;
        Tensor z = bicubic_downsample(x, s);
        Tensor tgt = bicubic_downsample(blur(x, k, PadMode::replicate), s);
        for (i64 c = 0; c < C; ++c) {
            const double* zp = z.data() + c * hl * wl;
            const double* tp = tgt.data() + c * hl * wl;
            for (i64 i = margin; i < hl - margin; ++i)
                for (i64 j = margin; j < wl - margin; ++j) {
                    for (i64 uy = 0; uy < support; ++uy)
                        for (i64 ux = 0; ux < support; ++ux)
                            (*sys.G)(r, uy * support + ux) =
                                zp[(i - (uy - cL)) * wl + (j - (ux - cL))];
                    sys.t(r) = tp[i * wl + j];
                    ++r;
                }
        }
    }
    return sys;
}

}  // namespace detail

struct KLowFit {
    BlurKernel klow;
    double rms_residual = 0.0;
    i64 support = 0;
    i64 margin = 0;
};

// Direct least squares over the LR kernel taps: minimizes
// sum || bicubic_down(blur(x,k)) - blur(bicubic_down(x), kL) ||^2 on
// interior pixels, via ridge-stabilized normal equations.
inline KLowFit fit_klow(const BlurKernel& k, i64 s, const std::vector<Tensor>& patches,
                        i64 support = 0, i64 margin = 0) {
    k.validate();
    check(s >= 1, "fit_klow: scale must be >= 1");
    check(!patches.empty(), "fit_klow: patch set is empty");
    if (support == 0) support = detail::klow_support(std::max(k.h, k.w), s);
    check(support % 2 == 1 && support >= 1, "fit_klow: support must be odd");
    detail::KlowSystem sys = detail::build_klow_system(k, s, patches, support, margin);
    i64 n = support * support;
    Eigen::MatrixXd gtg = sys.G->transpose() * (*sys.G);
    gtg.diagonal().array() += 1e-10;
    Eigen::VectorXd sol = gtg.ldlt().solve(sys.G->transpose() * sys.t);
    KLowFit fit;
    fit.support = support;
    fit.margin = sys.margin;
    fit.klow.h = fit.klow.w = support;
    fit.klow.k.assign(sol.data(), sol.data() + n);
    fit.rms_residual = std::sqrt(((*sys.G) * sol - sys.t).squaredNorm() / double(sys.t.size()));
    return fit;
}

// Repeated k^L fits against a fixed probe-patch set. The normal matrix of
// the least-squares system depends only on the patches, so it is factored
// once; each kernel then costs one blur of the probes plus a solve.
class KlowSolver {
  public:
    KlowSolver(i64 s, std::vector<Tensor> patches, i64 max_kernel_side)
        : s_(s), patches_(std::move(patches)) {
        check(s >= 1, "klow solver: scale must be >= 1");
        check(!patches_.empty(), "klow solver: patch set is empty");
        check(max_kernel_side >= 1, "klow solver: kernel side must be >= 1");
        max_side_ = max_kernel_side;
        support_ = detail::klow_support(max_side_, s);
        margin_ = support_ / 2 + (max_side_ / 2 + s - 1) / s + 4;
        detail::KlowSystem sys =
            detail::build_klow_system(delta_kernel(), s_, patches_, support_, margin_);
        G_ = sys.G;
        rows_ = G_->rows();
        i64 n = support_ * support_;
        check(rows_ >= n, "klow solver: probe patches give fewer rows than taps");
        Eigen::MatrixXd gtg = G_->transpose() * (*G_);
        gtg.diagonal().array() += 1e-10;
        ldlt_.compute(gtg);
    }

    i64 support() const { return support_; }
    i64 margin() const { return margin_; }

    KLowFit fit(const BlurKernel& k) const {
        k.validate();
        check(std::max(k.h, k.w) <= max_side_, "klow solver: kernel exceeds the frame");
        Eigen::VectorXd t(rows_);
        i64 r = 0;
        for (const Tensor& x : patches_) {
            NoGradGuard ng;
            Tensor tgt = bicubic_downsample(blur(x, k, PadMode::replicate), s_);
            i64 C = x.dim(0), hl = x.dim(1) / s_, wl = x.dim(2) / s_;
            for (i64 c = 0; c < C; ++c) {
                const double* tp = tgt.data() + c * hl * wl;
                for (i64 i = margin_; i < hl - margin_; ++i)
                    for (i64 j = margin_; j < wl - margin_; ++j) t(r++) = tp[i * wl + j];
            }
        }
        Eigen::VectorXd sol = ldlt_.solve(G_->transpose() * t);
        KLowFit fit;
        fit.support = support_;
        fit.margin = margin_;
        fit.klow.h = fit.klow.w = support_;
        fit.klow.k.assign(sol.data(), sol.data() + sol.size());
        fit.rms_residual = std::sqrt(((*G_) * sol - t).squaredNorm() / double(rows_));
        return fit;
    }

  private:
    i64 s_, max_side_ = 0, support_ = 0, margin_ = 0, rows_ = 0;
    std::vector<Tensor> patches_;
    std::shared_ptr<Eigen::MatrixXd> G_;
    Eigen::LDLT<Eigen::MatrixXd> ldlt_;
};

// ---- MLP kernel-to-kernel fitting ----

struct KLowMlpConfig {
    i64 hidden = 2048;
    i64 embed_side = 45;  // frame the input kernel is centered into
    i64 epochs = 60;
    double lr = 1e-4;
    double lr_final = -1.0;  // < 0: constant lr; otherwise cosine-decay to this
    double weight_decay = 1e-4;
    u64 seed = 1;
};

struct KLowMlp {
    i64 scale = 1;
    i64 embed_side = 0, out_side = 0, hidden = 0;
    ParamStore params;
    Tensor w1, b1, w2, b2;
    std::vector<double> residuals;  // per training kernel, after fitting

    Tensor embed(const BlurKernel& k) const {
        check(k.h <= embed_side && k.w <= embed_side, "klow mlp: kernel exceeds the frame");
        Tensor e = Tensor::zeros({1, embed_side * embed_side, 1, 1});
        i64 r0 = (embed_side - k.h) / 2, c0 = (embed_side - k.w) / 2;
        for (i64 i = 0; i < k.h; ++i)
            for (i64 j = 0; j < k.w; ++j)
                e.data()[(r0 + i) * embed_side + (c0 + j)] = k.at(i, j);
        return e;
    }

    Tensor forward(const Tensor& kin) const {
        Tensor h = leaky_relu(conv2d(kin, w1, b1), 0.2);
        return conv2d(h, w2, b2);
    }

    BlurKernel predict(const BlurKernel& k) const {
        NoGradGuard ng;
        Tensor out = forward(embed(k));
        BlurKernel kl;
        kl.h = kl.w = out_side;
        kl.k.assign(out.data(), out.data() + out.numel());
        return kl;
    }
};

// Trains the kernel-to-kernel network on the same least-squares objective,
// one optimizer step per epoch over the summed per-kernel losses.
inline KLowMlp fit_klow_mlp(const std::vector<BlurKernel>& kernels, i64 s,
                            const std::vector<Tensor>& patches, KLowMlpConfig cfg = {}) {
    check(kernels.size() >= 2, "fit_klow_mlp: need at least two kernels");
    check(!patches.empty(), "fit_klow_mlp: patch set is empty");
    KLowMlp net;
    net.scale = s;
    net.embed_side = cfg.embed_side;
    net.hidden = cfg.hidden;
    net.out_side = detail::klow_support(cfg.embed_side, s);
    i64 nin = cfg.embed_side * cfg.embed_side, nout = net.out_side * net.out_side;
    Rng rng(cfg.seed);
    net.w1 = Tensor::zeros({cfg.hidden, nin, 1, 1});
    net.w2 = Tensor::zeros({nout, cfg.hidden, 1, 1});
    init_fan_in_uniform(net.w1, rng);
    init_fan_in_uniform(net.w2, rng);
    net.b1 = Tensor::zeros({cfg.hidden});
    net.b2 = Tensor::zeros({nout});
    net.params.add("w1", net.w1);
    net.params.add("b1", net.b1);
    net.params.add("w2", net.w2);
    net.params.add("b2", net.b2);

    i64 max_side = 1;
    for (const BlurKernel& k : kernels) max_side = std::max({max_side, k.h, k.w});
    std::vector<detail::KlowSystem> systems;
    for (const BlurKernel& k : kernels)
        systems.push_back(detail::build_klow_system(k, s, patches, net.out_side));

    std::vector<Tensor> targets;
    for (const detail::KlowSystem& sys : systems)
        targets.push_back(Tensor::from(
            {static_cast<i64>(sys.t.size())},
            std::vector<double>(sys.t.data(), sys.t.data() + sys.t.size())));

    // warm-start the output bias at the best single tap vector for the whole
    // family (the objective's minimum over constant networks); training then
    // only has to learn the per-kernel deviations
    {
        Eigen::MatrixXd gtg = Eigen::MatrixXd::Zero(nout, nout);
        Eigen::VectorXd gtt = Eigen::VectorXd::Zero(nout);
        for (const detail::KlowSystem& sys : systems) {
            gtg.noalias() += sys.G->transpose() * (*sys.G);
            gtt.noalias() += sys.G->transpose() * sys.t;
        }
        gtg.diagonal().array() += 1e-10;
        Eigen::VectorXd b0 = gtg.ldlt().solve(gtt);
        std::copy(b0.data(), b0.data() + nout, net.b2.values().begin());
    }

    AdamConfig acfg;
    acfg.lr = cfg.lr;
    acfg.weight_decay = cfg.weight_decay;
    Adam opt(acfg);
    for (i64 epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (cfg.lr_final >= 0.0) {
            double t = cfg.epochs > 1 ? double(epoch) / double(cfg.epochs - 1) : 0.0;
            opt.config().lr = cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) *
                                                 (1.0 + std::cos(t * std::numbers::pi));
        }
        net.params.zero_grad();
        Tensor loss;
        for (size_t ki = 0; ki < kernels.size(); ++ki) {
            Tensor taps = net.forward(net.embed(kernels[ki]));
            Tensor pred = detail::matvec_fixed(systems[ki].G, taps);
            Tensor term = mean_squared_diff(pred, targets[ki]);
            loss = loss.defined() ? add(loss, term) : term;
        }
        loss = mul_scalar(loss, 1.0 / double(kernels.size()));
        if (!std::isfinite(loss.values()[0]))
            throw numeric_error("fit_klow_mlp: loss diverged");
        backward(loss);
        opt.step(net.params);
    }
    for (size_t ki = 0; ki < kernels.size(); ++ki) {
        NoGradGuard ng;
        Tensor taps = net.forward(net.embed(kernels[ki]));
        Eigen::Map<const Eigen::VectorXd> tv(taps.data(), taps.numel());
        net.residuals.push_back(
            std::sqrt(((*systems[ki].G) * tv - systems[ki].t).squaredNorm() /
                      double(systems[ki].t.size())));
    }
    return net;
}

// ---- learned pseudoinverse ----

struct PinvNet {
    i64 scale = 1;
    ParamStore params;
    Tensor w1, b1, w2, b2, w3, b3;
    double fit_residual = -1.0;
    bool converged = false;
    i64 steps_run = 0;
    std::vector<std::pair<i64, double>> history;  // sampled (step, loss)

    Tensor forward(const Tensor& y) const {
        check(y.rank() == 3 || y.rank() == 4, "pinv net: input must be rank 3 or 4");
        Tensor x = y.rank() == 3 ? reshape(y, {1, y.dim(0), y.dim(1), y.dim(2)}) : y;
        Tensor h = leaky_relu(conv2d(x, w1, b1), 0.2);
        h = leaky_relu(conv2d(h, w2, b2), 0.2);
        h = conv2d(h, w3, b3);
        h = pixel_shuffle(h, scale);
        if (y.rank() == 3) h = reshape(h, {h.dim(1), h.dim(2), h.dim(3)});
        return h;
    }
};

struct PinvFitConfig {
    i64 channels = 3;
    i64 width = 32;
    i64 batch = 4;
    i64 max_steps = 6000;
    double lr = 1e-3;
    double lr_final = -1.0;  // < 0: constant lr; otherwise cosine-decay to this
    double stop_threshold = 1e-7;
    u64 seed = 7;
};

inline PinvNet make_pinv_net(i64 scale, i64 channels, u64 seed, i64 width = 32) {
    check(width >= 4, "pinv net: width too small");
    PinvNet net;
    net.scale = scale;
    Rng rng(seed);
    net.w1 = Tensor::zeros({width, channels, 7, 7});
    net.w2 = Tensor::zeros({width, width, 5, 5});
    net.w3 = Tensor::zeros({channels * scale * scale, width, 3, 3});
    init_fan_in_uniform(net.w1, rng);
    init_fan_in_uniform(net.w2, rng);
    init_fan_in_uniform(net.w3, rng);
    net.b1 = Tensor::zeros({width});
    net.b2 = Tensor::zeros({width});
    net.b3 = Tensor::zeros({channels * scale * scale});
    net.params.add("w1", net.w1);
    net.params.add("b1", net.b1);
    net.params.add("w2", net.w2);
    net.params.add("b2", net.b2);
    net.params.add("w3", net.w3);
    net.params.add("b3", net.b3);
    return net;
}

// Fits the convolutional pseudoinverse by minimizing
//   E|| y - A p(y) ||^2 + E|| p(y) - p(A p(y)) ||^2
// over LR images y = A x drawn from the training set. Stops once the loss
// over the whole pool (not just a lucky minibatch) drops below the
// threshold; otherwise runs to the cap. The recorded residual is always the
// full-pool loss.
inline PinvNet fit_pinv_net(const DownsampleOperator& A, const std::vector<Tensor>& hr_images,
                            PinvFitConfig cfg = {}) {
    check(!hr_images.empty(), "fit_pinv_net: image set is empty");
    for (const Tensor& x : hr_images)
        check(x.rank() == 3 && x.dim(0) == cfg.channels, "fit_pinv_net: images must be (C,H,W)");
    PinvNet net = make_pinv_net(A.scale, cfg.channels, cfg.seed, cfg.width);
    std::vector<Tensor> lr_pool;
    {
        NoGradGuard ng;
        for (const Tensor& x : hr_images) lr_pool.push_back(apply_A(A, x));
    }
    i64 hl = lr_pool[0].dim(1), wl = lr_pool[0].dim(2);
    for (const Tensor& y : lr_pool)
        check(y.dim(1) == hl && y.dim(2) == wl, "fit_pinv_net: images must share dims");

    u64 st = cfg.seed ^ 0x94d049bb133111ebULL;
    Rng rng(splitmix64(st));
    AdamConfig acfg;
    acfg.lr = cfg.lr;
    acfg.weight_decay = 0.0;
    Adam opt(acfg);
    i64 nb = std::min<i64>(cfg.batch, static_cast<i64>(lr_pool.size()));

    auto pool_loss = [&]() {
        NoGradGuard ng;
        double acc = 0.0;
        for (const Tensor& y : lr_pool) {
            Tensor u = net.forward(y);
            Tensor v = apply_A(A, u);
            acc += mean_squared_diff(v, y).item() +
                   mean_squared_diff(net.forward(v), u).item();
        }
        return acc / double(lr_pool.size());
    };

    i64 last_eval = -100;
    for (i64 step = 0; step < cfg.max_steps; ++step) {
        if (cfg.lr_final >= 0.0) {
            double t = cfg.max_steps > 1 ? double(step) / double(cfg.max_steps - 1) : 0.0;
            opt.config().lr = cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) *
                                                 (1.0 + std::cos(t * std::numbers::pi));
        }
        Tensor yb = Tensor::zeros({nb, cfg.channels, hl, wl});
        for (i64 b = 0; b < nb; ++b) {
            i64 pick = rng.uniform_int(0, static_cast<i64>(lr_pool.size()) - 1);
            std::copy(lr_pool[static_cast<size_t>(pick)].values().begin(),
                      lr_pool[static_cast<size_t>(pick)].values().end(),
                      yb.values().begin() + b * cfg.channels * hl * wl);
        }
        net.params.zero_grad();
        Tensor u = net.forward(yb);
        Tensor v = apply_A(A, u);
        Tensor t1 = mean_squared_diff(v, yb);
        Tensor t2 = mean_squared_diff(net.forward(v), u);
        Tensor loss = add(t1, t2);
        double lv = loss.item();
        net.steps_run = step + 1;
        if (step % 100 == 0) net.history.push_back({step, lv});
        if (!std::isfinite(lv)) throw numeric_error("fit_pinv_net: loss diverged");
        if (lv < cfg.stop_threshold && step >= last_eval + 100) {
            last_eval = step;
            net.fit_residual = pool_loss();
            if (net.fit_residual < cfg.stop_threshold) {
                net.converged = true;
                return net;
            }
        }
        backward(loss);
        opt.step(net.params);
    }
    net.fit_residual = pool_loss();
    net.converged = net.fit_residual < cfg.stop_threshold;
    return net;
}

inline Projector learned_projector(const DownsampleOperator& op, std::shared_ptr<PinvNet> net) {
    check(net && net->scale == op.scale, "learned_projector: scale mismatch");
    return Projector{op, [net](const Tensor& y) { return net->forward(y); }};
}

}  // namespace caduf
