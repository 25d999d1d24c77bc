#pragma once

#include <Eigen/Dense>

#include "caduf/tensor.hpp"

namespace caduf {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ColMat = Eigen::MatrixXd;
using MapRow = Eigen::Map<RowMat>;
using CMapRow = Eigen::Map<const RowMat>;

struct ConvGeom {
    i64 N, Cin, H, W;
    i64 Cout, kh, kw;
    i64 stride, dil;
    i64 pad_h, pad_w;
    i64 Ho, Wo;
};

inline ConvGeom conv_geom(const Tensor& x, const Tensor& w, i64 stride, i64 dil, bool pad_same) {
    check(x.rank() == 4, "conv2d: input must be rank 4, got " + shape_str(x.shape()));
    check(w.rank() == 4, "conv2d: weight must be rank 4, got " + shape_str(w.shape()));
    ConvGeom g;
    g.N = x.dim(0); g.Cin = x.dim(1); g.H = x.dim(2); g.W = x.dim(3);
    g.Cout = w.dim(0); g.kh = w.dim(2); g.kw = w.dim(3);
    check(w.dim(1) == g.Cin, "conv2d: weight expects " + std::to_string(w.dim(1)) +
                                 " input channels, input has " + std::to_string(g.Cin));
    check(stride >= 1 && dil >= 1, "conv2d: stride and dilation must be >= 1");
    g.stride = stride; g.dil = dil;
    if (pad_same) {
        check(g.kh % 2 == 1 && g.kw % 2 == 1, "conv2d: same padding needs odd kernel");
        g.pad_h = dil * (g.kh - 1) / 2;
        g.pad_w = dil * (g.kw - 1) / 2;
    } else {
        g.pad_h = g.pad_w = 0;
    }
    g.Ho = (g.H + 2 * g.pad_h - dil * (g.kh - 1) - 1) / stride + 1;
    g.Wo = (g.W + 2 * g.pad_w - dil * (g.kw - 1) - 1) / stride + 1;
    check(g.Ho >= 1 && g.Wo >= 1, "conv2d: kernel larger than padded input");
    return g;
}

// col is (Cin*kh*kw) x (Ho*Wo), column-major; zero padding folded in.
inline void im2col(const double* src, const ConvGeom& g, ColMat& col) {
    col.resize(g.Cin * g.kh * g.kw, g.Ho * g.Wo);
    for (i64 i = 0; i < g.Ho; ++i) {
        for (i64 j = 0; j < g.Wo; ++j) {
            i64 pos = i * g.Wo + j;
            double* dst = col.data() + pos * col.rows();
            i64 r = 0;
            for (i64 c = 0; c < g.Cin; ++c) {
                const double* plane = src + c * g.H * g.W;
                for (i64 ti = 0; ti < g.kh; ++ti) {
                    i64 y = i * g.stride - g.pad_h + ti * g.dil;
                    bool yin = (y >= 0 && y < g.H);
                    for (i64 tj = 0; tj < g.kw; ++tj, ++r) {
                        i64 x = j * g.stride - g.pad_w + tj * g.dil;
                        dst[r] = (yin && x >= 0 && x < g.W) ? plane[y * g.W + x] : 0.0;
                    }
                }
            }
        }
    }
}

inline void col2im_add(const ColMat& col, const ConvGeom& g, double* dst) {
    for (i64 i = 0; i < g.Ho; ++i) {
        for (i64 j = 0; j < g.Wo; ++j) {
            i64 pos = i * g.Wo + j;
            const double* s = col.data() + pos * col.rows();
            i64 r = 0;
            for (i64 c = 0; c < g.Cin; ++c) {
                double* plane = dst + c * g.H * g.W;
                for (i64 ti = 0; ti < g.kh; ++ti) {
                    i64 y = i * g.stride - g.pad_h + ti * g.dil;
                    bool yin = (y >= 0 && y < g.H);
                    for (i64 tj = 0; tj < g.kw; ++tj, ++r) {
                        i64 x = j * g.stride - g.pad_w + tj * g.dil;
                        if (yin && x >= 0 && x < g.W) plane[y * g.W + x] += s[r];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// --- elementwise ---

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    check(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<double> out(a.values());
    for (i64 i = 0; i < b.numel(); ++i) out[i] += b.data()[i];
    return make_op(a.shape(), std::move(out), {a, b}, [a, b](TensorData& n) {
        if (a.node().requires_grad) {
            a.node().ensure_grad();
            for (i64 i = 0; i < n.numel(); ++i) a.node().grad[i] += n.grad[i];
        }
        if (b.node().requires_grad) {
            b.node().ensure_grad();
            for (i64 i = 0; i < n.numel(); ++i) b.node().grad[i] += n.grad[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    std::vector<double> out(a.values());
    for (i64 i = 0; i < b.numel(); ++i) out[i] -= b.data()[i];
    return make_op(a.shape(), std::move(out), {a, b}, [a, b](TensorData& n) {
        if (a.node().requires_grad) {
            a.node().ensure_grad();
            for (i64 i = 0; i < n.numel(); ++i) a.node().grad[i] += n.grad[i];
        }
        if (b.node().requires_grad) {
            b.node().ensure_grad();
            for (i64 i = 0; i < n.numel(); ++i) b.node().grad[i] -= n.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (i64 i = 0; i < a.numel(); ++i) out[i] = a.data()[i] * b.data()[i];
    return make_op(a.shape(), std::move(out), {a, b}, [a, b](TensorData& n) {
        if (a.node().requires_grad) {
            a.node().ensure_grad();
            for (i64 i = 0; i < n.numel(); ++i) a.node().grad[i] += n.grad[i] * b.data()[i];
        }
        if (b.node().requires_grad) {
            b.node().ensure_grad();
            for (i64 i = 0; i < n.numel(); ++i) b.node().grad[i] += n.grad[i] * a.data()[i];
        }
    });
}

inline Tensor mul_scalar(const Tensor& a, double s) {
    std::vector<double> out(a.numel());
    for (i64 i = 0; i < a.numel(); ++i) out[i] = a.data()[i] * s;
    return make_op(a.shape(), std::move(out), {a}, [a, s](TensorData& n) {
        if (!a.node().requires_grad) return;
        a.node().ensure_grad();
        for (i64 i = 0; i < n.numel(); ++i) a.node().grad[i] += n.grad[i] * s;
    });
}

inline Tensor add_scalar(const Tensor& a, double s) {
    std::vector<double> out(a.numel());
    for (i64 i = 0; i < a.numel(); ++i) out[i] = a.data()[i] + s;
    return make_op(a.shape(), std::move(out), {a}, [a](TensorData& n) {
        if (!a.node().requires_grad) return;
        a.node().ensure_grad();
        for (i64 i = 0; i < n.numel(); ++i) a.node().grad[i] += n.grad[i];
    });
}

inline Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (i64 i = 0; i < a.numel(); ++i) acc += a.data()[i];
    return make_op({1}, {acc}, {a}, [a](TensorData& n) {
        if (!a.node().requires_grad) return;
        a.node().ensure_grad();
        double g = n.grad[0];
        for (double& v : a.node().grad) v += g;
    });
}

inline Tensor reshape(const Tensor& a, const Shape& s) {
    i64 n = 1;
    for (i64 d : s) n *= d;
    check(n == a.numel(), "reshape: element count mismatch");
    return make_op(s, std::vector<double>(a.values()), {a}, [a](TensorData& n) {
        if (!a.node().requires_grad) return;
        a.node().ensure_grad();
        for (i64 i = 0; i < n.numel(); ++i) a.node().grad[i] += n.grad[i];
    });
}

inline Tensor leaky_relu(const Tensor& a, double slope) {
    std::vector<double> out(a.numel());
    for (i64 i = 0; i < a.numel(); ++i) {
        double v = a.data()[i];
        out[i] = v >= 0.0 ? v : slope * v;
    }
    return make_op(a.shape(), std::move(out), {a}, [a, slope](TensorData& n) {
        if (!a.node().requires_grad) return;
        a.node().ensure_grad();
        for (i64 i = 0; i < n.numel(); ++i)
            a.node().grad[i] += n.grad[i] * (a.data()[i] >= 0.0 ? 1.0 : slope);
    });
}

inline Tensor sigmoid(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (i64 i = 0; i < a.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-a.data()[i]));
    Tensor t = make_op(a.shape(), std::move(out), {a}, [a](TensorData& n) {
        if (!a.node().requires_grad) return;
        a.node().ensure_grad();
        for (i64 i = 0; i < n.numel(); ++i) {
            double s = n.values[i];
            a.node().grad[i] += n.grad[i] * s * (1.0 - s);
        }
    });
    return t;
}

// Robust L1: sum over all elements of sqrt((a-b)^2 + eps^2).
inline Tensor charbonnier_sum(const Tensor& a, const Tensor& b, double eps) {
    check_same_shape(a, b, "charbonnier");
    double acc = 0.0;
    double e2 = eps * eps;
    for (i64 i = 0; i < a.numel(); ++i) {
        double d = a.data()[i] - b.data()[i];
        acc += std::sqrt(d * d + e2);
    }
    return make_op({1}, {acc}, {a, b}, [a, b, e2](TensorData& n) {
        double g = n.grad[0];
        bool ga = a.node().requires_grad, gb = b.node().requires_grad;
        if (ga) a.node().ensure_grad();
        if (gb) b.node().ensure_grad();
        for (i64 i = 0; i < a.numel(); ++i) {
            double d = a.data()[i] - b.data()[i];
            double dd = g * d / std::sqrt(d * d + e2);
            if (ga) a.node().grad[i] += dd;
            if (gb) b.node().grad[i] -= dd;
        }
    });
}

// --- channel plumbing (rank 4) ---

inline Tensor concat_channels(const std::vector<Tensor>& xs) {
    check(!xs.empty(), "concat: no inputs");
    const Tensor& x0 = xs[0];
    check(x0.rank() == 4, "concat: rank 4 expected");
    i64 N = x0.dim(0), H = x0.dim(2), W = x0.dim(3), C = 0;
    for (const Tensor& t : xs) {
        check(t.rank() == 4 && t.dim(0) == N && t.dim(2) == H && t.dim(3) == W,
              "concat: inputs must share N,H,W");
        C += t.dim(1);
    }
    std::vector<double> out(static_cast<size_t>(N * C * H * W));
    i64 plane = H * W;
    i64 c_at = 0;
    for (const Tensor& t : xs) {
        i64 tc = t.dim(1);
        for (i64 n = 0; n < N; ++n) {
            const double* src = t.data() + n * tc * plane;
            double* dst = out.data() + (n * C + c_at) * plane;
            std::copy(src, src + tc * plane, dst);
        }
        c_at += tc;
    }
    std::vector<Tensor> parents = xs;
    return make_op({N, C, H, W}, std::move(out), parents, [parents, N, C, plane](TensorData& n) {
        i64 c_at = 0;
        for (const Tensor& t : parents) {
            i64 tc = t.dim(1);
            if (t.node().requires_grad) {
                t.node().ensure_grad();
                for (i64 b = 0; b < N; ++b) {
                    const double* src = n.grad.data() + (b * C + c_at) * plane;
                    double* dst = t.node().grad.data() + b * tc * plane;
                    for (i64 i = 0; i < tc * plane; ++i) dst[i] += src[i];
                }
            }
            c_at += tc;
        }
    });
}

inline Tensor channel_slice(const Tensor& x, i64 c0, i64 c1) {
    check(x.rank() == 4, "channel_slice: rank 4 expected");
    i64 N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    check(0 <= c0 && c0 < c1 && c1 <= C, "channel_slice: bad channel range");
    i64 tc = c1 - c0, plane = H * W;
    std::vector<double> out(static_cast<size_t>(N * tc * plane));
    for (i64 n = 0; n < N; ++n)
        std::copy(x.data() + (n * C + c0) * plane, x.data() + (n * C + c1) * plane,
                  out.data() + n * tc * plane);
    return make_op({N, tc, H, W}, std::move(out), {x}, [x, c0, tc, plane](TensorData& n) {
        if (!x.node().requires_grad) return;
        x.node().ensure_grad();
        i64 N = x.dim(0), C = x.dim(1);
        for (i64 b = 0; b < N; ++b) {
            const double* src = n.grad.data() + b * tc * plane;
            double* dst = x.node().grad.data() + (b * C + c0) * plane;
            for (i64 i = 0; i < tc * plane; ++i) dst[i] += src[i];
        }
    });
}

// (N, C*r^2, H, W) -> (N, C, H*r, W*r); channel c*r^2 + dy*r + dx lands on
// subpixel (dy, dx).
inline Tensor pixel_shuffle(const Tensor& x, i64 r) {
    check(x.rank() == 4, "pixel_shuffle: rank 4 expected");
    i64 N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    check(r >= 1 && C % (r * r) == 0, "pixel_shuffle: channels not divisible by r^2");
    i64 Co = C / (r * r), Ho = H * r, Wo = W * r;
    std::vector<double> out(static_cast<size_t>(N * C * H * W));
    for (i64 n = 0; n < N; ++n)
        for (i64 co = 0; co < Co; ++co)
            for (i64 dy = 0; dy < r; ++dy)
                for (i64 dx = 0; dx < r; ++dx) {
                    i64 ci = co * r * r + dy * r + dx;
                    const double* src = x.data() + ((n * C + ci) * H) * W;
                    for (i64 i = 0; i < H; ++i) {
                        double* dst =
                            out.data() + ((n * Co + co) * Ho + i * r + dy) * Wo + dx;
                        for (i64 j = 0; j < W; ++j) dst[j * r] = src[i * W + j];
                    }
                }
    return make_op({N, Co, Ho, Wo}, std::move(out), {x}, [x, r](TensorData& n) {
        if (!x.node().requires_grad) return;
        x.node().ensure_grad();
        i64 N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
        i64 Co = C / (r * r), Ho = H * r, Wo = W * r;
        for (i64 b = 0; b < N; ++b)
            for (i64 co = 0; co < Co; ++co)
                for (i64 dy = 0; dy < r; ++dy)
                    for (i64 dx = 0; dx < r; ++dx) {
                        i64 ci = co * r * r + dy * r + dx;
                        double* dst = x.node().grad.data() + ((b * C + ci) * H) * W;
                        for (i64 i = 0; i < H; ++i) {
                            const double* src =
                                n.grad.data() + ((b * Co + co) * Ho + i * r + dy) * Wo + dx;
                            for (i64 j = 0; j < W; ++j) dst[i * W + j] += src[j * r];
                        }
                    }
    });
}

inline Tensor pixel_unshuffle(const Tensor& x, i64 r) {
    check(x.rank() == 4, "pixel_unshuffle: rank 4 expected");
    i64 N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    check(r >= 1 && H % r == 0 && W % r == 0, "pixel_unshuffle: size not divisible by r");
    i64 Co = C * r * r, Ho = H / r, Wo = W / r;
    std::vector<double> out(static_cast<size_t>(N * C * H * W));
    for (i64 n = 0; n < N; ++n)
        for (i64 c = 0; c < C; ++c)
            for (i64 dy = 0; dy < r; ++dy)
                for (i64 dx = 0; dx < r; ++dx) {
                    i64 co = c * r * r + dy * r + dx;
                    double* dst = out.data() + ((n * Co + co) * Ho) * Wo;
                    const double* src = x.data() + ((n * C + c) * H + dy) * W + dx;
                    for (i64 i = 0; i < Ho; ++i)
                        for (i64 j = 0; j < Wo; ++j)
                            dst[i * Wo + j] = src[(i * r) * W + j * r];
                }
    return make_op({N, Co, Ho, Wo}, std::move(out), {x}, [x, r](TensorData& n) {
        if (!x.node().requires_grad) return;
        x.node().ensure_grad();
        i64 N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
        i64 Co = C * r * r, Ho = H / r, Wo = W / r;
        for (i64 b = 0; b < N; ++b)
            for (i64 c = 0; c < C; ++c)
                for (i64 dy = 0; dy < r; ++dy)
                    for (i64 dx = 0; dx < r; ++dx) {
                        i64 co = c * r * r + dy * r + dx;
                        const double* src = n.grad.data() + ((b * Co + co) * Ho) * Wo;
                        double* dst = x.node().grad.data() + ((b * C + c) * H + dy) * W + dx;
                        for (i64 i = 0; i < Ho; ++i)
                            for (i64 j = 0; j < Wo; ++j)
                                dst[(i * r) * W + j * r] += src[i * Wo + j];
                    }
    });
}

// --- convolution ---

// Zero-padded 2-D convolution (cross-correlation, as in CNN frameworks).
// `b` may be an undefined Tensor for no bias.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, i64 stride = 1,
                     i64 dilation = 1, bool pad_same = true) {
    detail::ConvGeom g = detail::conv_geom(x, w, stride, dilation, pad_same);
    if (b.defined())
        check(b.rank() == 1 && b.dim(0) == g.Cout, "conv2d: bias must have Cout entries");

    std::vector<double> out(static_cast<size_t>(g.N * g.Cout * g.Ho * g.Wo));
    i64 ckk = g.Cin * g.kh * g.kw;
    i64 hw = g.Ho * g.Wo;
    detail::CMapRow wmat(w.data(), g.Cout, ckk);
    detail::ColMat col;
    for (i64 n = 0; n < g.N; ++n) {
        detail::im2col(x.data() + n * g.Cin * g.H * g.W, g, col);
        detail::MapRow omat(out.data() + n * g.Cout * hw, g.Cout, hw);
        omat.noalias() = wmat * col;
    }
    if (b.defined()) {
        for (i64 n = 0; n < g.N; ++n)
            for (i64 c = 0; c < g.Cout; ++c) {
                double bv = b.data()[c];
                double* p = out.data() + (n * g.Cout + c) * hw;
                for (i64 i = 0; i < hw; ++i) p[i] += bv;
            }
    }

    std::vector<Tensor> parents = b.defined() ? std::vector<Tensor>{x, w, b}
                                              : std::vector<Tensor>{x, w};
    return make_op({g.N, g.Cout, g.Ho, g.Wo}, std::move(out), parents,
                   [x, w, b, g](TensorData& n) {
                       i64 ckk = g.Cin * g.kh * g.kw;
                       i64 hw = g.Ho * g.Wo;
                       detail::CMapRow wmat(w.data(), g.Cout, ckk);
                       bool gx = x.node().requires_grad;
                       bool gw = w.node().requires_grad;
                       bool gb = b.defined() && b.node().requires_grad;
                       if (gx) x.node().ensure_grad();
                       if (gw) w.node().ensure_grad();
                       if (gb) b.node().ensure_grad();
                       detail::ColMat col, dcol;
                       detail::RowMat dw = detail::RowMat::Zero(g.Cout, ckk);
                       for (i64 n2 = 0; n2 < g.N; ++n2) {
                           detail::CMapRow dout(n.grad.data() + n2 * g.Cout * hw, g.Cout, hw);
                           if (gw) {
                               detail::im2col(x.data() + n2 * g.Cin * g.H * g.W, g, col);
                               dw.noalias() += dout * col.transpose();
                           }
                           if (gx) {
                               dcol.noalias() = wmat.transpose() * dout;
                               detail::col2im_add(dcol, g,
                                                  x.node().grad.data() + n2 * g.Cin * g.H * g.W);
                           }
                           if (gb) {
                               for (i64 c = 0; c < g.Cout; ++c)
                                   b.node().grad[c] += dout.row(c).sum();
                           }
                       }
                       if (gw) {
                           double* wd = w.node().grad.data();
                           for (i64 i = 0; i < g.Cout; ++i)
                               for (i64 j = 0; j < ckk; ++j) wd[i * ckk + j] += dw(i, j);
                       }
                   });
}

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, i64 stride,
                     bool pad_same) {
    return conv2d(x, w, b, stride, 1, pad_same);
}

// --- bilinear sampling ---

// coords: (N, 2, Ho, Wo) with channel 0 = row coordinate, channel 1 = column
// coordinate, in input pixel units. Coordinates are clamped to the image
// rectangle; the clamp saturates, so out-of-range coordinates get zero
// coordinate gradient.
inline Tensor bilinear_sample(const Tensor& x, const Tensor& coords) {
    check(x.rank() == 4 && coords.rank() == 4, "bilinear_sample: rank 4 expected");
    check(coords.dim(1) == 2, "bilinear_sample: coords needs 2 channels");
    check(coords.dim(0) == x.dim(0), "bilinear_sample: batch mismatch");
    i64 N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    i64 Ho = coords.dim(2), Wo = coords.dim(3);
    i64 hw = Ho * Wo;
    std::vector<double> out(static_cast<size_t>(N * C * hw));
    for (i64 n = 0; n < N; ++n) {
        const double* cy = coords.data() + (n * 2 + 0) * hw;
        const double* cx = coords.data() + (n * 2 + 1) * hw;
        for (i64 p = 0; p < hw; ++p) {
            double y = clamp_val(cy[p], 0.0, double(H - 1));
            double x0 = clamp_val(cx[p], 0.0, double(W - 1));
            i64 y0 = static_cast<i64>(std::floor(y));
            i64 x0i = static_cast<i64>(std::floor(x0));
            if (y0 > H - 1) y0 = H - 1;
            if (x0i > W - 1) x0i = W - 1;
            i64 y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0i + 1, W - 1);
            double ly = y - y0, lx = x0 - x0i;
            for (i64 c = 0; c < C; ++c) {
                const double* pl = x.data() + ((n * C + c) * H) * W;
                double v00 = pl[y0 * W + x0i], v01 = pl[y0 * W + x1];
                double v10 = pl[y1 * W + x0i], v11 = pl[y1 * W + x1];
                out[((n * C + c) * Ho) * Wo + p] =
                    (1 - ly) * ((1 - lx) * v00 + lx * v01) + ly * ((1 - lx) * v10 + lx * v11);
            }
        }
    }
    return make_op({N, C, Ho, Wo}, std::move(out), {x, coords}, [x, coords](TensorData& n) {
        i64 N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
        i64 Ho = coords.dim(2), Wo = coords.dim(3), hw = Ho * Wo;
        bool gx = x.node().requires_grad, gc = coords.node().requires_grad;
        if (gx) x.node().ensure_grad();
        if (gc) coords.node().ensure_grad();
        for (i64 b = 0; b < N; ++b) {
            const double* cy = coords.data() + (b * 2 + 0) * hw;
            const double* cx = coords.data() + (b * 2 + 1) * hw;
            for (i64 p = 0; p < hw; ++p) {
                bool y_in = (cy[p] >= 0.0 && cy[p] <= double(H - 1));
                bool x_in = (cx[p] >= 0.0 && cx[p] <= double(W - 1));
                double y = clamp_val(cy[p], 0.0, double(H - 1));
                double xv = clamp_val(cx[p], 0.0, double(W - 1));
                i64 y0 = std::min(static_cast<i64>(std::floor(y)), H - 1);
                i64 x0 = std::min(static_cast<i64>(std::floor(xv)), W - 1);
                i64 y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
                double ly = y - y0, lx = xv - x0;
                double dgy = 0.0, dgx = 0.0;
                for (i64 c = 0; c < C; ++c) {
                    double g = n.grad[((b * C + c) * Ho) * Wo + p];
                    const double* pl = x.data() + ((b * C + c) * H) * W;
                    double v00 = pl[y0 * W + x0], v01 = pl[y0 * W + x1];
                    double v10 = pl[y1 * W + x0], v11 = pl[y1 * W + x1];
                    if (gx) {
                        double* gp = x.node().grad.data() + ((b * C + c) * H) * W;
                        gp[y0 * W + x0] += g * (1 - ly) * (1 - lx);
                        gp[y0 * W + x1] += g * (1 - ly) * lx;
                        gp[y1 * W + x0] += g * ly * (1 - lx);
                        gp[y1 * W + x1] += g * ly * lx;
                    }
                    dgy += g * ((1 - lx) * (v10 - v00) + lx * (v11 - v01));
                    dgx += g * ((1 - ly) * (v01 - v00) + ly * (v11 - v10));
                }
                if (gc) {
                    if (y_in) coords.node().grad[(b * 2 + 0) * hw + p] += dgy;
                    if (x_in) coords.node().grad[(b * 2 + 1) * hw + p] += dgx;
                }
            }
        }
    });
}

// --- modulated deformable convolution ---

namespace detail {

struct DeformTap {
    i64 idx00, idx01, idx10, idx11;  // into the padded plane
    double w00, w01, w10, w11;
    double dy_in, dx_in;  // 1 if the coordinate was inside the clamp range
};

// Padded plane geometry shared by forward and backward.
struct DeformGeom {
    i64 N, Cin, H, W, Cout, kh, kw, dil;
    i64 pad_h, pad_w, Hp, Wp;
    i64 O;  // taps per output position
};

inline DeformGeom deform_geom(const Tensor& x, const Tensor& w, const Tensor& off,
                              const Tensor& mod, i64 dil) {
    check(x.rank() == 4 && w.rank() == 4, "deformable_conv2d: rank 4 expected");
    DeformGeom g;
    g.N = x.dim(0); g.Cin = x.dim(1); g.H = x.dim(2); g.W = x.dim(3);
    g.Cout = w.dim(0); g.kh = w.dim(2); g.kw = w.dim(3);
    g.dil = dil;
    check(w.dim(1) == g.Cin, "deformable_conv2d: channel mismatch");
    check(g.kh % 2 == 1 && g.kw % 2 == 1, "deformable_conv2d: odd kernel required");
    check(dil >= 1, "deformable_conv2d: dilation must be >= 1");
    g.O = g.kh * g.kw;
    check(off.rank() == 4 && off.dim(0) == g.N && off.dim(1) == 2 * g.O &&
              off.dim(2) == g.H && off.dim(3) == g.W,
          "deformable_conv2d: offsets must be (N, 2*kh*kw, H, W)");
    check(mod.rank() == 4 && mod.dim(0) == g.N && mod.dim(1) == g.O && mod.dim(2) == g.H &&
              mod.dim(3) == g.W,
          "deformable_conv2d: modulation must be (N, kh*kw, H, W)");
    g.pad_h = dil * (g.kh - 1) / 2;
    g.pad_w = dil * (g.kw - 1) / 2;
    g.Hp = g.H + 2 * g.pad_h;
    g.Wp = g.W + 2 * g.pad_w;
    return g;
}

inline void pad_zero(const double* src, const DeformGeom& g, std::vector<double>& padded) {
    padded.assign(static_cast<size_t>(g.Cin * g.Hp * g.Wp), 0.0);
    for (i64 c = 0; c < g.Cin; ++c)
        for (i64 i = 0; i < g.H; ++i)
            std::copy(src + (c * g.H + i) * g.W, src + (c * g.H + i + 1) * g.W,
                      padded.data() + (c * g.Hp + i + g.pad_h) * g.Wp + g.pad_w);
}

// Fills tap geometry and the (Cin*O) x (H*W) sampled column matrix with the
// modulation folded in.
inline void deform_cols(const DeformGeom& g, const std::vector<double>& padded,
                        const double* off, const double* mod, std::vector<DeformTap>& taps,
                        ColMat& col) {
    i64 hw = g.H * g.W;
    taps.resize(static_cast<size_t>(g.O * hw));
    col.resize(g.Cin * g.O, hw);
    for (i64 i = 0; i < g.H; ++i) {
        for (i64 j = 0; j < g.W; ++j) {
            i64 pos = i * g.W + j;
            for (i64 ti = 0; ti < g.kh; ++ti) {
                for (i64 tj = 0; tj < g.kw; ++tj) {
                    i64 o = ti * g.kw + tj;
                    double dy = off[(2 * o + 0) * hw + pos];
                    double dx = off[(2 * o + 1) * hw + pos];
                    double py = i + ti * g.dil + dy;
                    double px = j + tj * g.dil + dx;
                    DeformTap& t = taps[o * hw + pos];
                    t.dy_in = (py >= 0.0 && py <= double(g.Hp - 1)) ? 1.0 : 0.0;
                    t.dx_in = (px >= 0.0 && px <= double(g.Wp - 1)) ? 1.0 : 0.0;
                    py = clamp_val(py, 0.0, double(g.Hp - 1));
                    px = clamp_val(px, 0.0, double(g.Wp - 1));
                    i64 y0 = std::min(static_cast<i64>(std::floor(py)), g.Hp - 1);
                    i64 x0 = std::min(static_cast<i64>(std::floor(px)), g.Wp - 1);
                    i64 y1 = std::min(y0 + 1, g.Hp - 1);
                    i64 x1 = std::min(x0 + 1, g.Wp - 1);
                    double ly = py - y0, lx = px - x0;
                    t.idx00 = y0 * g.Wp + x0; t.idx01 = y0 * g.Wp + x1;
                    t.idx10 = y1 * g.Wp + x0; t.idx11 = y1 * g.Wp + x1;
                    t.w00 = (1 - ly) * (1 - lx); t.w01 = (1 - ly) * lx;
                    t.w10 = ly * (1 - lx); t.w11 = ly * lx;
                    double m = mod[o * hw + pos];
                    for (i64 c = 0; c < g.Cin; ++c) {
                        const double* pl = padded.data() + c * g.Hp * g.Wp;
                        double s = t.w00 * pl[t.idx00] + t.w01 * pl[t.idx01] +
                                   t.w10 * pl[t.idx10] + t.w11 * pl[t.idx11];
                        col((c * g.O + o), pos) = m * s;
                    }
                }
            }
        }
    }
}

}  // namespace detail

// Modulated deformable convolution, stride 1, same output size. Sampling
// positions are taken on a zero-padded copy of the input and clamped to the
// padded rectangle, so zero offsets reproduce zero-padded conv2d exactly.
// `modulation` is used as given; apply sigmoid beforehand.
inline Tensor deformable_conv2d(const Tensor& x, const Tensor& w, const Tensor& offsets,
                                const Tensor& modulation, i64 dilation = 1) {
    detail::DeformGeom g = detail::deform_geom(x, w, offsets, modulation, dilation);
    i64 hw = g.H * g.W;
    std::vector<double> out(static_cast<size_t>(g.N * g.Cout * hw));
    {
        std::vector<double> padded;
        std::vector<detail::DeformTap> taps;
        detail::ColMat col;
        detail::CMapRow wmat(w.data(), g.Cout, g.Cin * g.O);
        for (i64 n = 0; n < g.N; ++n) {
            detail::pad_zero(x.data() + n * g.Cin * g.H * g.W, g, padded);
            detail::deform_cols(g, padded, offsets.data() + n * 2 * g.O * hw,
                                modulation.data() + n * g.O * hw, taps, col);
            detail::MapRow omat(out.data() + n * g.Cout * hw, g.Cout, hw);
            omat.noalias() = wmat * col;
        }
    }
    return make_op(
        {g.N, g.Cout, g.H, g.W}, std::move(out), {x, w, offsets, modulation},
        [x, w, offsets, modulation, g](TensorData& n) {
            i64 hw = g.H * g.W;
            bool gx = x.node().requires_grad, gw = w.node().requires_grad;
            bool go = offsets.node().requires_grad, gm = modulation.node().requires_grad;
            if (gx) x.node().ensure_grad();
            if (gw) w.node().ensure_grad();
            if (go) offsets.node().ensure_grad();
            if (gm) modulation.node().ensure_grad();
            detail::CMapRow wmat(w.data(), g.Cout, g.Cin * g.O);
            std::vector<double> padded, dpadded;
            std::vector<detail::DeformTap> taps;
            detail::ColMat col, dcol;
            detail::RowMat dw = detail::RowMat::Zero(g.Cout, g.Cin * g.O);
            for (i64 b = 0; b < g.N; ++b) {
                const double* off = offsets.data() + b * 2 * g.O * hw;
                const double* mod = modulation.data() + b * g.O * hw;
                detail::pad_zero(x.data() + b * g.Cin * g.H * g.W, g, padded);
                detail::deform_cols(g, padded, off, mod, taps, col);
                detail::CMapRow dout(n.grad.data() + b * g.Cout * hw, g.Cout, hw);
                if (gw) dw.noalias() += dout * col.transpose();
                dcol.noalias() = wmat.transpose() * dout;
                if (gx) dpadded.assign(padded.size(), 0.0);
                for (i64 o = 0; o < g.O; ++o) {
                    for (i64 pos = 0; pos < hw; ++pos) {
                        const detail::DeformTap& t = taps[o * hw + pos];
                        double m = mod[o * hw + pos];
                        double dm = 0.0, dpy = 0.0, dpx = 0.0;
                        for (i64 c = 0; c < g.Cin; ++c) {
                            double gcol = dcol(c * g.O + o, pos);
                            if (gcol == 0.0) continue;
                            const double* pl = padded.data() + c * g.Hp * g.Wp;
                            double v00 = pl[t.idx00], v01 = pl[t.idx01];
                            double v10 = pl[t.idx10], v11 = pl[t.idx11];
                            double s = t.w00 * v00 + t.w01 * v01 + t.w10 * v10 + t.w11 * v11;
                            dm += gcol * s;
                            double gs = gcol * m;
                            if (gx) {
                                double* gp = dpadded.data() + c * g.Hp * g.Wp;
                                gp[t.idx00] += gs * t.w00;
                                gp[t.idx01] += gs * t.w01;
                                gp[t.idx10] += gs * t.w10;
                                gp[t.idx11] += gs * t.w11;
                            }
                            // d sample / d py with weights (1-ly)(..) + ly(..)
                            double ly_term = (t.w10 + t.w11);  // = ly
                            double lx_term = (t.w01 + t.w11);  // = lx
                            dpy += gs * ((1 - lx_term) * (v10 - v00) + lx_term * (v11 - v01));
                            dpx += gs * ((1 - ly_term) * (v01 - v00) + ly_term * (v11 - v10));
                        }
                        if (gm) modulation.node().grad[b * g.O * hw + o * hw + pos] += dm;
                        if (go) {
                            offsets.node().grad[b * 2 * g.O * hw + (2 * o + 0) * hw + pos] +=
                                dpy * t.dy_in;
                            offsets.node().grad[b * 2 * g.O * hw + (2 * o + 1) * hw + pos] +=
                                dpx * t.dx_in;
                        }
                    }
                }
                if (gx) {
                    double* gx_plane = x.node().grad.data() + b * g.Cin * g.H * g.W;
                    for (i64 c = 0; c < g.Cin; ++c)
                        for (i64 i = 0; i < g.H; ++i)
                            for (i64 j = 0; j < g.W; ++j)
                                gx_plane[(c * g.H + i) * g.W + j] +=
                                    dpadded[(c * g.Hp + i + g.pad_h) * g.Wp + j + g.pad_w];
                }
            }
            if (gw) {
                double* wd = w.node().grad.data();
                i64 ckk = g.Cin * g.O;
                for (i64 i = 0; i < g.Cout; ++i)
                    for (i64 j = 0; j < ckk; ++j) wd[i * ckk + j] += dw(i, j);
            }
        });
}

// --- dynamic local filtering ---

// out[n,ch,i,j] = r[n,ch,i,j] + sum_{l,m in [-p,p]} c[n,(l+p)(2p+1)+(m+p),i,j]
//                  * z[n,ch, clamp(i/s+l), clamp(j/s+m)]
// z is at low resolution, c and r at s times that; replicate padding at the
// borders of z.
inline Tensor dynamic_local_filter(const Tensor& z, const Tensor& c, const Tensor& r, i64 p,
                                   i64 s) {
    check(z.rank() == 4 && c.rank() == 4 && r.rank() == 4, "dynamic_local_filter: rank 4");
    i64 N = z.dim(0), C = z.dim(1), Hl = z.dim(2), Wl = z.dim(3);
    i64 K = 2 * p + 1, K2 = K * K;
    i64 Hh = Hl * s, Wh = Wl * s;
    check(s >= 1 && p >= 0, "dynamic_local_filter: bad p or s");
    check(c.dim(0) == N && c.dim(1) == K2 && c.dim(2) == Hh && c.dim(3) == Wh,
          "dynamic_local_filter: coefficient shape must be (N,(2p+1)^2,s*Hl,s*Wl)");
    check(r.dim(0) == N && r.dim(1) == C && r.dim(2) == Hh && r.dim(3) == Wh,
          "dynamic_local_filter: residual shape must be (N,C,s*Hl,s*Wl)");
    i64 hwh = Hh * Wh, hwl = Hl * Wl;
    std::vector<double> out(r.values());
    for (i64 n = 0; n < N; ++n) {
        for (i64 i = 0; i < Hh; ++i) {
            for (i64 j = 0; j < Wh; ++j) {
                i64 pos = i * Wh + j;
                i64 zi = i / s, zj = j / s;
                for (i64 l = -p; l <= p; ++l) {
                    i64 y = clamp_val(zi + l, i64(0), Hl - 1);
                    for (i64 m = -p; m <= p; ++m) {
                        i64 xc = clamp_val(zj + m, i64(0), Wl - 1);
                        double cv = c.data()[(n * K2 + (l + p) * K + (m + p)) * hwh + pos];
                        if (cv == 0.0) continue;
                        for (i64 ch = 0; ch < C; ++ch)
                            out[(n * C + ch) * hwh + pos] +=
                                cv * z.data()[(n * C + ch) * hwl + y * Wl + xc];
                    }
                }
            }
        }
    }
    return make_op({N, C, Hh, Wh}, std::move(out), {z, c, r}, [z, c, r, p, s](TensorData& n) {
        i64 N = z.dim(0), C = z.dim(1), Hl = z.dim(2), Wl = z.dim(3);
        i64 K = 2 * p + 1, K2 = K * K;
        i64 Hh = Hl * s, Wh = Wl * s;
        i64 hwh = Hh * Wh, hwl = Hl * Wl;
        bool gz = z.node().requires_grad, gc = c.node().requires_grad,
             gr = r.node().requires_grad;
        if (gz) z.node().ensure_grad();
        if (gc) c.node().ensure_grad();
        if (gr) r.node().ensure_grad();
        if (gr)
            for (i64 i = 0; i < n.numel(); ++i) r.node().grad[i] += n.grad[i];
        if (!gz && !gc) return;
        for (i64 b = 0; b < N; ++b) {
            for (i64 i = 0; i < Hh; ++i) {
                for (i64 j = 0; j < Wh; ++j) {
                    i64 pos = i * Wh + j;
                    i64 zi = i / s, zj = j / s;
                    for (i64 l = -p; l <= p; ++l) {
                        i64 y = clamp_val(zi + l, i64(0), Hl - 1);
                        for (i64 m = -p; m <= p; ++m) {
                            i64 xc = clamp_val(zj + m, i64(0), Wl - 1);
                            i64 cidx = (b * K2 + (l + p) * K + (m + p)) * hwh + pos;
                            double cv = c.data()[cidx];
                            double dc = 0.0;
                            for (i64 ch = 0; ch < C; ++ch) {
                                double g = n.grad[(b * C + ch) * hwh + pos];
                                i64 zidx = (b * C + ch) * hwl + y * Wl + xc;
                                dc += g * z.data()[zidx];
                                if (gz) z.node().grad[zidx] += g * cv;
                            }
                            if (gc) c.node().grad[cidx] += dc;
                        }
                    }
                }
            }
        }
    });
}

// --- misc helpers ---

inline bool all_finite(const Tensor& t) {
    for (double v : t.values())
        if (!std::isfinite(v)) return false;
    return true;
}

inline void require_finite(const Tensor& t, const std::string& what) {
    if (!all_finite(t)) throw numeric_error(what + ": non-finite values");
}

}  // namespace caduf
