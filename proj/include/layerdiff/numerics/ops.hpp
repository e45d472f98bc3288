#pragma once

// Differentiable primitives. Every op computes its forward value eagerly and,
// when recording, captures what it needs to push gradients to its inputs.

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "layerdiff/numerics/autograd.hpp"
#include "layerdiff/numerics/tensor.hpp"

namespace layerdiff::ops {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

/// Multiply-add FLOPs (x2) executed by conv2d, linear and bmm forwards on
/// this thread. Used to cross-check the analytic cost model.
inline std::uint64_t& flop_counter() {
    thread_local std::uint64_t count = 0;
    return count;
}

namespace detail {

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

template <typename T>
Tensor<T>* grad_of(Node<T>& node, std::size_t i) {
    auto& p = node.parents[i];
    if (!p->requires_grad) return nullptr;
    return &p->ensure_grad();
}

struct ConvGeom {
    std::int64_t n, c, h, w, o, k, stride, pad, ho, wo;
    bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
    const std::int64_t hw = g.ho * g.wo;
    for (std::int64_t c = 0; c < g.c; ++c) {
        for (std::int64_t ki = 0; ki < g.k; ++ki) {
            for (std::int64_t kj = 0; kj < g.k; ++kj) {
                T* row = col + ((c * g.k + ki) * g.k + kj) * hw;
                for (std::int64_t oh = 0; oh < g.ho; ++oh) {
                    const std::int64_t ih = oh * g.stride - g.pad + ki;
                    T* dst = row + oh * g.wo;
                    if (ih < 0 || ih >= g.h) {
                        std::fill(dst, dst + g.wo, T(0));
                        continue;
                    }
                    const T* src = x + (c * g.h + ih) * g.w;
                    for (std::int64_t ow = 0; ow < g.wo; ++ow) {
                        const std::int64_t iw = ow * g.stride - g.pad + kj;
                        dst[ow] = (iw >= 0 && iw < g.w) ? src[iw] : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, const ConvGeom& g, T* x) {
    const std::int64_t hw = g.ho * g.wo;
    for (std::int64_t c = 0; c < g.c; ++c) {
        for (std::int64_t ki = 0; ki < g.k; ++ki) {
            for (std::int64_t kj = 0; kj < g.k; ++kj) {
                const T* row = col + ((c * g.k + ki) * g.k + kj) * hw;
                for (std::int64_t oh = 0; oh < g.ho; ++oh) {
                    const std::int64_t ih = oh * g.stride - g.pad + ki;
                    if (ih < 0 || ih >= g.h) continue;
                    const T* src = row + oh * g.wo;
                    T* dst = x + (c * g.h + ih) * g.w;
                    for (std::int64_t ow = 0; ow < g.wo; ++ow) {
                        const std::int64_t iw = ow * g.stride - g.pad + kj;
                        if (iw >= 0 && iw < g.w) dst[iw] += src[ow];
                    }
                }
            }
        }
    }
}

}  // namespace detail

/// 2-D cross-correlation. `bias` may be an empty Var.
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, const Var<T>& bias, int stride, int padding) {
    using detail::require;
    const auto& xs = input.shape();
    const auto& ws = weight.shape();
    require(xs.size() == 4, "conv2d: input must be rank 4 [N,C,H,W], got " + shape_str(xs));
    require(ws.size() == 4, "conv2d: weight must be rank 4 [O,C,k,k], got " + shape_str(ws));
    require(ws[1] == xs[1], "conv2d: input channels " + std::to_string(xs[1]) + " != weight channels " +
                                std::to_string(ws[1]) + " (dimension 1)");
    require(ws[2] == ws[3], "conv2d: kernel must be square, got " + shape_str(ws));
    require(stride >= 1, "conv2d: stride must be >= 1");
    require(padding >= 0, "conv2d: padding must be >= 0");
    require(ws[2] <= xs[2] + 2 * padding && ws[2] <= xs[3] + 2 * padding,
            "conv2d: kernel " + std::to_string(ws[2]) + " exceeds padded input height/width " + shape_str(xs));
    if (bias) {
        require(bias.value().size() == static_cast<std::size_t>(ws[0]),
                "conv2d: bias length " + std::to_string(bias.value().size()) + " != output channels " +
                    std::to_string(ws[0]));
    }
    detail::ConvGeom g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], stride, padding, 0, 0};
    g.ho = (g.h + 2 * g.pad - g.k) / g.stride + 1;
    g.wo = (g.w + 2 * g.pad - g.k) / g.stride + 1;

    const std::int64_t ckk = g.c * g.k * g.k;
    const std::int64_t hw = g.ho * g.wo;
    Tensor<T> out(Shape{g.n, g.o, g.ho, g.wo});
    ConstMatMap<T> wmat(weight.value().data(), g.o, ckk);
    flop_counter() += static_cast<std::uint64_t>(2 * g.n * g.o * ckk * hw);
    AlignedVector<T> col(g.pointwise() ? 0 : static_cast<std::size_t>(ckk * hw));
    for (std::int64_t n = 0; n < g.n; ++n) {
        const T* xn = input.value().data() + n * g.c * g.h * g.w;
        const T* colp = xn;
        if (!g.pointwise()) {
            detail::im2col(xn, g, col.data());
            colp = col.data();
        }
        MatMap<T> on(out.data() + n * g.o * hw, g.o, hw);
        on.noalias() = wmat * ConstMatMap<T>(colp, ckk, hw);
        if (bias) {
            for (std::int64_t o = 0; o < g.o; ++o) on.row(o).array() += bias.value()[static_cast<std::size_t>(o)];
        }
    }

    std::vector<Var<T>> parents{input, weight};
    if (bias) parents.push_back(bias);
    const bool has_bias = static_cast<bool>(bias);
    return make_result<T>(std::move(out), std::move(parents), [g, ckk, hw, has_bias](Node<T>& node) {
        const auto& x = node.parents[0]->value;
        const auto& w = node.parents[1]->value;
        Tensor<T>* gx = detail::grad_of(node, 0);
        Tensor<T>* gw = detail::grad_of(node, 1);
        Tensor<T>* gb = has_bias ? detail::grad_of(node, 2) : nullptr;
        ConstMatMap<T> wmat(w.data(), g.o, ckk);
        AlignedVector<T> col(g.pointwise() ? 0 : static_cast<std::size_t>(ckk * hw));
        AlignedVector<T> dcol(g.pointwise() ? 0 : static_cast<std::size_t>(ckk * hw));
        for (std::int64_t n = 0; n < g.n; ++n) {
            ConstMatMap<T> dy(node.grad.data() + n * g.o * hw, g.o, hw);
            const T* xn = x.data() + n * g.c * g.h * g.w;
            if (gw) {
                const T* colp = xn;
                if (!g.pointwise()) {
                    detail::im2col(xn, g, col.data());
                    colp = col.data();
                }
                MatMap<T> dw(gw->data(), g.o, ckk);
                dw.noalias() += dy * ConstMatMap<T>(colp, ckk, hw).transpose();
            }
            if (gb) {
                for (std::int64_t o = 0; o < g.o; ++o) (*gb)[static_cast<std::size_t>(o)] += dy.row(o).sum();
            }
            if (gx) {
                T* dxn = gx->data() + n * g.c * g.h * g.w;
                if (g.pointwise()) {
                    MatMap<T>(dxn, g.c, hw).noalias() += wmat.transpose() * dy;
                } else {
                    MatMap<T>(dcol.data(), ckk, hw).noalias() = wmat.transpose() * dy;
                    detail::col2im_add(dcol.data(), g, dxn);
                }
            }
        }
    });
}

/// Nearest-neighbour upsampling by a factor of two in both spatial axes.
template <typename T>
Var<T> upsample_nearest2x(const Var<T>& input) {
    const auto& s = input.shape();
    detail::require(s.size() == 4, "upsample_nearest2x: input must be rank 4, got " + shape_str(s));
    const std::int64_t n = s[0], c = s[1], h = s[2], w = s[3];
    Tensor<T> out(Shape{n, c, 2 * h, 2 * w});
    const T* x = input.value().data();
    T* y = out.data();
    for (std::int64_t p = 0; p < n * c; ++p) {
        for (std::int64_t i = 0; i < 2 * h; ++i) {
            const T* src = x + (p * h + i / 2) * w;
            T* dst = y + (p * 2 * h + i) * 2 * w;
            for (std::int64_t j = 0; j < 2 * w; ++j) dst[j] = src[j / 2];
        }
    }
    return make_result<T>(std::move(out), {input}, [n, c, h, w](Node<T>& node) {
        Tensor<T>* gx = detail::grad_of(node, 0);
        if (!gx) return;
        const T* dy = node.grad.data();
        T* dx = gx->data();
        for (std::int64_t p = 0; p < n * c; ++p) {
            for (std::int64_t i = 0; i < 2 * h; ++i) {
                const T* src = dy + (p * 2 * h + i) * 2 * w;
                T* dst = dx + (p * h + i / 2) * w;
                for (std::int64_t j = 0; j < 2 * w; ++j) dst[j / 2] += src[j];
            }
        }
    });
}

/// Group normalization over [N,C,H,W] with per-channel affine parameters.
template <typename T>
Var<T> group_norm(const Var<T>& input, const Var<T>& gamma, const Var<T>& beta, int groups, double eps = 1e-5) {
    const auto& s = input.shape();
    detail::require(s.size() == 4, "group_norm: input must be rank 4, got " + shape_str(s));
    detail::require(groups >= 1 && s[1] % groups == 0,
                    "group_norm: channels " + std::to_string(s[1]) + " not divisible by groups " +
                        std::to_string(groups));
    detail::require(gamma.value().size() == static_cast<std::size_t>(s[1]) &&
                        beta.value().size() == static_cast<std::size_t>(s[1]),
                    "group_norm: affine parameters must have one entry per channel");
    const std::int64_t n = s[0], c = s[1], hw = s[2] * s[3];
    const std::int64_t cpg = c / groups;
    const std::int64_t gsize = cpg * hw;
    Tensor<T> xhat(s);
    std::vector<T> rstd(static_cast<std::size_t>(n * groups));
    const T* x = input.value().data();
    for (std::int64_t i = 0; i < n * groups; ++i) {
        const T* xg = x + i * gsize;
        double mean = 0;
        for (std::int64_t j = 0; j < gsize; ++j) mean += xg[j];
        mean /= static_cast<double>(gsize);
        double var = 0;
        for (std::int64_t j = 0; j < gsize; ++j) var += (xg[j] - mean) * (xg[j] - mean);
        var /= static_cast<double>(gsize);
        const double r = 1.0 / std::sqrt(var + eps);
        rstd[static_cast<std::size_t>(i)] = static_cast<T>(r);
        T* hg = xhat.data() + i * gsize;
        for (std::int64_t j = 0; j < gsize; ++j) hg[j] = static_cast<T>((xg[j] - mean) * r);
    }
    Tensor<T> out(s);
    const T* gm = gamma.value().data();
    const T* bt = beta.value().data();
    for (std::int64_t b = 0; b < n; ++b) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const std::int64_t off = (b * c + ch) * hw;
            for (std::int64_t j = 0; j < hw; ++j) out[static_cast<std::size_t>(off + j)] = gm[ch] * xhat[static_cast<std::size_t>(off + j)] + bt[ch];
        }
    }
    return make_result<T>(std::move(out), {input, gamma, beta},
                          [n, c, hw, cpg, gsize, groups, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& node) {
        Tensor<T>* gx = detail::grad_of(node, 0);
        Tensor<T>* gg = detail::grad_of(node, 1);
        Tensor<T>* gb = detail::grad_of(node, 2);
        const T* dy = node.grad.data();
        const T* gm = node.parents[1]->value.data();
        for (std::int64_t b = 0; b < n; ++b) {
            for (std::int64_t ch = 0; ch < c; ++ch) {
                const std::int64_t off = (b * c + ch) * hw;
                T sg = 0, sb = 0;
                for (std::int64_t j = 0; j < hw; ++j) {
                    sg += dy[off + j] * xhat[static_cast<std::size_t>(off + j)];
                    sb += dy[off + j];
                }
                if (gg) (*gg)[static_cast<std::size_t>(ch)] += sg;
                if (gb) (*gb)[static_cast<std::size_t>(ch)] += sb;
            }
        }
        if (!gx) return;
        for (std::int64_t i = 0; i < n * groups; ++i) {
            const std::int64_t base = i * gsize;
            const std::int64_t ch0 = (i % groups) * cpg;
            double m1 = 0, m2 = 0;
            for (std::int64_t j = 0; j < gsize; ++j) {
                const double dxh = dy[base + j] * gm[ch0 + j / hw];
                m1 += dxh;
                m2 += dxh * xhat[static_cast<std::size_t>(base + j)];
            }
            m1 /= static_cast<double>(gsize);
            m2 /= static_cast<double>(gsize);
            const double r = rstd[static_cast<std::size_t>(i)];
            T* dx = gx->data() + base;
            for (std::int64_t j = 0; j < gsize; ++j) {
                const double dxh = dy[base + j] * gm[ch0 + j / hw];
                dx[j] += static_cast<T>(r * (dxh - m1 - xhat[static_cast<std::size_t>(base + j)] * m2));
            }
        }
    });
}

/// x * sigmoid(x)
template <typename T>
Var<T> silu(const Var<T>& input) {
    const auto& x = input.value();
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] / (T(1) + std::exp(-x[i]));
    return make_result<T>(std::move(out), {input}, [](Node<T>& node) {
        Tensor<T>* gx = detail::grad_of(node, 0);
        if (!gx) return;
        const auto& x = node.parents[0]->value;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const T s = T(1) / (T(1) + std::exp(-x[i]));
            (*gx)[i] += node.grad[i] * s * (T(1) + x[i] * (T(1) - s));
        }
    });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    detail::require(a.shape() == b.shape(), "add: shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    return make_result<T>(std::move(out), {a, b}, [](Node<T>& node) {
        for (std::size_t p = 0; p < 2; ++p) {
            if (Tensor<T>* g = detail::grad_of(node, p)) {
                for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += node.grad[i];
            }
        }
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    detail::require(a.shape() == b.shape(), "sub: shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    return make_result<T>(std::move(out), {a, b}, [](Node<T>& node) {
        if (Tensor<T>* g = detail::grad_of(node, 0)) {
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += node.grad[i];
        }
        if (Tensor<T>* g = detail::grad_of(node, 1)) {
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= node.grad[i];
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    detail::require(a.shape() == b.shape(), "mul: shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    return make_result<T>(std::move(out), {a, b}, [](Node<T>& node) {
        const auto& av = node.parents[0]->value;
        const auto& bv = node.parents[1]->value;
        if (Tensor<T>* g = detail::grad_of(node, 0)) {
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += node.grad[i] * bv[i];
        }
        if (Tensor<T>* g = detail::grad_of(node, 1)) {
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += node.grad[i] * av[i];
        }
    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
    Tensor<T> out = a.value();
    for (auto& v : out.storage()) v *= s;
    return make_result<T>(std::move(out), {a}, [s](Node<T>& node) {
        if (Tensor<T>* g = detail::grad_of(node, 0)) {
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += node.grad[i] * s;
        }
    });
}

/// Adds a per-sample, per-channel vector [N,C] to every pixel of [N,C,H,W].
template <typename T>
Var<T> add_channelwise(const Var<T>& x, const Var<T>& v) {
    const auto& s = x.shape();
    detail::require(s.size() == 4 && v.shape().size() == 2 && v.shape()[0] == s[0] && v.shape()[1] == s[1],
                    "add_channelwise: expected [N,C,H,W] and [N,C], got " + shape_str(s) + " and " +
                        shape_str(v.shape()));
    const std::int64_t nc = s[0] * s[1], hw = s[2] * s[3];
    Tensor<T> out = x.value();
    for (std::int64_t p = 0; p < nc; ++p) {
        const T add = v.value()[static_cast<std::size_t>(p)];
        for (std::int64_t j = 0; j < hw; ++j) out[static_cast<std::size_t>(p * hw + j)] += add;
    }
    return make_result<T>(std::move(out), {x, v}, [nc, hw](Node<T>& node) {
        if (Tensor<T>* g = detail::grad_of(node, 0)) {
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += node.grad[i];
        }
        if (Tensor<T>* g = detail::grad_of(node, 1)) {
            for (std::int64_t p = 0; p < nc; ++p) {
                T s = 0;
                for (std::int64_t j = 0; j < hw; ++j) s += node.grad[static_cast<std::size_t>(p * hw + j)];
                (*g)[static_cast<std::size_t>(p)] += s;
            }
        }
    });
}

/// x [N,I] times weight [O,I] transposed, plus bias [O].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
    const auto& xs = x.shape();
    const auto& ws = weight.shape();
    detail::require(xs.size() == 2 && ws.size() == 2 && xs[1] == ws[1],
                    "linear: expected [N,I] and [O,I], got " + shape_str(xs) + " and " + shape_str(ws));
    const std::int64_t n = xs[0], in = xs[1], o = ws[0];
    Tensor<T> out(Shape{n, o});
    flop_counter() += static_cast<std::uint64_t>(2 * n * in * o);
    MatMap<T> y(out.data(), n, o);
    y.noalias() = ConstMatMap<T>(x.value().data(), n, in) * ConstMatMap<T>(weight.value().data(), o, in).transpose();
    if (bias) {
        detail::require(bias.value().size() == static_cast<std::size_t>(o), "linear: bias length mismatch");
        for (std::int64_t r = 0; r < n; ++r) {
            for (std::int64_t j = 0; j < o; ++j) y(r, j) += bias.value()[static_cast<std::size_t>(j)];
        }
    }
    std::vector<Var<T>> parents{x, weight};
    if (bias) parents.push_back(bias);
    const bool has_bias = static_cast<bool>(bias);
    return make_result<T>(std::move(out), std::move(parents), [n, in, o, has_bias](Node<T>& node) {
        ConstMatMap<T> dy(node.grad.data(), n, o);
        if (Tensor<T>* g = detail::grad_of(node, 0)) {
            MatMap<T>(g->data(), n, in).noalias() += dy * ConstMatMap<T>(node.parents[1]->value.data(), o, in);
        }
        if (Tensor<T>* g = detail::grad_of(node, 1)) {
            MatMap<T>(g->data(), o, in).noalias() += dy.transpose() * ConstMatMap<T>(node.parents[0]->value.data(), n, in);
        }
        if (has_bias) {
            if (Tensor<T>* g = detail::grad_of(node, 2)) {
                for (std::int64_t j = 0; j < o; ++j) (*g)[static_cast<std::size_t>(j)] += dy.col(j).sum();
            }
        }
    });
}

/// Batched matrix product op(a) * op(b) over a leading batch axis.
template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool transpose_a, bool transpose_b) {
    const auto& as = a.shape();
    const auto& bs = b.shape();
    detail::require(as.size() == 3 && bs.size() == 3 && as[0] == bs[0],
                    "bmm: expected rank-3 tensors with equal batch, got " + shape_str(as) + " and " + shape_str(bs));
    const std::int64_t batch = as[0];
    const std::int64_t ar = as[1], ac = as[2], br = bs[1], bc = bs[2];
    const std::int64_t m = transpose_a ? ac : ar;
    const std::int64_t ka = transpose_a ? ar : ac;
    const std::int64_t kb = transpose_b ? bc : br;
    const std::int64_t p = transpose_b ? br : bc;
    detail::require(ka == kb, "bmm: inner dimensions differ (" + std::to_string(ka) + " vs " + std::to_string(kb) + ")");
    Tensor<T> out(Shape{batch, m, p});
    flop_counter() += static_cast<std::uint64_t>(2 * batch * m * ka * p);
    for (std::int64_t i = 0; i < batch; ++i) {
        ConstMatMap<T> am(a.value().data() + i * ar * ac, ar, ac);
        ConstMatMap<T> bm(b.value().data() + i * br * bc, br, bc);
        MatMap<T> cm(out.data() + i * m * p, m, p);
        if (transpose_a && transpose_b) cm.noalias() = am.transpose() * bm.transpose();
        else if (transpose_a) cm.noalias() = am.transpose() * bm;
        else if (transpose_b) cm.noalias() = am * bm.transpose();
        else cm.noalias() = am * bm;
    }
    return make_result<T>(std::move(out), {a, b}, [=](Node<T>& node) {
        Tensor<T>* ga = detail::grad_of(node, 0);
        Tensor<T>* gb = detail::grad_of(node, 1);
        for (std::int64_t i = 0; i < batch; ++i) {
            ConstMatMap<T> am(node.parents[0]->value.data() + i * ar * ac, ar, ac);
            ConstMatMap<T> bm(node.parents[1]->value.data() + i * br * bc, br, bc);
            ConstMatMap<T> dc(node.grad.data() + i * m * p, m, p);
            if (ga) {
                MatMap<T> da(ga->data() + i * ar * ac, ar, ac);
                // C = opA(A) opB(B)
                if (!transpose_a && !transpose_b) da.noalias() += dc * bm.transpose();
                else if (!transpose_a && transpose_b) da.noalias() += dc * bm;
                else if (transpose_a && !transpose_b) da.noalias() += bm * dc.transpose();
                else da.noalias() += bm.transpose() * dc.transpose();
            }
            if (gb) {
                MatMap<T> db(gb->data() + i * br * bc, br, bc);
                if (!transpose_a && !transpose_b) db.noalias() += am.transpose() * dc;
                else if (!transpose_a && transpose_b) db.noalias() += dc.transpose() * am;
                else if (transpose_a && !transpose_b) db.noalias() += am * dc;
                else db.noalias() += dc.transpose() * am.transpose();
            }
        }
    });
}

/// Softmax along the last axis.
template <typename T>
Var<T> softmax_lastdim(const Var<T>& input) {
    const auto& s = input.shape();
    const std::int64_t cols = s.back();
    const std::int64_t rows = static_cast<std::int64_t>(input.value().size()) / cols;
    Tensor<T> out(s);
    const T* x = input.value().data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* xr = x + r * cols;
        T* yr = out.data() + r * cols;
        const T mx = *std::max_element(xr, xr + cols);
        T sum = 0;
        for (std::int64_t j = 0; j < cols; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            sum += yr[j];
        }
        for (std::int64_t j = 0; j < cols; ++j) yr[j] /= sum;
    }
    return make_result<T>(out, {input}, [rows, cols, y = out](Node<T>& node) {
        Tensor<T>* gx = detail::grad_of(node, 0);
        if (!gx) return;
        for (std::int64_t r = 0; r < rows; ++r) {
            const T* yr = y.data() + r * cols;
            const T* dy = node.grad.data() + r * cols;
            T dot = 0;
            for (std::int64_t j = 0; j < cols; ++j) dot += dy[j] * yr[j];
            T* dx = gx->data() + r * cols;
            for (std::int64_t j = 0; j < cols; ++j) dx[j] += yr[j] * (dy[j] - dot);
        }
    });
}

template <typename T>
Var<T> reshape(const Var<T>& input, Shape shape) {
    Tensor<T> out = input.value().reshaped(std::move(shape));
    return make_result<T>(std::move(out), {input}, [](Node<T>& node) {
        if (Tensor<T>* g = detail::grad_of(node, 0)) {
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += node.grad[i];
        }
    });
}

/// Concatenates rank-4 tensors along the channel axis.
template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
    detail::require(!parts.empty(), "concat_channels: no inputs");
    const auto& s0 = parts.front().shape();
    detail::require(s0.size() == 4, "concat_channels: inputs must be rank 4");
    std::int64_t c_total = 0;
    std::vector<std::int64_t> chans;
    for (const auto& p : parts) {
        const auto& s = p.shape();
        detail::require(s.size() == 4 && s[0] == s0[0] && s[2] == s0[2] && s[3] == s0[3],
                        "concat_channels: incompatible shapes " + shape_str(s0) + " and " + shape_str(s));
        chans.push_back(s[1]);
        c_total += s[1];
    }
    const std::int64_t n = s0[0], hw = s0[2] * s0[3];
    Tensor<T> out(Shape{n, c_total, s0[2], s0[3]});
    for (std::int64_t b = 0; b < n; ++b) {
        std::int64_t off = 0;
        for (std::size_t k = 0; k < parts.size(); ++k) {
            const T* src = parts[k].value().data() + b * chans[k] * hw;
            std::copy(src, src + chans[k] * hw, out.data() + (b * c_total + off) * hw);
            off += chans[k];
        }
    }
    return make_result<T>(std::move(out), parts, [n, hw, c_total, chans](Node<T>& node) {
        std::int64_t off = 0;
        for (std::size_t k = 0; k < chans.size(); ++k) {
            if (Tensor<T>* g = detail::grad_of(node, k)) {
                for (std::int64_t b = 0; b < n; ++b) {
                    const T* src = node.grad.data() + (b * c_total + off) * hw;
                    T* dst = g->data() + b * chans[k] * hw;
                    for (std::int64_t j = 0; j < chans[k] * hw; ++j) dst[j] += src[j];
                }
            }
            off += chans[k];
        }
    });
}

/// Spatial crop of [N,C,H,W] to rows [top, top+height) and columns [left, left+width).
template <typename T>
Var<T> crop_spatial(const Var<T>& input, std::int64_t top, std::int64_t left, std::int64_t height, std::int64_t width) {
    const auto& s = input.shape();
    detail::require(s.size() == 4, "crop_spatial: input must be rank 4");
    detail::require(top >= 0 && left >= 0 && height > 0 && width > 0 && top + height <= s[2] && left + width <= s[3],
                    "crop_spatial: rectangle (" + std::to_string(left) + "," + std::to_string(top) + "," +
                        std::to_string(width) + "," + std::to_string(height) + ") outside " + shape_str(s));
    const std::int64_t nc = s[0] * s[1], h = s[2], w = s[3];
    Tensor<T> out(Shape{s[0], s[1], height, width});
    for (std::int64_t p = 0; p < nc; ++p) {
        for (std::int64_t i = 0; i < height; ++i) {
            const T* src = input.value().data() + (p * h + top + i) * w + left;
            std::copy(src, src + width, out.data() + (p * height + i) * width);
        }
    }
    return make_result<T>(std::move(out), {input}, [=](Node<T>& node) {
        Tensor<T>* g = detail::grad_of(node, 0);
        if (!g) return;
        for (std::int64_t p = 0; p < nc; ++p) {
            for (std::int64_t i = 0; i < height; ++i) {
                const T* src = node.grad.data() + (p * height + i) * width;
                T* dst = g->data() + (p * h + top + i) * w + left;
                for (std::int64_t j = 0; j < width; ++j) dst[j] += src[j];
            }
        }
    });
}

/// Mean of embedding rows selected by each sample's token ids, skipping `pad_id`.
/// Samples with no non-pad tokens get a zero vector.
template <typename T>
Var<T> embedding_mean(const Var<T>& table, const std::vector<std::vector<int>>& tokens, int pad_id) {
    const auto& ts = table.shape();
    detail::require(ts.size() == 2, "embedding_mean: table must be [V,D]");
    const std::int64_t vocab = ts[0], d = ts[1];
    const auto n = static_cast<std::int64_t>(tokens.size());
    detail::require(n > 0, "embedding_mean: empty batch");
    Tensor<T> out(Shape{n, d});
    for (std::int64_t b = 0; b < n; ++b) {
        int count = 0;
        for (int id : tokens[static_cast<std::size_t>(b)]) {
            detail::require(id >= 0 && id < vocab, "embedding_mean: token id " + std::to_string(id) + " out of range");
            if (id != pad_id) ++count;
        }
        if (count == 0) continue;
        for (int id : tokens[static_cast<std::size_t>(b)]) {
            if (id == pad_id) continue;
            for (std::int64_t j = 0; j < d; ++j) out[static_cast<std::size_t>(b * d + j)] += table.value()[static_cast<std::size_t>(id * d + j)] / T(count);
        }
    }
    return make_result<T>(std::move(out), {table}, [tokens, pad_id, d](Node<T>& node) {
        Tensor<T>* g = detail::grad_of(node, 0);
        if (!g) return;
        for (std::size_t b = 0; b < tokens.size(); ++b) {
            int count = 0;
            for (int id : tokens[b]) count += (id != pad_id);
            if (count == 0) continue;
            for (int id : tokens[b]) {
                if (id == pad_id) continue;
                for (std::int64_t j = 0; j < d; ++j) (*g)[static_cast<std::size_t>(id * d + j)] += node.grad[b * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)] / T(count);
            }
        }
    });
}

template <typename T>
Var<T> sum(const Var<T>& input) {
    T s = 0;
    for (auto v : input.value().values()) s += v;
    return make_result<T>(Tensor<T>::scalar(s), {input}, [](Node<T>& node) {
        if (Tensor<T>* g = detail::grad_of(node, 0)) {
            for (auto& v : g->storage()) v += node.grad[0];
        }
    });
}

/// Mean squared difference against a constant target.
template <typename T>
Var<T> mse(const Var<T>& pred, const Tensor<T>& target) {
    detail::require(pred.shape() == target.shape(),
                    "mse: prediction " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape()));
    const auto n = pred.value().size();
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(pred.value()[i]) - static_cast<double>(target[i]);
        s += d * d;
    }
    return make_result<T>(Tensor<T>::scalar(static_cast<T>(s / static_cast<double>(n))), {pred}, [target](Node<T>& node) {
        Tensor<T>* g = detail::grad_of(node, 0);
        if (!g) return;
        const auto& p = node.parents[0]->value;
        const T k = T(2) * node.grad[0] / T(p.size());
        for (std::size_t i = 0; i < p.size(); ++i) (*g)[i] += k * (p[i] - target[i]);
    });
}

/// Sum of scalars with fixed weights.
template <typename T>
Var<T> weighted_sum(const std::vector<Var<T>>& terms, const std::vector<double>& weights) {
    detail::require(terms.size() == weights.size(), "weighted_sum: term/weight count mismatch");
    T s = 0;
    for (std::size_t i = 0; i < terms.size(); ++i) {
        detail::require(terms[i].value().size() == 1, "weighted_sum: terms must be scalars");
        s += static_cast<T>(weights[i]) * terms[i].value()[0];
    }
    return make_result<T>(Tensor<T>::scalar(s), terms, [weights](Node<T>& node) {
        for (std::size_t i = 0; i < weights.size(); ++i) {
            if (Tensor<T>* g = detail::grad_of(node, i)) (*g)[0] += static_cast<T>(weights[i]) * node.grad[0];
        }
    });
}

}  // namespace layerdiff::ops
