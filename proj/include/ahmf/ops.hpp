#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "ahmf/errors.hpp"
#include "ahmf/kernels.hpp"
#include "ahmf/rng.hpp"
#include "ahmf/tensor.hpp"

// Differentiable operation core. Every op is a pure forward function paired
// with an explicit backward. Convention: backward functions take the upstream
// gradient plus whatever the forward cached, accumulate parameter gradients
// into the parameter tensors' .grad, and return the gradient w.r.t. the
// activation input(s). There is no graph; callers (the model) own the wiring.

namespace ahmf::ops {

// ---------------------------------------------------------------- helpers --

template <typename S>
inline void accumulate_grad(TensorT<S>& t, const TensorT<S>& g) {
    if (!t.requires_grad) return;
    check_same_shape(t, g, "gradient accumulation");
    kernels::add(t.grad.data(), t.grad.data(), g.data.data(), t.numel());
}

template <typename S>
inline S tensor_sum(const TensorT<S>& t) {
    double acc = 0.0;
    for (S v : t.data) acc += static_cast<double>(v);
    return static_cast<S>(acc);
}

template <typename S>
inline TensorT<S> ew_add(const TensorT<S>& a, const TensorT<S>& b) {
    check_same_shape(a, b, "elementwise add");
    TensorT<S> y(a.shape);
    kernels::add(y.data.data(), a.data.data(), b.data.data(), a.numel());
    return y;
}

template <typename S>
inline TensorT<S> ew_mul(const TensorT<S>& a, const TensorT<S>& b) {
    check_same_shape(a, b, "elementwise mul");
    TensorT<S> y(a.shape);
    kernels::mul(y.data.data(), a.data.data(), b.data.data(), a.numel());
    return y;
}

template <typename S>
inline void ew_add_into(TensorT<S>& dst, const TensorT<S>& src) {
    check_same_shape(dst, src, "elementwise add-into");
    kernels::add(dst.data.data(), dst.data.data(), src.data.data(), dst.numel());
}

// ----------------------------------------------------------------- linear --

// y[n,o] = sum_d W[o,d] * x[n,d] + b[o]
template <typename S>
TensorT<S> linear(const TensorT<S>& x, const TensorT<S>& W, const TensorT<S>& b) {
    if (x.rank() != 2 || W.rank() != 2 || b.rank() != 1)
        throw DimensionError("linear: expected x rank 2, W rank 2, b rank 1, got x " +
                             shape_str(x.shape) + ", W " + shape_str(W.shape) + ", b " +
                             shape_str(b.shape));
    const int N = x.extent(0), Din = x.extent(1);
    const int Dout = W.extent(0);
    if (W.extent(1) != Din || b.extent(0) != Dout)
        throw DimensionError("linear: inner dimensions disagree, x " + shape_str(x.shape) +
                             " vs W " + shape_str(W.shape) + " vs b " + shape_str(b.shape));
    TensorT<S> y({N, Dout});
    for (int n = 0; n < N; ++n) {
        const S* xr = x.data.data() + static_cast<std::size_t>(n) * Din;
        S* yr = y.data.data() + static_cast<std::size_t>(n) * Dout;
        for (int o = 0; o < Dout; ++o)
            yr[o] = kernels::dot(W.data.data() + static_cast<std::size_t>(o) * Din, xr,
                                 static_cast<std::size_t>(Din)) +
                    b.data[static_cast<std::size_t>(o)];
    }
    return y;
}

// Accumulates into W.grad / b.grad, returns gx.
template <typename S>
TensorT<S> linear_backward(const TensorT<S>& gy, const TensorT<S>& x, TensorT<S>& W,
                           TensorT<S>& b) {
    const int N = x.extent(0), Din = x.extent(1), Dout = W.extent(0);
    check_same_shape(gy, TensorT<S>({N, Dout}), "linear backward output grad");
    TensorT<S> gx({N, Din});
    for (int n = 0; n < N; ++n) {
        const S* gyr = gy.data.data() + static_cast<std::size_t>(n) * Dout;
        const S* xr = x.data.data() + static_cast<std::size_t>(n) * Din;
        S* gxr = gx.data.data() + static_cast<std::size_t>(n) * Din;
        for (int o = 0; o < Dout; ++o) {
            const S g = gyr[o];
            kernels::axpy(gxr, g, W.data.data() + static_cast<std::size_t>(o) * Din,
                          static_cast<std::size_t>(Din));
            if (W.requires_grad)
                kernels::axpy(W.grad.data() + static_cast<std::size_t>(o) * Din, g, xr,
                              static_cast<std::size_t>(Din));
            if (b.requires_grad) b.grad[static_cast<std::size_t>(o)] += g;
        }
    }
    return gx;
}

// ----------------------------------------------------------------- matmul --

// C[M,N] = op_a(A) * op_b(B) where op transposes when the flag is set.
template <typename S>
TensorT<S> matmul(const TensorT<S>& A, const TensorT<S>& B, bool ta = false, bool tb = false) {
    if (A.rank() != 2 || B.rank() != 2)
        throw DimensionError("matmul: expected rank-2 operands, got " + shape_str(A.shape) +
                             " and " + shape_str(B.shape));
    const int M = ta ? A.extent(1) : A.extent(0);
    const int K = ta ? A.extent(0) : A.extent(1);
    const int Kb = tb ? B.extent(1) : B.extent(0);
    const int N = tb ? B.extent(0) : B.extent(1);
    if (K != Kb)
        throw DimensionError("matmul: contraction dims disagree, " + shape_str(A.shape) +
                             (ta ? "^T" : "") + " vs " + shape_str(B.shape) + (tb ? "^T" : ""));
    TensorT<S> C = TensorT<S>::zeros({M, N});
    if (!ta && !tb) {
        for (int m = 0; m < M; ++m)
            for (int k = 0; k < K; ++k)
                kernels::axpy(C.data.data() + static_cast<std::size_t>(m) * N,
                              A.data[A.off2(m, k)],
                              B.data.data() + static_cast<std::size_t>(k) * N,
                              static_cast<std::size_t>(N));
    } else if (!ta && tb) {
        for (int m = 0; m < M; ++m)
            for (int n = 0; n < N; ++n)
                C.data[C.off2(m, n)] =
                    kernels::dot(A.data.data() + static_cast<std::size_t>(m) * K,
                                 B.data.data() + static_cast<std::size_t>(n) * K,
                                 static_cast<std::size_t>(K));
    } else if (ta && !tb) {
        for (int k = 0; k < K; ++k)
            for (int m = 0; m < M; ++m)
                kernels::axpy(C.data.data() + static_cast<std::size_t>(m) * N,
                              A.data[A.off2(k, m)],
                              B.data.data() + static_cast<std::size_t>(k) * N,
                              static_cast<std::size_t>(N));
    } else {
        for (int m = 0; m < M; ++m)
            for (int n = 0; n < N; ++n) {
                S acc = S(0);
                for (int k = 0; k < K; ++k) acc += A.data[A.off2(k, m)] * B.data[B.off2(n, k)];
                C.data[C.off2(m, n)] = acc;
            }
    }
    return C;
}

template <typename S>
TensorT<S> transpose2d(const TensorT<S>& x) {
    if (x.rank() != 2)
        throw DimensionError("transpose2d: expected rank 2, got " + shape_str(x.shape));
    const int R = x.extent(0), C = x.extent(1);
    TensorT<S> y({C, R});
    for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) y.data[y.off2(c, r)] = x.data[x.off2(r, c)];
    return y;
}

// ----------------------------------------------------------------- conv2d --

// Cross-correlation on a single image, NCHW without the batch dim.
// x: [C,H,W], w: [OC, C/groups, k, k], b: [OC]. Output [OC,Ho,Wo] with
// Ho = (H + 2*pad - k)/stride + 1.
template <typename S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b,
                  int stride = 1, int pad = 0, int groups = 1) {
    if (x.rank() != 3 || w.rank() != 4 || b.rank() != 1)
        throw DimensionError("conv2d: expected x rank 3, w rank 4, b rank 1, got x " +
                             shape_str(x.shape) + ", w " + shape_str(w.shape));
    const int C = x.extent(0), H = x.extent(1), W = x.extent(2);
    const int OC = w.extent(0), Cg = w.extent(1), kh = w.extent(2), kw = w.extent(3);
    if (kh != kw || kh % 2 == 0)
        throw ConfigError("conv2d: kernel must be square with odd extent, got " +
                          shape_str(w.shape));
    if (stride < 1 || pad < 0 || groups < 1)
        throw ConfigError("conv2d: stride/pad/groups out of range");
    if (C % groups != 0 || OC % groups != 0 || Cg != C / groups)
        throw DimensionError("conv2d: channel grouping mismatch, x " + shape_str(x.shape) +
                             ", w " + shape_str(w.shape) + ", groups " + std::to_string(groups));
    if (b.extent(0) != OC)
        throw DimensionError("conv2d: bias extent " + shape_str(b.shape) + " vs out channels " +
                             std::to_string(OC));
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    if (Ho < 1 || Wo < 1)
        throw ConfigError("conv2d: empty output for input " + shape_str(x.shape) + ", kernel " +
                          std::to_string(kh) + ", pad " + std::to_string(pad));

    TensorT<S> y({OC, Ho, Wo});
    const int ocg = OC / groups;
    for (int oc = 0; oc < OC; ++oc) {
        S* ybase = y.data.data() + static_cast<std::size_t>(oc) * Ho * Wo;
        const S bias = b.data[static_cast<std::size_t>(oc)];
        for (std::size_t i = 0; i < static_cast<std::size_t>(Ho) * Wo; ++i) ybase[i] = bias;
        const int g = oc / ocg;
        for (int icg = 0; icg < Cg; ++icg) {
            const int ic = g * Cg + icg;
            const S* xch = x.data.data() + static_cast<std::size_t>(ic) * H * W;
            for (int ky = 0; ky < kh; ++ky)
                for (int kx = 0; kx < kw; ++kx) {
                    const S wv = w.data[w.off4(oc, icg, ky, kx)];
                    if (stride == 1) {
                        // Row-segment AXPY: the window slides one pixel per
                        // output, so each (ky,kx) tap is a shifted row add.
                        for (int oy = 0; oy < Ho; ++oy) {
                            const int iy = oy + ky - pad;
                            if (iy < 0 || iy >= H) continue;
                            int ox0 = pad - kx;           // first ox with ix >= 0
                            if (ox0 < 0) ox0 = 0;
                            int ox1 = W - 1 + pad - kx;   // last ox with ix < W
                            if (ox1 > Wo - 1) ox1 = Wo - 1;
                            if (ox0 > ox1) continue;
                            const int ix0 = ox0 + kx - pad;
                            kernels::axpy(ybase + static_cast<std::size_t>(oy) * Wo + ox0, wv,
                                          xch + static_cast<std::size_t>(iy) * W + ix0,
                                          static_cast<std::size_t>(ox1 - ox0 + 1));
                        }
                    } else {
                        for (int oy = 0; oy < Ho; ++oy) {
                            const int iy = oy * stride + ky - pad;
                            if (iy < 0 || iy >= H) continue;
                            S* yrow = ybase + static_cast<std::size_t>(oy) * Wo;
                            const S* xrow = xch + static_cast<std::size_t>(iy) * W;
                            for (int ox = 0; ox < Wo; ++ox) {
                                const int ix = ox * stride + kx - pad;
                                if (ix < 0 || ix >= W) continue;
                                yrow[ox] += wv * xrow[ix];
                            }
                        }
                    }
                }
        }
    }
    return y;
}

// Accumulates into w.grad / b.grad, returns gx.
template <typename S>
TensorT<S> conv2d_backward(const TensorT<S>& gy, const TensorT<S>& x, TensorT<S>& w,
                           TensorT<S>& b, int stride = 1, int pad = 0, int groups = 1) {
    const int C = x.extent(0), H = x.extent(1), W = x.extent(2);
    const int OC = w.extent(0), Cg = w.extent(1), kh = w.extent(2), kw = w.extent(3);
    const int Ho = gy.extent(1), Wo = gy.extent(2);
    if (gy.extent(0) != OC)
        throw DimensionError("conv2d backward: grad channels " + shape_str(gy.shape) +
                             " vs kernel " + shape_str(w.shape));
    TensorT<S> gx = TensorT<S>::zeros({C, H, W});
    const int ocg = OC / groups;
    for (int oc = 0; oc < OC; ++oc) {
        const S* gybase = gy.data.data() + static_cast<std::size_t>(oc) * Ho * Wo;
        if (b.requires_grad)
            b.grad[static_cast<std::size_t>(oc)] +=
                kernels::vsum(gybase, static_cast<std::size_t>(Ho) * Wo);
        const int g = oc / ocg;
        for (int icg = 0; icg < Cg; ++icg) {
            const int ic = g * Cg + icg;
            const S* xch = x.data.data() + static_cast<std::size_t>(ic) * H * W;
            S* gxch = gx.data.data() + static_cast<std::size_t>(ic) * H * W;
            for (int ky = 0; ky < kh; ++ky)
                for (int kx = 0; kx < kw; ++kx) {
                    const S wv = w.data[w.off4(oc, icg, ky, kx)];
                    S gw = S(0);
                    if (stride == 1) {
                        for (int oy = 0; oy < Ho; ++oy) {
                            const int iy = oy + ky - pad;
                            if (iy < 0 || iy >= H) continue;
                            int ox0 = pad - kx;
                            if (ox0 < 0) ox0 = 0;
                            int ox1 = W - 1 + pad - kx;
                            if (ox1 > Wo - 1) ox1 = Wo - 1;
                            if (ox0 > ox1) continue;
                            const int ix0 = ox0 + kx - pad;
                            const std::size_t len = static_cast<std::size_t>(ox1 - ox0 + 1);
                            const S* gyrow = gybase + static_cast<std::size_t>(oy) * Wo + ox0;
                            kernels::axpy(gxch + static_cast<std::size_t>(iy) * W + ix0, wv,
                                          gyrow, len);
                            if (w.requires_grad)
                                gw += kernels::dot(
                                    gyrow, xch + static_cast<std::size_t>(iy) * W + ix0, len);
                        }
                    } else {
                        for (int oy = 0; oy < Ho; ++oy) {
                            const int iy = oy * stride + ky - pad;
                            if (iy < 0 || iy >= H) continue;
                            const S* gyrow = gybase + static_cast<std::size_t>(oy) * Wo;
                            const S* xrow = xch + static_cast<std::size_t>(iy) * W;
                            S* gxrow = gxch + static_cast<std::size_t>(iy) * W;
                            for (int ox = 0; ox < Wo; ++ox) {
                                const int ix = ox * stride + kx - pad;
                                if (ix < 0 || ix >= W) continue;
                                gxrow[ix] += wv * gyrow[ox];
                                if (w.requires_grad) gw += gyrow[ox] * xrow[ix];
                            }
                        }
                    }
                    if (w.requires_grad) w.grad[w.off4(oc, icg, ky, kx)] += gw;
                }
        }
    }
    return gx;
}

// ---------------------------------------------------------------- softmax --

// Softmax over the last axis, max-shifted for stability. Works on any rank.
template <typename S>
TensorT<S> softmax_lastdim(const TensorT<S>& x) {
    if (x.rank() < 1) throw DimensionError("softmax: rank-0 input");
    const int L = x.extent(x.rank() - 1);
    const std::size_t rows = x.numel() / static_cast<std::size_t>(L);
    TensorT<S> y(x.shape);
    for (std::size_t r = 0; r < rows; ++r) {
        const S* xr = x.data.data() + r * L;
        S* yr = y.data.data() + r * L;
        const S m = kernels::vmax(xr, static_cast<std::size_t>(L));
        double z = 0.0;
        for (int i = 0; i < L; ++i) {
            const S e = std::exp(xr[i] - m);
            yr[i] = e;
            z += static_cast<double>(e);
        }
        const S inv = static_cast<S>(1.0 / z);
        kernels::scale(yr, yr, inv, static_cast<std::size_t>(L));
    }
    return y;
}

// gx = y * (gy - sum(gy * y)) per row.
template <typename S>
TensorT<S> softmax_backward(const TensorT<S>& gy, const TensorT<S>& y) {
    check_same_shape(gy, y, "softmax backward");
    const int L = y.extent(y.rank() - 1);
    const std::size_t rows = y.numel() / static_cast<std::size_t>(L);
    TensorT<S> gx(y.shape);
    for (std::size_t r = 0; r < rows; ++r) {
        const S* gyr = gy.data.data() + r * L;
        const S* yr = y.data.data() + r * L;
        S* gxr = gx.data.data() + r * L;
        const S dotv = kernels::dot(gyr, yr, static_cast<std::size_t>(L));
        for (int i = 0; i < L; ++i) gxr[i] = yr[i] * (gyr[i] - dotv);
    }
    return gx;
}

// ------------------------------------------------------------ activations --

template <typename S>
TensorT<S> sigmoid(const TensorT<S>& x) {
    TensorT<S> y(x.shape);
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const S v = x.data[i];
        y.data[i] = v >= S(0) ? S(1) / (S(1) + std::exp(-v))
                              : std::exp(v) / (S(1) + std::exp(v));
    }
    return y;
}
template <typename S>
TensorT<S> sigmoid_backward(const TensorT<S>& gy, const TensorT<S>& y) {
    check_same_shape(gy, y, "sigmoid backward");
    TensorT<S> gx(y.shape);
    for (std::size_t i = 0; i < y.numel(); ++i)
        gx.data[i] = gy.data[i] * y.data[i] * (S(1) - y.data[i]);
    return gx;
}

template <typename S>
TensorT<S> tanh_fwd(const TensorT<S>& x) {
    TensorT<S> y(x.shape);
    for (std::size_t i = 0; i < x.numel(); ++i) y.data[i] = std::tanh(x.data[i]);
    return y;
}
template <typename S>
TensorT<S> tanh_backward(const TensorT<S>& gy, const TensorT<S>& y) {
    check_same_shape(gy, y, "tanh backward");
    TensorT<S> gx(y.shape);
    for (std::size_t i = 0; i < y.numel(); ++i)
        gx.data[i] = gy.data[i] * (S(1) - y.data[i] * y.data[i]);
    return gx;
}

template <typename S>
TensorT<S> relu6(const TensorT<S>& x) {
    TensorT<S> y(x.shape);
    kernels::relu6(y.data.data(), x.data.data(), x.numel());
    return y;
}
// Derivative taken from the pre-activation x; 0 at and beyond both clamps.
template <typename S>
TensorT<S> relu6_backward(const TensorT<S>& gy, const TensorT<S>& x) {
    check_same_shape(gy, x, "relu6 backward");
    TensorT<S> gx(x.shape);
    for (std::size_t i = 0; i < x.numel(); ++i)
        gx.data[i] = (x.data[i] > S(0) && x.data[i] < S(6)) ? gy.data[i] : S(0);
    return gx;
}

template <typename S>
TensorT<S> softplus(const TensorT<S>& x) {
    TensorT<S> y(x.shape);
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const S v = x.data[i];
        y.data[i] = v > S(0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
    }
    return y;
}
template <typename S>
TensorT<S> softplus_backward(const TensorT<S>& gy, const TensorT<S>& x) {
    check_same_shape(gy, x, "softplus backward");
    TensorT<S> sx = sigmoid(x);
    TensorT<S> gx(x.shape);
    kernels::mul(gx.data.data(), gy.data.data(), sx.data.data(), x.numel());
    return gx;
}

// ------------------------------------------------------------- layer norm --

template <typename S>
struct LayerNormCache {
    TensorT<S> xhat;       // normalized pre-affine values
    std::vector<S> rstd;   // 1/sqrt(var + eps) per row
};

template <typename S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta,
                      S eps, LayerNormCache<S>* cache = nullptr) {
    if (x.rank() != 2)
        throw DimensionError("layer_norm: expected rank-2 input, got " + shape_str(x.shape));
    const int N = x.extent(0), D = x.extent(1);
    if (D < 2) throw ConfigError("layer_norm: needs D >= 2, got D = " + std::to_string(D));
    if (gamma.numel() != static_cast<std::size_t>(D) || beta.numel() != static_cast<std::size_t>(D))
        throw DimensionError("layer_norm: affine extents " + shape_str(gamma.shape) + "/" +
                             shape_str(beta.shape) + " vs D " + std::to_string(D));
    TensorT<S> y({N, D});
    TensorT<S> xhat({N, D});
    std::vector<S> rstd(static_cast<std::size_t>(N));
    for (int n = 0; n < N; ++n) {
        const S* xr = x.data.data() + static_cast<std::size_t>(n) * D;
        double mean = 0.0;
        for (int d = 0; d < D; ++d) mean += static_cast<double>(xr[d]);
        mean /= D;
        double var = 0.0;
        for (int d = 0; d < D; ++d) {
            const double c = static_cast<double>(xr[d]) - mean;
            var += c * c;
        }
        var /= D;
        const S rs = static_cast<S>(1.0 / std::sqrt(var + static_cast<double>(eps)));
        rstd[static_cast<std::size_t>(n)] = rs;
        S* xh = xhat.data.data() + static_cast<std::size_t>(n) * D;
        S* yr = y.data.data() + static_cast<std::size_t>(n) * D;
        for (int d = 0; d < D; ++d) {
            xh[d] = (xr[d] - static_cast<S>(mean)) * rs;
            yr[d] = xh[d] * gamma.data[static_cast<std::size_t>(d)] +
                    beta.data[static_cast<std::size_t>(d)];
        }
    }
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->rstd = std::move(rstd);
    }
    return y;
}

template <typename S>
TensorT<S> layer_norm_backward(const TensorT<S>& gy, const LayerNormCache<S>& cache,
                               TensorT<S>& gamma, TensorT<S>& beta) {
    const int N = cache.xhat.extent(0), D = cache.xhat.extent(1);
    check_same_shape(gy, cache.xhat, "layer_norm backward");
    TensorT<S> gx({N, D});
    for (int n = 0; n < N; ++n) {
        const S* gyr = gy.data.data() + static_cast<std::size_t>(n) * D;
        const S* xh = cache.xhat.data.data() + static_cast<std::size_t>(n) * D;
        S* gxr = gx.data.data() + static_cast<std::size_t>(n) * D;
        double sum_g = 0.0, sum_gx = 0.0;
        for (int d = 0; d < D; ++d) {
            const S gxh = gyr[d] * gamma.data[static_cast<std::size_t>(d)];
            sum_g += static_cast<double>(gxh);
            sum_gx += static_cast<double>(gxh) * static_cast<double>(xh[d]);
            if (gamma.requires_grad)
                gamma.grad[static_cast<std::size_t>(d)] += gyr[d] * xh[d];
            if (beta.requires_grad) beta.grad[static_cast<std::size_t>(d)] += gyr[d];
        }
        const S mg = static_cast<S>(sum_g / D);
        const S mgx = static_cast<S>(sum_gx / D);
        const S rs = cache.rstd[static_cast<std::size_t>(n)];
        for (int d = 0; d < D; ++d) {
            const S gxh = gyr[d] * gamma.data[static_cast<std::size_t>(d)];
            gxr[d] = rs * (gxh - mg - xh[d] * mgx);
        }
    }
    return gx;
}

// --------------------------------------------------------------- upsample --

template <typename S>
TensorT<S> upsample_nearest(const TensorT<S>& x, int factor) {
    if (x.rank() != 3)
        throw DimensionError("upsample_nearest: expected rank-3 input, got " +
                             shape_str(x.shape));
    if (factor < 1)
        throw ConfigError("upsample_nearest: factor must be >= 1, got " + std::to_string(factor));
    const int C = x.extent(0), H = x.extent(1), W = x.extent(2);
    if (factor == 1) return x;
    TensorT<S> y({C, H * factor, W * factor});
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) {
                const S v = x.data[x.off3(c, i, j)];
                for (int di = 0; di < factor; ++di) {
                    S* row = y.data.data() + y.off3(c, i * factor + di, j * factor);
                    for (int dj = 0; dj < factor; ++dj) row[dj] = v;
                }
            }
    return y;
}

template <typename S>
TensorT<S> upsample_nearest_backward(const TensorT<S>& gy, int factor) {
    if (factor == 1) return gy;
    const int C = gy.extent(0), Hf = gy.extent(1), Wf = gy.extent(2);
    if (Hf % factor != 0 || Wf % factor != 0)
        throw DimensionError("upsample backward: grad extents " + shape_str(gy.shape) +
                             " not divisible by factor " + std::to_string(factor));
    const int H = Hf / factor, W = Wf / factor;
    TensorT<S> gx = TensorT<S>::zeros({C, H, W});
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < Hf; ++i)
            for (int j = 0; j < Wf; ++j)
                gx.data[gx.off3(c, i / factor, j / factor)] += gy.data[gy.off3(c, i, j)];
    return gx;
}

// ---------------------------------------------------------------- dropout --

template <typename S>
struct DropoutResult {
    TensorT<S> y;
    TensorT<S> mask;  // scaled keep mask; empty when the op was an identity
};

// Inverted dropout. Identity when rate == 0 or not training.
template <typename S>
DropoutResult<S> dropout(const TensorT<S>& x, double rate, Rng& rng, bool training) {
    if (rate < 0.0 || rate >= 1.0)
        throw ConfigError("dropout: rate must lie in [0,1), got " + std::to_string(rate));
    DropoutResult<S> r;
    if (!training || rate == 0.0) {
        r.y = x;
        return r;
    }
    const S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
    r.mask = TensorT<S>(x.shape);
    r.y = TensorT<S>(x.shape);
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const bool keep = rng.uniform() >= rate;
        r.mask.data[i] = keep ? keep_scale : S(0);
        r.y.data[i] = x.data[i] * r.mask.data[i];
    }
    return r;
}

template <typename S>
TensorT<S> dropout_backward(const TensorT<S>& gy, const DropoutResult<S>& cache) {
    if (cache.mask.numel() == 0) return gy;
    check_same_shape(gy, cache.mask, "dropout backward");
    TensorT<S> gx(gy.shape);
    kernels::mul(gx.data.data(), gy.data.data(), cache.mask.data.data(), gy.numel());
    return gx;
}

// ----------------------------------------------------------------- concat --

// Channel concatenation of rank-3 [C,H,W] tensors in argument order.
template <typename S>
TensorT<S> concat_channels(const std::vector<const TensorT<S>*>& parts) {
    if (parts.empty()) throw ConfigError("concat_channels: nothing to concatenate");
    const int H = parts[0]->extent(1), W = parts[0]->extent(2);
    int C = 0;
    for (const auto* p : parts) {
        if (p->rank() != 3)
            throw DimensionError("concat_channels: expected rank-3 parts, got " +
                                 shape_str(p->shape));
        if (p->extent(1) != H || p->extent(2) != W)
            throw DimensionError("concat_channels: spatial extents disagree, " +
                                 shape_str(parts[0]->shape) + " vs " + shape_str(p->shape));
        C += p->extent(0);
    }
    TensorT<S> y({C, H, W});
    std::size_t off = 0;
    for (const auto* p : parts) {
        std::copy(p->data.begin(), p->data.end(), y.data.begin() + off);
        off += p->numel();
    }
    return y;
}

// Splits the upstream gradient back into per-part gradients.
template <typename S>
std::vector<TensorT<S>> concat_channels_backward(const TensorT<S>& gy,
                                                 const std::vector<int>& channels) {
    const int H = gy.extent(1), W = gy.extent(2);
    std::vector<TensorT<S>> parts;
    parts.reserve(channels.size());
    std::size_t off = 0;
    for (int c : channels) {
        TensorT<S> g({c, H, W});
        std::copy(gy.data.begin() + off, gy.data.begin() + off + g.numel(), g.data.begin());
        off += g.numel();
        parts.push_back(std::move(g));
    }
    if (off != gy.numel())
        throw DimensionError("concat backward: channel split does not cover " +
                             shape_str(gy.shape));
    return parts;
}

// ---------------------------------------------------------- normalization --

template <typename S>
struct NormalizeSumCache {
    S z = S(0);
    TensorT<S> y;
};

// y = x / sum(x); requires a strictly positive total.
template <typename S>
TensorT<S> normalize_sum(const TensorT<S>& x, NormalizeSumCache<S>* cache = nullptr) {
    double z = 0.0;
    for (S v : x.data) z += static_cast<double>(v);
    if (!(z > 0.0))
        throw NumericError("normalize_sum: total mass " + std::to_string(z) +
                           " is not positive");
    TensorT<S> y(x.shape);
    const S inv = static_cast<S>(1.0 / z);
    kernels::scale(y.data.data(), x.data.data(), inv, x.numel());
    if (cache) {
        cache->z = static_cast<S>(z);
        cache->y = y;
    }
    return y;
}

// gx = (gy - sum(gy * y)) / z
template <typename S>
TensorT<S> normalize_sum_backward(const TensorT<S>& gy, const NormalizeSumCache<S>& cache) {
    check_same_shape(gy, cache.y, "normalize_sum backward");
    double dotv = 0.0;
    for (std::size_t i = 0; i < gy.numel(); ++i)
        dotv += static_cast<double>(gy.data[i]) * static_cast<double>(cache.y.data[i]);
    TensorT<S> gx(gy.shape);
    const S d = static_cast<S>(dotv);
    for (std::size_t i = 0; i < gy.numel(); ++i)
        gx.data[i] = (gy.data[i] - d) / cache.z;
    return gx;
}

// --------------------------------------------------------------- KLD loss --

// L = sum_i gt_i * log(eps + gt_i / (eps + pred_i)), the training loss and
// headline divergence metric with the epsilon sitting inside the log next to
// the ratio.
template <typename S>
double kld_loss(const TensorT<S>& gt, const TensorT<S>& pred, double eps) {
    check_same_shape(gt, pred, "kld_loss");
    double acc = 0.0;
    for (std::size_t i = 0; i < gt.numel(); ++i) {
        const double s = static_cast<double>(gt.data[i]);
        const double p = static_cast<double>(pred.data[i]);
        acc += s * std::log(eps + s / (eps + p));
    }
    return acc;
}

// dL/dpred_i = -gt_i^2 / ((eps + pred_i) * (eps*(eps + pred_i) + gt_i)),
// scaled by gscale (the upstream dL weight, e.g. 1/frames).
template <typename S>
TensorT<S> kld_loss_backward(const TensorT<S>& gt, const TensorT<S>& pred, double eps,
                             double gscale) {
    check_same_shape(gt, pred, "kld_loss backward");
    TensorT<S> gp(pred.shape);
    for (std::size_t i = 0; i < gt.numel(); ++i) {
        const double s = static_cast<double>(gt.data[i]);
        const double p = static_cast<double>(pred.data[i]);
        const double denom = (eps + p) * (eps * (eps + p) + s);
        gp.data[i] = static_cast<S>(gscale * (-(s * s) / denom));
    }
    return gp;
}

}  // namespace ahmf::ops
