#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "ahmf/errors.hpp"
#include "ahmf/ops.hpp"
#include "ahmf/tensor.hpp"

// Domain-specific modules: per-domain batch normalization, learnable Gaussian
// priors, and a learnable smoothing filter, held together by a registry so
// several datasets can train jointly while sharing the rest of the model.

namespace ahmf {

enum class Mode { Train, Eval, GradCheck };

template <typename S>
struct BnState {
    TensorT<S> gamma, beta;               // trainable affine
    TensorT<S> running_mean, running_var; // state, never touched by the optimizer

    explicit BnState(int channels = 1)
        : gamma(TensorT<S>::full({channels}, S(1))),
          beta(TensorT<S>::zeros({channels})),
          running_mean(TensorT<S>::zeros({channels})),
          running_var(TensorT<S>::full({channels}, S(1))) {}
};

template <typename S>
struct BnCache {
    TensorT<S> xhat;
    std::vector<S> rstd;  // per channel
};

template <typename S>
struct SmoothCache {
    TensorT<S> x;
    TensorT<S> after_rows;
    TensorT<S> pre_norm;
    ops::NormalizeSumCache<S> ncache;
    std::vector<S> w, dw;  // normalized kernel and its d/dlog_sigma
    int half = 0;
};

// One dataset's private parameters. prior_params is [P,5] with columns
// (mu_x, mu_y, log_sigma_x, log_sigma_y, log_amplitude).
template <typename S>
struct DomainContext {
    std::string id;
    std::map<std::string, BnState<S>> bn;
    TensorT<S> prior_params;
    TensorT<S> smooth_log_sigma;

    DomainContext() : smooth_log_sigma(TensorT<S>::zeros({1})) {}

    int prior_count() const { return prior_params.numel() ? prior_params.extent(0) : 0; }

    BnState<S>& site(const std::string& site_id) {
        auto it = bn.find(site_id);
        if (it == bn.end())
            throw UsageError("domain '" + id + "' has no batch-norm site '" + site_id + "'");
        return it->second;
    }

    void ensure_site(const std::string& site_id, int channels) {
        auto it = bn.find(site_id);
        if (it == bn.end()) {
            bn.emplace(site_id, BnState<S>(channels));
        } else if (it->second.gamma.extent(0) != channels) {
            throw DimensionError("batch-norm site '" + site_id + "' re-registered with " +
                                 std::to_string(channels) + " channels, had " +
                                 std::to_string(it->second.gamma.extent(0)));
        }
    }
};

// ------------------------------------------------------------- batch norm --

// x: [N,C,H,W]. Train and GradCheck modes normalize with batch statistics;
// Train additionally folds them into the running stats (momentum 0.1 default),
// which GradCheck must not do so the finite-difference harness sees a pure
// function. Eval normalizes with the stored running stats.
template <typename S>
TensorT<S> domain_batch_norm(const TensorT<S>& x, BnState<S>& state, Mode mode,
                             BnCache<S>* cache = nullptr, S momentum = S(0.1),
                             S eps = S(1e-5)) {
    if (x.rank() != 4)
        throw DimensionError("batch_norm: expected [N,C,H,W], got " + shape_str(x.shape));
    const int N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
    if (state.gamma.extent(0) != C)
        throw DimensionError("batch_norm: input channels " + std::to_string(C) +
                             " vs site channels " + std::to_string(state.gamma.extent(0)));
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const std::size_t per_c = static_cast<std::size_t>(N) * plane;

    TensorT<S> y(x.shape);
    TensorT<S> xhat(x.shape);
    std::vector<S> rstd(static_cast<std::size_t>(C));

    for (int c = 0; c < C; ++c) {
        double mean, var;
        if (mode == Mode::Eval) {
            mean = static_cast<double>(state.running_mean.data[static_cast<std::size_t>(c)]);
            var = static_cast<double>(state.running_var.data[static_cast<std::size_t>(c)]);
        } else {
            double acc = 0.0;
            for (int n = 0; n < N; ++n) {
                const S* p = x.data.data() + x.off4(n, c, 0, 0);
                for (std::size_t i = 0; i < plane; ++i) acc += static_cast<double>(p[i]);
            }
            mean = acc / static_cast<double>(per_c);
            double vacc = 0.0;
            for (int n = 0; n < N; ++n) {
                const S* p = x.data.data() + x.off4(n, c, 0, 0);
                for (std::size_t i = 0; i < plane; ++i) {
                    const double d = static_cast<double>(p[i]) - mean;
                    vacc += d * d;
                }
            }
            var = vacc / static_cast<double>(per_c);
            if (mode == Mode::Train) {
                auto& rm = state.running_mean.data[static_cast<std::size_t>(c)];
                auto& rv = state.running_var.data[static_cast<std::size_t>(c)];
                rm = static_cast<S>((1.0 - static_cast<double>(momentum)) * rm +
                                    static_cast<double>(momentum) * mean);
                rv = static_cast<S>((1.0 - static_cast<double>(momentum)) * rv +
                                    static_cast<double>(momentum) * var);
            }
        }
        const S rs = static_cast<S>(1.0 / std::sqrt(var + static_cast<double>(eps)));
        rstd[static_cast<std::size_t>(c)] = rs;
        const S g = state.gamma.data[static_cast<std::size_t>(c)];
        const S bterm = state.beta.data[static_cast<std::size_t>(c)];
        const S m = static_cast<S>(mean);
        for (int n = 0; n < N; ++n) {
            const S* xp = x.data.data() + x.off4(n, c, 0, 0);
            S* hp = xhat.data.data() + xhat.off4(n, c, 0, 0);
            S* yp = y.data.data() + y.off4(n, c, 0, 0);
            for (std::size_t i = 0; i < plane; ++i) {
                hp[i] = (xp[i] - m) * rs;
                yp[i] = hp[i] * g + bterm;
            }
        }
    }
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->rstd = std::move(rstd);
    }
    return y;
}

// Batch-statistics backward (the mode used whenever gradients flow).
template <typename S>
TensorT<S> domain_batch_norm_backward(const TensorT<S>& gy, BnState<S>& state,
                                      const BnCache<S>& cache) {
    const TensorT<S>& xhat = cache.xhat;
    check_same_shape(gy, xhat, "batch_norm backward");
    const int N = xhat.extent(0), C = xhat.extent(1), H = xhat.extent(2), W = xhat.extent(3);
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const double count = static_cast<double>(N) * static_cast<double>(plane);

    TensorT<S> gx(xhat.shape);
    for (int c = 0; c < C; ++c) {
        double sum_g = 0.0, sum_gx = 0.0;
        for (int n = 0; n < N; ++n) {
            const S* gp = gy.data.data() + gy.off4(n, c, 0, 0);
            const S* hp = xhat.data.data() + xhat.off4(n, c, 0, 0);
            for (std::size_t i = 0; i < plane; ++i) {
                sum_g += static_cast<double>(gp[i]);
                sum_gx += static_cast<double>(gp[i]) * static_cast<double>(hp[i]);
            }
        }
        if (state.gamma.requires_grad)
            state.gamma.grad[static_cast<std::size_t>(c)] += static_cast<S>(sum_gx);
        if (state.beta.requires_grad)
            state.beta.grad[static_cast<std::size_t>(c)] += static_cast<S>(sum_g);

        const S g = state.gamma.data[static_cast<std::size_t>(c)];
        const S rs = cache.rstd[static_cast<std::size_t>(c)];
        const S mg = static_cast<S>(sum_g / count);
        const S mgx = static_cast<S>(sum_gx / count);
        for (int n = 0; n < N; ++n) {
            const S* gp = gy.data.data() + gy.off4(n, c, 0, 0);
            const S* hp = xhat.data.data() + xhat.off4(n, c, 0, 0);
            S* op = gx.data.data() + gx.off4(n, c, 0, 0);
            for (std::size_t i = 0; i < plane; ++i)
                op[i] = rs * g * (gp[i] - mg - hp[i] * mgx);
        }
    }
    return gx;
}

// ---------------------------------------------------------------- priors --

// prior p at pixel (row v, column u):
//   exp(log_amp) * exp(-((u/W - mu_x)^2 / (2 sx^2) + (v/H - mu_y)^2 / (2 sy^2)))
template <typename S>
TensorT<S> render_priors(const DomainContext<S>& ctx, int H, int W) {
    const int P = ctx.prior_count();
    if (P == 0) return TensorT<S>();
    TensorT<S> out({P, H, W});
    for (int p = 0; p < P; ++p) {
        const S mu_x = ctx.prior_params.data[ctx.prior_params.off2(p, 0)];
        const S mu_y = ctx.prior_params.data[ctx.prior_params.off2(p, 1)];
        const S sx = std::exp(ctx.prior_params.data[ctx.prior_params.off2(p, 2)]);
        const S sy = std::exp(ctx.prior_params.data[ctx.prior_params.off2(p, 3)]);
        const S amp = std::exp(ctx.prior_params.data[ctx.prior_params.off2(p, 4)]);
        for (int v = 0; v < H; ++v) {
            const S dy = static_cast<S>(v) / static_cast<S>(H) - mu_y;
            for (int u = 0; u < W; ++u) {
                const S dx = static_cast<S>(u) / static_cast<S>(W) - mu_x;
                out.data[out.off3(p, v, u)] =
                    amp * std::exp(-(dx * dx / (S(2) * sx * sx) + dy * dy / (S(2) * sy * sy)));
            }
        }
    }
    return out;
}

template <typename S>
void render_priors_backward(const TensorT<S>& gy, DomainContext<S>& ctx, int H, int W) {
    const int P = ctx.prior_count();
    if (P == 0 || !ctx.prior_params.requires_grad) return;
    for (int p = 0; p < P; ++p) {
        const S mu_x = ctx.prior_params.data[ctx.prior_params.off2(p, 0)];
        const S mu_y = ctx.prior_params.data[ctx.prior_params.off2(p, 1)];
        const S sx = std::exp(ctx.prior_params.data[ctx.prior_params.off2(p, 2)]);
        const S sy = std::exp(ctx.prior_params.data[ctx.prior_params.off2(p, 3)]);
        const S amp = std::exp(ctx.prior_params.data[ctx.prior_params.off2(p, 4)]);
        double g_mux = 0.0, g_muy = 0.0, g_lsx = 0.0, g_lsy = 0.0, g_lamp = 0.0;
        for (int v = 0; v < H; ++v) {
            const S dy = static_cast<S>(v) / static_cast<S>(H) - mu_y;
            for (int u = 0; u < W; ++u) {
                const S dx = static_cast<S>(u) / static_cast<S>(W) - mu_x;
                const S val =
                    amp * std::exp(-(dx * dx / (S(2) * sx * sx) + dy * dy / (S(2) * sy * sy)));
                const double g = static_cast<double>(gy.data[gy.off3(p, v, u)]) *
                                 static_cast<double>(val);
                g_mux += g * static_cast<double>(dx / (sx * sx));
                g_muy += g * static_cast<double>(dy / (sy * sy));
                g_lsx += g * static_cast<double>(dx * dx / (sx * sx));
                g_lsy += g * static_cast<double>(dy * dy / (sy * sy));
                g_lamp += g;
            }
        }
        ctx.prior_params.grad[ctx.prior_params.off2(p, 0)] += static_cast<S>(g_mux);
        ctx.prior_params.grad[ctx.prior_params.off2(p, 1)] += static_cast<S>(g_muy);
        ctx.prior_params.grad[ctx.prior_params.off2(p, 2)] += static_cast<S>(g_lsx);
        ctx.prior_params.grad[ctx.prior_params.off2(p, 3)] += static_cast<S>(g_lsy);
        ctx.prior_params.grad[ctx.prior_params.off2(p, 4)] += static_cast<S>(g_lamp);
    }
}

// --------------------------------------------------------------- smoothing --

namespace detail {

inline int reflect_index(int i, int n) {
    // Symmetric reflection (-1 -> 0, -2 -> 1, n -> n-1, ...).
    while (i < 0 || i >= n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - 1 - i;
    }
    return i;
}

// Normalized Gaussian taps at |k| <= 3*sigma (min half-width 1) and their
// derivative w.r.t. log sigma.
template <typename S>
void gaussian_kernel(S sigma, std::vector<S>& w, std::vector<S>& dw, int& half) {
    half = std::max(1, static_cast<int>(std::floor(3.0 * static_cast<double>(sigma))));
    const int len = 2 * half + 1;
    std::vector<double> raw(static_cast<std::size_t>(len)), draw(static_cast<std::size_t>(len));
    double z = 0.0, dz = 0.0;
    const double s2 = static_cast<double>(sigma) * static_cast<double>(sigma);
    for (int k = -half; k <= half; ++k) {
        const double e = std::exp(-(static_cast<double>(k) * k) / (2.0 * s2));
        raw[static_cast<std::size_t>(k + half)] = e;
        // d e / d log(sigma) = e * k^2 / sigma^2
        draw[static_cast<std::size_t>(k + half)] = e * (static_cast<double>(k) * k) / s2;
        z += e;
        dz += draw[static_cast<std::size_t>(k + half)];
    }
    w.assign(static_cast<std::size_t>(len), S(0));
    dw.assign(static_cast<std::size_t>(len), S(0));
    for (int i = 0; i < len; ++i) {
        const double wi = raw[static_cast<std::size_t>(i)] / z;
        w[static_cast<std::size_t>(i)] = static_cast<S>(wi);
        dw[static_cast<std::size_t>(i)] =
            static_cast<S>((draw[static_cast<std::size_t>(i)] - wi * dz) / z);
    }
}

template <typename S>
TensorT<S> blur_rows(const TensorT<S>& x, const std::vector<S>& w, int half) {
    const int H = x.extent(0), W = x.extent(1);
    TensorT<S> y({H, W});
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
            double acc = 0.0;
            for (int k = -half; k <= half; ++k)
                acc += static_cast<double>(w[static_cast<std::size_t>(k + half)]) *
                       static_cast<double>(x.data[x.off2(i, reflect_index(j + k, W))]);
            y.data[y.off2(i, j)] = static_cast<S>(acc);
        }
    return y;
}

template <typename S>
TensorT<S> blur_cols(const TensorT<S>& x, const std::vector<S>& w, int half) {
    const int H = x.extent(0), W = x.extent(1);
    TensorT<S> y({H, W});
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
            double acc = 0.0;
            for (int k = -half; k <= half; ++k)
                acc += static_cast<double>(w[static_cast<std::size_t>(k + half)]) *
                       static_cast<double>(x.data[x.off2(reflect_index(i + k, H), j)]);
            y.data[y.off2(i, j)] = static_cast<S>(acc);
        }
    return y;
}

// Exact transposes of the reflective blurs (gather becomes scatter).
template <typename S>
TensorT<S> blur_rows_t(const TensorT<S>& gy, const std::vector<S>& w, int half) {
    const int H = gy.extent(0), W = gy.extent(1);
    TensorT<S> gx = TensorT<S>::zeros({H, W});
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
            const S g = gy.data[gy.off2(i, j)];
            for (int k = -half; k <= half; ++k)
                gx.data[gx.off2(i, reflect_index(j + k, W))] +=
                    w[static_cast<std::size_t>(k + half)] * g;
        }
    return gx;
}

template <typename S>
TensorT<S> blur_cols_t(const TensorT<S>& gy, const std::vector<S>& w, int half) {
    const int H = gy.extent(0), W = gy.extent(1);
    TensorT<S> gx = TensorT<S>::zeros({H, W});
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
            const S g = gy.data[gy.off2(i, j)];
            for (int k = -half; k <= half; ++k)
                gx.data[gx.off2(reflect_index(i + k, H), j)] +=
                    w[static_cast<std::size_t>(k + half)] * g;
        }
    return gx;
}

}  // namespace detail

// Separable Gaussian blur with the domain's learnable sigma, renormalized so
// the output is again a distribution.
template <typename S>
TensorT<S> smooth_prediction(const TensorT<S>& map, const DomainContext<S>& ctx,
                             SmoothCache<S>* cache = nullptr) {
    if (map.rank() != 2)
        throw DimensionError("smooth_prediction: expected [H,W], got " + shape_str(map.shape));
    const S sigma = std::exp(ctx.smooth_log_sigma.data[0]);
    std::vector<S> w, dw;
    int half = 0;
    detail::gaussian_kernel(sigma, w, dw, half);
    TensorT<S> after_rows = detail::blur_rows(map, w, half);
    TensorT<S> pre_norm = detail::blur_cols(after_rows, w, half);
    ops::NormalizeSumCache<S> ncache;
    TensorT<S> out = ops::normalize_sum(pre_norm, &ncache);
    if (cache) {
        cache->x = map;
        cache->after_rows = std::move(after_rows);
        cache->pre_norm = std::move(pre_norm);
        cache->ncache = std::move(ncache);
        cache->w = std::move(w);
        cache->dw = std::move(dw);
        cache->half = half;
    }
    return out;
}

// Returns the gradient w.r.t. the input map; accumulates into
// ctx.smooth_log_sigma.grad.
template <typename S>
TensorT<S> smooth_prediction_backward(const TensorT<S>& gy, DomainContext<S>& ctx,
                                      const SmoothCache<S>& cache) {
    TensorT<S> g_pre = ops::normalize_sum_backward(gy, cache.ncache);
    TensorT<S> g_rows = detail::blur_cols_t(g_pre, cache.w, cache.half);
    TensorT<S> gx = detail::blur_rows_t(g_rows, cache.w, cache.half);

    if (ctx.smooth_log_sigma.requires_grad) {
        // pre_norm = Bc(Br(x)); d pre_norm / d log_sigma uses the kernel
        // derivative in one factor at a time.
        TensorT<S> term1 = detail::blur_cols(detail::blur_rows(cache.x, cache.dw, cache.half),
                                             cache.w, cache.half);
        TensorT<S> term2 = detail::blur_cols(cache.after_rows, cache.dw, cache.half);
        double acc = 0.0;
        for (std::size_t i = 0; i < g_pre.numel(); ++i)
            acc += static_cast<double>(g_pre.data[i]) *
                   (static_cast<double>(term1.data[i]) + static_cast<double>(term2.data[i]));
        ctx.smooth_log_sigma.grad[0] += static_cast<S>(acc);
    }
    return gx;
}

// ---------------------------------------------------------------- registry --

template <typename S>
struct DomainTable {
    std::vector<DomainContext<S>> items;

    bool has(const std::string& id) const {
        for (const auto& d : items)
            if (d.id == id) return true;
        return false;
    }
    DomainContext<S>& at(const std::string& id) {
        for (auto& d : items)
            if (d.id == id) return d;
        throw ConfigError("unknown domain '" + id + "'");
    }
    const DomainContext<S>& at(const std::string& id) const {
        for (const auto& d : items)
            if (d.id == id) return d;
        throw ConfigError("unknown domain '" + id + "'");
    }
};

// Builds one context per id. Priors start centered (mu 0.5/0.5, sigma 0.25)
// with staggered amplitudes so identically-initialized Gaussians can separate
// during training; smoothing starts at sigma = 1.
template <typename S>
DomainTable<S> make_domain_table(const std::vector<std::string>& ids, int priors_per_domain) {
    DomainTable<S> table;
    for (const auto& id : ids) {
        if (id.empty()) throw ConfigError("empty domain id");
        if (table.has(id)) throw ConfigError("duplicate domain id '" + id + "'");
        DomainContext<S> ctx;
        ctx.id = id;
        if (priors_per_domain > 0) {
            ctx.prior_params = TensorT<S>({priors_per_domain, 5});
            for (int p = 0; p < priors_per_domain; ++p) {
                ctx.prior_params.data[ctx.prior_params.off2(p, 0)] = S(0.5);
                ctx.prior_params.data[ctx.prior_params.off2(p, 1)] = S(0.5);
                ctx.prior_params.data[ctx.prior_params.off2(p, 2)] =
                    static_cast<S>(std::log(0.25));
                ctx.prior_params.data[ctx.prior_params.off2(p, 3)] =
                    static_cast<S>(std::log(0.25));
                ctx.prior_params.data[ctx.prior_params.off2(p, 4)] = static_cast<S>(-0.25 * p);
            }
        }
        ctx.smooth_log_sigma.data[0] = S(0);  // sigma = 1
        table.items.push_back(std::move(ctx));
    }
    return table;
}

}  // namespace ahmf
