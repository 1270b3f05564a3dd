#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ahmf/domain.hpp"
#include "ahmf/errors.hpp"
#include "ahmf/ops.hpp"
#include "ahmf/rng.hpp"
#include "ahmf/tensor.hpp"

// Temporal-spatial encoder: a trainable strided-conv feature pyramid standing
// in for a frozen pretrained backbone, nearest-upsample fusion of the levels,
// pixel-to-pixel spatial attention, per-domain batch normalization, Gaussian
// prior concatenation, and a Conv-GRU that carries state across frames.

namespace ahmf {

// ------------------------------------------------------------- conv layer --

template <typename S>
struct Conv2dLayer {
    TensorT<S> w, b;
    int stride = 1, pad = 0, groups = 1;

    Conv2dLayer() = default;
    Conv2dLayer(int in_c, int out_c, int k, int stride_, int pad_, int groups_ = 1)
        : w(TensorT<S>::zeros({out_c, in_c / groups_, k, k})),
          b(TensorT<S>::zeros({out_c})),
          stride(stride_),
          pad(pad_),
          groups(groups_) {}

    void init(Rng& rng) {
        const int fan_in = w.extent(1) * w.extent(2) * w.extent(3);
        const double limit = std::sqrt(6.0 / fan_in);
        for (auto& v : w.data) v = static_cast<S>(rng.uniform(-limit, limit));
        for (auto& v : b.data) v = S(0);
    }

    TensorT<S> forward(const TensorT<S>& x) const {
        return ops::conv2d(x, w, b, stride, pad, groups);
    }
    TensorT<S> backward(const TensorT<S>& gy, const TensorT<S>& x) {
        return ops::conv2d_backward(gy, x, w, b, stride, pad, groups);
    }
};

// ----------------------------------------------------------- token layout --

// [C,H,W] -> [H*W, C] (one row per pixel) and back. Pure permutations, so the
// backward of either is the other applied to the gradient.
template <typename S>
TensorT<S> chw_to_tokens(const TensorT<S>& x) {
    const int C = x.extent(0), H = x.extent(1), W = x.extent(2);
    TensorT<S> t({H * W, C});
    for (int c = 0; c < C; ++c)
        for (int p = 0; p < H * W; ++p)
            t.data[t.off2(p, c)] = x.data[static_cast<std::size_t>(c) * H * W + p];
    return t;
}

template <typename S>
TensorT<S> tokens_to_chw(const TensorT<S>& t, int H, int W) {
    const int C = t.extent(1);
    if (t.extent(0) != H * W)
        throw DimensionError("tokens_to_chw: " + shape_str(t.shape) + " vs H*W = " +
                             std::to_string(H * W));
    TensorT<S> x({C, H, W});
    for (int c = 0; c < C; ++c)
        for (int p = 0; p < H * W; ++p)
            x.data[static_cast<std::size_t>(c) * H * W + p] = t.data[t.off2(p, c)];
    return x;
}

// ------------------------------------------------------- spatial attention --

template <typename S>
struct SaCache {
    TensorT<S> x;
    TensorT<S> qm, km, vm;     // 1x1 conv outputs, [A|A|C, H, W]
    TensorT<S> Qt, Kt, Vt;     // token matrices
    TensorT<S> probs;          // [HW, HW] attention rows
};

// Pixel-to-pixel attention: logit(i,j) = (Wq x_i) . (Wk x_j), rows softmaxed,
// y_i = sum_j p(i,j) (Wv x_j). Output channels equal input channels.
template <typename S>
struct SpatialAttention {
    Conv2dLayer<S> q, k, v;
    bool residual = false;
    int hw_cap = 4096;

    SpatialAttention() = default;
    SpatialAttention(int channels, int attn_dim, bool residual_, int hw_cap_)
        : q(channels, attn_dim, 1, 1, 0),
          k(channels, attn_dim, 1, 1, 0),
          v(channels, channels, 1, 1, 0),
          residual(residual_),
          hw_cap(hw_cap_) {}

    void init(Rng& rng) {
        q.init(rng);
        k.init(rng);
        v.init(rng);
    }

    TensorT<S> forward(const TensorT<S>& x, SaCache<S>* cache = nullptr) const {
        const int H = x.extent(1), W = x.extent(2);
        if (H * W > hw_cap)
            throw ConfigError("spatial_attention: H*W = " + std::to_string(H * W) +
                              " exceeds the cap " + std::to_string(hw_cap) +
                              " (attention is quadratic in pixels; use a smaller toy shape)");
        TensorT<S> qm = q.forward(x), km = k.forward(x), vm = v.forward(x);
        TensorT<S> Qt = chw_to_tokens(qm), Kt = chw_to_tokens(km), Vt = chw_to_tokens(vm);
        TensorT<S> probs = ops::softmax_lastdim(ops::matmul(Qt, Kt, false, true));
        TensorT<S> y = tokens_to_chw(ops::matmul(probs, Vt), H, W);
        if (residual) ops::ew_add_into(y, x);
        if (cache) {
            cache->x = x;
            cache->qm = std::move(qm);
            cache->km = std::move(km);
            cache->vm = std::move(vm);
            cache->Qt = std::move(Qt);
            cache->Kt = std::move(Kt);
            cache->Vt = std::move(Vt);
            cache->probs = std::move(probs);
        }
        return y;
    }

    TensorT<S> backward(const TensorT<S>& gy, const SaCache<S>& cache) {
        const int H = cache.x.extent(1), W = cache.x.extent(2);
        TensorT<S> gYt = chw_to_tokens(gy);
        TensorT<S> gprobs = ops::matmul(gYt, cache.Vt, false, true);
        TensorT<S> gVt = ops::matmul(cache.probs, gYt, true, false);
        TensorT<S> glog = ops::softmax_backward(gprobs, cache.probs);
        TensorT<S> gQt = ops::matmul(glog, cache.Kt, false, false);
        TensorT<S> gKt = ops::matmul(glog, cache.Qt, true, false);
        TensorT<S> gx = q.backward(tokens_to_chw(gQt, H, W), cache.x);
        ops::ew_add_into(gx, k.backward(tokens_to_chw(gKt, H, W), cache.x));
        ops::ew_add_into(gx, v.backward(tokens_to_chw(gVt, H, W), cache.x));
        if (residual) ops::ew_add_into(gx, gy);
        return gx;
    }
};

// ----------------------------------------------------------------- ConvGRU --

template <typename S>
struct GruCache {
    TensorT<S> xz;       // [x ; h_prev]
    TensorT<S> xh;       // [x ; r * h_prev]
    TensorT<S> z, r, htilde, h_prev;
};

template <typename S>
struct ConvGru {
    Conv2dLayer<S> cz, cr, ch;
    int in_channels = 0, hidden = 0;

    ConvGru() = default;
    ConvGru(int in_c, int hidden_c)
        : cz(in_c + hidden_c, hidden_c, 3, 1, 1),
          cr(in_c + hidden_c, hidden_c, 3, 1, 1),
          ch(in_c + hidden_c, hidden_c, 3, 1, 1),
          in_channels(in_c),
          hidden(hidden_c) {}

    void init(Rng& rng) {
        cz.init(rng);
        cr.init(rng);
        ch.init(rng);
    }

    // z = sig(Wz[x;h]), r = sig(Wr[x;h]), h~ = tanh(Wh[x;r*h]),
    // h = (1-z)*h + z*h~
    TensorT<S> step(const TensorT<S>& x, const TensorT<S>& h_prev,
                    GruCache<S>* cache = nullptr) {
        if (x.extent(1) != h_prev.extent(1) || x.extent(2) != h_prev.extent(2))
            throw DimensionError("conv_gru_step: input " + shape_str(x.shape) +
                                 " vs hidden " + shape_str(h_prev.shape));
        TensorT<S> xz = ops::concat_channels<S>({&x, &h_prev});
        TensorT<S> z = ops::sigmoid(cz.forward(xz));
        TensorT<S> r = ops::sigmoid(cr.forward(xz));
        TensorT<S> rh = ops::ew_mul(r, h_prev);
        TensorT<S> xh = ops::concat_channels<S>({&x, &rh});
        TensorT<S> htilde = ops::tanh_fwd(ch.forward(xh));

        TensorT<S> h(h_prev.shape);
        for (std::size_t i = 0; i < h.numel(); ++i)
            h.data[i] = (S(1) - z.data[i]) * h_prev.data[i] + z.data[i] * htilde.data[i];

        if (cache) {
            cache->xz = std::move(xz);
            cache->xh = std::move(xh);
            cache->z = std::move(z);
            cache->r = std::move(r);
            cache->htilde = std::move(htilde);
            cache->h_prev = h_prev;
        }
        return h;
    }

    struct StepGrads {
        TensorT<S> gx, gh_prev;
    };

    StepGrads backward(const TensorT<S>& gh, const GruCache<S>& cache) {
        const int xc = in_channels, hc = hidden;
        TensorT<S> gz(cache.z.shape), ghtilde(cache.z.shape), gh_prev(cache.z.shape);
        for (std::size_t i = 0; i < gh.numel(); ++i) {
            gz.data[i] = gh.data[i] * (cache.htilde.data[i] - cache.h_prev.data[i]);
            ghtilde.data[i] = gh.data[i] * cache.z.data[i];
            gh_prev.data[i] = gh.data[i] * (S(1) - cache.z.data[i]);
        }

        // candidate branch
        TensorT<S> gxh = ch.backward(ops::tanh_backward(ghtilde, cache.htilde), cache.xh);
        auto xh_parts = ops::concat_channels_backward(gxh, {xc, hc});
        TensorT<S> gx = std::move(xh_parts[0]);
        TensorT<S>& grh = xh_parts[1];
        TensorT<S> gr = ops::ew_mul(grh, cache.h_prev);
        ops::ew_add_into(gh_prev, ops::ew_mul(grh, cache.r));

        // gate branches share the [x;h_prev] input
        TensorT<S> gxz = cz.backward(ops::sigmoid_backward(gz, cache.z), cache.xz);
        ops::ew_add_into(gxz, cr.backward(ops::sigmoid_backward(gr, cache.r), cache.xz));
        auto xz_parts = ops::concat_channels_backward(gxz, {xc, hc});
        ops::ew_add_into(gx, xz_parts[0]);
        ops::ew_add_into(gh_prev, xz_parts[1]);

        return {std::move(gx), std::move(gh_prev)};
    }
};

// ---------------------------------------------------------------- encoder --

struct EncoderConfig {
    int in_channels = 3;
    std::vector<int> stub_channels = {8, 16, 32};
    int attn_dim = 8;
    int gru_hidden = 8;
    int n_priors = 4;
    bool use_spatial_attention = true;  // off for the ablation (1x1 conv bypass)
    bool sa_residual = false;
    int sa_hw_cap = 4096;

    int fused_channels() const {
        int c = 0;
        for (int v : stub_channels) c += v;
        return c;
    }
};

template <typename S>
struct FrameCache {
    TensorT<S> frame;
    std::vector<TensorT<S>> conv_out;  // pre-activation per level
    std::vector<TensorT<S>> act;       // post-relu6 per level
    std::vector<TensorT<S>> upsampled;
    TensorT<S> fused;
    SaCache<S> sa;
};

template <typename S>
struct EncodeCache {
    std::vector<FrameCache<S>> frames;
    TensorT<S> sa_stack;   // [T,C,H,W]
    BnCache<S> bn;
    TensorT<S> bn_out;     // [T,C,H,W]
    TensorT<S> priors;     // [P,H,W]
    std::vector<TensorT<S>> gru_in;
    std::vector<GruCache<S>> gru_steps;
    std::vector<TensorT<S>> hidden;  // per frame, [Ch,H,W]
    int H = 0, W = 0;
};

template <typename S>
TensorT<S> stack_frames(const std::vector<TensorT<S>>& frames) {
    const int T = static_cast<int>(frames.size());
    std::vector<int> shape = frames[0].shape;
    shape.insert(shape.begin(), T);
    TensorT<S> out(shape);
    std::size_t off = 0;
    for (const auto& f : frames) {
        std::copy(f.data.begin(), f.data.end(), out.data.begin() + off);
        off += f.numel();
    }
    return out;
}

template <typename S>
TensorT<S> slice_frame(const TensorT<S>& vol, int t) {
    std::vector<int> shape(vol.shape.begin() + 1, vol.shape.end());
    TensorT<S> out(shape);
    std::copy(vol.data.begin() + static_cast<std::size_t>(t) * out.numel(),
              vol.data.begin() + static_cast<std::size_t>(t + 1) * out.numel(),
              out.data.begin());
    return out;
}

inline const char* kEncoderBnSite = "encoder.post_sa";

template <typename S>
struct Encoder {
    EncoderConfig cfg;
    std::vector<Conv2dLayer<S>> stub;
    SpatialAttention<S> sa;
    Conv2dLayer<S> sa_bypass;  // used when spatial attention is ablated
    ConvGru<S> gru;

    Encoder() = default;
    explicit Encoder(const EncoderConfig& cfg_) : cfg(cfg_) {
        int in_c = cfg.in_channels;
        for (int out_c : cfg.stub_channels) {
            stub.emplace_back(in_c, out_c, 3, 2, 1);
            in_c = out_c;
        }
        const int C = cfg.fused_channels();
        if (cfg.use_spatial_attention)
            sa = SpatialAttention<S>(C, cfg.attn_dim, cfg.sa_residual, cfg.sa_hw_cap);
        else
            sa_bypass = Conv2dLayer<S>(C, C, 1, 1, 0);
        gru = ConvGru<S>(C + cfg.n_priors, cfg.gru_hidden);
    }

    void register_bn(DomainContext<S>& ctx) const {
        ctx.ensure_site(kEncoderBnSite, cfg.fused_channels());
    }

    void init(std::uint64_t seed) {
        for (std::size_t i = 0; i < stub.size(); ++i) {
            Rng rng(seed, "init/encoder.stub" + std::to_string(i));
            stub[i].init(rng);
        }
        if (cfg.use_spatial_attention) {
            Rng rng(seed, "init/encoder.sa");
            sa.init(rng);
        } else {
            Rng rng(seed, "init/encoder.sa_bypass");
            sa_bypass.init(rng);
        }
        Rng rng(seed, "init/encoder.gru");
        gru.init(rng);
    }

    // Multi-level pyramid for one frame: stride-2 conv + relu6 per level.
    std::vector<TensorT<S>> backbone_stub(const TensorT<S>& frame, FrameCache<S>* cache) const {
        const int levels = static_cast<int>(stub.size());
        const int div = 1 << levels;
        if (frame.extent(1) % div != 0 || frame.extent(2) % div != 0)
            throw ConfigError("backbone_stub: frame extents " + shape_str(frame.shape) +
                              " must be divisible by " + std::to_string(div));
        std::vector<TensorT<S>> acts;
        TensorT<S> cur = frame;
        for (int l = 0; l < levels; ++l) {
            TensorT<S> pre = stub[static_cast<std::size_t>(l)].forward(cur);
            TensorT<S> act = ops::relu6(pre);
            if (cache) {
                cache->conv_out.push_back(pre);
                cache->act.push_back(act);
            }
            acts.push_back(act);
            cur = std::move(act);
        }
        return acts;
    }

    // Upsample every level to the level-0 grid and concatenate in order.
    TensorT<S> fuse_pyramid(const std::vector<TensorT<S>>& levels, FrameCache<S>* cache) const {
        const int H = levels[0].extent(1), W = levels[0].extent(2);
        std::vector<TensorT<S>> ups;
        for (std::size_t l = 0; l < levels.size(); ++l) {
            const int fh = H / levels[l].extent(1);
            if (levels[l].extent(1) * fh != H || levels[l].extent(2) * fh != W)
                throw ConfigError("fuse_pyramid: level " + std::to_string(l) + " extents " +
                                  shape_str(levels[l].shape) + " do not divide the target " +
                                  std::to_string(H) + "x" + std::to_string(W));
            ups.push_back(ops::upsample_nearest(levels[l], fh));
        }
        std::vector<const TensorT<S>*> parts;
        for (const auto& u : ups) parts.push_back(&u);
        TensorT<S> fused = ops::concat_channels(parts);
        if (cache) cache->upsampled = std::move(ups);
        return fused;
    }

    // Full per-sequence encoding. Returns the hidden-state volume [T,Ch,H,W].
    TensorT<S> encode_sequence(const std::vector<TensorT<S>>& frames, DomainContext<S>& ctx,
                               Mode mode, EncodeCache<S>* cache) {
        if (frames.empty()) throw UsageError("encode_sequence: empty sequence");
        const int T = static_cast<int>(frames.size());

        std::vector<TensorT<S>> sa_outs;
        std::vector<FrameCache<S>> fcaches(static_cast<std::size_t>(T));
        for (int t = 0; t < T; ++t) {
            FrameCache<S>* fc = cache ? &fcaches[static_cast<std::size_t>(t)] : nullptr;
            if (fc) fc->frame = frames[static_cast<std::size_t>(t)];
            auto levels = backbone_stub(frames[static_cast<std::size_t>(t)], fc);
            TensorT<S> fused = fuse_pyramid(levels, fc);
            TensorT<S> sa_out = cfg.use_spatial_attention
                                    ? sa.forward(fused, fc ? &fc->sa : nullptr)
                                    : sa_bypass.forward(fused);
            if (fc) fc->fused = std::move(fused);
            sa_outs.push_back(std::move(sa_out));
        }

        TensorT<S> sa_stack = stack_frames(sa_outs);
        BnCache<S> bncache;
        TensorT<S> bn_out = domain_batch_norm(sa_stack, ctx.site(kEncoderBnSite), mode,
                                              cache ? &bncache : nullptr);

        const int H = bn_out.extent(2), W = bn_out.extent(3);
        TensorT<S> priors = render_priors(ctx, H, W);

        TensorT<S> h = TensorT<S>::zeros({cfg.gru_hidden, H, W});
        std::vector<TensorT<S>> hidden;
        std::vector<TensorT<S>> gru_in;
        std::vector<GruCache<S>> gcaches(static_cast<std::size_t>(T));
        for (int t = 0; t < T; ++t) {
            TensorT<S> bt = slice_frame(bn_out, t);
            TensorT<S> gin = priors.numel()
                                 ? ops::concat_channels<S>({&bt, &priors})
                                 : bt;
            h = gru.step(gin, h, cache ? &gcaches[static_cast<std::size_t>(t)] : nullptr);
            if (cache) gru_in.push_back(std::move(gin));
            hidden.push_back(h);
        }

        TensorT<S> volume = stack_frames(hidden);
        if (cache) {
            cache->frames = std::move(fcaches);
            cache->sa_stack = std::move(sa_stack);
            cache->bn = std::move(bncache);
            cache->bn_out = std::move(bn_out);
            cache->priors = std::move(priors);
            cache->gru_in = std::move(gru_in);
            cache->gru_steps = std::move(gcaches);
            cache->hidden = std::move(hidden);
            cache->H = H;
            cache->W = W;
        }
        return volume;
    }

    // Backpropagates through the whole sequence; parameter gradients (conv
    // weights, BN affine, prior parameters) accumulate in place. Frame inputs
    // carry no gradient.
    void encode_backward(const TensorT<S>& g_hidden, DomainContext<S>& ctx,
                         const EncodeCache<S>& cache) {
        const int T = g_hidden.extent(0);
        const int C = cfg.fused_channels();
        const int P = cfg.n_priors;
        const int H = cache.H, W = cache.W;

        TensorT<S> g_priors_acc =
            P > 0 ? TensorT<S>::zeros({P, H, W}) : TensorT<S>();
        std::vector<TensorT<S>> g_bn_frames(static_cast<std::size_t>(T));

        TensorT<S> gh_carry = TensorT<S>::zeros({cfg.gru_hidden, H, W});
        for (int t = T - 1; t >= 0; --t) {
            TensorT<S> gh = slice_frame(g_hidden, t);
            ops::ew_add_into(gh, gh_carry);
            auto grads = gru.backward(gh, cache.gru_steps[static_cast<std::size_t>(t)]);
            gh_carry = std::move(grads.gh_prev);
            if (P > 0) {
                auto parts = ops::concat_channels_backward(grads.gx, {C, P});
                g_bn_frames[static_cast<std::size_t>(t)] = std::move(parts[0]);
                ops::ew_add_into(g_priors_acc, parts[1]);
            } else {
                g_bn_frames[static_cast<std::size_t>(t)] = std::move(grads.gx);
            }
        }
        if (P > 0) render_priors_backward(g_priors_acc, ctx, H, W);

        TensorT<S> g_bn_stack = stack_frames(g_bn_frames);
        TensorT<S> g_sa_stack =
            domain_batch_norm_backward(g_bn_stack, ctx.site(kEncoderBnSite), cache.bn);

        for (int t = 0; t < T; ++t) {
            const FrameCache<S>& fc = cache.frames[static_cast<std::size_t>(t)];
            TensorT<S> g_sa = slice_frame(g_sa_stack, t);
            TensorT<S> g_fused = cfg.use_spatial_attention
                                     ? sa.backward(g_sa, fc.sa)
                                     : sa_bypass.backward(g_sa, fc.fused);

            // un-fuse: split channels per level, then undo the upsampling
            std::vector<int> ch;
            for (int v : cfg.stub_channels) ch.push_back(v);
            auto parts = ops::concat_channels_backward(g_fused, ch);
            TensorT<S> g_level_down;  // gradient flowing down the stub chain
            for (int l = static_cast<int>(stub.size()) - 1; l >= 0; --l) {
                const int fh = H / fc.act[static_cast<std::size_t>(l)].extent(1);
                TensorT<S> g_act =
                    ops::upsample_nearest_backward(parts[static_cast<std::size_t>(l)], fh);
                if (g_level_down.numel()) ops::ew_add_into(g_act, g_level_down);
                TensorT<S> g_pre =
                    ops::relu6_backward(g_act, fc.conv_out[static_cast<std::size_t>(l)]);
                const TensorT<S>& input =
                    l == 0 ? fc.frame : fc.act[static_cast<std::size_t>(l - 1)];
                g_level_down = stub[static_cast<std::size_t>(l)].backward(g_pre, input);
            }
        }
    }
};

}  // namespace ahmf
