#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ahmf/domain.hpp"
#include "ahmf/encoder.hpp"
#include "ahmf/memory_fusion.hpp"
#include "ahmf/errors.hpp"
#include "ahmf/ops.hpp"
#include "ahmf/rng.hpp"
#include "ahmf/tensor.hpp"

// Full attention model: encoder -> hybrid memory fusion -> per-frame
// prediction head (1x1 conv, upsample back to the frame grid, softplus,
// normalize to a distribution, domain smoothing). The loss is the KL
// divergence of the prediction from the ground-truth map, averaged over
// frames.

namespace ahmf {

enum class Ablation { full, no_hmf, no_sa, no_ca };

inline Ablation ablation_from_string(const std::string& s) {
    if (s == "full") return Ablation::full;
    if (s == "no_hmf") return Ablation::no_hmf;
    if (s == "no_sa") return Ablation::no_sa;
    if (s == "no_ca") return Ablation::no_ca;
    throw ConfigError("ablation must be one of full|no_hmf|no_sa|no_ca, got '" + s + "'");
}

inline std::string ablation_to_string(Ablation a) {
    switch (a) {
        case Ablation::full: return "full";
        case Ablation::no_hmf: return "no_hmf";
        case Ablation::no_sa: return "no_sa";
        case Ablation::no_ca: return "no_ca";
    }
    return "full";
}

struct ModelConfig {
    int frame_h = 32, frame_w = 32, in_channels = 3;
    int seq_len = 5;
    std::vector<int> stub_channels = {8, 16, 32};
    int attn_dim = 8;
    int gru_hidden = 8;
    int n_priors = 4;
    int sa_hw_cap = 4096;
    int memory_channels = 2;
    int memory_upsample = 1;
    int heads = 4;
    double dropout_rate = 0.0;
    double ema_alpha = 0.1;
    UpdatePosition update_position = UpdatePosition::after_hmf;
    int bank_slots = 0;  // 0 resolves to seq_len
    Ablation ablation = Ablation::full;
    double loss_eps = 1e-7;

    int levels() const { return static_cast<int>(stub_channels.size()); }
    // the pyramid is fused on the level-0 grid, one stride-2 conv below the frame
    int fused_h() const { return frame_h / 2; }
    int fused_w() const { return frame_w / 2; }
    int memory_h() const { return fused_h() * memory_upsample; }
    int memory_w() const { return fused_w() * memory_upsample; }
    int token_dim() const { return memory_channels * memory_h() * memory_w(); }

    void validate() const {
        if (stub_channels.empty()) throw ConfigError("model: stub_channels must be non-empty");
        for (int c : stub_channels)
            if (c < 1) throw ConfigError("model: stub channel counts must be positive");
        if (in_channels < 1 || frame_h < 1 || frame_w < 1)
            throw ConfigError("model: frame extents and channels must be positive");
        const int div = 1 << levels();
        if (frame_h % div != 0 || frame_w % div != 0)
            throw ConfigError("model: frame extents " + std::to_string(frame_h) + "x" +
                              std::to_string(frame_w) + " must be divisible by 2^levels = " +
                              std::to_string(div));
        if (fused_h() < 1 || fused_w() < 1)
            throw ConfigError("model: the feature pyramid collapses below 1x1; use fewer "
                              "levels or larger frames");
        if (seq_len < 1) throw ConfigError("model: seq_len must be >= 1");
        if (gru_hidden < 1 || attn_dim < 1)
            throw ConfigError("model: gru_hidden and attn_dim must be positive");
        if (n_priors < 0) throw ConfigError("model: n_priors must be >= 0");
        if (memory_channels < 1) throw ConfigError("model: memory_channels must be >= 1");
        if (memory_upsample != 1 && memory_upsample != 2)
            throw ConfigError("model: memory_upsample must be 1 or 2 (the memory grid may "
                              "not exceed the frame grid), got " +
                              std::to_string(memory_upsample));
        if (ablation != Ablation::no_hmf) {
            if (heads < 1 || token_dim() % heads != 0)
                throw ConfigError("model: heads = " + std::to_string(heads) +
                                  " must divide the memory token dimension D = " +
                                  std::to_string(token_dim()));
        }
        if (!(loss_eps > 0.0)) throw ConfigError("model: loss_eps must be positive");
        if (!(ema_alpha >= 0.0 && ema_alpha <= 1.0))
            throw ConfigError("model: ema_alpha must lie in [0,1]");
        if (dropout_rate < 0.0 || dropout_rate >= 1.0)
            throw ConfigError("model: dropout_rate must lie in [0,1)");
    }
};

template <typename S>
struct ParamRef {
    std::string name;
    TensorT<S>* tensor = nullptr;
    std::string domain;  // empty for shared parameters
};

template <typename S>
struct HeadFrameCache {
    TensorT<S> fused_frame;  // head conv input
    TensorT<S> conv_out;     // [1, Hm, Wm], pre-upsample
    TensorT<S> up_2d;        // [H0, W0], pre-softplus
    TensorT<S> sp;           // softplus output
    ops::NormalizeSumCache<S> norm;
    SmoothCache<S> smooth;
};

template <typename S>
struct ModelTrace {
    EncodeCache<S> enc;
    FusionCache<S> fusion;
    std::vector<HeadFrameCache<S>> head;
    std::vector<TensorT<S>> preds;  // [H0, W0] per frame, normalized
    std::string domain_id;
};

template <typename S>
struct Model {
    ModelConfig cfg;
    Encoder<S> encoder;
    HybridMemoryFusion<S> fusion;
    Conv2dLayer<S> head;
    DomainTable<S> domains;
    int head_up = 1;

    Model() = default;
    Model(const ModelConfig& cfg_, const std::vector<std::string>& domain_ids) : cfg(cfg_) {
        cfg.validate();

        EncoderConfig ec;
        ec.in_channels = cfg.in_channels;
        ec.stub_channels = cfg.stub_channels;
        ec.attn_dim = cfg.attn_dim;
        ec.gru_hidden = cfg.gru_hidden;
        ec.n_priors = cfg.n_priors;
        ec.use_spatial_attention = cfg.ablation != Ablation::no_sa;
        ec.sa_hw_cap = cfg.sa_hw_cap;
        encoder = Encoder<S>(ec);

        FusionConfig fc;
        fc.channels = cfg.memory_channels;
        fc.upsample = cfg.memory_upsample;
        fc.heads = cfg.heads;
        fc.dropout_rate = cfg.dropout_rate;
        fc.ema_alpha = cfg.ema_alpha;
        fc.update_position = cfg.update_position;
        fc.bank_slots = cfg.bank_slots;
        fc.use_hmf = cfg.ablation != Ablation::no_hmf;
        fc.use_ca = cfg.ablation != Ablation::no_ca;
        fusion = HybridMemoryFusion<S>(cfg.gru_hidden, cfg.fused_h(), cfg.fused_w(),
                                       cfg.seq_len, fc);

        head = Conv2dLayer<S>(cfg.memory_channels, 1, 1, 1, 0);
        head_up = cfg.frame_h / cfg.memory_h();

        domains = make_domain_table<S>(domain_ids, cfg.n_priors);
        for (auto& ctx : domains.items) encoder.register_bn(ctx);
    }

    void init(std::uint64_t seed) {
        encoder.init(seed);
        fusion.init(seed);
        Rng rng(seed, "init/head");
        head.init(rng);
    }

    // One full sequence in, one normalized attention map per frame out.
    std::vector<TensorT<S>> predict_sequence(const std::vector<TensorT<S>>& frames,
                                             const std::string& domain_id, Mode mode,
                                             Rng& drop_rng, ModelTrace<S>* trace) {
        for (const auto& f : frames)
            if (f.shape != std::vector<int>{cfg.in_channels, cfg.frame_h, cfg.frame_w})
                throw DimensionError("model: frame " + shape_str(f.shape) +
                                     " does not match the configured " +
                                     shape_str({cfg.in_channels, cfg.frame_h, cfg.frame_w}));
        DomainContext<S>& ctx = domains.at(domain_id);
        TensorT<S> volume =
            encoder.encode_sequence(frames, ctx, mode, trace ? &trace->enc : nullptr);
        TensorT<S> fused =
            fusion.forward(volume, mode, drop_rng, trace ? &trace->fusion : nullptr);

        const int T = fused.extent(0);
        std::vector<TensorT<S>> preds;
        if (trace) trace->head.assign(static_cast<std::size_t>(T), HeadFrameCache<S>{});
        for (int t = 0; t < T; ++t) {
            HeadFrameCache<S> local;
            HeadFrameCache<S>& hc = trace ? trace->head[static_cast<std::size_t>(t)] : local;
            hc.fused_frame = slice_frame(fused, t);
            hc.conv_out = head.forward(hc.fused_frame);
            TensorT<S> up = head_up > 1 ? ops::upsample_nearest(hc.conv_out, head_up)
                                        : hc.conv_out;
            hc.up_2d = TensorT<S>({cfg.frame_h, cfg.frame_w});
            hc.up_2d.data = std::move(up.data);
            hc.sp = ops::softplus(hc.up_2d);
            TensorT<S> normed = ops::normalize_sum(hc.sp, &hc.norm);
            preds.push_back(smooth_prediction(normed, ctx, trace ? &hc.smooth : nullptr));
        }
        if (trace) {
            trace->preds = preds;
            trace->domain_id = domain_id;
        }
        return preds;
    }

    // Mean per-frame KL divergence of the predictions from the ground truth.
    double forward_loss(const std::vector<TensorT<S>>& frames,
                        const std::vector<TensorT<S>>& gts, const std::string& domain_id,
                        Mode mode, Rng& drop_rng, ModelTrace<S>* trace) {
        if (frames.size() != gts.size())
            throw UsageError("model: " + std::to_string(frames.size()) + " frames vs " +
                             std::to_string(gts.size()) + " ground-truth maps");
        auto preds = predict_sequence(frames, domain_id, mode, drop_rng, trace);
        double loss = 0.0;
        for (std::size_t t = 0; t < preds.size(); ++t)
            loss += ops::kld_loss(gts[t], preds[t], cfg.loss_eps);
        return loss / static_cast<double>(preds.size());
    }

    // Backpropagates the mean-KLD loss scaled by loss_scale. Parameter
    // gradients accumulate in .grad for every tensor with requires_grad.
    void backward(const std::vector<TensorT<S>>& gts, ModelTrace<S>& trace,
                  double loss_scale = 1.0) {
        DomainContext<S>& ctx = domains.at(trace.domain_id);
        const int T = static_cast<int>(gts.size());
        const double gscale = loss_scale / static_cast<double>(T);

        TensorT<S> g_fused({T, cfg.memory_channels, cfg.memory_h(), cfg.memory_w()});
        for (int t = 0; t < T; ++t) {
            HeadFrameCache<S>& hc = trace.head[static_cast<std::size_t>(t)];
            TensorT<S> g_pred = ops::kld_loss_backward(
                gts[static_cast<std::size_t>(t)], trace.preds[static_cast<std::size_t>(t)],
                cfg.loss_eps, gscale);
            TensorT<S> g_norm = smooth_prediction_backward(g_pred, ctx, hc.smooth);
            TensorT<S> g_sp = ops::normalize_sum_backward(g_norm, hc.norm);
            TensorT<S> g_up2 = ops::softplus_backward(g_sp, hc.up_2d);
            TensorT<S> g_up({1, cfg.frame_h, cfg.frame_w});
            g_up.data = std::move(g_up2.data);
            TensorT<S> g_conv =
                head_up > 1 ? ops::upsample_nearest_backward(g_up, head_up) : std::move(g_up);
            TensorT<S> g_frame = head.backward(g_conv, hc.fused_frame);
            std::copy(g_frame.data.begin(), g_frame.data.end(),
                      g_fused.data.begin() + static_cast<std::size_t>(t) * g_frame.numel());
        }

        TensorT<S> g_volume = fusion.backward(g_fused, trace.fusion);
        encoder.encode_backward(g_volume, ctx, trace.enc);
    }

    void apply_bank_update() {
        if (fusion.cfg.use_hmf) fusion.bank.apply_pending();
    }

    // Trainable parameters. Domain-owned entries carry their domain id so the
    // optimizer can restrict updates to domains present in the batch.
    std::vector<ParamRef<S>> named_params() {
        std::vector<ParamRef<S>> out;
        auto add = [&](const std::string& name, TensorT<S>& t) {
            out.push_back({name, &t, ""});
        };
        for (std::size_t i = 0; i < encoder.stub.size(); ++i) {
            add("encoder.stub" + std::to_string(i) + ".w", encoder.stub[i].w);
            add("encoder.stub" + std::to_string(i) + ".b", encoder.stub[i].b);
        }
        if (encoder.cfg.use_spatial_attention) {
            add("encoder.sa.q.w", encoder.sa.q.w);
            add("encoder.sa.q.b", encoder.sa.q.b);
            add("encoder.sa.k.w", encoder.sa.k.w);
            add("encoder.sa.k.b", encoder.sa.k.b);
            add("encoder.sa.v.w", encoder.sa.v.w);
            add("encoder.sa.v.b", encoder.sa.v.b);
        } else {
            add("encoder.sa_bypass.w", encoder.sa_bypass.w);
            add("encoder.sa_bypass.b", encoder.sa_bypass.b);
        }
        add("encoder.gru.cz.w", encoder.gru.cz.w);
        add("encoder.gru.cz.b", encoder.gru.cz.b);
        add("encoder.gru.cr.w", encoder.gru.cr.w);
        add("encoder.gru.cr.b", encoder.gru.cr.b);
        add("encoder.gru.ch.w", encoder.gru.ch.w);
        add("encoder.gru.ch.b", encoder.gru.ch.b);

        add("fusion.wm_head.expand.w", fusion.wm_head.expand.w);
        add("fusion.wm_head.expand.b", fusion.wm_head.expand.b);
        add("fusion.wm_head.depth.w", fusion.wm_head.depth.w);
        add("fusion.wm_head.depth.b", fusion.wm_head.depth.b);
        add("fusion.wm_head.project.w", fusion.wm_head.project.w);
        add("fusion.wm_head.project.b", fusion.wm_head.project.b);
        if (fusion.cfg.use_hmf) {
            auto add_mhca = [&](const std::string& prefix, Mhca<S>& m) {
                add(prefix + ".wq.w", m.wq.w);
                add(prefix + ".wq.b", m.wq.b);
                add(prefix + ".wk.w", m.wk.w);
                add(prefix + ".wk.b", m.wk.b);
                add(prefix + ".wv.w", m.wv.w);
                add(prefix + ".wv.b", m.wv.b);
                add(prefix + ".wo.w", m.wo.w);
                add(prefix + ".wo.b", m.wo.b);
                add(prefix + ".ln.gamma", m.ln_gamma);
                add(prefix + ".ln.beta", m.ln_beta);
            };
            add_mhca("fusion.mhca_wm", fusion.mhca_wm);
            add_mhca("fusion.mhca_ltm", fusion.mhca_ltm);
            add("fusion.bank.slots", fusion.bank.slots);
        }
        add("head.conv.w", head.w);
        add("head.conv.b", head.b);

        for (auto& ctx : domains.items) {
            const std::string& id = ctx.id;
            for (auto& site : ctx.bn) {
                out.push_back({"domain/" + id + ".bn/" + site.first + ".gamma",
                               &site.second.gamma, id});
                out.push_back({"domain/" + id + ".bn/" + site.first + ".beta",
                               &site.second.beta, id});
            }
            if (cfg.n_priors > 0)
                out.push_back({"domain/" + id + ".priors", &ctx.prior_params, id});
            out.push_back({"domain/" + id + ".smooth_log_sigma", &ctx.smooth_log_sigma, id});
        }
        return out;
    }

    // Non-trainable state that must survive a checkpoint round-trip.
    std::vector<ParamRef<S>> named_state() {
        std::vector<ParamRef<S>> out;
        for (auto& ctx : domains.items) {
            for (auto& site : ctx.bn) {
                out.push_back({"state/" + ctx.id + ".bn/" + site.first + ".running_mean",
                               &site.second.running_mean, ctx.id});
                out.push_back({"state/" + ctx.id + ".bn/" + site.first + ".running_var",
                               &site.second.running_var, ctx.id});
            }
        }
        return out;
    }

    void set_requires_grad(bool on) {
        for (auto& p : named_params()) p.tensor->set_requires_grad(on);
    }

    void zero_grads() {
        for (auto& p : named_params())
            if (p.tensor->requires_grad) p.tensor->zero_grad();
    }
};

}  // namespace ahmf
