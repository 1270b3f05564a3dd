#include <doctest.h>

#include <cmath>
#include <cstring>
#include <numeric>
#include <vector>

#include "ahmf/gradcheck.hpp"
#include "ahmf/memory_fusion.hpp"

using ahmf::Tensor;
using ahmf::TensorT;
using DT = TensorT<double>;

namespace {

template <typename S>
TensorT<S> rand_t(ahmf::Rng& rng, std::vector<int> shape, double lo = -1.0, double hi = 1.0) {
    TensorT<S> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<S>(rng.uniform(lo, hi));
    return t;
}

template <typename S>
double wsum(const TensorT<S>& y, const TensorT<S>& r) {
    double acc = 0.0;
    for (std::size_t i = 0; i < y.numel(); ++i) acc += static_cast<double>(y.data[i]) * r.data[i];
    return acc;
}

template <typename S>
void set_identity(TensorT<S>& w) {
    for (auto& v : w.data) v = S(0);
    const int n = w.extent(0);
    for (int i = 0; i < n; ++i) w.data[w.off2(i, i)] = S(1);
}

}  // namespace

TEST_CASE("working memory head: identity-initialized path copies selected channels") {
    const int C = 3, H = 3, W = 3, T = 2;
    ahmf::WorkingMemoryHead<float> head(C, 2, 1);
    // expand: first C outputs mirror the input, the rest stay zero
    for (auto& v : head.expand.w.data) v = 0.0f;
    for (int c = 0; c < C; ++c) head.expand.w.data[head.expand.w.off4(c, c, 0, 0)] = 1.0f;
    // depthwise: center tap only
    for (auto& v : head.depth.w.data) v = 0.0f;
    for (int m = 0; m < 2 * C; ++m) head.depth.w.data[head.depth.w.off4(m, 0, 1, 1)] = 1.0f;
    // projection: token channel 0 selects input channel 2, channel 1 selects 0
    for (auto& v : head.project.w.data) v = 0.0f;
    head.project.w.data[head.project.w.off4(0, 2, 0, 0)] = 1.0f;
    head.project.w.data[head.project.w.off4(1, 0, 0, 0)] = 1.0f;

    ahmf::Rng rng(83, "wm-identity");
    Tensor volume = rand_t<float>(rng, {T, C, H, W}, 0.1, 5.9);  // relu6 transparent
    auto slab = head.forward(volume, nullptr);
    REQUIRE(slab.tokens.shape == std::vector<int>{T, 2 * H * W});
    CHECK(slab.origin == ahmf::SlabOrigin::working);
    for (int t = 0; t < T; ++t)
        for (int p = 0; p < H * W; ++p) {
            CHECK(slab.tokens.data[slab.tokens.off2(t, p)] ==
                  doctest::Approx(volume.data[volume.off4(t, 2, p / W, p % W)]).epsilon(1e-6));
            CHECK(slab.tokens.data[slab.tokens.off2(t, H * W + p)] ==
                  doctest::Approx(volume.data[volume.off4(t, 0, p / W, p % W)]).epsilon(1e-6));
        }
}

TEST_CASE("working memory head: zero input propagates only the projection bias") {
    ahmf::WorkingMemoryHead<float> head(2, 3, 1);
    ahmf::Rng rng(89, "wm-zero");
    head.init(rng);  // random weights, zero biases
    Tensor volume = Tensor::zeros({2, 2, 4, 4});
    auto slab = head.forward(volume, nullptr);
    for (float v : slab.tokens.data) CHECK(v == 0.0f);

    head.project.b.data = {0.25f, -1.5f, 3.0f};
    slab = head.forward(volume, nullptr);
    for (int t = 0; t < 2; ++t)
        for (int c = 0; c < 3; ++c)
            for (int p = 0; p < 16; ++p)
                CHECK(slab.tokens.data[slab.tokens.off2(t, c * 16 + p)] ==
                      head.project.b.data[c]);
}

TEST_CASE("working memory head: token shape follows T and the upsample factor") {
    ahmf::WorkingMemoryHead<float> head(4, 2, 2);
    ahmf::Rng rng(97, "wm-shape");
    head.init(rng);
    Tensor volume = rand_t<float>(rng, {5, 4, 3, 3});
    auto slab = head.forward(volume, nullptr);
    CHECK(slab.tokens.shape == std::vector<int>{5, 2 * 6 * 6});

    CHECK_THROWS_AS(ahmf::WorkingMemoryHead<float>(0, 2, 1), ahmf::ConfigError);
    CHECK_THROWS_AS(ahmf::WorkingMemoryHead<float>(2, 0, 1), ahmf::ConfigError);
    CHECK_THROWS_AS(ahmf::WorkingMemoryHead<float>(2, 2, 0), ahmf::ConfigError);
}

TEST_CASE("positional encoding: closed-form anchors") {
    Tensor pe = ahmf::positional_encoding<float>(4, 6);
    for (int i = 0; i < 3; ++i) {
        CHECK(pe.data[pe.off2(0, 2 * i)] == 0.0f);
        CHECK(pe.data[pe.off2(0, 2 * i + 1)] == 1.0f);
    }
    CHECK(pe.data[pe.off2(1, 0)] == doctest::Approx(std::sin(1.0)).epsilon(1e-6));
    CHECK(pe.data[pe.off2(2, 0)] == doctest::Approx(std::sin(2.0)).epsilon(1e-6));
    CHECK(pe.data[pe.off2(1, 2)] ==
          doctest::Approx(std::sin(1.0 / std::pow(10000.0, 2.0 / 6.0))).epsilon(1e-6));
    for (float v : pe.data) {
        CHECK(v >= -1.0f);
        CHECK(v <= 1.0f);
    }
    CHECK_THROWS_AS(ahmf::positional_encoding<float>(4, 5), ahmf::ConfigError);
}

TEST_CASE("positional encoding: rows are distinct across positions") {
    Tensor pe = ahmf::positional_encoding<float>(200, 4);
    for (int a = 0; a < 200; ++a)
        for (int b = a + 1; b < 200; ++b) {
            bool differ = false;
            for (int d = 0; d < 4 && !differ; ++d)
                differ = pe.data[pe.off2(a, d)] != pe.data[pe.off2(b, d)];
            if (!differ) {
                CAPTURE(a);
                CAPTURE(b);
            }
            CHECK(differ);
        }
}

TEST_CASE("mhca: identical keys attend uniformly") {
    const int D = 6, Tq = 3, Tk = 4;
    // positions off so the post-projection keys stay identical
    ahmf::Mhca<float> mhca(D, 2, 0.0, /*add_pe=*/false);
    ahmf::Rng rng(101, "mhca-uniform");
    mhca.init(rng);

    Tensor q = rand_t<float>(rng, {Tq, D});
    Tensor row = rand_t<float>(rng, {1, D});
    Tensor kv({Tk, D});
    for (int t = 0; t < Tk; ++t)
        for (int d = 0; d < D; ++d) kv.data[kv.off2(t, d)] = row.data[d];

    ahmf::MhcaCache<float> cache;
    ahmf::Rng drop_rng(0, "drop");
    (void)mhca.forward(q, kv, false, drop_rng, &cache);
    for (const auto& p : cache.probs)
        for (float v : p.data) CHECK(v == doctest::Approx(1.0f / Tk).epsilon(1e-6));

    // pre-norm output rows equal the output-projected mean of V (all V rows
    // coincide, so the mean is V row 0)
    Tensor v0({1, D});
    for (int d = 0; d < D; ++d) v0.data[d] = cache.V.data[cache.V.off2(0, d)];
    Tensor want = mhca.wo.forward(v0);
    for (int t = 0; t < Tq; ++t)
        for (int d = 0; d < D; ++d)
            CHECK(cache.pre_drop.data[cache.pre_drop.off2(t, d)] ==
                  doctest::Approx(want.data[d]).epsilon(1e-5));
}

TEST_CASE("mhca: a single key gets weight one and rows always sum to one") {
    const int D = 8;
    ahmf::Mhca<float> mhca(D, 4, 0.0);
    ahmf::Rng rng(103, "mhca-rows");
    mhca.init(rng);
    ahmf::Rng drop_rng(0, "drop");

    Tensor q = rand_t<float>(rng, {3, D});
    Tensor kv1 = rand_t<float>(rng, {1, D});
    ahmf::MhcaCache<float> cache;
    (void)mhca.forward(q, kv1, false, drop_rng, &cache);
    for (const auto& p : cache.probs)
        for (float v : p.data) CHECK(v == 1.0f);

    for (int trial = 0; trial < 20; ++trial) {
        Tensor qq = rand_t<float>(rng, {4, D}, -3.0, 3.0);
        Tensor kk = rand_t<float>(rng, {5, D}, -3.0, 3.0);
        (void)mhca.forward(qq, kk, false, drop_rng, &cache);
        for (const auto& p : cache.probs)
            for (int i = 0; i < p.extent(0); ++i) {
                double row = 0.0;
                for (int j = 0; j < p.extent(1); ++j) row += p.data[p.off2(i, j)];
                CHECK(row == doctest::Approx(1.0).epsilon(1e-6));
            }
    }
}

TEST_CASE("mhca: output keeps the query shape and validates config") {
    ahmf::Mhca<float> mhca(8, 2, 0.0);
    ahmf::Rng rng(107, "mhca-shape");
    mhca.init(rng);
    ahmf::Rng drop_rng(0, "drop");
    Tensor q = rand_t<float>(rng, {5, 8});
    Tensor kv = rand_t<float>(rng, {3, 8});
    Tensor y = mhca.forward(q, kv, false, drop_rng, nullptr);
    CHECK(y.shape == q.shape);

    Tensor bad = rand_t<float>(rng, {3, 6});
    CHECK_THROWS_AS(mhca.forward(q, bad, false, drop_rng, nullptr), ahmf::ConfigError);
    CHECK_THROWS_AS(ahmf::Mhca<float>(8, 3, 0.0), ahmf::ConfigError);
}

TEST_CASE("enhance: a lone bank slot equal to token 0 is recovered exactly") {
    const int D = 6;
    ahmf::Mhca<float> mhca(D, 1, 0.0);  // PE on: a single key still wins softmax
    set_identity(mhca.wq.w);
    set_identity(mhca.wk.w);
    set_identity(mhca.wv.w);
    set_identity(mhca.wo.w);

    ahmf::Rng rng(109, "enhance-slot");
    Tensor m_w = rand_t<float>(rng, {3, D});
    Tensor bank({1, D});
    for (int d = 0; d < D; ++d) bank.data[d] = m_w.data[m_w.off2(0, d)];

    ahmf::MhcaCache<float> cache;
    ahmf::Rng drop_rng(0, "drop");
    Tensor y = mhca.forward(m_w, bank, false, drop_rng, &cache);
    CHECK(y.shape == m_w.shape);
    // every query attends to the only slot; identity projections hand the
    // slot through to the pre-normalization output
    for (int t = 0; t < 3; ++t)
        for (int d = 0; d < D; ++d)
            CHECK(cache.pre_drop.data[cache.pre_drop.off2(t, d)] ==
                  doctest::Approx(bank.data[d]).epsilon(1e-6));
}

TEST_CASE("enhance: scaling the bank changes the output") {
    const int D = 8;
    ahmf::Mhca<float> mhca(D, 2, 0.0);
    ahmf::Rng rng(113, "enhance-perturb");
    mhca.init(rng);
    ahmf::Rng drop_rng(0, "drop");
    Tensor q = rand_t<float>(rng, {2, D});
    Tensor bank = rand_t<float>(rng, {3, D});
    Tensor y1 = mhca.forward(q, bank, false, drop_rng, nullptr);
    for (auto& v : bank.data) v *= 2.0f;
    Tensor y2 = mhca.forward(q, bank, false, drop_rng, nullptr);
    float maxdiff = 0.0f;
    for (std::size_t i = 0; i < y1.numel(); ++i)
        maxdiff = std::max(maxdiff, std::fabs(y1.data[i] - y2.data[i]));
    CHECK(maxdiff > 1e-4f);

    // zero bank with zero value bias still produces finite output
    Tensor zero_bank = Tensor::zeros({3, D});
    Tensor y3 = mhca.forward(q, zero_bank, false, drop_rng, nullptr);
    CHECK(y3.all_finite());
    CHECK(y3.shape == q.shape);
}

TEST_CASE("long-term bank: EMA blend endpoints and staging discipline") {
    ahmf::LongTermBank<float> bank(2, 4);
    ahmf::Rng rng(127, "bank-ema");
    bank.init(rng);
    auto before = bank.slots.data;
    Tensor update = rand_t<float>(rng, {2, 4});

    bank.ema_alpha = 0.0;
    bank.stage(update);
    CHECK(bank.slots.data == before);  // staging alone never writes
    bank.apply_pending();
    CHECK(bank.slots.data == before);  // alpha 0 keeps the slots

    bank.ema_alpha = 1.0;
    bank.stage(update);
    bank.apply_pending();
    CHECK(bank.slots.data == update.data);  // alpha 1 replaces them

    CHECK_THROWS_AS(bank.stage(rand_t<float>(rng, {3, 4})), ahmf::DimensionError);
    CHECK_THROWS_AS(ahmf::LongTermBank<float>(0, 4), ahmf::ConfigError);
}

TEST_CASE("long-term bank: 100 attended updates keep slot norms bounded") {
    const int D = 8, M = 3;
    ahmf::HybridMemoryFusion<float> fusion;
    fusion.cfg.channels = 2;
    fusion.cfg.heads = 2;
    fusion.mhca_ltm = ahmf::Mhca<float>(D, 2, 0.0);
    fusion.bank = ahmf::LongTermBank<float>(M, D);
    fusion.token_dim = D;
    fusion.cfg.use_hmf = true;
    ahmf::Rng rng(131, "bank-drift");
    fusion.mhca_ltm.init(rng);
    fusion.bank.init(rng);
    fusion.bank.ema_alpha = 0.1;

    ahmf::Rng drop_rng(0, "drop");
    for (int it = 0; it < 100; ++it) {
        Tensor source = rand_t<float>(rng, {4, D}, -2.0, 2.0);
        (void)fusion.update_long_term(source, ahmf::Mode::Train, drop_rng);
        fusion.bank.apply_pending();
        REQUIRE(fusion.bank.slots.all_finite());
    }
    float mx = 0.0f;
    for (float v : fusion.bank.slots.data) mx = std::max(mx, std::fabs(v));
    // layer normalization caps each attended update near unit scale, so the
    // EMA can never run away
    CHECK(mx < 10.0f);

    CHECK_THROWS_AS(fusion.update_long_term(Tensor::zeros({4, D}), ahmf::Mode::Eval, drop_rng),
                    ahmf::UsageError);
}

TEST_CASE("channel attention: singleton and duplicated channels") {
    ahmf::Rng rng(137, "ca-small");
    Tensor one = rand_t<float>(rng, {1, 3, 3});
    Tensor y1 = ahmf::channel_attention(one);
    for (std::size_t i = 0; i < one.numel(); ++i)
        CHECK(y1.data[i] == doctest::Approx(one.data[i]).epsilon(1e-6));

    Tensor two({2, 2, 2});
    for (int p = 0; p < 4; ++p) {
        const float v = static_cast<float>(rng.uniform(-1.0, 1.0));
        two.data[p] = v;
        two.data[4 + p] = v;
    }
    Tensor y2 = ahmf::channel_attention(two);
    for (int p = 0; p < 4; ++p) {
        CHECK(y2.data[p] == doctest::Approx(two.data[p]).epsilon(1e-6));
        CHECK(y2.data[4 + p] == doctest::Approx(two.data[p]).epsilon(1e-6));
    }
}

TEST_CASE("channel attention: matches the naive channel-pair oracle") {
    ahmf::Rng rng(139, "ca-oracle");
    Tensor x = rand_t<float>(rng, {3, 2, 2});
    Tensor y = ahmf::channel_attention(x);

    for (int i = 0; i < 3; ++i) {
        double logits[3];
        for (int j = 0; j < 3; ++j) {
            double dot = 0.0;
            for (int p = 0; p < 4; ++p)
                dot += static_cast<double>(x.data[i * 4 + p]) * x.data[j * 4 + p];
            logits[j] = dot;
        }
        const double mx = std::max({logits[0], logits[1], logits[2]});
        double z = 0.0;
        for (double l : logits) z += std::exp(l - mx);
        for (int p = 0; p < 4; ++p) {
            double want = 0.0;
            for (int j = 0; j < 3; ++j)
                want += std::exp(logits[j] - mx) / z * x.data[j * 4 + p];
            CHECK(y.data[i * 4 + p] == doctest::Approx(want).epsilon(1e-6));
        }
    }
}

TEST_CASE("channel attention: permutation equivariance over channels") {
    ahmf::Rng rng(149, "ca-perm");
    Tensor x = rand_t<float>(rng, {4, 3, 3});
    Tensor y = ahmf::channel_attention(x);
    const int perm[4] = {2, 0, 3, 1};
    Tensor xp({4, 3, 3});
    for (int c = 0; c < 4; ++c)
        for (int p = 0; p < 9; ++p) xp.data[c * 9 + p] = x.data[perm[c] * 9 + p];
    Tensor yp = ahmf::channel_attention(xp);
    for (int c = 0; c < 4; ++c)
        for (int p = 0; p < 9; ++p)
            CHECK(yp.data[c * 9 + p] == doctest::Approx(y.data[perm[c] * 9 + p]).epsilon(1e-6));
}

TEST_CASE("fuse: inference never touches the bank, training stages after prediction") {
    ahmf::FusionConfig cfg;
    cfg.channels = 2;
    cfg.heads = 2;
    cfg.upsample = 1;
    ahmf::HybridMemoryFusion<float> train_f(3, 2, 2, 4, cfg);
    ahmf::HybridMemoryFusion<float> infer_f(3, 2, 2, 4, cfg);
    train_f.init(151);
    infer_f.init(151);

    ahmf::Rng rng(151, "fuse-mode");
    Tensor volume = rand_t<float>(rng, {4, 3, 2, 2});
    ahmf::Rng drop_a(1, "drop");
    ahmf::Rng drop_b(1, "drop");

    auto slots_before = infer_f.bank.slots.data;
    Tensor fused_infer = infer_f.forward(volume, ahmf::Mode::Eval, drop_a, nullptr);
    CHECK(std::memcmp(infer_f.bank.slots.data.data(), slots_before.data(),
                      slots_before.size() * sizeof(float)) == 0);
    CHECK_FALSE(infer_f.bank.has_pending);

    Tensor fused_train = train_f.forward(volume, ahmf::Mode::Train, drop_b, nullptr);
    CHECK(train_f.bank.has_pending);                      // update staged...
    CHECK(train_f.bank.slots.data == slots_before);       // ...but not applied
    CHECK(fused_train.data == fused_infer.data);          // prediction precedes update

    train_f.bank.apply_pending();
    CHECK(train_f.bank.slots.data != slots_before);
}

TEST_CASE("fuse: output volume shape tracks channels and upsample") {
    ahmf::FusionConfig cfg;
    cfg.channels = 3;
    cfg.heads = 3;
    cfg.upsample = 2;
    ahmf::HybridMemoryFusion<float> fusion(4, 2, 2, 2, cfg);
    fusion.init(157);
    ahmf::Rng rng(157, "fuse-shape");
    Tensor volume = rand_t<float>(rng, {2, 4, 2, 2});
    ahmf::Rng drop_rng(0, "drop");
    Tensor fused = fusion.forward(volume, ahmf::Mode::Eval, drop_rng, nullptr);
    CHECK(fused.shape == std::vector<int>{2, 3, 4, 4});
    CHECK(fused.all_finite());
}

TEST_CASE("fuse: hmf and ca ablations run and differ from the full path") {
    ahmf::Rng rng(163, "fuse-ablate");
    Tensor volume = rand_t<float>(rng, {2, 3, 2, 2});
    ahmf::Rng drop_rng(0, "drop");

    auto build = [&](bool hmf, bool ca) {
        ahmf::FusionConfig cfg;
        cfg.channels = 2;
        cfg.heads = 2;
        cfg.use_hmf = hmf;
        cfg.use_ca = ca;
        ahmf::HybridMemoryFusion<float> f(3, 2, 2, 2, cfg);
        f.init(163);
        return f;
    };
    auto full = build(true, true);
    auto no_hmf = build(false, true);
    auto no_ca = build(true, false);
    Tensor y_full = full.forward(volume, ahmf::Mode::Eval, drop_rng, nullptr);
    Tensor y_nh = no_hmf.forward(volume, ahmf::Mode::Eval, drop_rng, nullptr);
    Tensor y_nc = no_ca.forward(volume, ahmf::Mode::Eval, drop_rng, nullptr);
    CHECK(y_full.shape == y_nh.shape);
    CHECK(y_full.shape == y_nc.shape);
    CHECK(y_full.data != y_nh.data);
    CHECK(y_full.data != y_nc.data);
}

TEST_CASE("fusion: gradcheck through enhancement and channel attention") {
    const int T = 2, C = 2, H = 2, W = 2, D = C * H * W;  // D = 8, heads = 2
    ahmf::Mhca<double> mhca(D, 2, 0.0);
    ahmf::Rng rng(167, "fusion-gc");
    mhca.init(rng);
    DT m_w = rand_t<double>(rng, {T, D});
    DT bank = rand_t<double>(rng, {2, D});
    DT R = rand_t<double>(rng, {T, D});

    ahmf::MhcaCache<double> cache;
    std::vector<ahmf::CaCache<double>> ca_caches(T);
    auto run = [&](bool collect) {
        ahmf::Rng drop_rng(0, "drop");
        DT enhanced = mhca.forward(m_w, bank, true, drop_rng, &cache);
        DT fused({T, D});
        for (int t = 0; t < T; ++t) {
            DT frame({C, H, W});
            std::copy(enhanced.data.begin() + t * D, enhanced.data.begin() + (t + 1) * D,
                      frame.data.begin());
            DT out = ahmf::channel_attention(frame, &ca_caches[t]);
            std::copy(out.data.begin(), out.data.end(), fused.data.begin() + t * D);
        }
        const double loss = wsum(fused, R);
        if (collect) {
            DT g_enh({T, D});
            for (int t = 0; t < T; ++t) {
                DT g_frame({C, H, W});
                std::copy(R.data.begin() + t * D, R.data.begin() + (t + 1) * D,
                          g_frame.data.begin());
                DT g_tok = ahmf::channel_attention_backward(g_frame, ca_caches[t]);
                std::copy(g_tok.data.begin(), g_tok.data.end(), g_enh.data.begin() + t * D);
            }
            auto grads = mhca.backward(g_enh, cache);
            ahmf::ops::accumulate_grad(m_w, grads.gq);
            ahmf::ops::accumulate_grad(bank, grads.gkv);
        }
        return loss;
    };
    // wk.b is omitted: a shared key offset shifts each logit row uniformly and
    // the softmax cancels it, so the loss is exactly flat in that bias
    auto rep = ahmf::grad_check<double>(
        "fusion_enhance_ca",
        {&m_w, &bank, &mhca.wq.w, &mhca.wq.b, &mhca.wk.w, &mhca.wv.w, &mhca.wv.b, &mhca.wo.w,
         &mhca.wo.b, &mhca.ln_gamma, &mhca.ln_beta},
        run, 1e-3);
    CAPTURE(rep.max_rel_error);
    CAPTURE(rep.detail);
    CHECK(rep.passed);

    mhca.wk.b.set_requires_grad(true);
    mhca.wk.b.zero_grad();
    (void)run(true);
    for (double g : mhca.wk.b.grad) CHECK(std::fabs(g) < 1e-12);
}

TEST_CASE("fusion: end-to-end gradcheck from encoder volume to fused volume") {
    ahmf::FusionConfig cfg;
    cfg.channels = 2;
    cfg.heads = 2;
    ahmf::HybridMemoryFusion<double> fusion(2, 2, 2, 2, cfg);
    fusion.init(173);
    ahmf::Rng rng(173, "fusion-e2e-gc");
    DT volume = rand_t<double>(rng, {2, 2, 2, 2});
    DT R = rand_t<double>(rng, {2, 2, 2, 2});

    ahmf::FusionCache<double> cache;
    auto run = [&](bool collect) {
        ahmf::Rng drop_rng(0, "drop");
        DT fused = fusion.forward(volume, ahmf::Mode::GradCheck, drop_rng, &cache);
        const double loss = wsum(fused, R);
        if (collect) ahmf::ops::accumulate_grad(volume, fusion.backward(R, cache));
        return loss;
    };
    std::vector<DT*> params = {&volume,
                               &fusion.bank.slots,
                               &fusion.wm_head.expand.w,
                               &fusion.wm_head.expand.b,
                               &fusion.wm_head.depth.w,
                               &fusion.wm_head.depth.b,
                               &fusion.wm_head.project.w,
                               &fusion.wm_head.project.b,
                               &fusion.mhca_wm.wq.w,
                               &fusion.mhca_wm.wq.b,
                               &fusion.mhca_wm.wk.w,
                               &fusion.mhca_wm.wv.w,
                               &fusion.mhca_wm.wv.b,
                               &fusion.mhca_wm.wo.w,
                               &fusion.mhca_wm.wo.b,
                               &fusion.mhca_wm.ln_gamma,
                               &fusion.mhca_wm.ln_beta};
    auto rep = ahmf::grad_check<double>("fusion_pipeline", params, run, 1e-3);
    CAPTURE(rep.max_rel_error);
    CAPTURE(rep.detail);
    CHECK(rep.passed);
}
