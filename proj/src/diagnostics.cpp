#include "ahmf/diagnostics.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "ahmf/model.hpp"
#include "ahmf/ops.hpp"
#include "ahmf/rng.hpp"

namespace ahmf::diag {

namespace {

using DT = TensorT<double>;
namespace ops = ahmf::ops;

DT rand_d(Rng& rng, std::vector<int> shape, double lo = -1.0, double hi = 1.0) {
    DT t(std::move(shape));
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

double wsum(const DT& y, const DT& r) {
    double acc = 0.0;
    for (std::size_t i = 0; i < y.numel(); ++i) acc += y.data[i] * r.data[i];
    return acc;
}

}  // namespace

std::vector<GradCheckReport> gradcheck_ops(bool inject_fault) {
    std::vector<GradCheckReport> out;

    {
        Rng rng(300, "diag-linear", 0);
        DT x = rand_d(rng, {2, 4}), W = rand_d(rng, {3, 4}), b = rand_d(rng, {3});
        DT R = rand_d(rng, {2, 3});
        auto run = [&](bool collect) {
            DT y = ops::linear(x, W, b);
            if (collect) ops::accumulate_grad(x, ops::linear_backward(R, x, W, b));
            return wsum(y, R);
        };
        out.push_back(grad_check<double>("linear", {&x, &W, &b}, run, kOpsTol));
    }
    {
        Rng rng(301, "diag-conv", 0);
        DT x = rand_d(rng, {2, 5, 5}), w = rand_d(rng, {2, 2, 3, 3}), b = rand_d(rng, {2});
        DT R = rand_d(rng, {2, 5, 5});
        auto run = [&](bool collect) {
            DT y = ops::conv2d(x, w, b, 1, 1, 1);
            if (collect) ops::accumulate_grad(x, ops::conv2d_backward(R, x, w, b, 1, 1, 1));
            return wsum(y, R);
        };
        out.push_back(grad_check<double>("conv2d", {&x, &w, &b}, run, kOpsTol));
    }
    {
        Rng rng(302, "diag-dwconv", 0);
        DT x = rand_d(rng, {4, 4, 4}), w = rand_d(rng, {4, 1, 3, 3}), b = rand_d(rng, {4});
        DT R = rand_d(rng, {4, 4, 4});
        auto run = [&](bool collect) {
            DT y = ops::conv2d(x, w, b, 1, 1, 4);
            if (collect) ops::accumulate_grad(x, ops::conv2d_backward(R, x, w, b, 1, 1, 4));
            return wsum(y, R);
        };
        out.push_back(grad_check<double>("conv2d_depthwise", {&x, &w, &b}, run, kOpsTol));
    }
    {
        Rng rng(303, "diag-softmax", 0);
        DT x = rand_d(rng, {3, 5}, -2.0, 2.0), R = rand_d(rng, {3, 5});
        auto run = [&](bool collect) {
            DT y = ops::softmax_lastdim(x);
            if (collect) ops::accumulate_grad(x, ops::softmax_backward(R, y));
            return wsum(y, R);
        };
        out.push_back(grad_check<double>("softmax", {&x}, run, kOpsTol));
    }
    {
        Rng rng(304, "diag-ln", 0);
        DT x = rand_d(rng, {3, 6}), gamma = rand_d(rng, {6}, 0.5, 1.5), beta = rand_d(rng, {6});
        DT R = rand_d(rng, {3, 6});
        auto run = [&](bool collect) {
            ops::LayerNormCache<double> cache;
            DT y = ops::layer_norm(x, gamma, beta, 1e-5, &cache);
            if (collect) ops::accumulate_grad(x, ops::layer_norm_backward(R, cache, gamma, beta));
            return wsum(y, R);
        };
        out.push_back(grad_check<double>("layer_norm", {&x, &gamma, &beta}, run, kOpsTol));
    }
    {
        Rng rng(305, "diag-act", 0);
        // keep relu6 inputs clear of its kinks at 0 and 6
        DT x = rand_d(rng, {2, 7}, 0.5, 5.5), R = rand_d(rng, {2, 7});
        auto run = [&](bool collect) {
            DT y = ops::relu6(x);
            if (collect) ops::accumulate_grad(x, ops::relu6_backward(R, x));
            return wsum(y, R);
        };
        out.push_back(grad_check<double>("relu6", {&x}, run, kOpsTol));
    }
    {
        Rng rng(306, "diag-sig", 0);
        DT x = rand_d(rng, {2, 7}, -2.0, 2.0), R = rand_d(rng, {2, 7});
        auto run = [&](bool collect) {
            DT y = ops::sigmoid(x);
            if (collect) ops::accumulate_grad(x, ops::sigmoid_backward(R, y));
            return wsum(y, R);
        };
        out.push_back(grad_check<double>("sigmoid", {&x}, run, kOpsTol));
    }
    {
        Rng rng(307, "diag-tanh", 0);
        DT x = rand_d(rng, {2, 7}, -2.0, 2.0), R = rand_d(rng, {2, 7});
        auto run = [&](bool collect) {
            DT y = ops::tanh_fwd(x);
            if (collect) ops::accumulate_grad(x, ops::tanh_backward(R, y));
            return wsum(y, R);
        };
        out.push_back(grad_check<double>("tanh", {&x}, run, kOpsTol));
    }
    {
        Rng rng(308, "diag-up", 0);
        DT x = rand_d(rng, {2, 3, 3}), R = rand_d(rng, {2, 6, 6});
        auto run = [&](bool collect) {
            DT y = ops::upsample_nearest(x, 2);
            if (collect) ops::accumulate_grad(x, ops::upsample_nearest_backward(R, 2));
            return wsum(y, R);
        };
        out.push_back(grad_check<double>("upsample_nearest", {&x}, run, kOpsTol));
    }
    {
        Rng rng(309, "diag-concat", 0);
        DT a = rand_d(rng, {1, 3, 3}), b = rand_d(rng, {2, 3, 3});
        DT R = rand_d(rng, {3, 3, 3});
        auto run = [&](bool collect) {
            DT y = ops::concat_channels<double>({&a, &b});
            if (collect) {
                auto parts = ops::concat_channels_backward(R, {1, 2});
                ops::accumulate_grad(a, parts[0]);
                ops::accumulate_grad(b, parts[1]);
            }
            return wsum(y, R);
        };
        out.push_back(grad_check<double>("concat_channels", {&a, &b}, run, kOpsTol));
    }
    {
        // the full head chain: softplus -> normalize -> KLD against a fixed gt
        Rng rng(310, "diag-loss", 0);
        DT logits = rand_d(rng, {4, 4});
        DT gt = rand_d(rng, {4, 4}, 0.05, 1.0);
        double total = 0.0;
        for (double v : gt.data) total += v;
        for (auto& v : gt.data) v /= total;
        auto run = [&](bool collect) {
            ops::NormalizeSumCache<double> cache;
            DT sp = ops::softplus(logits);
            DT pred = ops::normalize_sum(sp, &cache);
            const double loss = ops::kld_loss(gt, pred, 1e-7);
            if (collect) {
                DT gp = ops::kld_loss_backward(gt, pred, 1e-7, 1.0);
                DT gsp = ops::normalize_sum_backward(gp, cache);
                ops::accumulate_grad(logits, ops::softplus_backward(gsp, logits));
            }
            return loss;
        };
        out.push_back(grad_check<double>("softplus_normalize_kld", {&logits}, run, kOpsTol));
    }

    if (inject_fault) {
        // Negative control: the analytic gradient below claims d(x^2)/dx = 3x.
        // A harness that lets this pass would also miss real bugs.
        Rng rng(311, "diag-fault", 0);
        DT x = rand_d(rng, {5}, 0.5, 1.5);
        auto run = [&](bool collect) {
            double acc = 0.0;
            for (std::size_t i = 0; i < x.numel(); ++i) {
                acc += x.data[i] * x.data[i];
                if (collect) x.grad[i] += 3.0 * x.data[i];
            }
            return acc;
        };
        out.push_back(
            grad_check<double>("negative_control(intentionally wrong)", {&x}, run, kOpsTol));
    }
    return out;
}

GradCheckReport gradcheck_model() {
    ModelConfig cfg;
    cfg.frame_h = cfg.frame_w = 8;
    cfg.stub_channels = {2};  // one level: fused grid 4x4, C = 2
    cfg.attn_dim = 2;
    cfg.gru_hidden = 2;
    cfg.n_priors = 1;
    cfg.memory_channels = 2;
    cfg.heads = 2;
    cfg.seq_len = 2;

    Model<double> model(cfg, {"d"});
    model.init(234);
    // same fixture conditioning as the unit suite: keep the smoothing kernel
    // width away from a truncation jump, and lift the memory-head biases off
    // the relu6 kink a dead expand channel would otherwise sit on
    model.domains.at("d").smooth_log_sigma.data[0] = std::log(1.07);
    for (auto& v : model.fusion.wm_head.expand.b.data) v += 0.05;
    for (auto& v : model.fusion.wm_head.depth.b.data) v += 0.05;

    Rng rng(234, "model-gc");
    std::vector<DT> frames;
    for (int t = 0; t < 2; ++t) frames.push_back(rand_d(rng, {3, 8, 8}));
    std::vector<DT> gts;
    for (int t = 0; t < 2; ++t) {
        DT g = rand_d(rng, {8, 8}, 0.05, 1.0);
        double total = 0.0;
        for (double v : g.data) total += v;
        for (auto& v : g.data) v /= total;
        gts.push_back(std::move(g));
    }

    // dead parameters are excluded: a constant shift of all attention keys is
    // cancelled by the softmax, and the long-term update path never feeds the
    // loss
    std::vector<DT*> inputs;
    for (auto& p : model.named_params()) {
        if (p.name == "encoder.sa.k.b") continue;
        if (p.name.find("mhca_ltm") != std::string::npos) continue;
        if (p.name == "fusion.mhca_wm.wk.b") continue;
        inputs.push_back(p.tensor);
    }

    ModelTrace<double> trace;
    auto run = [&](bool collect) {
        Rng drop_rng(0, "drop");
        const double loss = model.forward_loss(frames, gts, "d", Mode::GradCheck, drop_rng,
                                               &trace);
        if (collect) model.backward(gts, trace);
        return loss;
    };
    return grad_check<double>("model", inputs, run, kModelTol);
}

}  // namespace ahmf::diag
