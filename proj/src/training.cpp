#include "ahmf/training.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <limits>
#include <numeric>

namespace ahmf::train {

double lr_at(int epoch, const TrainConfig& cfg) {
    if (epoch < 0) throw UsageError("lr_at: epoch must be >= 0");
    double lr = cfg.lr0;
    for (int i = 0; i < epoch; ++i) lr *= cfg.decay;
    return lr;
}

void Optimizer::step(Model<float>& model, double lr, const TrainConfig& cfg,
                     const std::string& batch_domain) {
    for (auto& p : model.named_params()) {
        if (!p.domain.empty() && p.domain != batch_domain) continue;
        sgd_update(*p.tensor, velocity[p.name], lr, cfg.momentum, cfg.weight_decay, p.name);
    }
}

bool early_stop(const std::vector<double>& val_scores, int patience) {
    if (patience < 1) throw UsageError("early_stop: patience must be >= 1");
    const std::size_t n = val_scores.size();
    if (n < static_cast<std::size_t>(patience) + 1) return false;
    for (std::size_t i = n - static_cast<std::size_t>(patience); i < n; ++i)
        if (!(val_scores[i] < val_scores[i - 1])) return false;
    return true;
}

std::vector<Batch> joint_schedule(const std::vector<std::pair<std::string, int>>& sizes,
                                  int batch_size, std::uint64_t seed, int epoch) {
    if (batch_size < 1) throw ConfigError("joint_schedule: batch_size must be >= 1");
    if (sizes.empty()) throw ConfigError("joint_schedule: no domains to schedule");

    std::vector<Batch> out;
    for (const auto& [domain, n] : sizes) {
        if (n < 1)
            throw ConfigError("joint_schedule: domain '" + domain + "' has no samples");
        std::vector<int> idx(static_cast<std::size_t>(n));
        std::iota(idx.begin(), idx.end(), 0);
        Rng rng(seed, "schedule/" + domain, static_cast<std::uint64_t>(epoch));
        rng.shuffle(idx.begin(), idx.end());
        for (int at = 0; at < n; at += batch_size) {
            Batch b;
            b.domain = domain;
            const int end = std::min(n, at + batch_size);
            b.indices.assign(idx.begin() + at, idx.begin() + end);
            out.push_back(std::move(b));
        }
    }
    Rng order(seed, "schedule/order", static_cast<std::uint64_t>(epoch));
    order.shuffle(out.begin(), out.end());
    return out;
}

// ------------------------------------------------------------- checkpoint --

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    for (int s = 0; s < 32; s += 8) out.push_back(static_cast<char>((v >> s) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int s = 0; s < 64; s += 8) out.push_back(static_cast<char>((v >> s) & 0xff));
}

struct Reader {
    const std::string& bytes;
    const std::string& path;
    std::size_t off = 0;

    DataError fail(const std::string& msg) const {
        return DataError("checkpoint file '" + path + "': " + msg + " at byte " +
                         std::to_string(off));
    }
    void need(std::size_t n) const {
        if (bytes.size() - off < n) throw fail("truncated");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int s = 0; s < 32; s += 8)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[off++])) << s;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int s = 0; s < 64; s += 8)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[off++])) << s;
        return v;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s = bytes.substr(off, n);
        off += n;
        return s;
    }
};

constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::string bytes = "AHC1";
    put_u32(bytes, kCheckpointVersion);
    put_u32(bytes, ckpt.epoch);
    put_u64(bytes, ckpt.step);
    put_u64(bytes, ckpt.seed);
    put_u32(bytes, static_cast<std::uint32_t>(ckpt.val_history.size()));
    for (double v : ckpt.val_history) put_u64(bytes, std::bit_cast<std::uint64_t>(v));
    put_u64(bytes, ckpt.config_text.size());
    bytes += ckpt.config_text;
    put_u32(bytes, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, t] : ckpt.tensors) {
        put_u32(bytes, static_cast<std::uint32_t>(name.size()));
        bytes += name;
        const std::string blob = data::encode_tensor(t);
        put_u64(bytes, blob.size());
        bytes += blob;
    }
    data::write_file_atomic(path, bytes);
}

Checkpoint load_checkpoint(const std::string& path) {
    const std::string bytes = data::read_file(path);
    Reader r{bytes, path};
    if (r.str(std::min<std::size_t>(4, bytes.size())) != "AHC1") {
        r.off = 0;
        throw r.fail("bad magic");
    }
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw r.fail("unsupported version " + std::to_string(version));

    Checkpoint ckpt;
    ckpt.epoch = r.u32();
    ckpt.step = r.u64();
    ckpt.seed = r.u64();
    const std::uint32_t n_val = r.u32();
    if (n_val > (1u << 20)) throw r.fail("implausible history length");
    for (std::uint32_t i = 0; i < n_val; ++i)
        ckpt.val_history.push_back(std::bit_cast<double>(r.u64()));
    const std::uint64_t cfg_len = r.u64();
    if (cfg_len > (1u << 24)) throw r.fail("implausible config length");
    ckpt.config_text = r.str(static_cast<std::size_t>(cfg_len));
    const std::uint32_t n_tensors = r.u32();
    if (n_tensors > (1u << 20)) throw r.fail("implausible tensor count");
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
        const std::uint32_t name_len = r.u32();
        if (name_len > 4096) throw r.fail("implausible tensor name length");
        const std::string name = r.str(name_len);
        const std::uint64_t blob_len = r.u64();
        if (blob_len > bytes.size() - r.off) throw r.fail("truncated");
        const std::string blob = r.str(static_cast<std::size_t>(blob_len));
        ckpt.tensors.emplace_back(
            name, data::decode_tensor(blob, "checkpoint tensor '" + name + "'"));
    }
    if (r.off != bytes.size()) throw r.fail("trailing data");
    return ckpt;
}

Checkpoint make_checkpoint(Model<float>& model, const Optimizer& opt, std::uint32_t epoch,
                           std::uint64_t step, const std::vector<double>& val_history,
                           const std::string& config_text) {
    Checkpoint ckpt;
    ckpt.epoch = epoch;
    ckpt.step = step;
    ckpt.seed = 0;
    ckpt.val_history = val_history;
    ckpt.config_text = config_text;
    for (auto& p : model.named_params()) ckpt.tensors.emplace_back(p.name, *p.tensor);
    for (auto& p : model.named_state()) ckpt.tensors.emplace_back(p.name, *p.tensor);
    for (const auto& [name, v] : opt.velocity) {
        Tensor t({static_cast<int>(v.size())});
        t.data = v;
        ckpt.tensors.emplace_back("opt/" + name, std::move(t));
    }
    return ckpt;
}

void restore_model(const Checkpoint& ckpt, Model<float>& model) {
    std::map<std::string, const Tensor*> have;
    for (const auto& [name, t] : ckpt.tensors) {
        if (!have.emplace(name, &t).second)
            throw DataError("checkpoint: duplicate tensor '" + name + "'");
    }
    auto take = [&](ParamRef<float>& p) {
        auto it = have.find(p.name);
        if (it == have.end()) throw DataError("checkpoint: missing tensor '" + p.name + "'");
        if (it->second->shape != p.tensor->shape)
            throw DataError("checkpoint: tensor '" + p.name + "' has shape " +
                            shape_str(it->second->shape) + " but the model expects " +
                            shape_str(p.tensor->shape));
        p.tensor->data = it->second->data;
        have.erase(it);
    };
    for (auto& p : model.named_params()) take(p);
    for (auto& p : model.named_state()) take(p);
    for (const auto& [name, t] : have) {
        if (name.rfind("opt/", 0) != 0)
            throw DataError("checkpoint: unexpected tensor '" + name + "'");
    }
}

void restore_optimizer(const Checkpoint& ckpt, Optimizer& opt) {
    opt.velocity.clear();
    for (const auto& [name, t] : ckpt.tensors) {
        if (name.rfind("opt/", 0) != 0) continue;
        if (t.rank() != 1)
            throw DataError("checkpoint: velocity '" + name + "' must be rank 1, got " +
                            shape_str(t.shape));
        opt.velocity[name.substr(4)] = t.data;
    }
}

// ---------------------------------------------------------------- the loop --

namespace {

std::string g17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// first seq_len frames of a sample's tensors, validated
template <typename Get>
std::vector<Tensor> take_frames(const data::Sample& s, int seq_len, Get get,
                                const char* what) {
    const auto& src = get(s);
    if (static_cast<int>(src.size()) < seq_len)
        throw DataError("train: sample " + s.domain_id + "-" + std::to_string(s.sequence_id) +
                        " has " + std::to_string(src.size()) + " " + what +
                        " frames but seq_len is " + std::to_string(seq_len));
    return {src.begin(), src.begin() + seq_len};
}

bool degenerate_gt(const data::Sample& s, int seq_len) {
    const int t_use = std::min<int>(seq_len, static_cast<int>(s.gt.size()));
    for (int t = 0; t < t_use; ++t) {
        double total = 0.0;
        for (float v : s.gt[static_cast<std::size_t>(t)].data) {
            if (!std::isfinite(v)) return true;
            total += v;
        }
        if (total <= 0.0) return true;
    }
    return false;
}

struct MetricMeans {
    double auc_j = 0.0, sim = 0.0, cc = 0.0, kld = 0.0, nss = 0.0;
};

metrics::SampleMetrics final_frame_metrics(Model<float>& model, const data::Sample& s) {
    const int T = model.cfg.seq_len;
    auto frames = take_frames(s, T, [](const data::Sample& x) -> const auto& { return x.frames; }, "image");
    Rng drop_rng(0, "eval", 0);
    auto preds = model.predict_sequence(frames, s.domain_id, Mode::Eval, drop_rng, nullptr);
    const auto gt = cast_tensor<double>(s.gt[static_cast<std::size_t>(T - 1)]);
    const auto fix = cast_tensor<double>(s.fixations[static_cast<std::size_t>(T - 1)]);
    const auto pred = cast_tensor<double>(preds.back());
    return metrics::evaluate_sample(gt, pred, fix);
}

MetricMeans validation_means(Model<float>& model, const std::vector<data::Sample>& val_set,
                             const std::string& domain) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    MetricMeans m{nan, nan, nan, nan, nan};
    double auc = 0, sim = 0, cc = 0, kld = 0, nss = 0;
    int n = 0, n_auc = 0, n_cc = 0, n_nss = 0;
    for (const auto& s : val_set) {
        if (s.domain_id != domain) continue;
        const auto sm = final_frame_metrics(model, s);
        ++n;
        sim += sm.sim;
        kld += sm.kld;
        if (sm.auc_j) { auc += *sm.auc_j; ++n_auc; }
        if (sm.cc) { cc += *sm.cc; ++n_cc; }
        if (sm.nss) { nss += *sm.nss; ++n_nss; }
    }
    if (n > 0) { m.sim = sim / n; m.kld = kld / n; }
    if (n_auc > 0) m.auc_j = auc / n_auc;
    if (n_cc > 0) m.cc = cc / n_cc;
    if (n_nss > 0) m.nss = nss / n_nss;
    return m;
}

}  // namespace

std::string history_csv(const std::vector<HistoryRow>& history) {
    std::string out = "epoch,lr,train_loss,val_auc_j,val_sim,val_cc,val_kld,val_nss\n";
    for (const auto& r : history) {
        out += std::to_string(r.epoch);
        for (double v : {r.lr, r.train_loss, r.val_auc_j, r.val_sim, r.val_cc, r.val_kld,
                         r.val_nss})
            out += "," + g17(v);
        out += "\n";
    }
    return out;
}

TrainResult train(const TrainConfig& cfg, const ModelConfig& base,
                  const std::vector<data::Sample>& train_set,
                  const std::vector<data::Sample>& val_set,
                  const std::vector<std::string>& domains, const Checkpoint* resume,
                  std::ostream* log, const std::string& config_text) {
    cfg.validate();
    if (domains.empty()) throw ConfigError("train: need at least one domain");

    ModelConfig mcfg = base;
    mcfg.seq_len = cfg.seq_len;
    mcfg.ablation = cfg.ablation;
    mcfg.update_position = cfg.update_position;
    mcfg.dropout_rate = cfg.dropout;

    Model<float> model(mcfg, domains);
    model.init(cfg.seed);
    model.set_requires_grad(true);
    Optimizer opt;

    std::map<std::string, std::vector<int>> by_domain;
    for (std::size_t i = 0; i < train_set.size(); ++i) {
        const auto& d = train_set[i].domain_id;
        if (std::find(domains.begin(), domains.end(), d) == domains.end())
            throw DataError("train: sample domain '" + d + "' is not in the domain list");
        by_domain[d].push_back(static_cast<int>(i));
    }
    std::vector<std::pair<std::string, int>> sizes;
    for (const auto& d : domains) {
        auto it = by_domain.find(d);
        if (it != by_domain.end())
            sizes.emplace_back(d, static_cast<int>(it->second.size()));
    }
    if (cfg.max_epochs > 0 && sizes.empty())
        throw ConfigError("train: no training samples");

    std::vector<double> val_cc_hist;
    std::uint64_t gstep = 0;
    std::uint32_t start_epoch = 0;
    if (resume) {
        if (resume->seed != cfg.seed)
            throw ConfigError("train: resume checkpoint was trained with seed " +
                              std::to_string(resume->seed) + ", config says " +
                              std::to_string(cfg.seed));
        restore_model(*resume, model);
        restore_optimizer(*resume, opt);
        start_epoch = resume->epoch;
        gstep = resume->step;
        val_cc_hist = resume->val_history;
    }

    auto snapshot = [&](std::uint32_t epoch) {
        Checkpoint c = make_checkpoint(model, opt, epoch, gstep, val_cc_hist, config_text);
        c.seed = cfg.seed;
        return c;
    };

    TrainResult res;
    res.checkpoint = snapshot(start_epoch);

    try {
        for (std::uint32_t epoch = start_epoch;
             epoch < static_cast<std::uint32_t>(cfg.max_epochs); ++epoch) {
            const double lr = lr_at(static_cast<int>(epoch), cfg);
            const auto schedule =
                joint_schedule(sizes, cfg.batch_size, cfg.seed, static_cast<int>(epoch));

            double loss_sum = 0.0;
            int n_batches = 0;
            for (const auto& batch : schedule) {
                const auto& pool = by_domain[batch.domain];
                std::vector<const data::Sample*> picked;
                for (int li : batch.indices) {
                    const data::Sample* s = &train_set[static_cast<std::size_t>(
                        pool[static_cast<std::size_t>(li)])];
                    if (degenerate_gt(*s, cfg.seq_len)) {
                        if (log)
                            *log << "warning: skipping sample " << s->domain_id << "-"
                                 << s->sequence_id << " with a degenerate gt map\n";
                        continue;
                    }
                    picked.push_back(s);
                }
                if (picked.empty()) continue;

                model.zero_grads();
                double batch_loss = 0.0;
                for (std::size_t j = 0; j < picked.size(); ++j) {
                    const auto& s = *picked[j];
                    auto frames = take_frames(
                        s, cfg.seq_len,
                        [](const data::Sample& x) -> const auto& { return x.frames; },
                        "image");
                    auto gts = take_frames(
                        s, cfg.seq_len,
                        [](const data::Sample& x) -> const auto& { return x.gt; }, "gt");
                    Rng drop_rng(cfg.seed, "dropout", gstep * 64 + j);
                    ModelTrace<float> trace;
                    const double loss = model.forward_loss(frames, gts, s.domain_id,
                                                           Mode::Train, drop_rng, &trace);
                    if (!std::isfinite(loss))
                        throw NumericError("train: non-finite loss at step " +
                                           std::to_string(gstep));
                    model.backward(gts, trace, 1.0 / static_cast<double>(picked.size()));
                    batch_loss += loss;
                }
                opt.step(model, lr, cfg, batch.domain);
                model.apply_bank_update();
                ++gstep;
                loss_sum += batch_loss / static_cast<double>(picked.size());
                ++n_batches;
            }

            HistoryRow row;
            row.epoch = static_cast<int>(epoch);
            row.lr = lr;
            row.train_loss = n_batches > 0 ? loss_sum / n_batches
                                           : std::numeric_limits<double>::quiet_NaN();
            const auto vm = validation_means(model, val_set, domains.front());
            row.val_auc_j = vm.auc_j;
            row.val_sim = vm.sim;
            row.val_cc = vm.cc;
            row.val_kld = vm.kld;
            row.val_nss = vm.nss;
            val_cc_hist.push_back(vm.cc);
            res.history.push_back(row);
            res.checkpoint = snapshot(epoch + 1);
            if (log)
                *log << "epoch " << epoch << ": lr " << g17(lr) << ", train_loss "
                     << g17(row.train_loss) << ", val_cc " << g17(row.val_cc) << "\n";

            if (early_stop(val_cc_hist, cfg.patience)) {
                if (log)
                    *log << "early stop: validation CC fell for " << cfg.patience
                         << " consecutive epochs\n";
                break;
            }
        }
    } catch (const NumericError& e) {
        res.aborted = true;
        res.abort_reason = e.what();
        if (log) *log << "aborted: " << e.what() << " (keeping the last good checkpoint)\n";
    }
    res.steps = gstep;
    return res;
}

std::vector<std::pair<std::string, metrics::SampleMetrics>> evaluate_samples(
    Model<float>& model, const std::vector<data::Sample>& samples) {
    std::vector<std::pair<std::string, metrics::SampleMetrics>> rows;
    rows.reserve(samples.size());
    for (const auto& s : samples)
        rows.emplace_back(s.domain_id, final_frame_metrics(model, s));
    return rows;
}

}  // namespace ahmf::train
