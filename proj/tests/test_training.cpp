#include <doctest.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ahmf/errors.hpp"
#include "ahmf/ops.hpp"
#include "ahmf/rng.hpp"
#include "ahmf/training.hpp"

namespace fs = std::filesystem;
using ahmf::Ablation;
using ahmf::ModelConfig;
using ahmf::Tensor;
using ahmf::UpdatePosition;
namespace data = ahmf::data;
namespace train = ahmf::train;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path = fs::temp_directory_path() /
               ("ahmf_train_" + tag + "_" + std::to_string(counter++));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

// small enough that a whole training run takes well under a second
ModelConfig tiny_model() {
    ModelConfig m;
    m.frame_h = m.frame_w = 8;
    m.stub_channels = {2, 4};
    m.attn_dim = 4;
    m.gru_hidden = 4;
    m.n_priors = 2;
    m.memory_channels = 2;
    m.memory_upsample = 1;
    m.heads = 2;
    return m;
}

train::TrainConfig tiny_train(std::uint64_t seed) {
    train::TrainConfig t;
    t.seed = seed;
    t.seq_len = 3;
    t.batch_size = 2;
    t.max_epochs = 1;
    return t;
}

std::vector<data::Sample> tiny_data(const std::string& domain, std::uint64_t seed, int n) {
    data::SceneSpec spec;
    spec.h = spec.w = 8;
    spec.t = 3;
    spec.n_movers = 2;
    spec.blob_sigma = 1.0;
    spec.noise_sigma = 0.02;
    spec.domain_id = domain;
    spec.seed = seed;
    return data::generate(spec, n);
}

template <typename E, typename Fn>
void expect_error(Fn&& fn, const std::string& needle) {
    try {
        fn();
        FAIL("expected an error containing '" << needle << "'");
    } catch (const E& e) {
        const std::string msg = e.what();
        INFO("message: " << msg);
        CHECK(msg.find(needle) != std::string::npos);
    }
}

bool bits_equal(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) return false;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        if (std::bit_cast<std::uint32_t>(a.data[i]) != std::bit_cast<std::uint32_t>(b.data[i]))
            return false;
    return true;
}

std::map<std::string, const Tensor*> tensor_map(const train::Checkpoint& c) {
    std::map<std::string, const Tensor*> out;
    for (const auto& [name, t] : c.tensors) out.emplace(name, &t);
    return out;
}

bool checkpoints_bit_equal(const train::Checkpoint& a, const train::Checkpoint& b) {
    if (a.epoch != b.epoch || a.step != b.step || a.seed != b.seed) return false;
    if (a.val_history.size() != b.val_history.size()) return false;
    for (std::size_t i = 0; i < a.val_history.size(); ++i)
        if (std::bit_cast<std::uint64_t>(a.val_history[i]) !=
            std::bit_cast<std::uint64_t>(b.val_history[i]))
            return false;
    if (a.config_text != b.config_text) return false;
    auto ma = tensor_map(a), mb = tensor_map(b);
    if (ma.size() != mb.size()) return false;
    for (const auto& [name, t] : ma) {
        auto it = mb.find(name);
        if (it == mb.end() || !bits_equal(*t, *it->second)) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("training: the learning rate decays exponentially and exactly") {
    train::TrainConfig cfg;
    CHECK(train::lr_at(0, cfg) == 0.01);
    CHECK(train::lr_at(1, cfg) == 0.008);
    CHECK(train::lr_at(2, cfg) == 0.0064);
    CHECK(train::lr_at(3, cfg) == 0.00512);
    for (int e = 0; e < 12; ++e) CHECK(train::lr_at(e + 1, cfg) < train::lr_at(e, cfg));
    CHECK_THROWS_AS(train::lr_at(-1, cfg), ahmf::UsageError);
}

TEST_CASE("training: sgd steps match the hand recurrences") {
    auto scalar = [](double value, double grad) {
        ahmf::TensorT<double> p({1});
        p.data[0] = value;
        p.set_requires_grad(true);
        p.grad[0] = grad;
        return p;
    };

    SUBCASE("vanilla step") {
        auto p = scalar(1.0, 1.0);
        std::vector<double> v;
        train::sgd_update(p, v, 0.1, 0.0, 0.0, "p");
        CHECK(p.data[0] == doctest::Approx(0.9).epsilon(1e-15));
    }
    SUBCASE("two momentum steps on a constant gradient") {
        auto p = scalar(0.0, 1.0);
        std::vector<double> v;
        train::sgd_update(p, v, 0.1, 0.9, 0.0, "p");
        CHECK(p.data[0] == doctest::Approx(-0.1).epsilon(1e-15));
        CHECK(v[0] == doctest::Approx(1.0).epsilon(1e-15));
        p.grad[0] = 1.0;
        train::sgd_update(p, v, 0.1, 0.9, 0.0, "p");
        CHECK(v[0] == doctest::Approx(1.9).epsilon(1e-15));
        CHECK(p.data[0] == doctest::Approx(-0.29).epsilon(1e-12));
    }
    SUBCASE("zero gradient and zero velocity is a no-op") {
        auto p = scalar(1.25, 0.0);
        std::vector<double> v{0.0};
        train::sgd_update(p, v, 0.1, 0.9, 0.0, "p");
        CHECK(p.data[0] == 1.25);
    }
    SUBCASE("lr zero leaves parameters unchanged") {
        auto p = scalar(1.25, 3.0);
        std::vector<double> v;
        train::sgd_update(p, v, 0.0, 0.9, 1e-4, "p");
        CHECK(p.data[0] == 1.25);
    }
    SUBCASE("weight decay pulls toward zero") {
        auto p = scalar(1.0, 0.0);
        std::vector<double> v;
        train::sgd_update(p, v, 1.0, 0.0, 0.1, "p");
        CHECK(p.data[0] == doctest::Approx(0.9).epsilon(1e-15));
    }
    SUBCASE("a non-finite gradient names the parameter") {
        auto p = scalar(1.0, std::numeric_limits<double>::quiet_NaN());
        std::vector<double> v;
        expect_error<ahmf::NumericError>(
            [&] { train::sgd_update(p, v, 0.1, 0.9, 0.0, "fusion.bank.slots"); },
            "fusion.bank.slots");
    }
    SUBCASE("a missing gradient buffer is a usage error") {
        ahmf::TensorT<double> p({1});
        std::vector<double> v;
        CHECK_THROWS_AS(train::sgd_update(p, v, 0.1, 0.9, 0.0, "p"), ahmf::UsageError);
    }
}

TEST_CASE("training: early stopping fires on a full losing streak and never earlier") {
    CHECK_FALSE(train::early_stop({0.5, 0.6, 0.7}, 3));
    CHECK(train::early_stop({0.7, 0.6, 0.5, 0.4}, 3));
    CHECK_FALSE(train::early_stop({0.7, 0.6, 0.65, 0.6, 0.55}, 3));

    // never before patience + 1 scores, whatever their values
    for (int n = 0; n <= 3; ++n) {
        std::vector<double> falling;
        for (int i = 0; i < n; ++i) falling.push_back(1.0 - i);
        CHECK_FALSE(train::early_stop(falling, 3));
    }
    CHECK(train::early_stop({1.0, 0.9}, 1));
    CHECK_FALSE(train::early_stop({1.0, 1.0}, 1));

    // NaN scores (no validation data) never trigger a stop
    const double nan = std::numeric_limits<double>::quiet_NaN();
    CHECK_FALSE(train::early_stop({nan, nan, nan, nan}, 3));

    CHECK_THROWS_AS(train::early_stop({1.0}, 0), ahmf::UsageError);
}

TEST_CASE("training: the joint schedule partitions every domain each epoch") {
    SUBCASE("one domain splits into two full batches") {
        auto batches = train::joint_schedule({{"a", 8}}, 4, 5);
        REQUIRE(batches.size() == 2);
        std::vector<int> seen;
        for (const auto& b : batches) {
            CHECK(b.domain == "a");
            CHECK(b.indices.size() == 4);
            seen.insert(seen.end(), b.indices.begin(), b.indices.end());
        }
        std::sort(seen.begin(), seen.end());
        CHECK(seen == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7});
    }
    SUBCASE("two domains interleave one batch each") {
        auto batches = train::joint_schedule({{"a", 4}, {"b", 4}}, 4, 5);
        REQUIRE(batches.size() == 2);
        CHECK(batches[0].domain != batches[1].domain);
    }
    SUBCASE("a remainder becomes a short batch") {
        auto batches = train::joint_schedule({{"a", 7}}, 4, 5);
        REQUIRE(batches.size() == 2);
        CHECK(batches[0].indices.size() + batches[1].indices.size() == 7);
    }
    SUBCASE("same seed and epoch reproduce the sequence; epochs differ") {
        auto x = train::joint_schedule({{"a", 12}, {"b", 5}}, 4, 9, 2);
        auto y = train::joint_schedule({{"a", 12}, {"b", 5}}, 4, 9, 2);
        REQUIRE(x.size() == y.size());
        bool same = true;
        for (std::size_t i = 0; i < x.size(); ++i)
            same = same && x[i].domain == y[i].domain && x[i].indices == y[i].indices;
        CHECK(same);

        auto z = train::joint_schedule({{"a", 12}, {"b", 5}}, 4, 9, 3);
        bool differs = z.size() != x.size();
        for (std::size_t i = 0; !differs && i < x.size(); ++i)
            differs = x[i].domain != z[i].domain || x[i].indices != z[i].indices;
        CHECK(differs);
    }
    SUBCASE("empty inputs are configuration errors") {
        CHECK_THROWS_AS(train::joint_schedule({}, 4, 0), ahmf::ConfigError);
        CHECK_THROWS_AS(train::joint_schedule({{"a", 0}}, 4, 0), ahmf::ConfigError);
        CHECK_THROWS_AS(train::joint_schedule({{"a", 4}}, 0, 0), ahmf::ConfigError);
    }
}

TEST_CASE("training: the loss vanishes at its minimum with a flat logit gradient") {
    ahmf::Rng rng(77, "loss-min", 0);
    ahmf::TensorT<double> logits({4, 4});
    for (auto& v : logits.data) v = rng.uniform(-1.0, 1.0);

    ahmf::ops::NormalizeSumCache<double> cache;
    const auto sp = ahmf::ops::softplus(logits);
    const auto pred = ahmf::ops::normalize_sum(sp, &cache);
    const auto& gt = pred;  // ground truth equal to the prediction

    const double loss = ahmf::ops::kld_loss(gt, pred, 1e-7);
    CHECK(std::fabs(loss) < 1e-5);

    const auto gp = ahmf::ops::kld_loss_backward(gt, pred, 1e-7, 1.0);
    const auto gsp = ahmf::ops::normalize_sum_backward(gp, cache);
    const auto glog = ahmf::ops::softplus_backward(gsp, logits);
    for (double g : glog.data) CHECK(std::fabs(g) < 1e-3);
}

TEST_CASE("training: twenty full-batch descent steps decrease the loss monotonically") {
    auto samples = tiny_data("a", 31, 1);
    train::TrainConfig cfg = tiny_train(31);
    cfg.ablation = Ablation::no_hmf;  // keep the bank's EMA out of a pure descent check
    cfg.batch_size = 1;
    cfg.max_epochs = 20;
    cfg.patience = 19;
    cfg.lr0 = 0.002;
    cfg.decay = 1.0;
    cfg.momentum = 0.0;
    cfg.weight_decay = 0.0;

    const auto res = train::train(cfg, tiny_model(), samples, {}, {"a"});
    REQUIRE_FALSE(res.aborted);
    REQUIRE(res.history.size() == 20);
    for (std::size_t e = 1; e < res.history.size(); ++e)
        CHECK(res.history[e].train_loss < res.history[e - 1].train_loss);
}

TEST_CASE("training: a null run returns the initialization checkpoint and no history") {
    train::TrainConfig cfg = tiny_train(13);
    cfg.max_epochs = 0;
    const auto res = train::train(cfg, tiny_model(), {}, {}, {"a", "b"});
    CHECK_FALSE(res.aborted);
    CHECK(res.history.empty());
    CHECK(res.steps == 0);
    CHECK(res.checkpoint.epoch == 0);
    CHECK(res.checkpoint.seed == 13);

    // identical to initializing the model manually with the same seed
    ModelConfig mcfg = tiny_model();
    mcfg.seq_len = cfg.seq_len;
    ahmf::Model<float> fresh(mcfg, {"a", "b"});
    fresh.init(13);
    auto manual = train::make_checkpoint(fresh, train::Optimizer{}, 0, 0, {}, "");
    manual.seed = 13;
    CHECK(checkpoints_bit_equal(res.checkpoint, manual));
}

TEST_CASE("training: identical seeds reproduce the run bit for bit") {
    auto train_set = tiny_data("a", 41, 4);
    auto val_set = tiny_data("a", 42, 2);
    train::TrainConfig cfg = tiny_train(21);

    const auto r1 = train::train(cfg, tiny_model(), train_set, val_set, {"a"});
    const auto r2 = train::train(cfg, tiny_model(), train_set, val_set, {"a"});
    REQUIRE(r1.history.size() == 1);
    REQUIRE(r2.history.size() == 1);
    CHECK(std::bit_cast<std::uint64_t>(r1.history[0].train_loss) ==
          std::bit_cast<std::uint64_t>(r2.history[0].train_loss));
    CHECK(checkpoints_bit_equal(r1.checkpoint, r2.checkpoint));

    // a different seed changes the loss
    train::TrainConfig other = cfg;
    other.seed = 22;
    const auto r3 = train::train(other, tiny_model(), train_set, val_set, {"a"});
    CHECK(r3.history[0].train_loss != r1.history[0].train_loss);
}

TEST_CASE("training: no_hmf has no bank and still trains") {
    auto train_set = tiny_data("a", 51, 4);
    train::TrainConfig cfg = tiny_train(23);
    cfg.ablation = Ablation::no_hmf;
    const auto res = train::train(cfg, tiny_model(), train_set, {}, {"a"});
    REQUIRE_FALSE(res.aborted);
    CHECK(std::isfinite(res.history[0].train_loss));
    for (const auto& [name, t] : res.checkpoint.tensors) {
        (void)t;
        CHECK(name.find("fusion.bank") == std::string::npos);
        CHECK(name.find("mhca") == std::string::npos);
    }
}

TEST_CASE("training: checkpoints round-trip through the file bit-exactly") {
    TempDir dir("ckpt");
    auto train_set = tiny_data("a", 61, 4);
    auto val_set = tiny_data("a", 62, 2);
    train::TrainConfig cfg = tiny_train(29);
    const auto res = train::train(cfg, tiny_model(), train_set, val_set, {"a"},
                                  nullptr, nullptr, "seed = 29\n");

    const std::string path = dir.file("checkpoint.bin");
    train::save_checkpoint(path, res.checkpoint);
    const auto back = train::load_checkpoint(path);
    CHECK(checkpoints_bit_equal(res.checkpoint, back));
    CHECK(back.config_text == "seed = 29\n");

    // rewriting produces identical bytes
    const std::string again = dir.file("again.bin");
    train::save_checkpoint(again, back);
    CHECK(ahmf::data::read_file(path) == ahmf::data::read_file(again));

    SUBCASE("malformed files are rejected with offsets") {
        auto raw = ahmf::data::read_file(path);
        ahmf::data::write_file_atomic(dir.file("magic.bin"), "XXXX" + raw.substr(4));
        expect_error<ahmf::DataError>(
            [&] { train::load_checkpoint(dir.file("magic.bin")); }, "bad magic");
        ahmf::data::write_file_atomic(dir.file("trunc.bin"), raw.substr(0, raw.size() / 2));
        expect_error<ahmf::DataError>(
            [&] { train::load_checkpoint(dir.file("trunc.bin")); }, "truncated");
        ahmf::data::write_file_atomic(dir.file("trail.bin"), raw + "z");
        expect_error<ahmf::DataError>(
            [&] { train::load_checkpoint(dir.file("trail.bin")); }, "trailing");
    }

    SUBCASE("restoring into a mismatched model is a data error") {
        ModelConfig wrong = tiny_model();
        wrong.seq_len = cfg.seq_len;
        wrong.gru_hidden = 8;
        ahmf::Model<float> model(wrong, {"a"});
        model.init(0);
        expect_error<ahmf::DataError>([&] { train::restore_model(back, model); }, "shape");

        ModelConfig two = tiny_model();
        two.seq_len = cfg.seq_len;
        ahmf::Model<float> missing_domain(two, {"a", "b"});
        missing_domain.init(0);
        expect_error<ahmf::DataError>([&] { train::restore_model(back, missing_domain); },
                                      "missing");
    }
}

TEST_CASE("training: resuming continues exactly where the run stopped") {
    auto train_set = tiny_data("a", 71, 6);
    auto val_set = tiny_data("a", 72, 2);

    train::TrainConfig full = tiny_train(37);
    full.max_epochs = 2;
    const auto direct = train::train(full, tiny_model(), train_set, val_set, {"a"});
    REQUIRE(direct.history.size() == 2);

    train::TrainConfig half = full;
    half.max_epochs = 1;
    const auto first = train::train(half, tiny_model(), train_set, val_set, {"a"});
    const auto second =
        train::train(full, tiny_model(), train_set, val_set, {"a"}, &first.checkpoint);

    REQUIRE(second.history.size() == 1);
    CHECK(second.history[0].epoch == 1);
    CHECK(std::bit_cast<std::uint64_t>(second.history[0].train_loss) ==
          std::bit_cast<std::uint64_t>(direct.history[1].train_loss));
    CHECK(checkpoints_bit_equal(direct.checkpoint, second.checkpoint));

    SUBCASE("a seed mismatch on resume is a config error") {
        train::TrainConfig other = full;
        other.seed = 38;
        CHECK_THROWS_AS(
            train::train(other, tiny_model(), train_set, val_set, {"a"}, &first.checkpoint),
            ahmf::ConfigError);
    }
}

TEST_CASE("training: a non-finite loss aborts and keeps the last good checkpoint") {
    auto train_set = tiny_data("a", 81, 4);
    train::TrainConfig cfg = tiny_train(43);

    ModelConfig mcfg = tiny_model();
    mcfg.seq_len = cfg.seq_len;
    ahmf::Model<float> poisoned(mcfg, {"a"});
    poisoned.init(43);
    poisoned.head.b.data[0] = std::numeric_limits<float>::quiet_NaN();
    auto bad = train::make_checkpoint(poisoned, train::Optimizer{}, 0, 0, {}, "");
    bad.seed = 43;

    std::ostringstream log;
    const auto res = train::train(cfg, tiny_model(), train_set, {}, {"a"}, &bad, &log);
    CHECK(res.aborted);
    CHECK_FALSE(res.abort_reason.empty());
    CHECK(res.history.empty());
    CHECK(res.steps == 0);
    CHECK(checkpoints_bit_equal(res.checkpoint, bad));
    CHECK(log.str().find("aborted") != std::string::npos);
}

TEST_CASE("training: only the batch domain's parameters move") {
    auto train_set = tiny_data("a", 91, 4);  // domain b gets no samples
    train::TrainConfig cfg = tiny_train(47);

    ModelConfig mcfg = tiny_model();
    mcfg.seq_len = cfg.seq_len;
    ahmf::Model<float> fresh(mcfg, {"a", "b"});
    fresh.init(47);
    const auto init = train::make_checkpoint(fresh, train::Optimizer{}, 0, 0, {}, "");

    const auto res = train::train(cfg, tiny_model(), train_set, {}, {"a", "b"});
    REQUIRE_FALSE(res.aborted);

    const auto before = tensor_map(init);
    bool a_moved = false;
    for (const auto& [name, t] : res.checkpoint.tensors) {
        if (name.rfind("opt/", 0) == 0) {
            CHECK(name.find("domain/b.") == std::string::npos);
            continue;
        }
        auto it = before.find(name);
        REQUIRE(it != before.end());
        if (name.find("domain/b.") != std::string::npos ||
            name.find("state/b.") != std::string::npos) {
            CHECK(bits_equal(t, *it->second));
        } else if (name.find("domain/a.") != std::string::npos) {
            a_moved = a_moved || !bits_equal(t, *it->second);
        }
    }
    CHECK(a_moved);
}

TEST_CASE("training: degenerate ground truth is skipped with a warning") {
    auto train_set = tiny_data("a", 101, 2);
    data::Sample zeroed = train_set[0];
    for (auto& g : zeroed.gt) g = Tensor(g.shape);  // all-zero maps
    zeroed.sequence_id = 99;
    train_set.push_back(zeroed);

    train::TrainConfig cfg = tiny_train(53);
    cfg.batch_size = 3;
    std::ostringstream log;
    const auto res = train::train(cfg, tiny_model(), train_set, {}, {"a"}, nullptr, &log);
    REQUIRE_FALSE(res.aborted);
    CHECK(res.steps == 1);
    CHECK(log.str().find("degenerate") != std::string::npos);
    CHECK(log.str().find("a-99") != std::string::npos);
}

TEST_CASE("training: the history CSV keeps full precision") {
    std::vector<train::HistoryRow> rows(2);
    rows[0] = {0, 0.01, 1.0 / 3.0, 0.875, 0.5, -0.25, 2.0 / 7.0, 1.25};
    rows[1] = {1, 0.008, 0.1, std::numeric_limits<double>::quiet_NaN(), 0.5, 0.5, 0.5, 0.5};
    const std::string csv = train::history_csv(rows);

    std::istringstream in(csv);
    std::string line;
    REQUIRE(std::getline(in, line));
    CHECK(line == "epoch,lr,train_loss,val_auc_j,val_sim,val_cc,val_kld,val_nss");
    for (const auto& row : rows) {
        REQUIRE(std::getline(in, line));
        std::istringstream fields(line);
        std::string cell;
        REQUIRE(std::getline(fields, cell, ','));
        CHECK(std::stoi(cell) == row.epoch);
        const double want[7] = {row.lr,     row.train_loss, row.val_auc_j, row.val_sim,
                                row.val_cc, row.val_kld,    row.val_nss};
        for (double w : want) {
            REQUIRE(std::getline(fields, cell, ','));
            const double got = std::strtod(cell.c_str(), nullptr);
            if (std::isnan(w))
                CHECK(std::isnan(got));
            else
                CHECK(got == w);
        }
    }
}

TEST_CASE("training: evaluation is deterministic and keyed by domain") {
    auto samples = tiny_data("a", 111, 2);
    auto more = tiny_data("b", 112, 2);
    samples.insert(samples.end(), more.begin(), more.end());

    ModelConfig mcfg = tiny_model();
    mcfg.seq_len = 3;
    ahmf::Model<float> model(mcfg, {"a", "b"});
    model.init(59);

    const auto rows = train::evaluate_samples(model, samples);
    REQUIRE(rows.size() == 4);
    CHECK(rows[0].first == "a");
    CHECK(rows[3].first == "b");
    for (const auto& [domain, m] : rows) {
        (void)domain;
        CHECK(std::isfinite(m.kld));
        CHECK(m.kld >= 0.0);
        CHECK(m.sim >= 0.0);
        CHECK(m.sim <= 1.0 + 1e-9);
    }

    const auto again = train::evaluate_samples(model, samples);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        CHECK(rows[i].second.kld == again[i].second.kld);
        CHECK(rows[i].second.sim == again[i].second.sim);
    }
}
