#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "ahmf/data.hpp"
#include "ahmf/metrics.hpp"
#include "ahmf/model.hpp"
#include "ahmf/training.hpp"

// These tests drive the real binary through a shell, the same way a user would.

namespace fs = std::filesystem;
using namespace ahmf;

namespace {

std::string cli_binary() {
    if (const char* env = std::getenv("AHMF_BIN")) return env;
    // fall back to a sibling of the test binary
    std::error_code ec;
    fs::path self = fs::read_symlink("/proc/self/exe", ec);
    if (!ec) {
        fs::path candidate = self.parent_path() / "ahmf";
        if (fs::exists(candidate)) return candidate.string();
    }
    return "ahmf";
}

struct RunResult {
    int code = -1;
    std::string out;
};

RunResult run_cli(const std::string& args, const std::string& env_prefix = "") {
    const std::string cmd = env_prefix + cli_binary() + " " + args + " 2>&1";
    FILE* pipe = ::popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    std::string out;
    char buf[4096];
    std::size_t n = 0;
    while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) out.append(buf, n);
    const int status = ::pclose(pipe);
    RunResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = std::move(out);
    return r;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str(const std::string& sub = "") const {
        return sub.empty() ? path.string() : (path / sub).string();
    }
};

void write_text(const std::string& path, const std::string& text) {
    data::write_file_atomic(path, text);
}

// small model so every invocation stays fast
const char* kSmokeConfig =
    "seed = 7\n"
    "domains = urban,rural\n"
    "rule.urban = attend_leftmost\n"
    "rule.rural = attend_fastest\n"
    "n = 4\n"
    "data.h = 16\n"
    "data.w = 16\n"
    "data.t = 4\n"
    "data.n_movers = 2\n"
    "model.stub_channels = 2,4\n"
    "model.attn_dim = 4\n"
    "model.gru_hidden = 4\n"
    "model.n_priors = 2\n"
    "model.memory_channels = 2\n"
    "model.memory_upsample = 1\n"
    "model.heads = 2\n"
    "train.seq_len = 3\n"
    "train.batch_size = 2\n"
    "train.max_epochs = 1\n";

}  // namespace

TEST_CASE("cli: gen-data writes the full per-domain corpus and is deterministic") {
    TempDir tmp("ahmf_cli_gen");
    write_text(tmp.str("run.cfg"), kSmokeConfig);

    // the output directory does not exist yet and is nested two levels deep
    auto r1 = run_cli("gen-data --config " + tmp.str("run.cfg") + " --out " +
                      tmp.str("a/deep/data"));
    CHECK(r1.code == 0);
    CHECK(r1.out.find("resolved config:") != std::string::npos);
    CHECK(r1.out.find("seed = 7") != std::string::npos);
    CHECK(r1.out.find("wrote 8 sequences") != std::string::npos);

    const std::string manifest = data::read_file(tmp.str("a/deep/data/manifest.tsv"));
    int lines = 0;
    for (char c : manifest) lines += c == '\n';
    CHECK(lines == 8);

    int tsr_files = 0;
    for (const auto& e : fs::directory_iterator(tmp.str("a/deep/data")))
        if (e.path().extension() == ".tsr") ++tsr_files;
    CHECK(tsr_files == 24);  // frames + gt + fix per sequence

    auto r2 = run_cli("gen-data --config " + tmp.str("run.cfg") + " --out " + tmp.str("b"));
    CHECK(r2.code == 0);
    CHECK(data::read_file(tmp.str("b/manifest.tsv")) == manifest);
    CHECK(data::read_file(tmp.str("b/urban-0000.frames.tsr")) ==
          data::read_file(tmp.str("a/deep/data/urban-0000.frames.tsr")));
}

TEST_CASE("cli: the seed resolves env < config file < flag") {
    TempDir tmp("ahmf_cli_seed");
    write_text(tmp.str("run.cfg"), kSmokeConfig);

    auto env_only = run_cli("gen-data --out " + tmp.str("x1") + " --n 1", "AHMF_SEED=99 ");
    CHECK(env_only.code == 0);
    CHECK(env_only.out.find("seed = 99") != std::string::npos);

    auto env_vs_file = run_cli(
        "gen-data --config " + tmp.str("run.cfg") + " --out " + tmp.str("x2") + " --n 1",
        "AHMF_SEED=99 ");
    CHECK(env_vs_file.code == 0);
    CHECK(env_vs_file.out.find("seed = 7") != std::string::npos);

    auto flag_wins = run_cli("gen-data --config " + tmp.str("run.cfg") + " --seed 123 --out " +
                                 tmp.str("x3") + " --n 1",
                             "AHMF_SEED=99 ");
    CHECK(flag_wins.code == 0);
    CHECK(flag_wins.out.find("seed = 123") != std::string::npos);
}

TEST_CASE("cli: config mistakes exit with 2 and name the offending line") {
    TempDir tmp("ahmf_cli_badcfg");
    write_text(tmp.str("bad.cfg"), "seed = 1\nbogus.key = 3\n");
    auto r = run_cli("gen-data --config " + tmp.str("bad.cfg") + " --out " + tmp.str("out"));
    CHECK(r.code == 2);
    CHECK(r.out.find("unknown key 'bogus.key'") != std::string::npos);
    CHECK(r.out.find("line 2") != std::string::npos);

    write_text(tmp.str("badrule.cfg"), "domains = a\nrule.a = sideways\n");
    auto r2 = run_cli("gen-data --config " + tmp.str("badrule.cfg") + " --out " +
                      tmp.str("out2"));
    CHECK(r2.code == 2);
    CHECK(r2.out.find("sideways") != std::string::npos);
}

TEST_CASE("cli: a missing dataset exits with 3") {
    TempDir tmp("ahmf_cli_nodata");
    fs::create_directories(tmp.str("empty"));
    auto r = run_cli("train --data " + tmp.str("empty") + " --out " + tmp.str("out"));
    CHECK(r.code == 3);
    CHECK(r.out.find("no manifest") != std::string::npos);
}

TEST_CASE("cli: train, eval, and inspect-memory run the full pipeline") {
    TempDir tmp("ahmf_cli_pipe");
    write_text(tmp.str("run.cfg"), kSmokeConfig);
    REQUIRE(run_cli("gen-data --config " + tmp.str("run.cfg") + " --out " + tmp.str("data"))
                .code == 0);

    auto tr = run_cli("train --config " + tmp.str("run.cfg") + " --data " + tmp.str("data") +
                      " --out " + tmp.str("run"));
    CHECK(tr.code == 0);
    CHECK(tr.out.find("epoch 0:") != std::string::npos);
    CHECK(fs::exists(tmp.str("run/checkpoint.bin")));
    CHECK(fs::exists(tmp.str("run/history.csv")));
    CHECK(fs::exists(tmp.str("run/config.resolved")));

    // history has a header plus one row for the single epoch
    const std::string hist = data::read_file(tmp.str("run/history.csv"));
    CHECK(hist.rfind("epoch,lr,", 0) == 0);
    int hist_lines = 0;
    for (char c : hist) hist_lines += c == '\n';
    CHECK(hist_lines == 2);

    auto ev1 = run_cli("eval --checkpoint " + tmp.str("run/checkpoint.bin") + " --data " +
                       tmp.str("data") + " --split val --report " + tmp.str("r1.csv"));
    CHECK(ev1.code == 0);
    auto ev2 = run_cli("eval --checkpoint " + tmp.str("run/checkpoint.bin") + " --data " +
                       tmp.str("data") + " --split val --report " + tmp.str("r2.csv"));
    CHECK(ev2.code == 0);
    const std::string csv1 = data::read_file(tmp.str("r1.csv"));
    CHECK(csv1 == data::read_file(tmp.str("r2.csv")));

    // the CSV round-trips through the report parser
    const auto report = metrics::parse_report_csv(csv1);
    REQUIRE(report.rows.size() == 1);
    CHECK(report.rows[0].domain == "urban");
    CHECK(report.rows[0].n == 1);

    auto im = run_cli("inspect-memory --checkpoint " + tmp.str("run/checkpoint.bin") +
                      " --out " + tmp.str("mem"));
    CHECK(im.code == 0);
    CHECK(fs::exists(tmp.str("mem/bank.tsr")));
    const Tensor bank = data::read_tensor(tmp.str("mem/bank.tsr"));
    REQUIRE(bank.shape.size() == 2);
    CHECK(bank.extent(0) == 3);  // bank_slots 0 resolves to seq_len
    const std::string norms = data::read_file(tmp.str("mem/bank_norms.txt"));
    CHECK(norms.find("mean\t") != std::string::npos);
}

TEST_CASE("cli: evaluating an empty split reports a notice and exits 3") {
    TempDir tmp("ahmf_cli_empty");
    write_text(tmp.str("run.cfg"), kSmokeConfig);
    REQUIRE(run_cli("gen-data --config " + tmp.str("run.cfg") + " --out " + tmp.str("data"))
                .code == 0);
    // keep only train rows so val is genuinely empty
    std::string kept;
    for (const auto& e : data::parse_manifest_tsv(data::read_file(tmp.str("data/manifest.tsv")))
             .entries) {
        if (e.split == "train")
            kept += e.domain_id + "\t" + e.seq_path + "\t" + e.gt_path + "\t" + e.fix_path +
                    "\t" + e.split + "\n";
    }
    write_text(tmp.str("data/manifest.tsv"), kept);
    REQUIRE(run_cli("train --config " + tmp.str("run.cfg") + " --data " + tmp.str("data") +
                    " --out " + tmp.str("run") + " --max-epochs 0")
                .code == 0);
    auto r = run_cli("eval --checkpoint " + tmp.str("run/checkpoint.bin") + " --data " +
                     tmp.str("data") + " --split val --report " + tmp.str("r.csv"));
    CHECK(r.code == 3);
    CHECK(r.out.find("notice") != std::string::npos);
    CHECK_FALSE(fs::exists(tmp.str("r.csv")));
}

TEST_CASE("cli: a zero-epoch run captures the initialization and its bank statistics") {
    TempDir tmp("ahmf_cli_init");
    write_text(tmp.str("run.cfg"), kSmokeConfig);
    REQUIRE(run_cli("gen-data --config " + tmp.str("run.cfg") + " --out " + tmp.str("data"))
                .code == 0);
    auto tr = run_cli("train --config " + tmp.str("run.cfg") + " --data " + tmp.str("data") +
                      " --out " + tmp.str("run") + " --max-epochs 0");
    CHECK(tr.code == 0);

    const auto ckpt = train::load_checkpoint(tmp.str("run/checkpoint.bin"));
    CHECK(ckpt.epoch == 0);
    CHECK(ckpt.step == 0);

    auto im = run_cli("inspect-memory --checkpoint " + tmp.str("run/checkpoint.bin") +
                      " --out " + tmp.str("mem"));
    CHECK(im.code == 0);

    // fresh slots are uniform(-0.1, 0.1), so a slot's L2 norm concentrates
    // around 0.1 * sqrt(D / 3)
    const Tensor bank = data::read_tensor(tmp.str("mem/bank.tsr"));
    const int M = bank.extent(0), D = bank.extent(1);
    const double expected = 0.1 * std::sqrt(D / 3.0);
    for (int m = 0; m < M; ++m) {
        double sq = 0.0;
        for (int d = 0; d < D; ++d) sq += bank.at2(m, d) * bank.at2(m, d);
        CHECK(std::sqrt(sq) == doctest::Approx(expected).epsilon(0.15));
    }
}

TEST_CASE("cli: the no_hmf ablation trains without a bank and says so") {
    TempDir tmp("ahmf_cli_nohmf");
    write_text(tmp.str("run.cfg"), kSmokeConfig);
    REQUIRE(run_cli("gen-data --config " + tmp.str("run.cfg") + " --out " + tmp.str("data"))
                .code == 0);
    auto tr = run_cli("train --config " + tmp.str("run.cfg") + " --data " + tmp.str("data") +
                      " --out " + tmp.str("run") + " --ablation no_hmf");
    CHECK(tr.code == 0);
    CHECK(tr.out.find("bank-untouched assertion") != std::string::npos);
    CHECK(tr.out.find("train.ablation = no_hmf") != std::string::npos);

    auto im = run_cli("inspect-memory --checkpoint " + tmp.str("run/checkpoint.bin") +
                      " --out " + tmp.str("mem"));
    CHECK(im.code == 0);
    CHECK(im.out.find("no bank present") != std::string::npos);
    CHECK_FALSE(fs::exists(tmp.str("mem/bank.tsr")));
}

TEST_CASE("cli: resuming from a checkpoint continues instead of restarting") {
    TempDir tmp("ahmf_cli_resume");
    write_text(tmp.str("run.cfg"), kSmokeConfig);
    REQUIRE(run_cli("gen-data --config " + tmp.str("run.cfg") + " --out " + tmp.str("data"))
                .code == 0);

    REQUIRE(run_cli("train --config " + tmp.str("run.cfg") + " --data " + tmp.str("data") +
                    " --out " + tmp.str("direct") + " --max-epochs 2")
                .code == 0);
    REQUIRE(run_cli("train --config " + tmp.str("run.cfg") + " --data " + tmp.str("data") +
                    " --out " + tmp.str("half") + " --max-epochs 1")
                .code == 0);
    auto resumed = run_cli("train --config " + tmp.str("run.cfg") + " --data " +
                           tmp.str("data") + " --out " + tmp.str("resumed") +
                           " --max-epochs 2 --resume " + tmp.str("half/checkpoint.bin"));
    CHECK(resumed.code == 0);
    CHECK(resumed.out.find("resuming from") != std::string::npos);
    CHECK(resumed.out.find("epoch 0:") == std::string::npos);  // epoch 0 already done
    CHECK(resumed.out.find("epoch 1:") != std::string::npos);

    CHECK(data::read_file(tmp.str("resumed/checkpoint.bin")) ==
          data::read_file(tmp.str("direct/checkpoint.bin")));
}

TEST_CASE("cli: a numeric blowup keeps the last good checkpoint and exits 4") {
    TempDir tmp("ahmf_cli_abort");
    write_text(tmp.str("run.cfg"), kSmokeConfig);
    REQUIRE(run_cli("gen-data --config " + tmp.str("run.cfg") + " --out " + tmp.str("data"))
                .code == 0);
    REQUIRE(run_cli("train --config " + tmp.str("run.cfg") + " --data " + tmp.str("data") +
                    " --out " + tmp.str("good") + " --max-epochs 0")
                .code == 0);

    // poison one parameter so the first forward pass throws
    auto ckpt = train::load_checkpoint(tmp.str("good/checkpoint.bin"));
    for (auto& [name, t] : ckpt.tensors)
        if (name == "head.conv.b") t.data[0] = std::nanf("");
    train::save_checkpoint(tmp.str("poisoned.bin"), ckpt);

    auto r = run_cli("train --config " + tmp.str("run.cfg") + " --data " + tmp.str("data") +
                     " --out " + tmp.str("run") + " --resume " + tmp.str("poisoned.bin"));
    CHECK(r.code == 4);
    CHECK(r.out.find("aborted") != std::string::npos);
    CHECK(fs::exists(tmp.str("run/checkpoint.bin")));
    // the retained state is the resume snapshot, not a half-stepped model
    const auto kept = train::load_checkpoint(tmp.str("run/checkpoint.bin"));
    CHECK(kept.epoch == ckpt.epoch);
    CHECK(kept.step == ckpt.step);
    REQUIRE(kept.tensors.size() == ckpt.tensors.size());
    for (std::size_t i = 0; i < kept.tensors.size(); ++i) {
        CHECK(kept.tensors[i].first == ckpt.tensors[i].first);
        const auto& a = kept.tensors[i].second.data;
        const auto& b = ckpt.tensors[i].second.data;
        REQUIRE(a.size() == b.size());
        CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
    }
}

TEST_CASE("cli: gradcheck passes both scopes and catches an injected fault") {
    auto ops = run_cli("gradcheck --scope ops");
    CHECK(ops.code == 0);
    CHECK(ops.out.find("conv2d") != std::string::npos);
    CHECK(ops.out.find("FAIL") == std::string::npos);

    auto model = run_cli("gradcheck --scope model");
    CHECK(model.code == 0);
    CHECK(model.out.find("model") != std::string::npos);

    auto fault = run_cli("gradcheck --scope ops --inject-fault");
    CHECK(fault.code == 4);
    CHECK(fault.out.find("FAIL") != std::string::npos);

    auto bad_scope = run_cli("gradcheck --scope everything");
    CHECK(bad_scope.code == 2);
}

TEST_CASE("cli: bad command lines exit 2 and help exits 0") {
    auto nocmd = run_cli("");
    CHECK(nocmd.code == 2);
    auto help = run_cli("--help");
    CHECK(help.code == 0);
    CHECK(help.out.find("gen-data") != std::string::npos);
    auto missing = run_cli("eval --data somewhere");
    CHECK(missing.code == 2);
}
