#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "ahmf/config.hpp"
#include "ahmf/data.hpp"
#include "ahmf/diagnostics.hpp"
#include "ahmf/metrics.hpp"
#include "ahmf/model.hpp"
#include "ahmf/training.hpp"

namespace fs = std::filesystem;
using namespace ahmf;

namespace {

// flag overrides stack on top of the config file, in flag order
using Overrides = std::vector<std::pair<std::string, std::string>>;

RunConfig resolve_config(const std::string& config_path, const Overrides& overrides) {
    RunConfig cfg;
    if (const char* env = std::getenv("AHMF_SEED")) apply_key(cfg, "seed", env);
    if (!config_path.empty())
        cfg = parse_config_text(data::read_file(config_path), "'" + config_path + "'",
                                std::move(cfg));
    for (const auto& [key, value] : overrides) apply_key(cfg, key, value);
    cfg.finalize();
    return cfg;
}

void echo_config(const RunConfig& cfg) {
    std::cout << "resolved config:\n" << resolved_text(cfg) << std::flush;
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create directory '" + dir + "': " + ec.message());
}

data::DatasetIndex read_manifest(const std::string& data_dir) {
    const std::string path = (fs::path(data_dir) / "manifest.tsv").string();
    if (!fs::exists(path))
        throw DataError("no manifest at '" + path + "' (generate the dataset first)");
    return data::parse_manifest_tsv(data::read_file(path));
}

std::vector<data::Sample> load_split(const std::string& data_dir,
                                     const data::DatasetIndex& index,
                                     const std::string& split) {
    std::vector<data::Sample> out;
    for (const auto& e : index.entries)
        if (e.split == split) out.push_back(data::load_sample(data_dir, e));
    return out;
}

int cmd_gen_data(const std::string& config_path, const std::string& out_dir,
                 const Overrides& overrides) {
    RunConfig cfg = resolve_config(config_path, overrides);
    echo_config(cfg);
    ensure_dir(out_dir);

    int written = 0;
    for (const auto& domain : cfg.domains) {
        const data::SceneSpec spec = cfg.scene_for(domain);
        for (const auto& sample : data::generate(spec, cfg.n_per_domain)) {
            data::write_sample_files(out_dir, sample);
            ++written;
        }
    }
    const data::DatasetIndex index = data::build_manifest(out_dir, cfg.seed);
    data::write_file_atomic((fs::path(out_dir) / "manifest.tsv").string(),
                            data::manifest_tsv(index));
    data::write_file_atomic((fs::path(out_dir) / "config.resolved").string(),
                            resolved_text(cfg));
    std::cout << "wrote " << written << " sequences across " << cfg.domains.size()
              << " domain(s) to " << out_dir << " (" << index.entries.size()
              << " manifest entries)\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir, const std::string& resume_path,
              const Overrides& overrides) {
    RunConfig cfg = resolve_config(config_path, overrides);
    echo_config(cfg);
    ensure_dir(out_dir);

    const auto index = read_manifest(data_dir);
    const auto train_set = load_split(data_dir, index, "train");
    const auto val_set = load_split(data_dir, index, "val");
    std::cout << "loaded " << train_set.size() << " train / " << val_set.size()
              << " val sequences\n";

    train::Checkpoint resume;
    const train::Checkpoint* resume_ptr = nullptr;
    if (!resume_path.empty()) {
        resume = train::load_checkpoint(resume_path);
        resume_ptr = &resume;
        std::cout << "resuming from '" << resume_path << "' at epoch " << resume.epoch
                  << "\n";
    }

    const auto result = train::train(cfg.train, cfg.model, train_set, val_set, cfg.domains,
                                     resume_ptr, &std::cout, resolved_text(cfg));

    train::save_checkpoint((fs::path(out_dir) / "checkpoint.bin").string(),
                           result.checkpoint);
    data::write_file_atomic((fs::path(out_dir) / "history.csv").string(),
                            train::history_csv(result.history));
    data::write_file_atomic((fs::path(out_dir) / "config.resolved").string(),
                            resolved_text(cfg));

    if (cfg.train.ablation == Ablation::no_hmf) {
        // wiring assertion: under no_hmf there must be no bank to touch
        for (const auto& [name, t] : result.checkpoint.tensors) {
            (void)t;
            if (name.find("fusion.bank") != std::string::npos)
                throw NumericError("no_hmf checkpoint unexpectedly contains '" + name + "'");
        }
        std::cout << "bank-untouched assertion: no bank parameters under no_hmf\n";
    }

    if (result.aborted) {
        std::cout << "training aborted after " << result.steps
                  << " step(s); last good checkpoint written\n";
        return 4;
    }
    std::cout << "trained " << result.history.size() << " epoch(s), " << result.steps
              << " step(s); checkpoint written to " << out_dir << "\n";
    return 0;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& data_dir,
             const std::string& split, const std::string& report_path) {
    const auto ckpt = train::load_checkpoint(checkpoint_path);
    if (ckpt.config_text.empty())
        throw DataError("checkpoint '" + checkpoint_path + "' carries no config");
    RunConfig cfg = parse_config_text(ckpt.config_text, "checkpoint config");
    cfg.finalize();
    echo_config(cfg);

    Model<float> model(cfg.model, cfg.domains);
    model.init(cfg.seed);
    train::restore_model(ckpt, model);

    const auto index = read_manifest(data_dir);
    const auto samples = load_split(data_dir, index, split);
    if (samples.empty()) {
        std::cout << "notice: split '" << split << "' has no samples in " << data_dir
                  << "\n";
        return 3;
    }

    const auto rows = train::evaluate_samples(model, samples);
    const auto report = metrics::build_report(rows);
    std::cout << report.to_text();
    data::write_file_atomic(report_path, report.to_csv());
    std::cout << "report written to " << report_path << "\n";
    return 0;
}

int cmd_gradcheck(const std::string& scope, bool inject_fault) {
    std::vector<GradCheckReport> reports;
    if (scope == "ops") {
        reports = diag::gradcheck_ops(inject_fault);
    } else if (scope == "model") {
        reports.push_back(diag::gradcheck_model());
        if (inject_fault) {
            auto faulty = diag::gradcheck_ops(true);
            reports.push_back(faulty.back());
        }
    } else {
        throw ConfigError("gradcheck: --scope must be ops or model, got '" + scope + "'");
    }

    bool all_passed = true;
    for (const auto& rep : reports) {
        std::printf("%-36s max_rel_error %.3e  %s\n", rep.op_name.c_str(),
                    rep.max_rel_error, rep.passed ? "pass" : "FAIL");
        if (!rep.passed && !rep.detail.empty()) std::printf("  %s\n", rep.detail.c_str());
        all_passed = all_passed && rep.passed;
    }
    if (!all_passed) {
        std::printf("gradcheck: FAILED\n");
        return 4;
    }
    std::printf("gradcheck: all %zu check(s) passed\n", reports.size());
    return 0;
}

int cmd_inspect_memory(const std::string& checkpoint_path, const std::string& out_dir) {
    const auto ckpt = train::load_checkpoint(checkpoint_path);
    const Tensor* slots = nullptr;
    for (const auto& [name, t] : ckpt.tensors)
        if (name == "fusion.bank.slots") slots = &t;
    if (slots == nullptr) {
        std::cout << "no bank present (checkpoint was trained without the hybrid memory)\n";
        return 0;
    }

    ensure_dir(out_dir);
    data::write_tensor((fs::path(out_dir) / "bank.tsr").string(), *slots);

    const int M = slots->extent(0), D = slots->extent(1);
    std::string summary = "slot\tl2_norm\n";
    double mean = 0.0, lo = 0.0, hi = 0.0;
    for (int m = 0; m < M; ++m) {
        double sq = 0.0;
        for (int d = 0; d < D; ++d) {
            const double v = slots->at2(m, d);
            sq += v * v;
        }
        const double norm = std::sqrt(sq);
        char line[64];
        std::snprintf(line, sizeof(line), "%d\t%.9g\n", m, norm);
        summary += line;
        mean += norm;
        lo = m == 0 ? norm : std::min(lo, norm);
        hi = std::max(hi, norm);
    }
    mean /= M;
    char tail[128];
    std::snprintf(tail, sizeof(tail), "mean\t%.9g\nmin\t%.9g\nmax\t%.9g\n", mean, lo, hi);
    summary += tail;
    data::write_file_atomic((fs::path(out_dir) / "bank_norms.txt").string(), summary);
    std::cout << M << " slot(s) of dim " << D << ": mean norm " << mean << ", min " << lo
              << ", max " << hi << "\n";
    std::cout << "bank written to " << out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"saliency attention model toolkit"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic multi-domain dataset");
    std::string g_config, g_out;
    std::string g_n, g_seed;
    gen->add_option("--config", g_config, "key=value config file");
    gen->add_option("--out", g_out, "output directory")->required();
    gen->add_option("--n", g_n, "sequences per domain (overrides config)");
    gen->add_option("--seed", g_seed, "seed override");

    // train
    auto* tr = app.add_subcommand("train", "train a model on a generated dataset");
    std::string t_config, t_data, t_out, t_resume;
    std::string t_ablation, t_update, t_seqlen, t_epochs, t_seed;
    tr->add_option("--config", t_config, "key=value config file");
    tr->add_option("--data", t_data, "dataset directory with manifest.tsv")->required();
    tr->add_option("--out", t_out, "output directory")->required();
    tr->add_option("--ablation", t_ablation, "full|no_hmf|no_sa|no_ca");
    tr->add_option("--update-position", t_update, "after_hmf|after_ca");
    tr->add_option("--seq-len", t_seqlen, "frames per sequence fed to the model");
    tr->add_option("--max-epochs", t_epochs, "epoch budget");
    tr->add_option("--seed", t_seed, "seed override");
    tr->add_option("--resume", t_resume, "checkpoint to continue from");

    // eval
    auto* ev = app.add_subcommand("eval", "inference-mode metrics on a dataset split");
    std::string e_ckpt, e_data, e_split = "val", e_report = "report.csv";
    ev->add_option("--checkpoint", e_ckpt, "checkpoint file")->required();
    ev->add_option("--data", e_data, "dataset directory")->required();
    ev->add_option("--split", e_split, "train|val|test (default val)");
    ev->add_option("--report", e_report, "CSV output path (default report.csv)");

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    std::string c_scope;
    bool c_fault = false;
    gc->add_option("--scope", c_scope, "ops|model")->required();
    gc->add_flag("--inject-fault", c_fault,
                 "append a knowingly wrong gradient as a negative control");

    // inspect-memory
    auto* im = app.add_subcommand("inspect-memory", "dump long-term bank slots and norms");
    std::string i_ckpt, i_out;
    im->add_option("--checkpoint", i_ckpt, "checkpoint file")->required();
    im->add_option("--out", i_out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) {
            Overrides ov;
            if (!g_seed.empty()) ov.emplace_back("seed", g_seed);
            if (!g_n.empty()) ov.emplace_back("n", g_n);
            return cmd_gen_data(g_config, g_out, ov);
        }
        if (tr->parsed()) {
            Overrides ov;
            if (!t_seed.empty()) ov.emplace_back("seed", t_seed);
            if (!t_ablation.empty()) ov.emplace_back("train.ablation", t_ablation);
            if (!t_update.empty()) ov.emplace_back("train.update_position", t_update);
            if (!t_seqlen.empty()) ov.emplace_back("train.seq_len", t_seqlen);
            if (!t_epochs.empty()) ov.emplace_back("train.max_epochs", t_epochs);
            return cmd_train(t_config, t_data, t_out, t_resume, ov);
        }
        if (ev->parsed()) return cmd_eval(e_ckpt, e_data, e_split, e_report);
        if (gc->parsed()) return cmd_gradcheck(c_scope, c_fault);
        if (im->parsed()) return cmd_inspect_memory(i_ckpt, i_out);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const UsageError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
