#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "ahmf/data.hpp"
#include "ahmf/errors.hpp"
#include "ahmf/metrics.hpp"
#include "ahmf/model.hpp"

// The optimization recipe: SGD with momentum and weight decay, exponential
// per-epoch learning-rate decay, early stopping on validation CC, joint
// multi-domain batch scheduling, and a bit-exact checkpoint container.

namespace ahmf::train {

struct TrainConfig {
    double lr0 = 0.01;
    double decay = 0.8;           // per-epoch exponential factor
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int batch_size = 4;
    int max_epochs = 16;
    int patience = 3;             // consecutive validation drops before stopping
    std::uint64_t seed = 0;
    Ablation ablation = Ablation::full;
    int seq_len = 5;
    UpdatePosition update_position = UpdatePosition::after_hmf;
    double dropout = 0.0;

    void validate() const {
        if (!(lr0 > 0.0) || !(decay > 0.0)) throw ConfigError("train: lr0 and decay must be positive");
        if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train: momentum must lie in [0,1)");
        if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be nonnegative");
        if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
        if (max_epochs < 0) throw ConfigError("train: max_epochs must be >= 0");
        if (patience < 1) throw ConfigError("train: patience must be >= 1");
        if (seq_len < 1) throw ConfigError("train: seq_len must be >= 1");
        if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("train: dropout must lie in [0,1)");
    }
};

// lr0 * decay^epoch via iterated multiplication (platform-stable).
double lr_at(int epoch, const TrainConfig& cfg);

// g' = g + weight_decay * p; v <- momentum * v + g'; p <- p - lr * v.
// The velocity buffer is sized on first use. Non-finite gradients abort with
// a diagnostic naming the parameter.
template <typename S>
void sgd_update(TensorT<S>& p, std::vector<S>& v, double lr, double momentum,
                double weight_decay, const std::string& name) {
    if (p.grad.size() != p.data.size())
        throw UsageError("sgd_update: parameter '" + name + "' has no gradient buffer");
    if (v.empty()) v.assign(p.data.size(), S(0));
    if (v.size() != p.data.size())
        throw UsageError("sgd_update: velocity size " + std::to_string(v.size()) +
                         " does not match parameter '" + name + "' with " +
                         std::to_string(p.data.size()) + " values");
    for (std::size_t i = 0; i < p.data.size(); ++i) {
        const S g = p.grad[i];
        if (!std::isfinite(static_cast<double>(g)))
            throw NumericError("sgd_update: non-finite gradient in parameter '" + name + "'");
        const S gp = g + static_cast<S>(weight_decay) * p.data[i];
        v[i] = static_cast<S>(momentum) * v[i] + gp;
        p.data[i] -= static_cast<S>(lr) * v[i];
    }
}

struct Optimizer {
    std::map<std::string, std::vector<float>> velocity;

    // One step over the whole model. Domain-owned parameters are touched only
    // when their domain matches the batch; everything else this run would
    // decay inactive domains' parameters and break domain isolation.
    void step(Model<float>& model, double lr, const TrainConfig& cfg,
              const std::string& batch_domain);
};

// true iff the last `patience` scores each dropped below their predecessor
bool early_stop(const std::vector<double>& val_scores, int patience);

struct Batch {
    std::string domain;
    std::vector<int> indices;  // into that domain's sample list
};

// One epoch's batch sequence: each domain contributes ceil(size/batch_size)
// single-domain batches over a seeded shuffle of its samples, and the
// combined list is shuffled again. Pure function of (sizes, seed, epoch).
std::vector<Batch> joint_schedule(const std::vector<std::pair<std::string, int>>& sizes,
                                  int batch_size, std::uint64_t seed, int epoch = 0);

// ------------------------------------------------------------- checkpoint --

struct Checkpoint {
    std::uint32_t epoch = 0;       // epochs completed
    std::uint64_t step = 0;        // optimizer steps taken
    std::uint64_t seed = 0;
    std::vector<double> val_history;  // validation CC per completed epoch
    std::string config_text;          // resolved key=value block, may be empty
    std::vector<std::pair<std::string, Tensor>> tensors;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

Checkpoint make_checkpoint(Model<float>& model, const Optimizer& opt, std::uint32_t epoch,
                           std::uint64_t step, const std::vector<double>& val_history,
                           const std::string& config_text);
// Restores parameters and running state; throws DataError on names or shapes
// that do not line up with the model.
void restore_model(const Checkpoint& ckpt, Model<float>& model);
void restore_optimizer(const Checkpoint& ckpt, Optimizer& opt);

// ---------------------------------------------------------------- the loop --

struct HistoryRow {
    int epoch = 0;
    double lr = 0.0, train_loss = 0.0;
    double val_auc_j = 0.0, val_sim = 0.0, val_cc = 0.0, val_kld = 0.0, val_nss = 0.0;
};

std::string history_csv(const std::vector<HistoryRow>& history);

struct TrainResult {
    Checkpoint checkpoint;             // final, or last-good on abort
    std::vector<HistoryRow> history;
    bool aborted = false;
    std::string abort_reason;
    std::uint64_t steps = 0;
};

// Trains a model built from `base` (with the TrainConfig's ablation, seq_len,
// update position, and dropout applied) on single-domain batches. Validation
// metrics are computed per epoch on the first-listed domain's val samples,
// on the final frame of each sequence. A non-finite loss or gradient aborts
// and returns the last-good checkpoint.
TrainResult train(const TrainConfig& cfg, const ModelConfig& base,
                  const std::vector<data::Sample>& train_set,
                  const std::vector<data::Sample>& val_set,
                  const std::vector<std::string>& domains,
                  const Checkpoint* resume = nullptr, std::ostream* log = nullptr,
                  const std::string& config_text = "");

// Inference-mode metrics for each sample (final frame), keyed by domain.
std::vector<std::pair<std::string, metrics::SampleMetrics>> evaluate_samples(
    Model<float>& model, const std::vector<data::Sample>& samples);

}  // namespace ahmf::train
