#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ahmf/tensor.hpp"

// Saliency evaluation metrics. Everything here is a pure function over
// double-precision H x W maps: saliency maps are nonnegative and, where a
// distribution is required (kld, sim), must sum to 1 within 1e-6; fixation
// maps are strictly binary. Metrics that can be undefined for a given sample
// (zero-variance prediction, empty fixation set) return nullopt instead of a
// made-up number, and the reporter counts those exclusions per domain rather
// than folding zeros into the means.

namespace ahmf::metrics {

using Map = TensorT<double>;

// Placement of the epsilon guard inside the divergence. inside_log is the
// form the training loss uses (eps added to the ratio, inside the log);
// split_eps is the form most external toolkits use (eps added to numerator
// and denominator separately), kept for cross-tool comparison.
enum class KldVariant { inside_log, split_eps };

// KL divergence of pred from gt. Both maps must be normalized.
double kld(const Map& gt, const Map& pred, double eps = 1e-7,
           KldVariant variant = KldVariant::inside_log);

// Histogram intersection of two normalized maps; in [0, 1].
double sim(const Map& gt, const Map& pred);

// Pearson correlation over flattened pixels; nullopt if either map is
// constant (zero variance).
std::optional<double> cc(const Map& gt, const Map& pred);

// Mean z-scored saliency at fixation pixels (population sigma); nullopt if
// there are no fixations or the saliency map is constant.
std::optional<double> nss(const Map& fixations, const Map& saliency);

// ROC area with thresholds at the distinct saliency values of the fixation
// pixels (plus the +/-inf endpoints); a pixel counts as positive at a
// threshold when its value is >= the threshold. TPR is measured over
// fixations, FPR over all pixels. nullopt if the fixation map has no
// positives or no negatives.
std::optional<double> auc_judd(const Map& fixations, const Map& saliency);

// ------------------------------------------------------------- reporting --

struct SampleMetrics {
    double kld = 0.0;
    double sim = 0.0;
    std::optional<double> cc;
    std::optional<double> nss;
    std::optional<double> auc_j;
};

// All five metrics for one (gt map, prediction, fixation map) triple.
SampleMetrics evaluate_sample(const Map& gt, const Map& pred, const Map& fixations,
                              double eps = 1e-7);

struct DomainSummary {
    std::string domain;
    int n = 0;
    // Means over the rows where the metric was defined; NaN if none were.
    double auc_j = 0.0, sim = 0.0, cc = 0.0, kld = 0.0, nss = 0.0;
    int excluded_auc = 0, excluded_cc = 0, excluded_nss = 0;
};

struct Report {
    std::vector<DomainSummary> rows;  // first-appearance order

    std::string to_text() const;
    std::string to_csv() const;
};

// Groups per-sample rows by domain label and averages each metric over the
// rows where it was defined. Domains with no samples simply do not appear.
Report build_report(const std::vector<std::pair<std::string, SampleMetrics>>& samples);

// Inverse of Report::to_csv; throws DataError on a malformed header or row.
Report parse_report_csv(const std::string& csv);

}  // namespace ahmf::metrics
