#include "ahmf/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <sstream>

#include "ahmf/errors.hpp"
#include "ahmf/ops.hpp"

namespace ahmf::metrics {

namespace {

void require_map_pair(const Map& a, const Map& b, const char* what) {
    if (a.rank() != 2 || b.rank() != 2)
        throw UsageError(std::string(what) + ": maps must be rank 2, got " +
                         shape_str(a.shape) + " and " + shape_str(b.shape));
    check_same_shape(a, b, what);
}

void require_normalized(const Map& m, const char* what, const char* which) {
    double total = 0.0;
    for (double v : m.data) {
        if (v < 0.0)
            throw UsageError(std::string(what) + ": " + which +
                             " map has a negative entry");
        total += v;
    }
    if (std::fabs(total - 1.0) > 1e-6)
        throw UsageError(std::string(what) + ": " + which +
                         " map is not normalized (sum = " + std::to_string(total) + ")");
}

void require_binary(const Map& m, const char* what) {
    for (double v : m.data)
        if (v != 0.0 && v != 1.0)
            throw UsageError(std::string(what) +
                             ": fixation map must contain only 0 and 1 entries");
}

bool is_constant(const Map& m) {
    const auto [lo, hi] = std::minmax_element(m.data.begin(), m.data.end());
    return *lo == *hi;
}

}  // namespace

double kld(const Map& gt, const Map& pred, double eps, KldVariant variant) {
    require_map_pair(gt, pred, "kld");
    require_normalized(gt, "kld", "gt");
    require_normalized(pred, "kld", "pred");
    if (variant == KldVariant::inside_log) return ops::kld_loss(gt, pred, eps);
    double acc = 0.0;
    for (std::size_t i = 0; i < gt.numel(); ++i)
        acc += gt.data[i] * std::log((gt.data[i] + eps) / (pred.data[i] + eps));
    return acc;
}

double sim(const Map& gt, const Map& pred) {
    require_map_pair(gt, pred, "sim");
    require_normalized(gt, "sim", "gt");
    require_normalized(pred, "sim", "pred");
    double acc = 0.0;
    for (std::size_t i = 0; i < gt.numel(); ++i)
        acc += std::min(gt.data[i], pred.data[i]);
    return acc;
}

std::optional<double> cc(const Map& gt, const Map& pred) {
    require_map_pair(gt, pred, "cc");
    if (is_constant(gt) || is_constant(pred)) return std::nullopt;
    const double n = static_cast<double>(gt.numel());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < gt.numel(); ++i) {
        ma += gt.data[i];
        mb += pred.data[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < gt.numel(); ++i) {
        const double da = gt.data[i] - ma;
        const double db = pred.data[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    return sab / std::sqrt(saa * sbb);
}

std::optional<double> nss(const Map& fixations, const Map& saliency) {
    require_map_pair(fixations, saliency, "nss");
    require_binary(fixations, "nss");
    std::size_t n_fix = 0;
    for (double v : fixations.data) n_fix += (v == 1.0);
    if (n_fix == 0) return std::nullopt;
    if (is_constant(saliency)) return std::nullopt;

    const double n = static_cast<double>(saliency.numel());
    double mean = 0.0;
    for (double v : saliency.data) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : saliency.data) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / n);

    double acc = 0.0;
    for (std::size_t i = 0; i < saliency.numel(); ++i)
        if (fixations.data[i] == 1.0) acc += (saliency.data[i] - mean) / sd;
    return acc / static_cast<double>(n_fix);
}

std::optional<double> auc_judd(const Map& fixations, const Map& saliency) {
    require_map_pair(fixations, saliency, "auc_judd");
    require_binary(fixations, "auc_judd");

    std::vector<double> fix_vals;
    for (std::size_t i = 0; i < fixations.numel(); ++i)
        if (fixations.data[i] == 1.0) fix_vals.push_back(saliency.data[i]);
    const std::size_t n_fix = fix_vals.size();
    if (n_fix == 0 || n_fix == fixations.numel()) return std::nullopt;

    std::vector<double> all_vals(saliency.data.begin(), saliency.data.end());
    std::sort(all_vals.begin(), all_vals.end());
    std::sort(fix_vals.begin(), fix_vals.end());

    // count of sorted values >= t, via the first element not below t
    auto count_ge = [](const std::vector<double>& sorted, double t) {
        return static_cast<double>(sorted.end() -
                                   std::lower_bound(sorted.begin(), sorted.end(), t));
    };

    std::vector<double> thresholds(fix_vals.rbegin(), fix_vals.rend());
    thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

    const double n_all = static_cast<double>(all_vals.size());
    double area = 0.0, prev_tpr = 0.0, prev_fpr = 0.0;  // the +inf endpoint
    for (double t : thresholds) {
        const double tpr = count_ge(fix_vals, t) / static_cast<double>(n_fix);
        const double fpr = count_ge(all_vals, t) / n_all;
        area += 0.5 * (prev_tpr + tpr) * (fpr - prev_fpr);
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    area += 0.5 * (prev_tpr + 1.0) * (1.0 - prev_fpr);  // the -inf endpoint
    return area;
}

SampleMetrics evaluate_sample(const Map& gt, const Map& pred, const Map& fixations,
                              double eps) {
    SampleMetrics row;
    row.kld = kld(gt, pred, eps);
    row.sim = sim(gt, pred);
    row.cc = cc(gt, pred);
    row.nss = nss(fixations, pred);
    row.auc_j = auc_judd(fixations, pred);
    return row;
}

// ------------------------------------------------------------- reporting --

namespace {

struct Accum {
    DomainSummary out;
    double sum_auc = 0.0, sum_sim = 0.0, sum_cc = 0.0, sum_kld = 0.0, sum_nss = 0.0;

    void add(const SampleMetrics& m) {
        ++out.n;
        sum_kld += m.kld;
        sum_sim += m.sim;
        if (m.cc) sum_cc += *m.cc; else ++out.excluded_cc;
        if (m.nss) sum_nss += *m.nss; else ++out.excluded_nss;
        if (m.auc_j) sum_auc += *m.auc_j; else ++out.excluded_auc;
    }

    DomainSummary finish() const {
        DomainSummary s = out;
        auto mean = [](double sum, int count) {
            return count > 0 ? sum / count : std::numeric_limits<double>::quiet_NaN();
        };
        s.kld = mean(sum_kld, s.n);
        s.sim = mean(sum_sim, s.n);
        s.cc = mean(sum_cc, s.n - s.excluded_cc);
        s.nss = mean(sum_nss, s.n - s.excluded_nss);
        s.auc_j = mean(sum_auc, s.n - s.excluded_auc);
        return s;
    }
};

constexpr const char* kCsvHeader =
    "domain,n,auc_j,sim,cc,kld,nss,excluded_auc,excluded_cc,excluded_nss";

std::string full_precision(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

Report build_report(const std::vector<std::pair<std::string, SampleMetrics>>& samples) {
    std::vector<std::string> order;
    std::vector<Accum> accums;
    for (const auto& [domain, row] : samples) {
        std::size_t idx = 0;
        while (idx < order.size() && order[idx] != domain) ++idx;
        if (idx == order.size()) {
            order.push_back(domain);
            accums.emplace_back();
            accums.back().out.domain = domain;
        }
        accums[idx].add(row);
    }
    Report rep;
    for (const auto& a : accums) rep.rows.push_back(a.finish());
    return rep;
}

std::string Report::to_text() const {
    char buf[160];
    std::string out;
    std::snprintf(buf, sizeof(buf), "%-12s %5s %8s %8s %8s %8s %8s  %s\n", "domain", "n",
                  "AUC-J", "SIM", "CC", "KLD", "NSS", "excluded a/c/n");
    out += buf;
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%-12s %5d %8.4f %8.4f %8.4f %8.4f %8.4f  %d/%d/%d\n",
                      r.domain.c_str(), r.n, r.auc_j, r.sim, r.cc, r.kld, r.nss,
                      r.excluded_auc, r.excluded_cc, r.excluded_nss);
        out += buf;
    }
    return out;
}

std::string Report::to_csv() const {
    std::string out = kCsvHeader;
    out += '\n';
    for (const auto& r : rows) {
        out += r.domain;
        out += ',' + std::to_string(r.n);
        out += ',' + full_precision(r.auc_j);
        out += ',' + full_precision(r.sim);
        out += ',' + full_precision(r.cc);
        out += ',' + full_precision(r.kld);
        out += ',' + full_precision(r.nss);
        out += ',' + std::to_string(r.excluded_auc);
        out += ',' + std::to_string(r.excluded_cc);
        out += ',' + std::to_string(r.excluded_nss);
        out += '\n';
    }
    return out;
}

Report parse_report_csv(const std::string& csv) {
    std::istringstream in(csv);
    std::string line;
    if (!std::getline(in, line) || line != kCsvHeader)
        throw DataError("report csv: missing or unexpected header line");
    Report rep;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::size_t start = 0;
        while (true) {
            const std::size_t comma = line.find(',', start);
            fields.push_back(line.substr(start, comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (fields.size() != 10)
            throw DataError("report csv: expected 10 fields, got " +
                            std::to_string(fields.size()));
        DomainSummary r;
        r.domain = fields[0];
        r.n = std::atoi(fields[1].c_str());
        r.auc_j = std::strtod(fields[2].c_str(), nullptr);
        r.sim = std::strtod(fields[3].c_str(), nullptr);
        r.cc = std::strtod(fields[4].c_str(), nullptr);
        r.kld = std::strtod(fields[5].c_str(), nullptr);
        r.nss = std::strtod(fields[6].c_str(), nullptr);
        r.excluded_auc = std::atoi(fields[7].c_str());
        r.excluded_cc = std::atoi(fields[8].c_str());
        r.excluded_nss = std::atoi(fields[9].c_str());
        rep.rows.push_back(std::move(r));
    }
    return rep;
}

}  // namespace ahmf::metrics
