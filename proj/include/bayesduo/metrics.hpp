#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bayesduo/errors.hpp"
#include "bayesduo/linalg.hpp"

namespace bayesduo {

// All metrics take a batch of predictive distributions as an n x C matrix,
// one row per input.

inline void check_batch(const Matrix& probs, std::span<const int> labels, const char* what) {
    if (static_cast<std::size_t>(probs.rows()) != labels.size())
        throw ArgError(std::string(what) + ": " + std::to_string(probs.rows()) + " rows but " +
                       std::to_string(labels.size()) + " labels");
    for (int y : labels)
        if (y < 0 || y >= probs.cols()) throw ArgError(std::string(what) + ": label out of range");
}

// Argmax with ties resolved toward the lowest index.
inline Eigen::Index top_class(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < row.size(); ++c)
        if (row(c) > row(best)) best = c;
    return best;
}

struct MeanWithError {
    double value = 0.0;
    double se = 0.0;
};

inline MeanWithError accuracy(const Matrix& probs, std::span<const int> labels) {
    check_batch(probs, labels, "accuracy");
    if (labels.empty()) throw ArgError("accuracy: empty batch");
    std::size_t hits = 0;
    for (Eigen::Index i = 0; i < probs.rows(); ++i) hits += (top_class(probs.row(i)) == labels[static_cast<std::size_t>(i)]);
    const double n = static_cast<double>(labels.size());
    const double p = static_cast<double>(hits) / n;
    return {p, std::sqrt(p * (1.0 - p) / n)};
}

// Macro-averaged per-class recall. With n_classes given, every class in
// [0, n_classes) must occur; otherwise the classes present are averaged.
inline double weighted_accuracy(const Matrix& probs, std::span<const int> labels,
                                std::optional<std::size_t> n_classes = std::nullopt) {
    check_batch(probs, labels, "weighted_accuracy");
    const auto c_total = static_cast<std::size_t>(probs.cols());
    std::vector<std::size_t> count(c_total, 0), hits(c_total, 0);
    for (Eigen::Index i = 0; i < probs.rows(); ++i) {
        const auto y = static_cast<std::size_t>(labels[static_cast<std::size_t>(i)]);
        ++count[y];
        hits[y] += (static_cast<std::size_t>(top_class(probs.row(i))) == y);
    }
    if (n_classes) {
        if (*n_classes > c_total) throw ArgError("weighted_accuracy: n_classes exceeds probability columns");
        for (std::size_t c = 0; c < *n_classes; ++c)
            if (count[c] == 0) throw ArgError("weighted_accuracy: class " + std::to_string(c) + " has no samples");
    }
    double acc = 0.0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < c_total; ++c) {
        if (count[c] == 0) continue;
        acc += static_cast<double>(hits[c]) / static_cast<double>(count[c]);
        ++present;
    }
    if (present == 0) throw ArgError("weighted_accuracy: empty batch");
    return acc / static_cast<double>(present);
}

inline constexpr double kNlpdFloor = 1e-12;

// Mean negative log probability of the true label, in nats.
inline MeanWithError nlpd(const Matrix& probs, std::span<const int> labels) {
    check_batch(probs, labels, "nlpd");
    if (labels.empty()) throw ArgError("nlpd: empty batch");
    const auto n = static_cast<double>(labels.size());
    double sum = 0.0, sq = 0.0;
    for (Eigen::Index i = 0; i < probs.rows(); ++i) {
        const double v = -std::log(std::max(probs(i, labels[static_cast<std::size_t>(i)]), kNlpdFloor));
        sum += v;
        sq += v * v;
    }
    const double mean = sum / n;
    const double var = labels.size() > 1 ? std::max(0.0, (sq - n * mean * mean) / (n - 1.0)) : 0.0;
    return {mean, std::sqrt(var / n)};
}

struct ReliabilityBin {
    double lo = 0.0;
    double hi = 0.0;
    std::size_t count = 0;
    double acc = 0.0;
    double conf = 0.0;
};

struct CalibrationResult {
    double ece = 0.0;
    std::vector<ReliabilityBin> table;
};

// Top-label ECE over equal-width bins (k/n_bins, (k+1)/n_bins]; a zero
// confidence lands in the first bin.
inline CalibrationResult ece(const Matrix& probs, std::span<const int> labels, std::size_t n_bins = 15) {
    check_batch(probs, labels, "ece");
    if (n_bins < 1) throw ArgError("ece: n_bins must be >= 1");
    CalibrationResult out;
    out.table.resize(n_bins);
    std::vector<double> conf_sum(n_bins, 0.0), hit_sum(n_bins, 0.0);
    for (std::size_t b = 0; b < n_bins; ++b) {
        out.table[b].lo = static_cast<double>(b) / static_cast<double>(n_bins);
        out.table[b].hi = static_cast<double>(b + 1) / static_cast<double>(n_bins);
    }
    for (Eigen::Index i = 0; i < probs.rows(); ++i) {
        const Eigen::Index top = top_class(probs.row(i));
        const double conf = probs(i, top);
        auto b = static_cast<long>(std::ceil(conf * static_cast<double>(n_bins))) - 1;
        b = std::clamp<long>(b, 0, static_cast<long>(n_bins) - 1);
        const auto bi = static_cast<std::size_t>(b);
        ++out.table[bi].count;
        conf_sum[bi] += conf;
        hit_sum[bi] += (top == labels[static_cast<std::size_t>(i)]) ? 1.0 : 0.0;
    }
    const double n = static_cast<double>(labels.size());
    for (std::size_t b = 0; b < n_bins; ++b) {
        auto& bin = out.table[b];
        if (bin.count == 0) continue;
        const double nb = static_cast<double>(bin.count);
        bin.acc = hit_sum[b] / nb;
        bin.conf = conf_sum[b] / nb;
        out.ece += (nb / n) * std::abs(bin.acc - bin.conf);
    }
    return out;
}

struct EvalReport {
    double acc = 0.0;
    double acc_se = 0.0;
    double weighted_acc = 0.0;
    double nlpd = 0.0;
    double nlpd_se = 0.0;
    double ece = 0.0;
    std::size_t n = 0;
    std::size_t bins = 15;
    std::vector<ReliabilityBin> reliability;
};

inline EvalReport evaluate(const Matrix& probs, std::span<const int> labels, std::size_t bins = 15) {
    EvalReport r;
    const auto a = accuracy(probs, labels);
    const auto l = nlpd(probs, labels);
    auto cal = ece(probs, labels, bins);
    r.acc = a.value;
    r.acc_se = a.se;
    r.weighted_acc = weighted_accuracy(probs, labels);
    r.nlpd = l.value;
    r.nlpd_se = l.se;
    r.ece = cal.ece;
    r.n = labels.size();
    r.bins = bins;
    r.reliability = std::move(cal.table);
    return r;
}

inline Matrix softmax_rows(const Matrix& logits, double temperature) {
    Matrix out(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i)
        out.row(i) = softmax(temperature * logits.row(i).transpose()).transpose();
    return out;
}

// NLPD of softmax(t * logits) without the probability floor; used by the
// temperature search.
inline double temperature_nlpd(const Matrix& logits, std::span<const int> labels, double temperature) {
    double sum = 0.0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i)
        sum -= log_softmax(temperature * logits.row(i).transpose())(labels[static_cast<std::size_t>(i)]);
    return sum / static_cast<double>(logits.rows());
}

// Temperature scaling baseline: golden-section search on log t over
// [-5, 5] minimizing validation NLPD, tolerance 1e-6 in log t.
inline double fit_temperature(const Matrix& logits, std::span<const int> labels) {
    check_batch(logits, labels, "fit_temperature");
    if (labels.empty()) throw ArgError("fit_temperature: empty batch");
    const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
    double lo = -5.0, hi = 5.0;
    auto f = [&](double u) { return temperature_nlpd(logits, labels, std::exp(u)); };
    double x1 = hi - inv_phi * (hi - lo), x2 = lo + inv_phi * (hi - lo);
    double f1 = f(x1), f2 = f(x2);
    while (hi - lo > 1e-6) {
        if (f1 <= f2) {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    return std::exp(0.5 * (lo + hi));
}

}  // namespace bayesduo
