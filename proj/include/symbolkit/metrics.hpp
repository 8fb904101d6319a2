#ifndef SYMBOLKIT_METRICS_HPP
#define SYMBOLKIT_METRICS_HPP

#include "error.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace symbolkit::metrics {

/**
 * Area under the ROC curve as the Mann-Whitney statistic, P(pos > neg) + P(pos = neg) / 2,
 * from midranks of the pooled sample. The statistic U is exact; the final division is
 * arranged so that auroc(a, b) + auroc(b, a) evaluates to exactly 1.
 */
inline double auroc(std::span<const double> positives, std::span<const double> negatives) {
    if (positives.empty() || negatives.empty()) {
        throw InvalidArgument("auroc: both score sets must be non-empty");
    }
    const std::size_t np = positives.size(), nn = negatives.size(), n = np + nn;
    std::vector<std::pair<double, bool>> pooled;
    pooled.reserve(n);
    for (double v : positives) {
        if (!std::isfinite(v)) {
            throw InvalidArgument("auroc: non-finite score");
        }
        pooled.emplace_back(v, true);
    }
    for (double v : negatives) {
        if (!std::isfinite(v)) {
            throw InvalidArgument("auroc: non-finite score");
        }
        pooled.emplace_back(v, false);
    }
    std::sort(pooled.begin(), pooled.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    // twice the rank sum of the positives, so midranks stay integral
    double twice_rank_sum = 0.0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        std::size_t pos_in_group = 0;
        while (j < n && pooled[j].first == pooled[i].first) {
            pos_in_group += pooled[j].second;
            ++j;
        }
        // ranks i+1..j, midrank (i + 1 + j) / 2
        twice_rank_sum += static_cast<double>(pos_in_group) * static_cast<double>(i + 1 + j);
        i = j;
    }
    const double pairs = static_cast<double>(np) * static_cast<double>(nn);
    const double twice_u = twice_rank_sum - static_cast<double>(np) * static_cast<double>(np + 1);
    const double twice_pairs = 2.0 * pairs;
    if (2.0 * twice_u <= twice_pairs) {
        return twice_u / twice_pairs;
    }
    return 1.0 - (twice_pairs - twice_u) / twice_pairs;
}

inline double auroc(const std::vector<double>& positives, const std::vector<double>& negatives) {
    return auroc(std::span<const double>(positives), std::span<const double>(negatives));
}

template <typename T>
double accuracy(std::span<const T> predictions, std::span<const T> labels) {
    if (predictions.size() != labels.size()) {
        throw InvalidArgument("accuracy: " + std::to_string(predictions.size()) + " predictions for " +
                              std::to_string(labels.size()) + " labels");
    }
    if (predictions.empty()) {
        throw InvalidArgument("accuracy: no predictions");
    }
    std::size_t hits = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        hits += predictions[i] == labels[i];
    }
    return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

template <typename T>
double accuracy(const std::vector<T>& predictions, const std::vector<T>& labels) {
    return accuracy(std::span<const T>(predictions), std::span<const T>(labels));
}

inline double mean(std::span<const double> v) {
    if (v.empty()) {
        return 0.0;
    }
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Sample standard deviation (n - 1 denominator).
inline double stddev(std::span<const double> v) {
    if (v.size() < 2) {
        return 0.0;
    }
    const double m = mean(v);
    double s = 0.0;
    for (double x : v) {
        s += (x - m) * (x - m);
    }
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

} // namespace symbolkit::metrics

#endif
