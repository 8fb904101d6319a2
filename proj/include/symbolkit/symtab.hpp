#ifndef SYMBOLKIT_SYMTAB_HPP
#define SYMBOLKIT_SYMTAB_HPP

#include "detail/rng.hpp"
#include "error.hpp"
#include "knn.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

/**
 * @file symtab.hpp
 *
 * @brief Symbol-class correlation maps and everything inferred from them: symbol-based
 * prediction, expected symbol scores (ESS), multi-layer ESS profiles and temporary learning.
 */

namespace symbolkit::symtab {

/// Symbols of one ROI in one layer (up to 9; vectors removed by the mean filter are absent) and its label.
struct RoiSymbols {
    std::vector<std::uint32_t> symbols;
    int label = 0;
};

/// S x K co-occurrence counts of symbols and class labels.
class CorrelationMap {
public:
    CorrelationMap() = default;
    CorrelationMap(std::size_t n_symbols, std::size_t n_classes, int layer_id = 0)
        : layer_id_(layer_id), n_symbols_(n_symbols), n_classes_(n_classes), counts_(n_symbols * n_classes, 0) {
        if (n_classes < 1) {
            throw InvalidArgument("CorrelationMap: need at least one class");
        }
    }

    int layer_id() const { return layer_id_; }
    std::size_t n_symbols() const { return n_symbols_; }
    std::size_t n_classes() const { return n_classes_; }
    std::uint64_t count(std::size_t symbol, std::size_t label) const { return counts_[symbol * n_classes_ + label]; }
    const std::vector<std::uint64_t>& counts() const { return counts_; }

    std::uint64_t total() const { return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0}); }

    void add(std::uint32_t symbol, int label) {
        if (symbol >= n_symbols_) {
            throw InvalidArgument("build_cm: symbol id " + std::to_string(symbol) + " >= " + std::to_string(n_symbols_));
        }
        if (label < 0 || static_cast<std::size_t>(label) >= n_classes_) {
            throw InvalidArgument("build_cm: label " + std::to_string(label) + " outside [0, " +
                                  std::to_string(n_classes_) + ")");
        }
        ++counts_[symbol * n_classes_ + static_cast<std::size_t>(label)];
    }

    void add(const RoiSymbols& roi) {
        // validate first so a bad ROI leaves the map untouched
        for (auto s : roi.symbols) {
            if (s >= n_symbols_) {
                throw InvalidArgument("build_cm: symbol id " + std::to_string(s) + " >= " + std::to_string(n_symbols_));
            }
        }
        for (auto s : roi.symbols) {
            add(s, roi.label);
        }
    }

    void merge(const CorrelationMap& other) {
        if (other.n_symbols_ != n_symbols_ || other.n_classes_ != n_classes_) {
            throw InvalidArgument("CorrelationMap::merge: shape mismatch");
        }
        for (std::size_t i = 0; i < counts_.size(); ++i) {
            counts_[i] += other.counts_[i];
        }
    }

    /// Rebuilds a map from raw counts (persistence).
    static CorrelationMap from_counts(std::size_t n_symbols, std::size_t n_classes, std::vector<std::uint64_t> counts,
                                      int layer_id = 0) {
        if (counts.size() != n_symbols * n_classes) {
            throw InvalidArgument("CorrelationMap: count matrix has the wrong size");
        }
        CorrelationMap cm(n_symbols, n_classes, layer_id);
        cm.counts_ = std::move(counts);
        return cm;
    }

    std::vector<std::string> class_names;

    bool operator==(const CorrelationMap&) const = default;

private:
    int layer_id_ = 0;
    std::size_t n_symbols_ = 0;
    std::size_t n_classes_ = 0;
    std::vector<std::uint64_t> counts_;
};

/**
 * Counts every (ROI, position) pair: CM(i, j) += 1 for each symbol i of an ROI labelled j.
 * With threads > 1 partial maps are folded per worker and summed, which gives the same counts.
 */
inline CorrelationMap build_cm(std::size_t n_symbols, std::size_t n_classes, std::span<const RoiSymbols> rois,
                               int layer_id = 0, int threads = 1) {
    CorrelationMap cm(n_symbols, n_classes, layer_id);
    const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), rois.size()));
    if (workers <= 1) {
        for (const auto& r : rois) {
            cm.add(r);
        }
        return cm;
    }
    std::vector<CorrelationMap> partial(workers, CorrelationMap(n_symbols, n_classes, layer_id));
    std::vector<std::string> errors(workers);
    knn::detail::parallel_for(workers, static_cast<int>(workers), [&](std::size_t w) {
        try {
            for (std::size_t i = w; i < rois.size(); i += workers) {
                partial[w].add(rois[i]);
            }
        } catch (const InvalidArgument& e) {
            errors[w] = e.what();
        }
    });
    for (const auto& e : errors) {
        if (!e.empty()) {
            throw InvalidArgument(e);
        }
    }
    for (const auto& p : partial) {
        cm.merge(p);
    }
    return cm;
}

/// Row-stochastic view of a correlation map, P(i, j).
struct NormalizedMap {
    int layer_id = 0;
    std::size_t n_symbols = 0;
    std::size_t n_classes = 0;
    std::vector<double> probs;

    double at(std::size_t symbol, std::size_t label) const { return probs[symbol * n_classes + label]; }
    std::span<const double> row(std::size_t symbol) const { return {probs.data() + symbol * n_classes, n_classes}; }
};

/// Row-wise softmax of the raw counts, max-subtracted before exponentiation.
inline NormalizedMap normalize_cm(const CorrelationMap& cm) {
    NormalizedMap out{cm.layer_id(), cm.n_symbols(), cm.n_classes(), std::vector<double>(cm.counts().size())};
    const std::size_t k = cm.n_classes();
    for (std::size_t i = 0; i < cm.n_symbols(); ++i) {
        std::uint64_t row_max = 0;
        for (std::size_t j = 0; j < k; ++j) {
            row_max = std::max(row_max, cm.count(i, j));
        }
        double sum = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            // counts are integers; the difference is exact before conversion
            const double e = std::exp(-static_cast<double>(row_max - cm.count(i, j)));
            out.probs[i * k + j] = e;
            sum += e;
        }
        for (std::size_t j = 0; j < k; ++j) {
            out.probs[i * k + j] /= sum;
        }
    }
    return out;
}

struct Prediction {
    int label = 0;
    std::vector<double> probs; ///< class probability vector, averaged over the ROI's symbols
};

namespace detail {

inline void check_symbols(const NormalizedMap& p, std::span<const std::uint32_t> symbols) {
    for (auto s : symbols) {
        if (s >= p.n_symbols) {
            throw InvalidArgument("symbol id " + std::to_string(s) + " >= " + std::to_string(p.n_symbols));
        }
    }
}

// Mean of P(s, j) over the symbols; the single formula behind both prediction and ESS.
inline double mean_probability(const NormalizedMap& p, std::span<const std::uint32_t> symbols, std::size_t j) {
    if (symbols.empty()) {
        return 1.0 / static_cast<double>(p.n_classes);
    }
    double s = 0.0;
    for (auto sym : symbols) {
        s += p.at(sym, j);
    }
    return s / static_cast<double>(symbols.size());
}

} // namespace detail

/**
 * Symbol-based prediction: P(j) averaged over the ROI's symbols, argmax with the lowest class
 * index on ties. An ROI without symbols (all vectors filtered) gets the uniform vector.
 */
inline Prediction predict_roi(const NormalizedMap& p, std::span<const std::uint32_t> symbols) {
    detail::check_symbols(p, symbols);
    Prediction out;
    out.probs.resize(p.n_classes);
    for (std::size_t j = 0; j < p.n_classes; ++j) {
        out.probs[j] = detail::mean_probability(p, symbols, j);
    }
    out.label = static_cast<int>(std::max_element(out.probs.begin(), out.probs.end()) - out.probs.begin());
    return out;
}

/// Expected symbol score for class j: the mean of P(S_i, j) over the ROI's symbols.
inline double ess(const NormalizedMap& p, std::span<const std::uint32_t> symbols, std::size_t j) {
    if (j >= p.n_classes) {
        throw InvalidArgument("ess: class " + std::to_string(j) + " >= " + std::to_string(p.n_classes));
    }
    detail::check_symbols(p, symbols);
    return detail::mean_probability(p, symbols, j);
}

enum class ClassSource { true_label, layer4_prediction, model_decision };

inline const char* to_string(ClassSource s) {
    switch (s) {
    case ClassSource::true_label:
        return "true_label";
    case ClassSource::layer4_prediction:
        return "layer4_prediction";
    case ClassSource::model_decision:
        return "model_decision";
    }
    return "?";
}

inline ClassSource parse_class_source(const std::string& s) {
    for (auto c : {ClassSource::true_label, ClassSource::layer4_prediction, ClassSource::model_decision}) {
        if (s == to_string(c)) {
            return c;
        }
    }
    throw InvalidArgument("unknown class source '" + s + "'");
}

struct EssProfile {
    std::string roi_id;
    std::string split_tag;
    ClassSource class_source = ClassSource::layer4_prediction;
    int resolved_class = 0;
    std::vector<std::pair<int, double>> per_layer; ///< (layer id, ESS), ascending layer id
    double norm = 0.0;

    std::optional<double> layer(int layer_id) const {
        for (const auto& [l, v] : per_layer) {
            if (l == layer_id) {
                return v;
            }
        }
        return std::nullopt;
    }

    bool operator==(const EssProfile&) const = default;
};

using EssTable = std::vector<EssProfile>;

/// One layer's map and an ROI's symbols in that layer.
struct LayerSymbols {
    int layer_id = 0;
    const NormalizedMap* map = nullptr;
    std::span<const std::uint32_t> symbols;
};

struct Exclusions {
    std::size_t missing_class = 0;     ///< class source not available for the ROI
    std::size_t outside_class_set = 0; ///< model decision outside the K analysed classes

    std::size_t total() const { return missing_class + outside_class_set; }
};

/**
 * ESS of one ROI in every given layer at a single resolved class j, plus the Euclidean norm
 * over `norm_layers` (all given layers when empty).
 *
 * j comes from the true label, from the symbol-based prediction of the deepest given layer, or
 * from the model's own decision. Returns nullopt, and counts the reason, when j cannot be
 * resolved inside the class set.
 */
inline std::optional<EssProfile> ess_profile(std::span<const LayerSymbols> layers, ClassSource source,
                                             std::optional<int> true_label, std::optional<int> model_decision,
                                             std::span<const int> norm_layers = {}, Exclusions* exclusions = nullptr) {
    if (layers.empty()) {
        throw InvalidArgument("ess_profile: no layers");
    }
    const std::size_t k = layers[0].map->n_classes;
    for (const auto& l : layers) {
        if (l.map == nullptr || l.map->n_classes != k) {
            throw InvalidArgument("ess_profile: layers disagree on the class count");
        }
    }
    std::optional<int> j;
    switch (source) {
    case ClassSource::true_label:
        j = true_label;
        break;
    case ClassSource::model_decision:
        j = model_decision;
        break;
    case ClassSource::layer4_prediction: {
        const auto deepest = std::max_element(layers.begin(), layers.end(),
                                              [](const LayerSymbols& x, const LayerSymbols& y) { return x.layer_id < y.layer_id; });
        j = predict_roi(*deepest->map, deepest->symbols).label;
        break;
    }
    }
    if (!j) {
        if (exclusions) {
            ++exclusions->missing_class;
        }
        return std::nullopt;
    }
    if (*j < 0 || static_cast<std::size_t>(*j) >= k) {
        if (exclusions) {
            ++exclusions->outside_class_set;
        }
        return std::nullopt;
    }
    EssProfile out;
    out.class_source = source;
    out.resolved_class = *j;
    for (const auto& l : layers) {
        out.per_layer.emplace_back(l.layer_id, ess(*l.map, l.symbols, static_cast<std::size_t>(*j)));
    }
    std::sort(out.per_layer.begin(), out.per_layer.end());
    double sq = 0.0;
    for (const auto& [layer_id, v] : out.per_layer) {
        if (norm_layers.empty() || std::find(norm_layers.begin(), norm_layers.end(), layer_id) != norm_layers.end()) {
            sq += v * v;
        }
    }
    out.norm = std::sqrt(sq);
    return out;
}

/**
 * One temporary-learning trial: a seeded 50/50 split of the labelled symbol sets, a fresh
 * correlation map over the n_classes labels built from the first half, and the accuracy of
 * symbol-based prediction on the second half.
 */
inline double temporary_learning_trial(std::span<const RoiSymbols> records, std::size_t n_classes, std::uint64_t seed,
                                       std::size_t n_symbols = 0) {
    if (n_classes < 2) {
        throw InvalidArgument("temporary_learning_trial: need at least 2 classes");
    }
    std::vector<std::size_t> per_class(n_classes, 0);
    std::uint32_t max_symbol = 0;
    for (const auto& r : records) {
        if (r.label < 0 || static_cast<std::size_t>(r.label) >= n_classes) {
            throw InvalidArgument("temporary_learning_trial: label " + std::to_string(r.label) + " out of range");
        }
        ++per_class[static_cast<std::size_t>(r.label)];
        for (auto s : r.symbols) {
            max_symbol = std::max(max_symbol, s);
        }
    }
    for (std::size_t c = 0; c < n_classes; ++c) {
        if (per_class[c] < 2) {
            throw InvalidArgument("temporary_learning_trial: class " + std::to_string(c) + " has fewer than 2 ROIs");
        }
    }
    const std::size_t s = n_symbols ? n_symbols : static_cast<std::size_t>(max_symbol) + 1;
    std::vector<std::size_t> order(records.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed);
    rng.shuffle(std::span(order));
    const std::size_t n_train = records.size() / 2;
    CorrelationMap cm(s, n_classes);
    for (std::size_t i = 0; i < n_train; ++i) {
        cm.add(records[order[i]]);
    }
    const auto p = normalize_cm(cm);
    std::size_t correct = 0;
    for (std::size_t i = n_train; i < order.size(); ++i) {
        const auto& r = records[order[i]];
        correct += predict_roi(p, r.symbols).label == r.label;
    }
    return static_cast<double>(correct) / static_cast<double>(order.size() - n_train);
}

/// Repeated trials with per-trial seeds derived from `seed`.
inline std::vector<double> temporary_learning(std::span<const RoiSymbols> records, std::size_t n_classes,
                                              std::size_t resamples, std::uint64_t seed, std::size_t n_symbols = 0) {
    std::vector<double> out;
    out.reserve(resamples);
    for (std::size_t r = 0; r < resamples; ++r) {
        out.push_back(temporary_learning_trial(records, n_classes, Rng::derive(seed, r), n_symbols));
    }
    return out;
}

} // namespace symbolkit::symtab

#endif
