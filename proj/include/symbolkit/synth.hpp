#ifndef SYMBOLKIT_SYNTH_HPP
#define SYMBOLKIT_SYNTH_HPP

#include "bundle.hpp"
#include "detail/rng.hpp"
#include "error.hpp"
#include "roipool.hpp"
#include "symtab.hpp"

#include <cstdint>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

/**
 * @file synth.hpp
 *
 * @brief Synthetic bundles and symbol corpora with planted structure.
 *
 * Each layer owns `clusters_per_class` Gaussian clusters per class with centers drawn
 * uniformly from [0, 1]^C. An ROI of class c fills each of its 9 pooling positions with a
 * draw from one of c's clusters (or, with probability 1 - exclusivity, from any cluster).
 * ROI boxes span 3 or 6 feature cells per side so the 9 pooling bins partition the box and
 * max-pooling returns each planted vector exactly.
 */

namespace symbolkit::synth {

struct SynthConfig {
    std::size_t n_classes = 30;
    std::size_t rois_per_class = 60;
    std::size_t train_per_class = 40; ///< the rest of each class goes to the test split
    std::vector<int> layers{1, 2, 3, 4};
    int channels = 64;
    std::size_t clusters_per_class = 3;
    double sigma = 0.05;
    double exclusivity = 1.0;       ///< probability that a position draws from its own class
    bool shuffle_labels = false;    ///< permute labels over all clean ROIs (chance control)
    double model_accuracy = 0.9;    ///< probability that model_prediction equals the label
    double hard_mix = 0.5;          ///< off-class draw probability for ROIs the model gets wrong
    std::size_t n_ood_classes = 0;
    std::size_t ood_rois_per_class = 0;
    double ood_consistency = 0.7;   ///< probability an OOD position follows its class template
    std::size_t n_adversarial = 0;
    double adversarial_strength = 0.3; ///< probability an adversarial position follows the target class
    int feature_size = 9;
    int input_size = 144;
    std::uint64_t seed = 1;

    void validate() const {
        if (n_classes < 2) {
            throw InvalidArgument("synth: need at least 2 classes");
        }
        if (train_per_class > rois_per_class) {
            throw InvalidArgument("synth: train_per_class exceeds rois_per_class");
        }
        if (layers.empty() || channels < 1 || clusters_per_class < 1) {
            throw InvalidArgument("synth: need at least one layer, channel and cluster");
        }
        if (feature_size < 3 || input_size < feature_size || input_size % feature_size != 0) {
            throw InvalidArgument("synth: input_size must be a multiple of feature_size >= 3");
        }
        if (n_ood_classes > 0 && n_ood_classes > n_classes) {
            throw InvalidArgument("synth: more OOD classes than in-distribution classes");
        }
        for (double p : {exclusivity, model_accuracy, hard_mix, ood_consistency, adversarial_strength}) {
            if (!(p >= 0.0 && p <= 1.0)) {
                throw InvalidArgument("synth: probabilities must lie in [0, 1]");
            }
        }
        if (!(sigma >= 0.0)) {
            throw InvalidArgument("synth: sigma must be non-negative");
        }
    }
};

/// Ground truth kept by the generator, indexed like the ROI table.
struct SynthTruth {
    std::vector<tensorio::RoiRecord> rois;
    std::vector<int> source_class; ///< class whose clusters an ROI was built from (before label shuffling)
};

namespace detail {

inline std::string numbered(const char* prefix, std::size_t i, int width = 5) {
    std::string digits = std::to_string(i);
    if (static_cast<int>(digits.size()) < width) {
        digits.insert(0, static_cast<std::size_t>(width) - digits.size(), '0');
    }
    return prefix + digits;
}

inline int other_class(Rng& rng, int label, std::size_t k) {
    const auto shift = 1 + rng.index(k - 1);
    return static_cast<int>((static_cast<std::size_t>(label) + shift) % k);
}

} // namespace detail

/**
 * Writes a synthetic bundle to `dir` and returns the ground truth.
 * Splits: train/test from the clean classes, then `ood` ROIs whose layers follow different
 * class templates, then `adversarial` ROIs whose model decision was flipped.
 */
inline SynthTruth write_synth_bundle(const std::filesystem::path& dir, const SynthConfig& cfg) {
    cfg.validate();
    const std::size_t k = cfg.n_classes;
    const std::size_t cpc = cfg.clusters_per_class;
    const std::size_t n_clusters = k * cpc;
    const auto C = static_cast<std::size_t>(cfg.channels);

    tensorio::BundleManifest manifest;
    manifest.dataset_name = "synthetic";
    manifest.model_name = "planted-clusters";
    for (std::size_t c = 0; c < k; ++c) {
        manifest.class_names.push_back(detail::numbered("class", c, 3));
    }
    for (std::size_t o = 0; o < cfg.n_ood_classes; ++o) {
        manifest.ood_class_names.push_back(detail::numbered("ood", o, 3));
    }
    for (int l : cfg.layers) {
        manifest.layers.push_back({l, cfg.channels, cfg.input_size, cfg.input_size, cfg.feature_size, cfg.feature_size});
    }

    // cluster centers, one stream per layer
    std::vector<std::vector<float>> centers;
    for (int l : cfg.layers) {
        Rng rng(Rng::derive(cfg.seed, 0x100 + static_cast<std::uint64_t>(l)));
        std::vector<float> m(n_clusters * C);
        for (auto& v : m) {
            v = static_cast<float>(rng.uniform());
        }
        centers.push_back(std::move(m));
    }

    // OOD templates: per layer a distinct source class for each OOD class, so layers disagree
    std::vector<std::vector<int>> ood_template(cfg.layers.size());
    for (std::size_t li = 0; li < cfg.layers.size(); ++li) {
        Rng rng(Rng::derive(cfg.seed, 0x200 + li));
        std::vector<int> perm(k);
        std::iota(perm.begin(), perm.end(), 0);
        rng.shuffle(std::span<int>(perm));
        ood_template[li].assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(cfg.n_ood_classes));
    }

    SynthTruth truth;
    Rng rng(Rng::derive(cfg.seed, 0x300));

    struct Plan {
        std::vector<int> class_per_layer; ///< template class per layer
        double follow = 1.0;              ///< probability of following the template
        int alt_class = -1;               ///< when set, off-template draws come from this class
    };
    std::vector<Plan> plans;

    // clean ROIs
    for (std::size_t c = 0; c < k; ++c) {
        for (std::size_t r = 0; r < cfg.rois_per_class; ++r) {
            tensorio::RoiRecord rec;
            rec.split = r < cfg.train_per_class ? tensorio::SplitTag::train : tensorio::SplitTag::test;
            rec.true_label = static_cast<int>(c);
            truth.rois.push_back(rec);
            truth.source_class.push_back(static_cast<int>(c));
        }
    }
    if (cfg.shuffle_labels) {
        std::vector<int> labels;
        for (const auto& r : truth.rois) {
            labels.push_back(*r.true_label);
        }
        Rng shuffler(Rng::derive(cfg.seed, 0x400));
        shuffler.shuffle(std::span<int>(labels));
        for (std::size_t i = 0; i < labels.size(); ++i) {
            truth.rois[i].true_label = labels[i];
        }
    }
    for (std::size_t i = 0; i < truth.rois.size(); ++i) {
        auto& rec = truth.rois[i];
        const bool right = rng.uniform() < cfg.model_accuracy;
        rec.model_prediction = right ? *rec.true_label : detail::other_class(rng, *rec.true_label, k);
        Plan p;
        p.class_per_layer.assign(cfg.layers.size(), truth.source_class[i]);
        p.follow = right ? cfg.exclusivity : std::min(cfg.exclusivity, 1.0 - cfg.hard_mix);
        plans.push_back(std::move(p));
    }

    // OOD ROIs: label indexes ood_class_names; the model decision is whatever the deepest layer resembles
    for (std::size_t o = 0; o < cfg.n_ood_classes; ++o) {
        for (std::size_t r = 0; r < cfg.ood_rois_per_class; ++r) {
            tensorio::RoiRecord rec;
            rec.split = tensorio::SplitTag::ood;
            rec.true_label = static_cast<int>(o);
            Plan p;
            for (std::size_t li = 0; li < cfg.layers.size(); ++li) {
                p.class_per_layer.push_back(ood_template[li][o]);
            }
            p.follow = cfg.ood_consistency;
            rec.model_prediction = p.class_per_layer.back();
            truth.rois.push_back(rec);
            truth.source_class.push_back(p.class_per_layer.back());
            plans.push_back(std::move(p));
        }
    }

    // adversarial ROIs: built from the true class, partly pulled toward the attacked decision
    for (std::size_t a = 0; a < cfg.n_adversarial; ++a) {
        tensorio::RoiRecord rec;
        rec.split = tensorio::SplitTag::adversarial;
        const int label = static_cast<int>(rng.index(k));
        const int target = detail::other_class(rng, label, k);
        rec.true_label = label;
        rec.model_prediction = target;
        Plan p;
        p.class_per_layer.assign(cfg.layers.size(), label);
        p.follow = 1.0 - cfg.adversarial_strength;
        p.alt_class = target;
        truth.rois.push_back(rec);
        truth.source_class.push_back(label);
        plans.push_back(std::move(p));
    }

    tensorio::BundleWriter writer(dir, manifest);
    const int F = cfg.feature_size;
    const double scale = static_cast<double>(cfg.input_size) / F;
    std::vector<int> sides{3};
    if (F >= 6) {
        sides.push_back(6);
    }
    for (std::size_t i = 0; i < truth.rois.size(); ++i) {
        auto& rec = truth.rois[i];
        rec.image_id = detail::numbered("img", i);
        rec.roi_id = detail::numbered("roi", i);
        const int w = sides[rng.index(sides.size())];
        const int h = sides[rng.index(sides.size())];
        const int x0 = static_cast<int>(rng.index(static_cast<std::uint64_t>(F - w + 1)));
        const int y0 = static_cast<int>(rng.index(static_cast<std::uint64_t>(F - h + 1)));
        rec.bbox = {x0 * scale, y0 * scale, (x0 + w) * scale, (y0 + h) * scale};
        const auto& plan = plans[i];
        for (std::size_t li = 0; li < cfg.layers.size(); ++li) {
            tensorio::ActivationTensor t;
            t.image_id = rec.image_id;
            t.layer_id = cfg.layers[li];
            t.channels = cfg.channels;
            t.height = F;
            t.width = F;
            t.values.assign(C * static_cast<std::size_t>(F * F), 0.0f);
            for (int bi = 0; bi < roipool::grid_side; ++bi) {
                const auto [r0, r1] = roipool::bin_range(bi, h);
                for (int bj = 0; bj < roipool::grid_side; ++bj) {
                    const auto [c0, c1] = roipool::bin_range(bj, w);
                    std::size_t cluster;
                    if (rng.uniform() < plan.follow) {
                        cluster = static_cast<std::size_t>(plan.class_per_layer[li]) * cpc + rng.index(cpc);
                    } else if (plan.alt_class >= 0) {
                        cluster = static_cast<std::size_t>(plan.alt_class) * cpc + rng.index(cpc);
                    } else {
                        cluster = rng.index(n_clusters);
                    }
                    const float* mu = centers[li].data() + cluster * C;
                    for (std::size_t ch = 0; ch < C; ++ch) {
                        const auto v = static_cast<float>(mu[ch] + cfg.sigma * rng.normal());
                        for (int y = y0 + r0; y < y0 + r1; ++y) {
                            for (int x = x0 + c0; x < x0 + c1; ++x) {
                                t.at(static_cast<int>(ch), y, x) = v;
                            }
                        }
                    }
                }
            }
            writer.add_tensor(t);
        }
        writer.add_roi(rec);
    }
    writer.finalize();
    return truth;
}

/// Symbol-level corpora: class c owns symbols [c * per_class, (c + 1) * per_class).
struct SymbolPlan {
    std::size_t n_classes = 18;
    std::size_t symbols_per_class = 3;

    std::size_t n_symbols() const { return n_classes * symbols_per_class; }
};

inline std::vector<std::uint32_t> exclusive_symbols(const SymbolPlan& plan, int label, Rng& rng) {
    std::vector<std::uint32_t> out(roipool::grid_positions);
    for (auto& s : out) {
        s = static_cast<std::uint32_t>(static_cast<std::size_t>(label) * plan.symbols_per_class +
                                       rng.index(plan.symbols_per_class));
    }
    return out;
}

inline std::vector<std::uint32_t> random_symbols(const SymbolPlan& plan, Rng& rng) {
    std::vector<std::uint32_t> out(roipool::grid_positions);
    for (auto& s : out) {
        s = static_cast<std::uint32_t>(rng.index(plan.n_symbols()));
    }
    return out;
}

/**
 * `rois_per_class` ROIs per class, ordered by class. Each ROI is informative (all symbols
 * exclusive to its class) with probability `informative`, otherwise its symbols are uniform.
 * `shuffle_labels` permutes the labels afterwards.
 */
inline std::vector<symtab::RoiSymbols> symbol_corpus(const SymbolPlan& plan, std::size_t rois_per_class, double informative,
                                                     bool shuffle_labels, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<symtab::RoiSymbols> out;
    for (std::size_t c = 0; c < plan.n_classes; ++c) {
        for (std::size_t r = 0; r < rois_per_class; ++r) {
            symtab::RoiSymbols roi;
            roi.label = static_cast<int>(c);
            roi.symbols = rng.uniform() < informative ? exclusive_symbols(plan, roi.label, rng) : random_symbols(plan, rng);
            out.push_back(std::move(roi));
        }
    }
    if (shuffle_labels) {
        std::vector<int> labels;
        for (const auto& r : out) {
            labels.push_back(r.label);
        }
        rng.shuffle(std::span<int>(labels));
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i].label = labels[i];
        }
    }
    return out;
}

} // namespace symbolkit::synth

#endif
