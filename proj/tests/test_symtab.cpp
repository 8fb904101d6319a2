#include "symbolkit/symtab.hpp"
#include "symbolkit/synth.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

using namespace symbolkit;
using namespace symbolkit::symtab;

namespace {

std::vector<std::uint32_t> nine(std::uint32_t s) { return std::vector<std::uint32_t>(9, s); }

NormalizedMap uniform_map(std::size_t s, std::size_t k) { return normalize_cm(CorrelationMap(s, k)); }

// Map whose symbol c*3..c*3+2 rows are saturated one-hot on class c.
NormalizedMap exclusive_map(std::size_t k) {
    CorrelationMap cm(3 * k, k);
    for (std::size_t c = 0; c < k; ++c) {
        for (std::uint32_t s = 0; s < 3; ++s) {
            for (int rep = 0; rep < 60; ++rep) {
                cm.add(static_cast<std::uint32_t>(3 * c) + s, static_cast<int>(c));
            }
        }
    }
    return normalize_cm(cm);
}

} // namespace

TEST(BuildCm, SingleRoi) {
    const std::vector<RoiSymbols> rois{{nine(4), 2}};
    const auto cm = build_cm(6, 3, rois);
    for (std::size_t i = 0; i < 6; ++i) {
        for (std::size_t j = 0; j < 3; ++j) {
            EXPECT_EQ(cm.count(i, j), (i == 4 && j == 2) ? 9u : 0u);
        }
    }
    EXPECT_EQ(cm.total(), 9u);
}

TEST(BuildCm, CountsAreAdditive) {
    const std::vector<RoiSymbols> a{{{0, 1, 1, 2, 2, 2, 3, 3, 3}, 0}};
    const std::vector<RoiSymbols> b{{{1, 1, 1, 1, 0, 0, 0, 0, 0}, 1}};
    std::vector<RoiSymbols> both = a;
    both.insert(both.end(), b.begin(), b.end());
    auto sum = build_cm(4, 2, a);
    sum.merge(build_cm(4, 2, b));
    EXPECT_EQ(build_cm(4, 2, both), sum);
    EXPECT_EQ(sum.total(), 18u);
}

TEST(BuildCm, MatchesPairCounting) {
    Rng rng(1);
    std::vector<RoiSymbols> rois(500);
    for (auto& r : rois) {
        r.label = static_cast<int>(rng.index(7));
        r.symbols.resize(9);
        for (auto& s : r.symbols) {
            s = static_cast<std::uint32_t>(rng.index(40));
        }
    }
    std::vector<std::vector<std::uint64_t>> oracle(40, std::vector<std::uint64_t>(7, 0));
    for (const auto& r : rois) {
        for (auto s : r.symbols) {
            oracle[s][static_cast<std::size_t>(r.label)] += 1;
        }
    }
    for (int threads : {1, 3}) {
        const auto cm = build_cm(40, 7, rois, 0, threads);
        for (std::size_t i = 0; i < 40; ++i) {
            for (std::size_t j = 0; j < 7; ++j) {
                ASSERT_EQ(cm.count(i, j), oracle[i][j]);
            }
        }
        EXPECT_EQ(cm.total(), 9u * 500u);
    }
}

TEST(BuildCm, PermutationInvariant) {
    const auto corpus = synth::symbol_corpus({}, 10, 0.5, false, 3);
    std::vector<RoiSymbols> shuffled = corpus;
    Rng rng(4);
    rng.shuffle(std::span(shuffled));
    EXPECT_EQ(build_cm(54, 18, corpus), build_cm(54, 18, shuffled));
}

TEST(BuildCm, RejectsBadIds) {
    std::vector<RoiSymbols> bad_symbol{{nine(5), 0}};
    EXPECT_THROW(build_cm(5, 2, bad_symbol), InvalidArgument);
    std::vector<RoiSymbols> bad_label{{nine(0), 2}};
    EXPECT_THROW(build_cm(5, 2, bad_label), InvalidArgument);
    std::vector<RoiSymbols> negative{{nine(0), -1}};
    EXPECT_THROW(build_cm(5, 2, negative, 0, 2), InvalidArgument);
}

TEST(NormalizeCm, ZeroRowIsUniform) {
    const auto p = uniform_map(3, 78);
    for (double v : p.probs) {
        EXPECT_EQ(v, 1.0 / 78.0);
    }
}

TEST(NormalizeCm, ClosedFormTwoClasses) {
    const std::vector<RoiSymbols> rois{{nine(0), 0}};
    const auto p = normalize_cm(build_cm(1, 2, rois));
    const double e9 = std::exp(9.0);
    EXPECT_NEAR(p.at(0, 0), e9 / (e9 + 1.0), 1e-15);
    EXPECT_NEAR(p.at(0, 1), 1.0 / (e9 + 1.0), 1e-15);
    EXPECT_NEAR(p.at(0, 0), 0.99988, 5e-6);
}

TEST(NormalizeCm, ShiftInvariant) {
    std::vector<std::uint64_t> a{3, 1, 0, 7}, b{103, 101, 100, 107};
    const auto pa = normalize_cm(CorrelationMap::from_counts(1, 4, a));
    const auto pb = normalize_cm(CorrelationMap::from_counts(1, 4, b));
    for (std::size_t j = 0; j < 4; ++j) {
        EXPECT_NEAR(pa.at(0, j), pb.at(0, j), 1e-15);
    }
}

TEST(NormalizeCm, HugeCountsStayFinite) {
    std::vector<std::uint64_t> c{1000000, 999999, 0};
    const auto p = normalize_cm(CorrelationMap::from_counts(1, 3, c));
    EXPECT_NEAR(p.at(0, 0) + p.at(0, 1) + p.at(0, 2), 1.0, 1e-12);
    EXPECT_NEAR(p.at(0, 0), 1.0 / (1.0 + std::exp(-1.0)), 1e-12);
    EXPECT_EQ(p.at(0, 2), 0.0);
}

TEST(PredictRoi, ExclusiveSymbolsSaturate) {
    const auto p = exclusive_map(5);
    const std::vector<std::uint32_t> s{6, 7, 8, 6, 7, 8, 6, 6, 6};
    const auto pred = predict_roi(p, s);
    EXPECT_EQ(pred.label, 2);
    EXPECT_NEAR(pred.probs[2], 1.0, 1e-12);
}

TEST(PredictRoi, UniformRowsTieToClassZero) {
    const auto p = uniform_map(4, 6);
    const auto pred = predict_roi(p, nine(3));
    EXPECT_EQ(pred.label, 0);
    for (double v : pred.probs) {
        EXPECT_NEAR(v, 1.0 / 6.0, 1e-15);
    }
}

TEST(PredictRoi, MatchesBruteForce) {
    Rng rng(5);
    std::vector<std::uint64_t> counts(30 * 8);
    for (auto& c : counts) {
        c = rng.index(4);
    }
    const auto p = normalize_cm(CorrelationMap::from_counts(30, 8, counts));
    for (int trial = 0; trial < 500; ++trial) {
        std::vector<std::uint32_t> s(9);
        for (auto& v : s) {
            v = static_cast<std::uint32_t>(rng.index(30));
        }
        std::vector<double> avg(8, 0.0);
        for (std::size_t j = 0; j < 8; ++j) {
            for (auto v : s) {
                avg[j] += p.at(v, j) / 9.0;
            }
        }
        std::size_t best = 0;
        for (std::size_t j = 1; j < 8; ++j) {
            if (avg[j] > avg[best]) {
                best = j;
            }
        }
        const auto pred = predict_roi(p, s);
        EXPECT_EQ(pred.label, static_cast<int>(best));
        EXPECT_NEAR(std::accumulate(pred.probs.begin(), pred.probs.end(), 0.0), 1.0, 1e-9);
        for (std::size_t j = 0; j < 8; ++j) {
            EXPECT_NEAR(pred.probs[j], avg[j], 1e-12);
            EXPECT_EQ(ess(p, s, j), pred.probs[j]);
        }
    }
}

TEST(PredictRoi, EmptySymbolSetIsUniform) {
    const auto p = exclusive_map(4);
    const auto pred = predict_roi(p, {});
    for (double v : pred.probs) {
        EXPECT_EQ(v, 0.25);
    }
}

TEST(Ess, ExclusiveAndUninformative) {
    EXPECT_NEAR(ess(exclusive_map(78), nine(30), 10), 1.0, 1e-12);
    EXPECT_NEAR(ess(uniform_map(5, 78), nine(1), 10), 1.0 / 78.0, 1e-17);
}

TEST(Ess, HandBuiltMixture) {
    NormalizedMap p;
    p.n_symbols = 2;
    p.n_classes = 2;
    p.probs = {0.9, 0.1, 0.3, 0.7};
    const std::vector<std::uint32_t> s{0, 0, 0, 0, 0, 0, 1, 1, 1};
    EXPECT_NEAR(ess(p, s, 0), (6 * 0.9 + 3 * 0.3) / 9.0, 1e-15);
    EXPECT_NEAR(ess(p, s, 1), (6 * 0.1 + 3 * 0.7) / 9.0, 1e-15);
    EXPECT_THROW(ess(p, s, 2), InvalidArgument);
}

TEST(Ess, ZeroCountSymbolContributesOneOverK) {
    CorrelationMap cm(3, 4);
    cm.add(0, 1);
    const auto p = normalize_cm(cm);
    for (std::size_t j = 0; j < 4; ++j) {
        EXPECT_EQ(ess(p, nine(2), j), 0.25);
    }
}

TEST(Ess, DecreasesWithCorruption) {
    const synth::SymbolPlan plan;
    const auto train = synth::symbol_corpus(plan, 40, 1.0, false, 6);
    const auto p = normalize_cm(build_cm(plan.n_symbols(), plan.n_classes, train));
    double previous = 2.0;
    for (double f : {0.0, 0.2, 0.4, 0.6, 0.8, 1.0}) {
        Rng rng(7);
        double total = 0;
        std::size_t n = 0;
        for (const auto& clean : synth::symbol_corpus(plan, 30, 1.0, false, 8)) {
            auto s = clean.symbols;
            for (auto& v : s) {
                if (rng.uniform() < f) {
                    v = static_cast<std::uint32_t>(rng.index(plan.n_symbols()));
                }
            }
            total += ess(p, s, static_cast<std::size_t>(clean.label));
            ++n;
        }
        const double mean = total / static_cast<double>(n);
        EXPECT_LT(mean, previous) << f;
        previous = mean;
    }
}

TEST(EssProfile, NormBounds) {
    const auto ex = exclusive_map(78);
    const auto un = uniform_map(234, 78);
    const auto s = nine(30); // class 10
    std::vector<LayerSymbols> exclusive, uninformative;
    for (int l = 1; l <= 4; ++l) {
        exclusive.push_back({l, &ex, s});
        uninformative.push_back({l, &un, s});
    }
    const auto top = ess_profile(exclusive, ClassSource::true_label, 10, std::nullopt);
    ASSERT_TRUE(top);
    EXPECT_NEAR(top->norm, 2.0, 1e-12);
    const auto low = ess_profile(uninformative, ClassSource::true_label, 10, std::nullopt);
    ASSERT_TRUE(low);
    EXPECT_NEAR(low->norm, 2.0 / 78.0, 1e-15);
    EXPECT_NEAR(low->norm, 0.0256, 1e-4);
    const std::vector<int> first_three{1, 2, 3};
    const auto ood = ess_profile(exclusive, ClassSource::true_label, 10, std::nullopt, first_three);
    EXPECT_NEAR(ood->norm, std::sqrt(3.0), 1e-12);
    EXPECT_EQ(ood->per_layer.size(), 4u);
}

TEST(EssProfile, DeepestLayerPredictionResolvesClass) {
    const auto ex = exclusive_map(5);
    const std::vector<std::uint32_t> deep = nine(9), shallow = nine(0); // class 3 vs class 0
    const std::vector<LayerSymbols> layers{{4, &ex, deep}, {1, &ex, shallow}};
    const auto prof = ess_profile(layers, ClassSource::layer4_prediction, 0, std::nullopt);
    ASSERT_TRUE(prof);
    EXPECT_EQ(prof->resolved_class, 3);
    EXPECT_EQ(prof->per_layer.front().first, 1);
    EXPECT_NEAR(*prof->layer(4), 1.0, 1e-12);
    EXPECT_LT(*prof->layer(1), 1e-12);
    EXPECT_FALSE(prof->layer(2));
}

TEST(EssProfile, OutOfSetDecisionIsExcluded) {
    const auto ex = exclusive_map(78);
    const auto s = nine(0);
    const std::vector<LayerSymbols> layers{{4, &ex, s}};
    Exclusions ex_count;
    EXPECT_FALSE(ess_profile(layers, ClassSource::model_decision, 0, 78, {}, &ex_count));
    EXPECT_FALSE(ess_profile(layers, ClassSource::model_decision, 0, 500, {}, &ex_count));
    EXPECT_FALSE(ess_profile(layers, ClassSource::model_decision, 0, std::nullopt, {}, &ex_count));
    EXPECT_FALSE(ess_profile(layers, ClassSource::true_label, std::nullopt, 3, {}, &ex_count));
    EXPECT_EQ(ex_count.outside_class_set, 2u);
    EXPECT_EQ(ex_count.missing_class, 2u);
    EXPECT_EQ(ex_count.total(), 4u);
    const auto ok = ess_profile(layers, ClassSource::model_decision, 0, 0, {}, &ex_count);
    ASSERT_TRUE(ok);
    EXPECT_EQ(ok->class_source, ClassSource::model_decision);
    EXPECT_EQ(ex_count.total(), 4u);
}

TEST(ClassSource, RoundTrip) {
    for (auto c : {ClassSource::true_label, ClassSource::layer4_prediction, ClassSource::model_decision}) {
        EXPECT_EQ(parse_class_source(to_string(c)), c);
    }
    EXPECT_THROW(parse_class_source("layer4"), InvalidArgument);
}

TEST(TemporaryLearning, ExclusiveSymbolsArePerfect) {
    const synth::SymbolPlan plan;
    // 30 ROIs per class so no class is missing from a train half
    const auto corpus = synth::symbol_corpus(plan, 30, 1.0, false, 9);
    for (double acc : temporary_learning(corpus, 18, 20, 1, plan.n_symbols())) {
        EXPECT_EQ(acc, 1.0);
    }
}

TEST(TemporaryLearning, ClassAbsentFromTrainHalfIsMissed) {
    // some of these splits leave a class out of the train half entirely
    std::vector<RoiSymbols> rois;
    for (int c = 0; c < 3; ++c) {
        for (int r = 0; r < 2; ++r) {
            rois.push_back({nine(static_cast<std::uint32_t>(c)), c});
        }
    }
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const double acc = temporary_learning_trial(rois, 3, seed, 3);
        EXPECT_GE(acc, 0.0);
        EXPECT_LE(acc, 1.0);
    }
}

TEST(TemporaryLearning, IndependentSymbolsAtChance) {
    const synth::SymbolPlan plan;
    const auto corpus = synth::symbol_corpus(plan, 40, 0.0, false, 10);
    const auto acc = temporary_learning(corpus, 18, 100, 2, plan.n_symbols());
    const double mean = std::accumulate(acc.begin(), acc.end(), 0.0) / 100.0;
    EXPECT_NEAR(mean, 1.0 / 18.0, 0.03);
}

TEST(TemporaryLearning, SeededAndResampled) {
    const synth::SymbolPlan plan;
    const auto corpus = synth::symbol_corpus(plan, 10, 0.6, false, 11);
    EXPECT_EQ(temporary_learning(corpus, 18, 10, 3), temporary_learning(corpus, 18, 10, 3));
    const auto acc = temporary_learning(corpus, 18, 10, 3);
    EXPECT_NE(*std::min_element(acc.begin(), acc.end()), *std::max_element(acc.begin(), acc.end()));
}

TEST(TemporaryLearning, Preconditions) {
    std::vector<RoiSymbols> one_each{{nine(0), 0}, {nine(1), 1}};
    EXPECT_THROW(temporary_learning_trial(one_each, 2, 1), InvalidArgument);
    std::vector<RoiSymbols> bad{{nine(0), 0}, {nine(0), 0}, {nine(1), 2}, {nine(1), 2}};
    EXPECT_THROW(temporary_learning_trial(bad, 2, 1), InvalidArgument);
}
