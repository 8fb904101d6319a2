#include "symbolkit/roipool.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace symbolkit;
using namespace symbolkit::roipool;
using tensorio::ActivationTensor;

namespace {

ActivationTensor random_tensor(Rng& rng, int c, int h, int w) {
    ActivationTensor t{"img", 1, c, h, w, {}};
    t.values.resize(t.expected_size());
    for (auto& v : t.values) {
        v = static_cast<float>(rng.normal());
    }
    return t;
}

// Independent scan: bins are [floor(i*n/3), ceil((i+1)*n/3)) on each axis.
std::vector<float> brute_force_pool(const ActivationTensor& t, const FeatureBox& box) {
    std::vector<float> out;
    const int h = box.height(), w = box.width();
    for (int i = 0; i < 3; ++i) {
        const int r0 = static_cast<int>(std::floor(i * h / 3.0)), r1 = static_cast<int>(std::ceil((i + 1) * h / 3.0));
        for (int j = 0; j < 3; ++j) {
            const int c0 = static_cast<int>(std::floor(j * w / 3.0)), c1 = static_cast<int>(std::ceil((j + 1) * w / 3.0));
            for (int c = 0; c < t.channels; ++c) {
                float m = -INFINITY;
                for (int y = r0; y < r1; ++y) {
                    for (int x = c0; x < c1; ++x) {
                        m = std::max(m, t.at(c, box.y0 + y, box.x0 + x));
                    }
                }
                out.push_back(m);
            }
        }
    }
    return out;
}

FeatureBox random_box(Rng& rng, int h, int w) {
    const int x0 = static_cast<int>(rng.index(static_cast<std::uint64_t>(w)));
    const int y0 = static_cast<int>(rng.index(static_cast<std::uint64_t>(h)));
    const int x1 = x0 + 1 + static_cast<int>(rng.index(static_cast<std::uint64_t>(w - x0)));
    const int y1 = y0 + 1 + static_cast<int>(rng.index(static_cast<std::uint64_t>(h - y0)));
    return {x0, y0, x1, y1};
}

} // namespace

TEST(ProjectRoi, FullImageIdentity) {
    EXPECT_EQ(project_roi({0, 0, 224, 224}, 224, 224, 7, 7), (FeatureBox{0, 0, 7, 7}));
}

TEST(ProjectRoi, HandScaling) {
    EXPECT_EQ(project_roi({112, 112, 224, 224}, 224, 224, 14, 14), (FeatureBox{7, 7, 14, 14}));
}

TEST(ProjectRoi, SmallBoxWidenedInBounds) {
    const auto b = project_roi({10, 10, 12, 12}, 224, 224, 7, 7);
    EXPECT_EQ(b, (FeatureBox{0, 0, 3, 3}));
    // far corner: widening shifts back inside the map
    EXPECT_EQ(project_roi({220, 220, 224, 224}, 224, 224, 7, 7), (FeatureBox{4, 4, 7, 7}));
    // interior: widened around the cell
    EXPECT_EQ(project_roi({100, 100, 110, 110}, 224, 224, 7, 7), (FeatureBox{2, 2, 5, 5}));
}

TEST(ProjectRoi, SingleCellMap) {
    EXPECT_EQ(project_roi({3, 3, 4, 4}, 16, 16, 1, 1), (FeatureBox{0, 0, 1, 1}));
}

TEST(ProjectRoi, NarrowMapWidensOnlyAsFarAsPossible) {
    EXPECT_EQ(project_roi({0, 0, 4, 4}, 16, 16, 2, 8), (FeatureBox{0, 0, 2, 3}));
}

TEST(ProjectRoi, RejectsOutOfBoundsBox) {
    EXPECT_THROW(project_roi({0, 0, 300, 10}, 224, 224, 7, 7), InvalidArgument);
    EXPECT_THROW(project_roi({5, 5, 5, 10}, 224, 224, 7, 7), InvalidArgument);
}

TEST(ProjectRoi, RandomBoxesContainScaledBoxAndStayInBounds) {
    Rng rng(11);
    for (int trial = 0; trial < 2000; ++trial) {
        const int in_w = 32 + static_cast<int>(rng.index(300)), in_h = 32 + static_cast<int>(rng.index(300));
        const int fw = 1 + static_cast<int>(rng.index(20)), fh = 1 + static_cast<int>(rng.index(20));
        const double x0 = rng.uniform(0, in_w - 1), y0 = rng.uniform(0, in_h - 1);
        const double x1 = rng.uniform(x0 + 0.5, in_w), y1 = rng.uniform(y0 + 0.5, in_h);
        const auto b = project_roi({x0, y0, x1, y1}, in_w, in_h, fw, fh);
        EXPECT_GE(b.x0, 0);
        EXPECT_GE(b.y0, 0);
        EXPECT_LE(b.x1, fw);
        EXPECT_LE(b.y1, fh);
        EXPECT_GE(b.width(), std::min(3, fw));
        EXPECT_GE(b.height(), std::min(3, fh));
        EXPECT_LE(b.x0, std::min(static_cast<int>(std::floor(x0 * fw / in_w)), fw - 1));
        EXPECT_GE(b.x1, std::min(static_cast<int>(std::ceil(x1 * fw / in_w)), fw));
        EXPECT_LE(b.y0, std::min(static_cast<int>(std::floor(y0 * fh / in_h)), fh - 1));
        EXPECT_GE(b.y1, std::min(static_cast<int>(std::ceil(y1 * fh / in_h)), fh));
    }
}

TEST(RoiPool, ConstantTensor) {
    ActivationTensor t{"img", 1, 4, 5, 5, std::vector<float>(100, 2.5f)};
    const auto p = roi_pool(t, {0, 0, 5, 5});
    ASSERT_EQ(p.grid.size(), 36u);
    for (float v : p.grid) {
        EXPECT_EQ(v, 2.5f);
    }
}

TEST(RoiPool, SixBySixRamp) {
    ActivationTensor t{"img", 1, 1, 6, 6, {}};
    for (int i = 1; i <= 36; ++i) {
        t.values.push_back(static_cast<float>(i));
    }
    const auto p = roi_pool(t, {0, 0, 6, 6});
    EXPECT_EQ(p.grid, (std::vector<float>{8, 10, 12, 20, 22, 24, 32, 34, 36}));
}

TEST(RoiPool, ThreeByThreeIsVerbatim) {
    Rng rng(3);
    const auto t = random_tensor(rng, 2, 7, 7);
    const FeatureBox box{2, 3, 5, 6};
    const auto p = roi_pool(t, box);
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            for (int c = 0; c < 2; ++c) {
                EXPECT_EQ(p.at(i * 3 + j, c), t.at(c, box.y0 + i, box.x0 + j));
            }
        }
    }
}

TEST(RoiPool, MatchesBruteForceOnRandomBoxes) {
    Rng rng(5);
    for (int trial = 0; trial < 1000; ++trial) {
        const int h = 1 + static_cast<int>(rng.index(20)), w = 1 + static_cast<int>(rng.index(20));
        const auto t = random_tensor(rng, 1 + static_cast<int>(rng.index(4)), h, w);
        const auto box = random_box(rng, h, w);
        EXPECT_EQ(roi_pool(t, box).grid, brute_force_pool(t, box));
    }
}

TEST(RoiPool, BinsTileTheBox) {
    for (int n = 1; n <= 20; ++n) {
        std::vector<int> covered(static_cast<std::size_t>(n), 0);
        int prev_lo = -1;
        for (int i = 0; i < 3; ++i) {
            const auto [lo, hi] = bin_range(i, n);
            EXPECT_LT(lo, hi);
            EXPECT_GE(lo, prev_lo);
            prev_lo = lo;
            for (int k = lo; k < hi; ++k) {
                ++covered[static_cast<std::size_t>(k)];
            }
        }
        for (int c : covered) {
            EXPECT_GE(c, 1) << n;
        }
        if (n % 3 == 0) {
            for (int c : covered) {
                EXPECT_EQ(c, 1) << n; // exact partition
            }
        }
    }
}

TEST(RoiPool, ValuesBoundedBySourceRegion) {
    Rng rng(8);
    for (int trial = 0; trial < 200; ++trial) {
        const auto t = random_tensor(rng, 3, 10, 12);
        const auto box = random_box(rng, 10, 12);
        const auto p = roi_pool(t, box);
        for (int c = 0; c < 3; ++c) {
            float lo = INFINITY, hi = -INFINITY;
            for (int y = box.y0; y < box.y1; ++y) {
                for (int x = box.x0; x < box.x1; ++x) {
                    lo = std::min(lo, t.at(c, y, x));
                    hi = std::max(hi, t.at(c, y, x));
                }
            }
            for (int q = 0; q < 9; ++q) {
                EXPECT_LE(p.at(q, c), hi);
                EXPECT_GE(p.at(q, c), lo);
            }
        }
    }
}

TEST(RoiPool, MonotoneInTheTensor) {
    Rng rng(9);
    for (int trial = 0; trial < 200; ++trial) {
        auto t = random_tensor(rng, 2, 8, 8);
        const auto box = random_box(rng, 8, 8);
        const auto before = roi_pool(t, box);
        for (auto& v : t.values) {
            v += static_cast<float>(rng.uniform(0, 1));
        }
        const auto after = roi_pool(t, box);
        for (std::size_t i = 0; i < before.grid.size(); ++i) {
            EXPECT_GE(after.grid[i], before.grid[i]);
        }
    }
}

TEST(RoiPool, RejectsBoxOutsideTensor) {
    ActivationTensor t{"img", 1, 1, 4, 4, std::vector<float>(16, 0.0f)};
    EXPECT_THROW(roi_pool(t, {0, 0, 5, 4}), InvalidArgument);
    EXPECT_THROW(roi_pool(t, {2, 2, 2, 3}), InvalidArgument);
}

TEST(AssembleVectors, FiveTwelveChannels) {
    Rng rng(1);
    const auto t = random_tensor(rng, 512, 7, 7);
    const auto vs = assemble_vectors(roi_pool(t, {0, 0, 7, 7}, "r"));
    ASSERT_EQ(vs.size(), 9u);
    for (int p = 0; p < 9; ++p) {
        EXPECT_EQ(vs[static_cast<std::size_t>(p)].components.size(), 512u);
        EXPECT_EQ(vs[static_cast<std::size_t>(p)].position, p + 1);
        EXPECT_EQ(vs[static_cast<std::size_t>(p)].roi_id, "r");
    }
}

TEST(AssembleVectors, SingleChannelEqualsGrid) {
    Rng rng(2);
    const auto pooled = roi_pool(random_tensor(rng, 1, 6, 6), {0, 0, 6, 6});
    const auto vs = assemble_vectors(pooled);
    for (int p = 0; p < 9; ++p) {
        ASSERT_EQ(vs[static_cast<std::size_t>(p)].components.size(), 1u);
        EXPECT_EQ(vs[static_cast<std::size_t>(p)].components[0], pooled.grid[static_cast<std::size_t>(p)]);
    }
}

TEST(AssembleVectors, RoundTripIsIdentity) {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        auto pooled = roi_pool(random_tensor(rng, 1 + static_cast<int>(rng.index(9)), 9, 9), random_box(rng, 9, 9), "x");
        const auto vs = assemble_vectors(pooled);
        EXPECT_EQ(grid_from_vectors(vs), pooled);
    }
}

TEST(MeanFilter, HandExample) {
    Matrix<float> m(2, 2, std::vector<float>{0, 0, 2, 2});
    const auto r = mean_activity_filter(m);
    EXPECT_EQ(r.layer_mean, 1.0);
    EXPECT_EQ(r.retained, (std::vector<std::size_t>{1}));
}

TEST(MeanFilter, AllEqualKeepsEverything) {
    Matrix<float> m(5, 3, 0.7f);
    const auto r = mean_activity_filter(m);
    EXPECT_EQ(r.layer_mean, static_cast<double>(0.7f));
    EXPECT_EQ(r.retained.size(), 5u);
}

TEST(MeanFilter, SingleNonConstantVectorKept) {
    Rng rng(4);
    for (int trial = 0; trial < 200; ++trial) {
        Matrix<float> m(1, 8);
        for (auto& v : m.data()) {
            v = static_cast<float>(rng.normal());
        }
        EXPECT_EQ(mean_activity_filter(m).retained.size(), 1u);
    }
}

TEST(MeanFilter, IdempotentWithStoredMean) {
    Rng rng(6);
    Matrix<float> m(300, 6);
    for (auto& v : m.data()) {
        v = static_cast<float>(rng.normal());
    }
    const auto r = mean_activity_filter(m);
    const auto kept = m.select_rows(r.retained);
    EXPECT_EQ(apply_mean_filter(kept, r.layer_mean).size(), kept.rows());
    EXPECT_LT(r.retained.size(), m.rows()); // some vectors were removed
}

TEST(MeanFilter, StoredMeanCanRemoveEveryTestVector) {
    Matrix<float> m(3, 2, 0.1f);
    EXPECT_TRUE(apply_mean_filter(m, 5.0).empty());
}

TEST(MeanFilter, ActivityVectorOverload) {
    std::vector<ActivityVector> vs{{"a", 1, 1, {0, 0}}, {"a", 1, 2, {2, 2}}, {"b", 1, 1, {1, 0}}};
    const auto [kept, mean] = mean_activity_filter(vs);
    EXPECT_NEAR(mean, 5.0 / 6.0, 1e-12);
    ASSERT_EQ(kept.size(), 2u);
    EXPECT_EQ(kept[0].position, 2);
    EXPECT_EQ(kept[1].roi_id, "b");
}

TEST(MeanFilter, EmptyInputRejected) {
    EXPECT_THROW(mean_activity_filter(Matrix<float>(0, 3)), InvalidArgument);
}
