#include "symbolkit/cluster.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <map>
#include <numbers>
#include <numeric>
#include <set>

using namespace symbolkit;
using namespace symbolkit::cluster;

namespace {

const std::vector<std::vector<double>> kTriangle{{0, 0, 0}, {1, 0, 0}, {0.5, 0.866, 0}};

// Fraction of points whose cluster maps to their blob under the best one-to-one relabeling
// (majority vote per cluster is enough for well-separated blobs).
double agreement(const std::vector<int>& truth, const std::vector<std::uint32_t>& got, std::size_t k) {
    std::vector<std::map<int, std::size_t>> votes(k);
    for (std::size_t i = 0; i < truth.size(); ++i) {
        ++votes[got[i]][truth[i]];
    }
    std::size_t hit = 0;
    std::set<int> used;
    for (const auto& v : votes) {
        auto best = std::max_element(v.begin(), v.end(), [](auto& a, auto& b) { return a.second < b.second; });
        if (best != v.end() && used.insert(best->first).second) {
            hit += best->second;
        }
    }
    return static_cast<double>(hit) / static_cast<double>(truth.size());
}

Matrix<float> grid_clusters(std::size_t side, std::size_t per, double sigma, std::uint64_t seed) {
    Rng rng(seed);
    Matrix<float> out(0, 3);
    std::vector<float> row(3);
    for (std::size_t x = 0; x < side; ++x) {
        for (std::size_t y = 0; y < side; ++y) {
            for (std::size_t p = 0; p < per; ++p) {
                row = {static_cast<float>(x + sigma * rng.normal()), static_cast<float>(y + sigma * rng.normal()),
                       static_cast<float>(sigma * rng.normal())};
                out.append_row(std::span<const float>(row));
            }
        }
    }
    return out;
}

} // namespace

TEST(XMeans, RecoversThreeBlobs) {
    auto [pts, labels] = testutil::blobs(1000, kTriangle, 0.05, 1);
    XMeansOptions opts;
    opts.k_init = 2;
    opts.k_max = 20;
    const auto cb = xmeans_fit(pts, 11, opts);
    EXPECT_EQ(cb.centers.rows(), 3u);
    EXPECT_EQ(cb.k_max, 20u);
    EXPECT_GE(agreement(labels, assign_all(cb, pts), 3), 0.99);
}

TEST(XMeans, IdenticalPointsGiveOneSymbol) {
    Matrix<float> pts(500, 3, 0.25f);
    XMeansOptions opts;
    opts.k_init = 1;
    EXPECT_EQ(xmeans_fit(pts, 1, opts).centers.rows(), 1u);
    opts.k_init = 4; // duplicate seeds collapse as well
    EXPECT_EQ(xmeans_fit(pts, 1, opts).centers.rows(), 1u);
}

TEST(XMeans, CapIsHonoured) {
    const auto pts = grid_clusters(12, 8, 0.02, 2); // 144 planted clusters
    XMeansOptions opts;
    opts.k_init = 2;
    opts.k_max = 50;
    const auto cb = xmeans_fit(pts, 3, opts);
    EXPECT_EQ(cb.centers.rows(), 50u);
}

TEST(XMeans, KMaxEqualKInitIsKMeans) {
    auto [pts, labels] = testutil::blobs(200, kTriangle, 0.1, 3);
    XMeansOptions opts;
    opts.k_init = 5;
    opts.k_max = 5;
    const auto x = xmeans_fit(pts, 9, opts);
    const auto k = kmeans_fit(pts, 5, 9);
    EXPECT_EQ(x.centers, k.centers);
}

TEST(XMeans, Preconditions) {
    Matrix<float> pts(3, 3, 0.0f);
    XMeansOptions opts;
    opts.k_init = 4;
    EXPECT_THROW(xmeans_fit(pts, 1, opts), InvalidArgument);
    opts.k_init = 0;
    EXPECT_THROW(xmeans_fit(pts, 1, opts), InvalidArgument);
    opts.k_init = 3;
    opts.k_max = 2;
    EXPECT_THROW(xmeans_fit(pts, 1, opts), InvalidArgument);
}

TEST(XMeans, ThreadCountDoesNotChangeResult) {
    const auto pts = grid_clusters(4, 50, 0.05, 4);
    XMeansOptions a;
    a.k_init = 2;
    a.k_max = 40;
    XMeansOptions b = a;
    b.lloyd.threads = 4;
    EXPECT_EQ(xmeans_fit(pts, 5, a).centers, xmeans_fit(pts, 5, b).centers);
}

TEST(XMeans, CentersDistinctAndFinite) {
    const auto pts = grid_clusters(5, 40, 0.05, 5);
    XMeansOptions opts;
    opts.k_init = 3;
    const auto cb = xmeans_fit(pts, 6, opts);
    std::set<std::vector<double>> seen;
    for (std::size_t c = 0; c < cb.centers.rows(); ++c) {
        const auto r = cb.centers.row(c);
        for (double v : r) {
            EXPECT_TRUE(std::isfinite(v));
        }
        EXPECT_TRUE(seen.insert(std::vector<double>(r.begin(), r.end())).second);
    }
    EXPECT_EQ(cb.centers.rows(), 25u);
}

TEST(KMeans, SingleCenterIsCentroid) {
    auto [pts, labels] = testutil::blobs(100, kTriangle, 0.3, 6);
    const auto cb = kmeans_fit(pts, 1, 1);
    ASSERT_EQ(cb.centers.rows(), 1u);
    for (std::size_t d = 0; d < 3; ++d) {
        double s = 0;
        for (std::size_t i = 0; i < pts.rows(); ++i) {
            s += pts(i, d);
        }
        EXPECT_NEAR(cb.centers(0, d), s / static_cast<double>(pts.rows()), 1e-9);
    }
}

TEST(KMeans, KEqualNReturnsThePoints) {
    auto [pts, labels] = testutil::blobs(10, kTriangle, 0.3, 7);
    const auto cb = kmeans_fit(pts, pts.rows(), 1);
    ASSERT_EQ(cb.centers.rows(), pts.rows());
    double inertia = 0;
    for (std::size_t i = 0; i < pts.rows(); ++i) {
        inertia += squared_distance(pts.row(i), cb.centers.row(assign_symbol(cb, pts.row(i))));
    }
    EXPECT_EQ(inertia, 0.0);
}

TEST(KMeans, ThreeBlobsAgree) {
    auto [pts, labels] = testutil::blobs(500, kTriangle, 0.05, 8);
    const auto cb = kmeans_fit(pts, 3, 2);
    EXPECT_GE(agreement(labels, assign_all(cb, pts), 3), 0.99);
}

TEST(KMeans, TooFewPoints) {
    Matrix<float> pts(4, 3, 1.0f);
    EXPECT_THROW(kmeans_fit(pts, 5, 1), InvalidArgument);
    EXPECT_THROW(kmeans_fit(pts, 0, 1), InvalidArgument);
}

TEST(KMeans, DeterministicForSeed) {
    auto [pts, labels] = testutil::blobs(300, kTriangle, 0.2, 9);
    EXPECT_EQ(kmeans_fit(pts, 7, 4).centers, kmeans_fit(pts, 7, 4).centers);
}

TEST(Bic, TightBlobPrefersOneCenter) {
    auto [pts, labels] = testutil::blobs(400, {{0, 0, 0}}, 0.05, 10);
    const auto one = kmeans_fit(pts, 1, 1);
    const auto two = kmeans_fit(pts, 2, 1);
    EXPECT_GT(bic(pts, one.centers), bic(pts, two.centers));
}

TEST(Bic, SeparatedBlobsPreferTwoCenters) {
    auto [pts, labels] = testutil::blobs(200, {{0, 0, 0}, {1, 0, 0}}, 0.05, 11);
    const auto one = kmeans_fit(pts, 1, 1);
    const auto two = kmeans_fit(pts, 2, 1);
    EXPECT_GT(bic(pts, two.centers), bic(pts, one.centers));
}

TEST(Bic, ScaleInvariantArgmax) {
    auto [pts, labels] = testutil::blobs(150, {{0, 0, 0}, {1, 0, 0}}, 0.1, 12);
    for (double scale : {0.01, 1.0, 250.0}) {
        Matrix<float> scaled = pts;
        for (auto& v : scaled.data()) {
            v = static_cast<float>(v * scale);
        }
        int best_k = 0;
        double best = -std::numeric_limits<double>::infinity();
        for (int k = 1; k <= 3; ++k) {
            const auto cb = kmeans_fit(scaled, static_cast<std::size_t>(k), 3);
            const double b = bic(scaled, cb.centers);
            if (b > best) {
                best = b;
                best_k = k;
            }
        }
        EXPECT_EQ(best_k, 2) << scale;
    }
}

TEST(Bic, MatchesDirectFormula) {
    Matrix<float> pts(5, 1);
    const float xs[] = {0, 1, 2, 10, 12};
    for (std::size_t i = 0; i < 5; ++i) {
        pts(i, 0) = xs[i];
    }
    Matrix<double> centers(2, 1);
    centers(0, 0) = 1;
    centers(1, 0) = 11;
    // sse = 1+0+1+1+1 = 4, variance = 4/3; counts 3 and 2; d=1
    const double var = 4.0 / 3.0, n = 5, k = 2;
    double l = 0;
    for (double r : {3.0, 2.0}) {
        l += r * std::log(r) - r * std::log(n) - r / 2 * std::log(2 * std::numbers::pi) - r / 2 * std::log(var) -
             (r - k) / 2;
    }
    const double expect = l - ((k - 1) + k + 1) / 2 * std::log(n);
    EXPECT_NEAR(bic(pts, centers), expect, 1e-12);
}

TEST(Bic, ZeroVarianceIsFinite) {
    Matrix<float> pts(6, 3, 2.0f);
    Matrix<double> centers(1, 3, 2.0);
    EXPECT_TRUE(std::isfinite(bic(pts, centers)));
    EXPECT_THROW(bic(pts, Matrix<double>(6, 3, 0.0)), InvalidArgument);
}

TEST(AssignSymbol, ExactCenterAndTies) {
    SymbolCodebook cb;
    cb.centers = Matrix<double>(8, 3, 0.0);
    for (std::size_t c = 0; c < 8; ++c) {
        cb.centers(c, 0) = static_cast<double>(c);
    }
    const std::vector<float> on7{7, 0, 0};
    EXPECT_EQ(assign_symbol(cb, std::span<const float>(on7)), 7u);

    SymbolCodebook tie;
    tie.centers = Matrix<double>(6, 3, 100.0);
    tie.centers(2, 0) = -1;
    tie.centers(2, 1) = 0;
    tie.centers(2, 2) = 0;
    tie.centers(5, 0) = 1;
    tie.centers(5, 1) = 0;
    tie.centers(5, 2) = 0;
    const std::vector<float> mid{0, 0, 0};
    EXPECT_EQ(assign_symbol(tie, std::span<const float>(mid)), 2u);
}

TEST(AssignSymbol, MatchesBruteForce) {
    Rng rng(13);
    SymbolCodebook cb;
    cb.centers = Matrix<double>(40, 3);
    for (auto& v : cb.centers.data()) {
        v = rng.uniform(-5, 5);
    }
    Matrix<float> pts(10000, 3);
    for (auto& v : pts.data()) {
        v = static_cast<float>(rng.uniform(-6, 6));
    }
    const auto got = assign_all(cb, pts, 3);
    for (std::size_t i = 0; i < pts.rows(); ++i) {
        std::size_t best = 0;
        double bd = 1e300;
        for (std::size_t c = 0; c < 40; ++c) {
            double d = 0;
            for (std::size_t j = 0; j < 3; ++j) {
                const double t = pts(i, j) - cb.centers(c, j);
                d += t * t;
            }
            if (d < bd) {
                bd = d;
                best = c;
            }
        }
        ASSERT_EQ(got[i], best);
    }
}

TEST(AssignSymbol, Errors) {
    SymbolCodebook empty;
    const std::vector<float> p{0, 0, 0};
    EXPECT_THROW(assign_symbol(empty, std::span<const float>(p)), InvalidArgument);
    SymbolCodebook cb;
    cb.centers = Matrix<double>(2, 2, 0.0);
    EXPECT_THROW(assign_symbol(cb, std::span<const float>(p)), InvalidArgument);
}
