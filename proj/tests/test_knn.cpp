#include "symbolkit/knn.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <set>

using namespace symbolkit;
using namespace symbolkit::knn;

namespace {

Matrix<float> random_points(std::size_t n, std::size_t d, std::uint64_t seed) {
    Rng rng(seed);
    Matrix<float> m(n, d);
    for (auto& v : m.data()) {
        v = static_cast<float>(rng.normal());
    }
    return m;
}

// Full sort of all distances, ties by index.
std::vector<std::uint32_t> brute(const Matrix<float>& ref, std::span<const float> q, std::size_t k, std::size_t skip) {
    std::vector<std::pair<double, std::uint32_t>> all;
    for (std::size_t j = 0; j < ref.rows(); ++j) {
        if (j != skip) {
            all.emplace_back(squared_distance(q, ref.row(j)), static_cast<std::uint32_t>(j));
        }
    }
    std::sort(all.begin(), all.end());
    std::vector<std::uint32_t> out;
    for (std::size_t i = 0; i < k; ++i) {
        out.push_back(all[i].second);
    }
    return out;
}

} // namespace

TEST(ExactKnn, MatchesSortedScan) {
    const auto pts = random_points(300, 7, 1);
    const auto nn = exact_knn(pts, 10);
    ASSERT_EQ(nn.size(), 300u);
    for (std::size_t i = 0; i < pts.rows(); ++i) {
        const auto expect = brute(pts, pts.row(i), 10, i);
        for (std::size_t r = 0; r < 10; ++r) {
            EXPECT_EQ(nn.index(i, r), expect[r]);
            EXPECT_NEAR(nn.distance(i, r), std::sqrt(squared_distance(pts.row(i), pts.row(expect[r]))), 1e-5);
        }
    }
}

TEST(ExactKnn, ThreadCountDoesNotChangeResult) {
    const auto pts = random_points(500, 5, 2);
    EXPECT_EQ(exact_knn(pts, 8, 1), exact_knn(pts, 8, 4));
}

TEST(ExactKnn, NeedsMoreThanKPoints) {
    const auto pts = random_points(10, 3, 3);
    EXPECT_THROW(exact_knn(pts, 10), InvalidArgument);
    EXPECT_NO_THROW(exact_knn(pts, 9));
}

TEST(ExactKnnQuery, MatchesSortedScan) {
    const auto ref = random_points(200, 4, 4);
    const auto q = random_points(30, 4, 5);
    const auto nn = exact_knn_query(ref, q, 6);
    for (std::size_t i = 0; i < q.rows(); ++i) {
        const auto expect = brute(ref, q.row(i), 6, ref.rows());
        for (std::size_t r = 0; r < 6; ++r) {
            EXPECT_EQ(nn.index(i, r), expect[r]);
        }
    }
}

TEST(ExactKnnQuery, DimensionMismatch) {
    EXPECT_THROW(exact_knn_query(random_points(20, 4, 1), random_points(3, 5, 1), 2), InvalidArgument);
}

TEST(RpForest, LeavesPartitionEveryTree) {
    const auto pts = random_points(1000, 6, 6);
    const RpForest forest(pts, 4, 20, 7);
    std::vector<int> seen(pts.rows(), 0);
    for (const auto& leaf : forest.leaves()) {
        for (auto p : leaf) {
            ++seen[p];
        }
    }
    for (int s : seen) {
        EXPECT_EQ(s, 4);
    }
}

TEST(ApproxKnn, HighRecallAgainstExact) {
    const auto pts = random_points(3000, 8, 8);
    const auto exact = exact_knn(pts, 15);
    const auto approx = approx_knn(pts, 15, 99);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pts.rows(); ++i) {
        std::set<std::uint32_t> truth;
        for (std::size_t r = 0; r < 15; ++r) {
            truth.insert(exact.index(i, r));
        }
        for (std::size_t r = 0; r < 15; ++r) {
            hits += truth.count(approx.index(i, r));
            EXPECT_NE(approx.index(i, r), i);
        }
    }
    const double recall = static_cast<double>(hits) / (3000.0 * 15.0);
    EXPECT_GE(recall, 0.9) << recall;
}

TEST(ApproxKnn, DeterministicForSeed) {
    const auto pts = random_points(800, 5, 9);
    EXPECT_EQ(approx_knn(pts, 10, 5), approx_knn(pts, 10, 5));
}

TEST(ApproxKnnQuery, HighRecallAgainstExact) {
    const auto ref = random_points(2500, 6, 10);
    const auto q = random_points(200, 6, 11);
    const RpForest forest(ref, default_tree_count(ref.rows()), 15, 3);
    const auto graph = approx_knn(ref, 15, 3);
    const auto approx = approx_knn_query(ref, forest, graph, q, 15);
    const auto exact = exact_knn_query(ref, q, 15);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < q.rows(); ++i) {
        std::set<std::uint32_t> truth(exact.indices.begin() + static_cast<std::ptrdiff_t>(i * 15),
                                      exact.indices.begin() + static_cast<std::ptrdiff_t>((i + 1) * 15));
        for (std::size_t r = 0; r < 15; ++r) {
            hits += truth.count(approx.index(i, r));
        }
    }
    EXPECT_GE(static_cast<double>(hits) / (200.0 * 15.0), 0.9);
}
