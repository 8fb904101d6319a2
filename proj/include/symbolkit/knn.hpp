#ifndef SYMBOLKIT_KNN_HPP
#define SYMBOLKIT_KNN_HPP

#include "detail/matrix.hpp"
#include "detail/rng.hpp"
#include "error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <thread>
#include <utility>
#include <vector>

/**
 * @file knn.hpp
 *
 * @brief Euclidean k-nearest-neighbour search: brute force, and a random-projection forest
 * refined by neighbour descent for large inputs.
 *
 * Neighbours are always sorted by (distance, index), so results are reproducible and
 * independent of the number of worker threads.
 */

namespace symbolkit::knn {

/// k neighbours per row; `index(i, r)` is the r-th nearest neighbour of row i.
struct NeighborList {
    std::size_t k = 0;
    std::vector<std::uint32_t> indices;
    std::vector<float> distances; ///< Euclidean, not squared.

    std::size_t size() const { return k == 0 ? 0 : indices.size() / k; }
    std::uint32_t index(std::size_t i, std::size_t r) const { return indices[i * k + r]; }
    float distance(std::size_t i, std::size_t r) const { return distances[i * k + r]; }

    bool operator==(const NeighborList&) const = default;
};

namespace detail {

inline float sqdist(const float* a, const float* b, std::size_t d) {
    float s = 0.0f;
    for (std::size_t i = 0; i < d; ++i) {
        const float t = a[i] - b[i];
        s += t * t;
    }
    return s;
}

using Candidate = std::pair<float, std::uint32_t>; // (squared distance, index), ordered lexicographically

/// Bounded max-heap keeping the k smallest candidates.
class TopK {
public:
    explicit TopK(std::size_t k) : k_(k) { heap_.reserve(k + 1); }

    bool accepts(float d, std::uint32_t i) const {
        return heap_.size() < k_ || Candidate{d, i} < heap_.front();
    }

    bool push(float d, std::uint32_t i) {
        if (!accepts(d, i)) {
            return false;
        }
        heap_.emplace_back(d, i);
        std::push_heap(heap_.begin(), heap_.end());
        if (heap_.size() > k_) {
            std::pop_heap(heap_.begin(), heap_.end());
            heap_.pop_back();
        }
        return true;
    }

    std::size_t size() const { return heap_.size(); }

    bool contains(std::uint32_t i) const {
        return std::any_of(heap_.begin(), heap_.end(), [&](const Candidate& c) { return c.second == i; });
    }

    std::vector<Candidate> sorted() const {
        auto out = heap_;
        std::sort(out.begin(), out.end());
        return out;
    }

private:
    std::size_t k_;
    std::vector<Candidate> heap_;
};

template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
    const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), n));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += workers) {
                fn(i);
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }
}

inline void store(NeighborList& out, std::size_t row, const std::vector<Candidate>& sorted) {
    for (std::size_t r = 0; r < out.k; ++r) {
        out.indices[row * out.k + r] = sorted[r].second;
        out.distances[row * out.k + r] = std::sqrt(sorted[r].first);
    }
}

} // namespace detail

/// Exact neighbours of every row among the other rows. Requires rows > k.
inline NeighborList exact_knn(const Matrix<float>& data, std::size_t k, int threads = 1) {
    const std::size_t n = data.rows();
    if (k == 0 || n <= k) {
        throw InvalidArgument("exact_knn: need more than k=" + std::to_string(k) + " points, have " + std::to_string(n));
    }
    NeighborList out{k, std::vector<std::uint32_t>(n * k), std::vector<float>(n * k)};
    const std::size_t d = data.cols();
    detail::parallel_for(n, threads, [&](std::size_t i) {
        detail::TopK top(k);
        const float* xi = data.row(i).data();
        for (std::size_t j = 0; j < n; ++j) {
            if (j != i) {
                top.push(detail::sqdist(xi, data.row(j).data(), d), static_cast<std::uint32_t>(j));
            }
        }
        detail::store(out, i, top.sorted());
    });
    return out;
}

/// Exact neighbours of each query row among the reference rows.
inline NeighborList exact_knn_query(const Matrix<float>& reference, const Matrix<float>& queries, std::size_t k,
                                    int threads = 1) {
    if (k == 0 || reference.rows() < k) {
        throw InvalidArgument("exact_knn_query: reference has fewer than k points");
    }
    if (!queries.empty() && queries.cols() != reference.cols()) {
        throw InvalidArgument("exact_knn_query: dimension mismatch");
    }
    const std::size_t n = queries.rows();
    NeighborList out{k, std::vector<std::uint32_t>(n * k), std::vector<float>(n * k)};
    const std::size_t d = reference.cols();
    detail::parallel_for(n, threads, [&](std::size_t i) {
        detail::TopK top(k);
        const float* q = queries.row(i).data();
        for (std::size_t j = 0; j < reference.rows(); ++j) {
            top.push(detail::sqdist(q, reference.row(j).data(), d), static_cast<std::uint32_t>(j));
        }
        detail::store(out, i, top.sorted());
    });
    return out;
}

/**
 * Forest of random-projection trees. Each split is the hyperplane that bisects two randomly
 * chosen points of the node; leaves hold at most `leaf_size` points.
 */
class RpForest {
public:
    RpForest() = default;

    RpForest(const Matrix<float>& data, std::size_t n_trees, std::size_t leaf_size, std::uint64_t seed)
        : dim_(data.cols()) {
        Rng rng(seed);
        std::vector<std::uint32_t> all(data.rows());
        std::iota(all.begin(), all.end(), 0u);
        for (std::size_t t = 0; t < n_trees; ++t) {
            Tree tree;
            auto pts = all;
            build(tree, data, pts, 0, pts.size(), std::max<std::size_t>(leaf_size, 2), rng, 0);
            trees_.push_back(std::move(tree));
        }
    }

    /// Leaves of every tree, as lists of point indices.
    std::vector<std::vector<std::uint32_t>> leaves() const {
        std::vector<std::vector<std::uint32_t>> out;
        for (const auto& t : trees_) {
            for (const auto& node : t.nodes) {
                if (node.left < 0) {
                    out.emplace_back(t.points.begin() + node.begin, t.points.begin() + node.end);
                }
            }
        }
        return out;
    }

    /// Union of the leaves a query falls into (one per tree), sorted and deduplicated.
    std::vector<std::uint32_t> candidates(const float* q) const {
        std::vector<std::uint32_t> out;
        for (const auto& t : trees_) {
            int node = 0;
            while (t.nodes[static_cast<std::size_t>(node)].left >= 0) {
                const auto& nd = t.nodes[static_cast<std::size_t>(node)];
                node = side(t, nd, q) ? nd.right : nd.left;
            }
            const auto& leaf = t.nodes[static_cast<std::size_t>(node)];
            out.insert(out.end(), t.points.begin() + leaf.begin, t.points.begin() + leaf.end);
        }
        std::sort(out.begin(), out.end());
        out.erase(std::unique(out.begin(), out.end()), out.end());
        return out;
    }

    bool empty() const { return trees_.empty(); }

private:
    struct Node {
        int left = -1;
        int right = -1;
        std::size_t hyperplane = 0; // offset into Tree::planes (dim_ normal values, then offset)
        std::ptrdiff_t begin = 0;
        std::ptrdiff_t end = 0;
    };

    struct Tree {
        std::vector<Node> nodes;
        std::vector<float> planes;
        std::vector<std::uint32_t> points;
    };

    bool side(const Tree& t, const Node& nd, const float* q) const {
        const float* w = t.planes.data() + nd.hyperplane;
        float s = w[dim_];
        for (std::size_t i = 0; i < dim_; ++i) {
            s += w[i] * q[i];
        }
        return s > 0.0f;
    }

    int build(Tree& tree, const Matrix<float>& data, std::vector<std::uint32_t>& pts, std::size_t begin,
              std::size_t end, std::size_t leaf_size, Rng& rng, int depth) {
        const int id = static_cast<int>(tree.nodes.size());
        tree.nodes.push_back({});
        const std::size_t n = end - begin;
        if (n <= leaf_size || depth > 64) {
            make_leaf(tree, id, pts, begin, end);
            return id;
        }
        const auto a = pts[begin + rng.index(n)];
        auto b = pts[begin + rng.index(n)];
        for (int tries = 0; b == a && tries < 8; ++tries) {
            b = pts[begin + rng.index(n)];
        }
        const auto ra = data.row(a);
        const auto rb = data.row(b);
        const std::size_t plane = tree.planes.size();
        float offset = 0.0f;
        for (std::size_t i = 0; i < dim_; ++i) {
            const float w = ra[i] - rb[i];
            tree.planes.push_back(w);
            offset -= w * (ra[i] + rb[i]) * 0.5f;
        }
        tree.planes.push_back(offset);
        tree.nodes[static_cast<std::size_t>(id)].hyperplane = plane;

        std::vector<std::uint32_t> left, right;
        for (std::size_t i = begin; i < end; ++i) {
            const float* x = data.row(pts[i]).data();
            float s = tree.planes[plane + dim_];
            for (std::size_t j = 0; j < dim_; ++j) {
                s += tree.planes[plane + j] * x[j];
            }
            if (s > 0.0f) {
                right.push_back(pts[i]);
            } else {
                left.push_back(pts[i]);
            }
        }
        if (left.empty() || right.empty()) {
            // all points on one side of the plane (e.g. duplicates): stop splitting here
            make_leaf(tree, id, pts, begin, end);
            return id;
        }
        std::copy(left.begin(), left.end(), pts.begin() + static_cast<std::ptrdiff_t>(begin));
        std::copy(right.begin(), right.end(), pts.begin() + static_cast<std::ptrdiff_t>(begin + left.size()));
        const std::size_t mid = begin + left.size();
        const int l = build(tree, data, pts, begin, mid, leaf_size, rng, depth + 1);
        const int r = build(tree, data, pts, mid, end, leaf_size, rng, depth + 1);
        tree.nodes[static_cast<std::size_t>(id)].left = l;
        tree.nodes[static_cast<std::size_t>(id)].right = r;
        return id;
    }

    void make_leaf(Tree& tree, int id, const std::vector<std::uint32_t>& pts, std::size_t begin, std::size_t end) {
        auto& nd = tree.nodes[static_cast<std::size_t>(id)];
        nd.left = nd.right = -1;
        nd.begin = static_cast<std::ptrdiff_t>(tree.points.size());
        tree.points.insert(tree.points.end(), pts.begin() + static_cast<std::ptrdiff_t>(begin),
                           pts.begin() + static_cast<std::ptrdiff_t>(end));
        nd.end = static_cast<std::ptrdiff_t>(tree.points.size());
    }

    std::size_t dim_ = 0;
    std::vector<Tree> trees_;
};

struct ApproxOptions {
    std::size_t n_trees = 0;     ///< 0 selects min(64, 5 + round(N^0.25 / 2)).
    std::size_t leaf_size = 0;   ///< 0 selects max(10, k).
    int max_iterations = 10;
    double delta = 0.001;        ///< stop when fewer than delta * N * k updates happen in a sweep
};

inline std::size_t default_tree_count(std::size_t n) {
    return std::min<std::size_t>(64, 5 + static_cast<std::size_t>(std::lround(std::pow(static_cast<double>(n), 0.25) / 2.0)));
}

/**
 * Approximate all-points neighbours: random-projection forest seeding followed by
 * neighbour-descent local joins. Single-threaded and fully determined by `seed`.
 */
inline NeighborList approx_knn(const Matrix<float>& data, std::size_t k, std::uint64_t seed,
                               ApproxOptions opts = {}) {
    const std::size_t n = data.rows();
    if (k == 0 || n <= k) {
        throw InvalidArgument("approx_knn: need more than k=" + std::to_string(k) + " points, have " + std::to_string(n));
    }
    const std::size_t d = data.cols();
    const std::size_t trees = opts.n_trees ? opts.n_trees : default_tree_count(n);
    const std::size_t leaf = opts.leaf_size ? opts.leaf_size : std::max<std::size_t>(10, k);
    const RpForest forest(data, trees, leaf, seed);

    std::vector<detail::TopK> heaps(n, detail::TopK(k));
    std::vector<std::vector<std::uint32_t>> fresh(n); // neighbours added since the last join
    auto try_add = [&](std::uint32_t i, std::uint32_t j) {
        if (i == j || heaps[i].contains(j)) {
            return false;
        }
        const float dist = detail::sqdist(data.row(i).data(), data.row(j).data(), d);
        if (heaps[i].push(dist, j)) {
            fresh[i].push_back(j);
            return true;
        }
        return false;
    };

    for (const auto& leaf_pts : forest.leaves()) {
        for (std::size_t a = 0; a < leaf_pts.size(); ++a) {
            for (std::size_t b = a + 1; b < leaf_pts.size(); ++b) {
                try_add(leaf_pts[a], leaf_pts[b]);
                try_add(leaf_pts[b], leaf_pts[a]);
            }
        }
    }
    // points in tiny leaves may still lack k neighbours; top up from a seeded random sample
    Rng rng(Rng::derive(seed, 1));
    for (std::uint32_t i = 0; i < n; ++i) {
        for (std::size_t guard = 0; heaps[i].size() < k && guard < 4 * n; ++guard) {
            try_add(i, static_cast<std::uint32_t>(rng.index(n)));
        }
    }

    const std::size_t max_candidates = std::min<std::size_t>(k, 60);
    for (int iter = 0; iter < opts.max_iterations; ++iter) {
        // candidate sets: new forward neighbours plus reverse links, capped
        std::vector<std::vector<std::uint32_t>> news(n), olds(n);
        for (std::uint32_t i = 0; i < n; ++i) {
            auto current = heaps[i].sorted();
            for (const auto& [dist, j] : current) {
                const bool is_new = std::find(fresh[i].begin(), fresh[i].end(), j) != fresh[i].end();
                auto& target = is_new ? news : olds;
                if (target[i].size() < max_candidates) {
                    target[i].push_back(j);
                }
                if (target[j].size() < max_candidates) {
                    target[j].push_back(i);
                }
            }
            fresh[i].clear();
        }
        std::size_t updates = 0;
        for (std::uint32_t v = 0; v < n; ++v) {
            auto& nw = news[v];
            std::sort(nw.begin(), nw.end());
            nw.erase(std::unique(nw.begin(), nw.end()), nw.end());
            auto& od = olds[v];
            std::sort(od.begin(), od.end());
            od.erase(std::unique(od.begin(), od.end()), od.end());
            for (std::size_t a = 0; a < nw.size(); ++a) {
                for (std::size_t b = a + 1; b < nw.size(); ++b) {
                    updates += try_add(nw[a], nw[b]);
                    updates += try_add(nw[b], nw[a]);
                }
                for (auto o : od) {
                    updates += try_add(nw[a], o);
                    updates += try_add(o, nw[a]);
                }
            }
        }
        if (static_cast<double>(updates) < opts.delta * static_cast<double>(n * k)) {
            break;
        }
    }

    NeighborList out{k, std::vector<std::uint32_t>(n * k), std::vector<float>(n * k)};
    for (std::size_t i = 0; i < n; ++i) {
        detail::store(out, i, heaps[i].sorted());
    }
    return out;
}

/**
 * Approximate query against a reference set with a precomputed neighbour graph: forest
 * candidates seed a greedy search that repeatedly expands the graph neighbours of the
 * current best k until the result stops changing.
 */
inline NeighborList approx_knn_query(const Matrix<float>& reference, const RpForest& forest,
                                     const NeighborList& reference_graph, const Matrix<float>& queries,
                                     std::size_t k, int threads = 1) {
    if (k == 0 || reference.rows() < k) {
        throw InvalidArgument("approx_knn_query: reference has fewer than k points");
    }
    const std::size_t n = queries.rows();
    const std::size_t d = reference.cols();
    NeighborList out{k, std::vector<std::uint32_t>(n * k), std::vector<float>(n * k)};
    detail::parallel_for(n, threads, [&](std::size_t qi) {
        const float* q = queries.row(qi).data();
        detail::TopK top(k);
        std::vector<char> seen(reference.rows(), 0);
        auto visit = [&](std::uint32_t j) {
            if (seen[j]) {
                return false;
            }
            seen[j] = 1;
            return top.push(detail::sqdist(q, reference.row(j).data(), d), j);
        };
        for (auto j : forest.candidates(q)) {
            visit(j);
        }
        for (std::uint32_t j = 0; top.size() < k && j < reference.rows(); ++j) {
            visit(j);
        }
        for (int iter = 0; iter < 32; ++iter) {
            bool changed = false;
            for (const auto& [dist, j] : top.sorted()) {
                for (std::size_t r = 0; r < reference_graph.k; ++r) {
                    changed |= visit(reference_graph.index(j, r));
                }
            }
            if (!changed) {
                break;
            }
        }
        detail::store(out, qi, top.sorted());
    });
    return out;
}

} // namespace symbolkit::knn

#endif
