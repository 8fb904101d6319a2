#ifndef SYMBOLKIT_EMBED_HPP
#define SYMBOLKIT_EMBED_HPP

#include "detail/binary.hpp"
#include "detail/matrix.hpp"
#include "detail/rng.hpp"
#include "error.hpp"
#include "knn.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

/**
 * @file embed.hpp
 *
 * @brief Neighbour-graph embedding of activity vectors into 3-D (the UMAP algorithm).
 *
 * Fitting builds a k-NN graph, converts it to a fuzzy simplicial set (per-point connectivity
 * offset rho and bandwidth sigma, then fuzzy union), and lays the graph out in 3-D by
 * edge-sampled SGD on the fuzzy cross-entropy with negative sampling. Out-of-sample points are
 * placed at the weighted mean of their training neighbours and refined against the frozen layout.
 */

namespace symbolkit::embed {

inline constexpr int n_components = 3;

struct Params {
    int n_neighbors = 50;
    double min_dist = 0.1;
    double spread = 1.0;
    double local_connectivity = 1.0;
    double learning_rate = 1.0;
    double negative_sample_rate = 5.0;
    double repulsion_strength = 1.0;
    int n_epochs = -1;          ///< -1: 500 when N <= 10000, else 200
    int transform_epochs = -1;  ///< -1: 100 when N <= 10000, else 30
    std::size_t exact_knn_limit = 20000; ///< brute-force neighbours up to this many points
    int threads = 1;

    bool operator==(const Params&) const = default;
};

inline int resolve_epochs(int requested, std::size_t n) {
    if (requested > 0) {
        return requested;
    }
    return n <= 10000 ? 500 : 200;
}

inline int resolve_transform_epochs(int requested, std::size_t n) {
    if (requested > 0) {
        return requested;
    }
    return n <= 10000 ? 100 : 30;
}

/**
 * Fits a and b of the low-dimensional similarity 1 / (1 + a d^(2b)) to the target curve
 * (1 for d < min_dist, exp(-(d - min_dist) / spread) beyond) on 300 points in [0, 3 * spread].
 * Levenberg-Marquardt on the squared error.
 */
inline std::pair<double, double> find_ab(double spread, double min_dist) {
    constexpr int samples = 300;
    std::vector<double> xs(samples), ys(samples);
    for (int i = 0; i < samples; ++i) {
        xs[i] = 3.0 * spread * i / (samples - 1);
        ys[i] = xs[i] < min_dist ? 1.0 : std::exp(-(xs[i] - min_dist) / spread);
    }
    auto residuals = [&](double a, double b, std::vector<double>* ja, std::vector<double>* jb) {
        double sse = 0.0;
        for (int i = 0; i < samples; ++i) {
            const double x = xs[i];
            const double xp = x > 0 ? std::pow(x, 2.0 * b) : 0.0;
            const double den = 1.0 + a * xp;
            const double r = 1.0 / den - ys[i];
            sse += r * r;
            if (ja) {
                (*ja)[i] = -xp / (den * den);
                (*jb)[i] = x > 0 ? -a * xp * 2.0 * std::log(x) / (den * den) : 0.0;
            }
        }
        return sse;
    };
    double a = 1.0, b = 1.0, lambda = 1e-3;
    std::vector<double> ja(samples), jb(samples);
    double sse = residuals(a, b, &ja, &jb);
    for (int iter = 0; iter < 500; ++iter) {
        double h11 = 0, h12 = 0, h22 = 0, g1 = 0, g2 = 0;
        for (int i = 0; i < samples; ++i) {
            const double x = xs[i];
            const double xp = x > 0 ? std::pow(x, 2.0 * b) : 0.0;
            const double r = 1.0 / (1.0 + a * xp) - ys[i];
            h11 += ja[i] * ja[i];
            h12 += ja[i] * jb[i];
            h22 += jb[i] * jb[i];
            g1 += ja[i] * r;
            g2 += jb[i] * r;
        }
        bool improved = false;
        for (int tries = 0; tries < 20 && !improved; ++tries) {
            const double m11 = h11 * (1 + lambda), m22 = h22 * (1 + lambda);
            const double det = m11 * m22 - h12 * h12;
            if (det == 0) {
                lambda *= 10;
                continue;
            }
            const double da = -(m22 * g1 - h12 * g2) / det;
            const double db = -(-h12 * g1 + m11 * g2) / det;
            const double na = a + da, nb = b + db;
            if (na > 0 && nb > 0) {
                const double nsse = residuals(na, nb, nullptr, nullptr);
                if (nsse < sse) {
                    const bool converged = std::abs(sse - nsse) < 1e-15 * std::max(1.0, sse);
                    a = na;
                    b = nb;
                    sse = residuals(a, b, &ja, &jb);
                    lambda = std::max(lambda / 10, 1e-12);
                    improved = true;
                    if (converged) {
                        return {a, b};
                    }
                    break;
                }
            }
            lambda *= 10;
        }
        if (!improved) {
            break;
        }
    }
    return {a, b};
}

/**
 * Per-point connectivity offset rho (distance to the nearest neighbour, scaled by
 * local_connectivity) and bandwidth sigma, found by bisection so that
 * sum_j exp(-max(0, d_j - rho) / sigma) = log2(k).
 */
struct SmoothKnn {
    std::vector<double> rho;
    std::vector<double> sigma;
};

inline SmoothKnn smooth_knn_dist(const knn::NeighborList& nn, double local_connectivity) {
    constexpr double min_k_dist_scale = 1e-3;
    constexpr double tolerance = 1e-5;
    const std::size_t n = nn.size();
    const std::size_t k = nn.k;
    const double target = std::log2(static_cast<double>(k));
    SmoothKnn out{std::vector<double>(n, 0.0), std::vector<double>(n, 1.0)};
    double global_mean = 0.0;
    for (float d : nn.distances) {
        global_mean += d;
    }
    global_mean /= static_cast<double>(std::max<std::size_t>(1, nn.distances.size()));

    for (std::size_t i = 0; i < n; ++i) {
        // rho: interpolate between the floor(lc)-th and ceil(lc)-th non-zero distances
        std::vector<double> nonzero;
        for (std::size_t r = 0; r < k; ++r) {
            if (nn.distance(i, r) > 0) {
                nonzero.push_back(nn.distance(i, r));
            }
        }
        double rho = 0.0;
        if (local_connectivity > 0 && !nonzero.empty()) {
            const auto idx = static_cast<std::size_t>(std::floor(local_connectivity));
            const double frac = local_connectivity - std::floor(local_connectivity);
            if (nonzero.size() >= idx && idx > 0) {
                rho = nonzero[idx - 1];
                if (frac > tolerance && idx < nonzero.size()) {
                    rho += frac * (nonzero[idx] - nonzero[idx - 1]);
                }
            } else if (idx == 0) {
                rho = frac * nonzero[0];
            } else {
                rho = nonzero.back();
            }
        }
        double lo = 0.0, hi = std::numeric_limits<double>::infinity(), mid = 1.0;
        for (int iter = 0; iter < 64; ++iter) {
            double psum = 0.0;
            for (std::size_t r = 0; r < k; ++r) {
                const double d = nn.distance(i, r) - rho;
                psum += d > 0 ? std::exp(-d / mid) : 1.0;
            }
            if (std::abs(psum - target) < tolerance) {
                break;
            }
            if (psum > target) {
                hi = mid;
                mid = (lo + hi) / 2.0;
            } else {
                lo = mid;
                mid = std::isinf(hi) ? mid * 2 : (lo + hi) / 2.0;
            }
        }
        double mean_i = 0.0;
        for (std::size_t r = 0; r < k; ++r) {
            mean_i += nn.distance(i, r);
        }
        mean_i /= static_cast<double>(k);
        if (rho > 0.0) {
            mid = std::max(mid, min_k_dist_scale * mean_i);
        } else {
            mid = std::max(mid, min_k_dist_scale * global_mean);
        }
        out.rho[i] = rho;
        out.sigma[i] = mid;
    }
    return out;
}

/// Directed weighted edge of the symmetric fuzzy graph.
struct Edge {
    std::uint32_t head = 0;
    std::uint32_t tail = 0;
    double weight = 0.0;
};

/// Fuzzy union w = a + b - a*b of the directed membership strengths; both directions emitted,
/// sorted by (head, tail).
inline std::vector<Edge> fuzzy_simplicial_set(const knn::NeighborList& nn, const SmoothKnn& smooth) {
    const std::size_t n = nn.size();
    std::unordered_map<std::uint64_t, double> directed;
    directed.reserve(n * nn.k * 2);
    auto key = [](std::uint64_t i, std::uint64_t j) { return (i << 32) | j; };
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t r = 0; r < nn.k; ++r) {
            const double d = nn.distance(i, r) - smooth.rho[i];
            const double w = d <= 0 ? 1.0 : std::exp(-d / smooth.sigma[i]);
            directed[key(i, nn.index(i, r))] = w;
        }
    }
    std::vector<Edge> edges;
    edges.reserve(directed.size() * 2);
    for (const auto& [k, w] : directed) {
        const auto i = static_cast<std::uint32_t>(k >> 32);
        const auto j = static_cast<std::uint32_t>(k & 0xFFFFFFFFu);
        auto rev = directed.find(key(j, i));
        const double wr = rev == directed.end() ? 0.0 : rev->second;
        const double sym = w + wr - w * wr;
        edges.push_back({i, j, sym});
        if (rev == directed.end()) {
            edges.push_back({j, i, sym});
        }
    }
    std::sort(edges.begin(), edges.end(),
              [](const Edge& x, const Edge& y) { return std::tie(x.head, x.tail) < std::tie(y.head, y.tail); });
    return edges;
}

namespace detail {

inline double clip(double v) { return std::clamp(v, -4.0, 4.0); }

/// Top principal components of the data, scaled so the largest |coordinate| is 10.
inline Matrix<float> pca_init(const Matrix<float>& data, Rng& rng) {
    const std::size_t n = data.rows(), d = data.cols();
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            mean[static_cast<Eigen::Index>(j)] += data(i, j);
        }
    }
    mean /= static_cast<double>(n);
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
    Eigen::VectorXd x(static_cast<Eigen::Index>(d));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            x[static_cast<Eigen::Index>(j)] = data(i, j) - mean[static_cast<Eigen::Index>(j)];
        }
        cov.selfadjointView<Eigen::Lower>().rankUpdate(x);
    }
    cov = cov.selfadjointView<Eigen::Lower>();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    Matrix<float> out(n, n_components, 0.0f);
    const auto dims = std::min<std::size_t>(n_components, d);
    double max_abs = 0.0;
    std::vector<double> scores(n * n_components, 0.0);
    for (std::size_t c = 0; c < dims; ++c) {
        Eigen::VectorXd v = eig.eigenvectors().col(static_cast<Eigen::Index>(d - 1 - c));
        // fix the sign so the largest-magnitude loading is positive
        Eigen::Index arg = 0;
        v.cwiseAbs().maxCoeff(&arg);
        if (v[arg] < 0) {
            v = -v;
        }
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                s += (data(i, j) - mean[static_cast<Eigen::Index>(j)]) * v[static_cast<Eigen::Index>(j)];
            }
            scores[i * n_components + c] = s;
            max_abs = std::max(max_abs, std::abs(s));
        }
    }
    const double scale = max_abs > 0 ? 10.0 / max_abs : 1.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < n_components; ++c) {
            out(i, c) = static_cast<float>(scores[i * n_components + c] * scale + rng.normal(0.0, 1e-4));
        }
    }
    return out;
}

inline double attract_coeff(double d2, double a, double b) {
    if (d2 <= 0.0) {
        return 0.0;
    }
    return -2.0 * a * b * std::pow(d2, b - 1.0) / (a * std::pow(d2, b) + 1.0);
}

inline double repel_coeff(double d2, double a, double b, double gamma) {
    if (d2 <= 0.0) {
        return 0.0;
    }
    return 2.0 * gamma * b / ((0.001 + d2) * (a * std::pow(d2, b) + 1.0));
}

/**
 * Edge-sampled SGD. Each edge fires every `max_w / w` epochs; each firing is followed by
 * negative samples drawn uniformly from `tail_coords`. With `move_tail` false the tails are frozen.
 */
inline void optimize_layout(Matrix<float>& head_coords, const Matrix<float>* tail_coords, const std::vector<Edge>& edges,
                            int n_epochs, double a, double b, double gamma, double initial_alpha,
                            double negative_sample_rate, Rng& rng) {
    const bool move_tail = tail_coords == nullptr;
    const Matrix<float>& tails = move_tail ? head_coords : *tail_coords;
    const std::size_t n_tail = tails.rows();
    double max_w = 0.0;
    for (const auto& e : edges) {
        max_w = std::max(max_w, e.weight);
    }
    std::vector<double> eps(edges.size(), -1.0);
    for (std::size_t e = 0; e < edges.size(); ++e) {
        if (edges[e].weight >= max_w / n_epochs && edges[e].weight > 0) {
            eps[e] = max_w / edges[e].weight;
        }
    }
    std::vector<double> eps_neg(edges.size()), next_sample(edges.size()), next_neg(edges.size());
    for (std::size_t e = 0; e < edges.size(); ++e) {
        eps_neg[e] = eps[e] / negative_sample_rate;
        next_sample[e] = eps[e];
        next_neg[e] = eps_neg[e];
    }
    float* writable_tails = move_tail ? head_coords.data().data() : nullptr;
    const float* tail_data = move_tail ? head_coords.data().data() : tails.data().data();
    for (int epoch = 0; epoch < n_epochs; ++epoch) {
        const double alpha = initial_alpha * (1.0 - static_cast<double>(epoch) / n_epochs);
        for (std::size_t e = 0; e < edges.size(); ++e) {
            if (eps[e] <= 0 || next_sample[e] > epoch) {
                continue;
            }
            auto cur = head_coords.row(edges[e].head);
            const float* oth = tail_data + static_cast<std::size_t>(edges[e].tail) * n_components;
            double d2 = 0.0;
            for (int c = 0; c < n_components; ++c) {
                const double diff = static_cast<double>(cur[c]) - oth[c];
                d2 += diff * diff;
            }
            const double ga = attract_coeff(d2, a, b);
            for (int c = 0; c < n_components; ++c) {
                const double g = clip(ga * (static_cast<double>(cur[c]) - oth[c]));
                cur[c] = static_cast<float>(cur[c] + g * alpha);
                if (move_tail) {
                    float& t = writable_tails[static_cast<std::size_t>(edges[e].tail) * n_components + c];
                    t = static_cast<float>(t - g * alpha);
                }
            }
            next_sample[e] += eps[e];

            const auto n_neg = static_cast<int>((epoch - next_neg[e]) / eps_neg[e]);
            for (int p = 0; p < n_neg; ++p) {
                const float* neg = tail_data + static_cast<std::size_t>(rng.index(n_tail)) * n_components;
                double nd2 = 0.0;
                for (int c = 0; c < n_components; ++c) {
                    const double diff = static_cast<double>(cur[c]) - neg[c];
                    nd2 += diff * diff;
                }
                // coincident points exert no force
                const double gr = repel_coeff(nd2, a, b, gamma);
                if (gr <= 0.0) {
                    continue;
                }
                for (int c = 0; c < n_components; ++c) {
                    const double g = clip(gr * (static_cast<double>(cur[c]) - neg[c]));
                    cur[c] = static_cast<float>(cur[c] + g * alpha);
                }
            }
            next_neg[e] += n_neg * eps_neg[e];
        }
    }
}

/// Deduplicates rows exactly; returns unique rows and the unique index of every input row.
inline std::pair<Matrix<float>, std::vector<std::uint32_t>> unique_rows(const Matrix<float>& data) {
    std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> buckets;
    Matrix<float> uniq(0, data.cols());
    std::vector<std::uint32_t> map(data.rows());
    for (std::size_t i = 0; i < data.rows(); ++i) {
        const auto row = data.row(i);
        const std::string_view bytes(reinterpret_cast<const char*>(row.data()), row.size_bytes());
        const auto h = symbolkit::detail::fnv1a(bytes);
        auto& bucket = buckets[h];
        std::uint32_t found = std::numeric_limits<std::uint32_t>::max();
        for (auto u : bucket) {
            if (std::equal(row.begin(), row.end(), uniq.row(u).begin())) {
                found = u;
                break;
            }
        }
        if (found == std::numeric_limits<std::uint32_t>::max()) {
            found = static_cast<std::uint32_t>(uniq.rows());
            uniq.append_row(row);
            bucket.push_back(found);
        }
        map[i] = found;
    }
    return {std::move(uniq), std::move(map)};
}

} // namespace detail

/**
 * Fitted embedding of one layer. Stores the deduplicated training vectors and their 3-D
 * layout; for large training sets also the neighbour graph used for approximate queries.
 */
struct EmbeddingModel {
    int layer_id = 0;
    Params params;
    std::uint64_t seed = 0;
    double a = 0.0;
    double b = 0.0;
    Matrix<float> training_points;  ///< unique training vectors, N x D
    Matrix<float> low_dim_coords;   ///< N x 3
    knn::NeighborList training_graph; ///< only filled when N exceeds params.exact_knn_limit

    std::size_t dim() const { return training_points.cols(); }
    bool uses_approximate_search() const { return training_points.rows() > params.exact_knn_limit; }
};

struct FitResult {
    EmbeddingModel model;
    Matrix<float> coords; ///< one 3-D row per input vector, duplicates share coordinates
};

inline knn::NeighborList training_neighbors(const Matrix<float>& points, const Params& params, std::uint64_t seed) {
    const auto k = static_cast<std::size_t>(params.n_neighbors);
    if (points.rows() <= params.exact_knn_limit) {
        return knn::exact_knn(points, k, params.threads);
    }
    return knn::approx_knn(points, k, Rng::derive(seed, 0x6b6e6e));
}

inline knn::RpForest query_forest(const EmbeddingModel& model) {
    return knn::RpForest(model.training_points, knn::default_tree_count(model.training_points.rows()),
                         std::max<std::size_t>(10, static_cast<std::size_t>(model.params.n_neighbors)),
                         Rng::derive(model.seed, 0x666f72));
}

/// Fits the 3-D layout of the given vectors. Deterministic for a fixed seed.
inline FitResult fit_embedding(const Matrix<float>& vectors, const Params& params, std::uint64_t seed,
                               int layer_id = 0) {
    if (params.n_neighbors < 2) {
        throw InvalidArgument("fit_embedding: n_neighbors must be at least 2");
    }
    if (vectors.rows() <= static_cast<std::size_t>(params.n_neighbors)) {
        throw InvalidArgument("fit_embedding: " + std::to_string(vectors.rows()) + " vectors but n_neighbors=" +
                              std::to_string(params.n_neighbors) +
                              "; lower embed.n_neighbors below the number of vectors");
    }
    auto [uniq, row_map] = detail::unique_rows(vectors);
    if (uniq.rows() <= static_cast<std::size_t>(params.n_neighbors)) {
        throw InvalidArgument("fit_embedding: only " + std::to_string(uniq.rows()) +
                              " distinct vectors for n_neighbors=" + std::to_string(params.n_neighbors) +
                              "; lower embed.n_neighbors");
    }
    FitResult out;
    auto& model = out.model;
    model.layer_id = layer_id;
    model.params = params;
    model.seed = seed;
    std::tie(model.a, model.b) = find_ab(params.spread, params.min_dist);

    const auto nn = training_neighbors(uniq, params, seed);
    const auto smooth = smooth_knn_dist(nn, params.local_connectivity);
    const auto edges = fuzzy_simplicial_set(nn, smooth);

    Rng rng(seed);
    auto coords = detail::pca_init(uniq, rng);
    const int epochs = resolve_epochs(params.n_epochs, uniq.rows());
    detail::optimize_layout(coords, nullptr, edges, epochs, model.a, model.b, params.repulsion_strength,
                            params.learning_rate, params.negative_sample_rate, rng);
    if (uniq.rows() > params.exact_knn_limit) {
        model.training_graph = nn;
    }
    model.training_points = std::move(uniq);
    model.low_dim_coords = std::move(coords);

    out.coords = Matrix<float>(vectors.rows(), n_components);
    for (std::size_t i = 0; i < vectors.rows(); ++i) {
        const auto src = model.low_dim_coords.row(row_map[i]);
        std::copy(src.begin(), src.end(), out.coords.row(i).begin());
    }
    return out;
}

/**
 * Places new vectors into a fitted embedding. Each point starts at the membership-weighted
 * mean of its n_neighbors training neighbours and is refined by SGD against the frozen
 * training layout. Every point draws from its own stream seeded by its bytes, so the result
 * does not depend on batch composition.
 */
inline Matrix<float> transform(const EmbeddingModel& model, const Matrix<float>& vectors) {
    if (vectors.rows() == 0) {
        return Matrix<float>(0, n_components);
    }
    if (vectors.cols() != model.dim()) {
        throw InvalidArgument("transform: vectors have " + std::to_string(vectors.cols()) +
                              " components, model expects " + std::to_string(model.dim()));
    }
    const auto k = static_cast<std::size_t>(model.params.n_neighbors);
    knn::NeighborList nn;
    if (model.uses_approximate_search()) {
        const auto forest = query_forest(model);
        nn = knn::approx_knn_query(model.training_points, forest, model.training_graph, vectors, k,
                                   model.params.threads);
    } else {
        nn = knn::exact_knn_query(model.training_points, vectors, k, model.params.threads);
    }
    // connectivity offset is local_connectivity - 1 for queries, i.e. none at the default
    const auto smooth = smooth_knn_dist(nn, std::max(0.0, model.params.local_connectivity - 1.0));
    const int epochs = resolve_transform_epochs(model.params.transform_epochs, model.training_points.rows());

    Matrix<float> out(vectors.rows(), n_components);
    knn::detail::parallel_for(vectors.rows(), model.params.threads, [&](std::size_t i) {
        std::vector<Edge> edges(k);
        double total = 0.0;
        for (std::size_t r = 0; r < k; ++r) {
            const double d = nn.distance(i, r) - smooth.rho[i];
            const double w = d <= 0 ? 1.0 : std::exp(-d / smooth.sigma[i]);
            edges[r] = {0, nn.index(i, r), w};
            total += w;
        }
        Matrix<float> point(1, n_components, 0.0f);
        for (std::size_t r = 0; r < k; ++r) {
            const auto y = model.low_dim_coords.row(edges[r].tail);
            for (int c = 0; c < n_components; ++c) {
                point(0, c) += static_cast<float>(edges[r].weight / total * y[c]);
            }
        }
        const auto row = vectors.row(i);
        const std::string_view bytes(reinterpret_cast<const char*>(row.data()), row.size_bytes());
        Rng rng(Rng::derive(model.seed, symbolkit::detail::fnv1a(bytes)));
        detail::optimize_layout(point, &model.low_dim_coords, edges, epochs, model.a, model.b,
                                model.params.repulsion_strength, model.params.learning_rate / 4.0,
                                model.params.negative_sample_rate, rng);
        std::copy(point.row(0).begin(), point.row(0).end(), out.row(i).begin());
    });
    return out;
}

/**
 * Trustworthiness of a low-dimensional layout: 1 - 2/(n k (2n - 3k - 1)) * sum of
 * (high-dim rank - k) over low-dim neighbours that are not high-dim neighbours.
 */
inline double trustworthiness(const Matrix<float>& high, const Matrix<float>& low, std::size_t k) {
    const std::size_t n = high.rows();
    if (low.rows() != n) {
        throw InvalidArgument("trustworthiness: point counts differ");
    }
    if (k == 0 || k >= n || 2 * n < 3 * k + 1) {
        throw InvalidArgument("trustworthiness: need 0 < k < N and 2N > 3k + 1");
    }
    std::vector<std::size_t> rank(n);
    std::vector<std::pair<double, std::size_t>> order(n);
    double penalty = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            order[j] = {j == i ? -1.0 : squared_distance(high.row(i), high.row(j)), j};
        }
        std::sort(order.begin(), order.end());
        for (std::size_t r = 0; r < n; ++r) {
            rank[order[r].second] = r; // self gets rank 0
        }
        for (std::size_t j = 0; j < n; ++j) {
            order[j] = {j == i ? -1.0 : squared_distance(low.row(i), low.row(j)), j};
        }
        std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k + 1), order.end());
        for (std::size_t r = 1; r <= k; ++r) {
            const auto rr = rank[order[r].second];
            if (rr > k) {
                penalty += static_cast<double>(rr - k);
            }
        }
    }
    const double nn = static_cast<double>(n), kk = static_cast<double>(k);
    return 1.0 - 2.0 / (nn * kk * (2.0 * nn - 3.0 * kk - 1.0)) * penalty;
}

} // namespace symbolkit::embed

#endif
