#ifndef SYMBOLKIT_CLUSTER_HPP
#define SYMBOLKIT_CLUSTER_HPP

#include "detail/matrix.hpp"
#include "detail/rng.hpp"
#include "error.hpp"
#include "knn.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

/**
 * @file cluster.hpp
 *
 * @brief Symbol discovery in the embedded space: k-means++/Lloyd, the spherical-Gaussian BIC,
 * and X-means (BIC-driven center splitting up to a cap).
 */

namespace symbolkit::cluster {

/// Cluster centers of one layer; the row index of a center is its symbol id.
struct SymbolCodebook {
    int layer_id = 0;
    Matrix<double> centers;
    std::size_t k_max = 1000;
    double layer_mean = 0.0;
    std::string embedding_ref;

    std::size_t size() const { return centers.rows(); }
    std::size_t dim() const { return centers.cols(); }
};

struct LloydOptions {
    int max_iterations = 100;
    double tolerance = 1e-4; ///< stop when no center moves farther than this
    int threads = 1;
};

/// Nearest center by Euclidean distance, lowest index on ties.
template <typename T>
std::size_t nearest_center(const Matrix<double>& centers, std::span<const T> point) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < centers.rows(); ++c) {
        const double d = squared_distance(point, centers.row(c));
        if (d < best_d) {
            best_d = d;
            best = c;
        }
    }
    return best;
}

template <typename T>
std::size_t assign_symbol(const SymbolCodebook& codebook, std::span<const T> point) {
    if (codebook.size() == 0) {
        throw InvalidArgument("assign_symbol: empty codebook");
    }
    if (point.size() != codebook.dim()) {
        throw InvalidArgument("assign_symbol: point dimension " + std::to_string(point.size()) + " != " +
                              std::to_string(codebook.dim()));
    }
    return nearest_center(codebook.centers, point);
}

template <typename T>
    requires(!std::is_const_v<T>)
std::size_t assign_symbol(const SymbolCodebook& codebook, std::span<T> point) {
    return assign_symbol(codebook, std::span<const T>(point));
}

inline std::vector<std::uint32_t> assign_all(const Matrix<double>& centers, const Matrix<float>& points, int threads = 1) {
    std::vector<std::uint32_t> out(points.rows());
    knn::detail::parallel_for(points.rows(), threads, [&](std::size_t i) {
        out[i] = static_cast<std::uint32_t>(nearest_center(centers, points.row(i)));
    });
    return out;
}

inline std::vector<std::uint32_t> assign_all(const SymbolCodebook& codebook, const Matrix<float>& points, int threads = 1) {
    if (!points.empty() && points.cols() != codebook.dim()) {
        throw InvalidArgument("assign_symbol: point dimension mismatch");
    }
    return assign_all(codebook.centers, points, threads);
}

struct LloydResult {
    Matrix<double> centers;
    std::vector<std::uint32_t> labels;
    int iterations = 0;
    bool converged = false;
};

/**
 * Lloyd iterations from the given centers over the listed rows. An empty cluster is re-seeded
 * at the point farthest from its current center; clusters that cannot be re-seeded (no point
 * lies off its center) and duplicate centers are dropped at the end.
 */
inline LloydResult lloyd(const Matrix<float>& points, std::span<const std::size_t> rows, Matrix<double> centers,
                         const LloydOptions& opts) {
    const std::size_t n = rows.size();
    const std::size_t d = points.cols();
    LloydResult out;
    out.labels.assign(n, 0);
    std::vector<double> dist(n);
    for (int iter = 0; iter < opts.max_iterations; ++iter) {
        const std::size_t k = centers.rows();
        knn::detail::parallel_for(n, opts.threads, [&](std::size_t i) {
            const auto p = points.row(rows[i]);
            const auto c = nearest_center(centers, p);
            out.labels[i] = static_cast<std::uint32_t>(c);
            dist[i] = squared_distance(p, centers.row(c));
        });
        Matrix<double> sums(k, d, 0.0);
        std::vector<std::size_t> counts(k, 0);
        for (std::size_t i = 0; i < n; ++i) {
            const auto p = points.row(rows[i]);
            auto s = sums.row(out.labels[i]);
            for (std::size_t j = 0; j < d; ++j) {
                s[j] += p[j];
            }
            ++counts[out.labels[i]];
        }
        double max_shift = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
            auto target = centers.row(c);
            if (counts[c] == 0) {
                // farthest point from its own center, lowest index on ties
                std::size_t far = n;
                double far_d = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    if (dist[i] > far_d) {
                        far_d = dist[i];
                        far = i;
                    }
                }
                if (far == n) {
                    continue;
                }
                dist[far] = 0.0;
                const auto p = points.row(rows[far]);
                for (std::size_t j = 0; j < d; ++j) {
                    target[j] = p[j];
                }
                max_shift = std::numeric_limits<double>::infinity();
                continue;
            }
            double shift = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double v = sums(c, j) / static_cast<double>(counts[c]);
                shift += (v - target[j]) * (v - target[j]);
                target[j] = v;
            }
            max_shift = std::max(max_shift, std::sqrt(shift));
        }
        out.iterations = iter + 1;
        if (max_shift < opts.tolerance) {
            out.converged = true;
            break;
        }
    }
    // final assignment against the final centers, then drop empty and duplicate centers
    const std::size_t k = centers.rows();
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
        out.labels[i] = static_cast<std::uint32_t>(nearest_center(centers, points.row(rows[i])));
        ++counts[out.labels[i]];
    }
    std::vector<std::size_t> keep;
    for (std::size_t c = 0; c < k; ++c) {
        if (counts[c] == 0) {
            continue;
        }
        const bool dup = std::any_of(keep.begin(), keep.end(), [&](std::size_t o) {
            return std::equal(centers.row(c).begin(), centers.row(c).end(), centers.row(o).begin());
        });
        if (!dup) {
            keep.push_back(c);
        }
    }
    if (keep.size() != k) {
        centers = centers.select_rows(keep);
        for (std::size_t i = 0; i < n; ++i) {
            out.labels[i] = static_cast<std::uint32_t>(nearest_center(centers, points.row(rows[i])));
        }
    }
    out.centers = std::move(centers);
    return out;
}

inline std::vector<std::size_t> all_rows(std::size_t n) {
    std::vector<std::size_t> rows(n);
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    return rows;
}

/// k-means++ seeding over the listed rows. Stops early when every remaining point coincides with a center.
inline Matrix<double> kmeanspp_seed(const Matrix<float>& points, std::span<const std::size_t> rows, std::size_t k, Rng& rng) {
    const std::size_t n = rows.size();
    const std::size_t d = points.cols();
    Matrix<double> centers(0, d);
    std::vector<double> best(n, std::numeric_limits<double>::infinity());
    std::size_t pick = static_cast<std::size_t>(rng.index(n));
    for (std::size_t c = 0; c < k; ++c) {
        std::vector<double> row(points.row(rows[pick]).begin(), points.row(rows[pick]).end());
        centers.append_row(row);
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            best[i] = std::min(best[i], squared_distance(points.row(rows[i]), centers.row(c)));
            total += best[i];
        }
        if (c + 1 == k) {
            break;
        }
        if (total <= 0.0) {
            break;
        }
        double u = rng.uniform() * total;
        pick = n;
        for (std::size_t i = 0; i < n; ++i) {
            if (best[i] <= 0.0) {
                continue;
            }
            u -= best[i];
            pick = i;
            if (u < 0.0) {
                break;
            }
        }
    }
    return centers;
}

inline SymbolCodebook make_codebook(Matrix<double> centers, std::size_t k_max) {
    SymbolCodebook cb;
    cb.centers = std::move(centers);
    cb.k_max = k_max;
    return cb;
}

/**
 * Fixed-k clustering: k-means++ seeding then Lloyd to tolerance. When the data holds fewer
 * than k distinct points the codebook has one center per distinct point.
 */
inline SymbolCodebook kmeans_fit(const Matrix<float>& points, std::size_t k, std::uint64_t seed,
                                 const LloydOptions& opts = {}) {
    if (k == 0) {
        throw InvalidArgument("kmeans_fit: k must be positive");
    }
    if (points.rows() < k) {
        throw InvalidArgument("kmeans_fit: " + std::to_string(points.rows()) + " points for k=" + std::to_string(k));
    }
    Rng rng(seed);
    const auto rows = all_rows(points.rows());
    auto result = lloyd(points, rows, kmeanspp_seed(points, rows, k, rng), opts);
    return make_codebook(std::move(result.centers), k);
}

/**
 * Spherical-Gaussian BIC with one pooled variance (higher is better):
 *
 *     sigma^2 = sum ||x - mu(x)||^2 / (N - K)
 *     L = sum_n [ R_n log R_n - R_n log N - R_n/2 log(2 pi) - R_n d/2 log sigma^2 - (R_n - K)/2 ]
 *     BIC = L - p/2 log N,  p = (K - 1) + d K + 1
 *
 * Points are assigned to their nearest center. sigma^2 is floored at 1e-12.
 */
inline double bic(const Matrix<float>& points, std::span<const std::size_t> rows, const Matrix<double>& centers) {
    const std::size_t n = rows.size();
    const std::size_t k = centers.rows();
    if (k == 0 || n <= k) {
        throw InvalidArgument("bic: need more points (" + std::to_string(n) + ") than centers (" + std::to_string(k) + ")");
    }
    const double d = static_cast<double>(points.cols());
    std::vector<std::size_t> counts(k, 0);
    double sse = 0.0;
    for (auto r : rows) {
        const auto p = points.row(r);
        const auto c = nearest_center(centers, p);
        ++counts[c];
        sse += squared_distance(p, centers.row(c));
    }
    const double N = static_cast<double>(n), K = static_cast<double>(k);
    const double variance = std::max(sse / (N - K), 1e-12);
    double loglik = 0.0;
    for (auto cnt : counts) {
        if (cnt == 0) {
            continue;
        }
        const double rn = static_cast<double>(cnt);
        loglik += rn * std::log(rn) - rn * std::log(N) - rn * 0.5 * std::log(2.0 * std::numbers::pi) -
                  rn * d * 0.5 * std::log(variance) - (rn - K) * 0.5;
    }
    const double params = (K - 1.0) + d * K + 1.0;
    return loglik - params * 0.5 * std::log(N);
}

inline double bic(const Matrix<float>& points, const Matrix<double>& centers) {
    const auto rows = all_rows(points.rows());
    return bic(points, rows, centers);
}

struct XMeansOptions {
    std::size_t k_init = 10;
    std::size_t k_max = 1000;
    LloydOptions lloyd;
};

namespace detail {

// Two child centers at +-0.5 sigma along the principal axis of the cluster.
inline Matrix<double> split_centers(const Matrix<float>& points, std::span<const std::size_t> rows,
                                    std::span<const double> center) {
    const auto d = static_cast<Eigen::Index>(points.cols());
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
    Eigen::VectorXd mu(d);
    for (Eigen::Index j = 0; j < d; ++j) {
        mu[j] = center[static_cast<std::size_t>(j)];
    }
    Eigen::VectorXd x(d);
    for (auto r : rows) {
        for (Eigen::Index j = 0; j < d; ++j) {
            x[j] = points(r, static_cast<std::size_t>(j)) - mu[j];
        }
        cov.noalias() += x * x.transpose();
    }
    cov /= static_cast<double>(rows.size());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    Eigen::VectorXd axis = eig.eigenvectors().col(d - 1);
    Eigen::Index arg = 0;
    axis.cwiseAbs().maxCoeff(&arg);
    if (axis[arg] < 0) {
        axis = -axis;
    }
    const double sigma = std::sqrt(std::max(eig.eigenvalues()[d - 1], 0.0));
    Matrix<double> out(2, static_cast<std::size_t>(d));
    for (Eigen::Index j = 0; j < d; ++j) {
        out(0, static_cast<std::size_t>(j)) = mu[j] - 0.5 * sigma * axis[j];
        out(1, static_cast<std::size_t>(j)) = mu[j] + 0.5 * sigma * axis[j];
    }
    return out;
}

} // namespace detail

/**
 * X-means. Starts from kmeans_fit(k_init); then alternates
 *
 * - improve-structure: every cluster is split in two along its principal axis and refined
 *   by a local 2-means; the split is kept iff the children's BIC on the cluster's points
 *   beats the parent's;
 * - improve-params: global Lloyd from the resulting centers;
 *
 * until no split is kept or the codebook reaches k_max. When more splits qualify than the
 * cap allows, the largest BIC gains win (lowest index on ties).
 */
inline SymbolCodebook xmeans_fit(const Matrix<float>& points, std::uint64_t seed, const XMeansOptions& opts = {}) {
    if (opts.k_init == 0) {
        throw InvalidArgument("xmeans_fit: k_init must be positive");
    }
    if (opts.k_max < opts.k_init) {
        throw InvalidArgument("xmeans_fit: k_max < k_init");
    }
    if (points.rows() < opts.k_init) {
        throw InvalidArgument("xmeans_fit: " + std::to_string(points.rows()) + " points for k_init=" +
                              std::to_string(opts.k_init));
    }
    auto codebook = kmeans_fit(points, opts.k_init, seed, opts.lloyd);
    codebook.k_max = opts.k_max;
    const auto rows = all_rows(points.rows());
    Matrix<double> centers = std::move(codebook.centers);

    while (centers.rows() < opts.k_max) {
        const std::size_t k = centers.rows();
        const auto labels = assign_all(centers, points, opts.lloyd.threads);
        std::vector<std::vector<std::size_t>> members(k);
        for (std::size_t i = 0; i < labels.size(); ++i) {
            members[labels[i]].push_back(i);
        }
        struct Proposal {
            std::size_t cluster;
            double gain;
            Matrix<double> children;
        };
        std::vector<Proposal> proposals(k);
        std::vector<char> valid(k, 0);
        LloydOptions local_opts = opts.lloyd;
        local_opts.threads = 1;
        knn::detail::parallel_for(k, opts.lloyd.threads, [&](std::size_t c) {
            const auto& mem = members[c];
            if (mem.size() <= 2) {
                return;
            }
            Matrix<double> parent(1, centers.cols());
            std::copy(centers.row(c).begin(), centers.row(c).end(), parent.row(0).begin());
            const double parent_bic = bic(points, mem, parent);
            auto local = lloyd(points, mem, detail::split_centers(points, mem, centers.row(c)), local_opts);
            if (local.centers.rows() != 2) {
                return;
            }
            const double child_bic = bic(points, mem, local.centers);
            if (child_bic > parent_bic) {
                proposals[c] = {c, child_bic - parent_bic, std::move(local.centers)};
                valid[c] = 1;
            }
        });
        std::vector<std::size_t> order;
        for (std::size_t c = 0; c < k; ++c) {
            if (valid[c]) {
                order.push_back(c);
            }
        }
        if (order.empty()) {
            break;
        }
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t x, std::size_t y) { return proposals[x].gain > proposals[y].gain; });
        const std::size_t budget = opts.k_max - k;
        if (order.size() > budget) {
            order.resize(budget);
        }
        std::vector<char> split(k, 0);
        for (auto c : order) {
            split[c] = 1;
        }
        Matrix<double> next(0, centers.cols());
        for (std::size_t c = 0; c < k; ++c) {
            if (split[c]) {
                next.append_row(proposals[c].children.row(0));
                next.append_row(proposals[c].children.row(1));
            } else {
                next.append_row(centers.row(c));
            }
        }
        auto improved = lloyd(points, rows, std::move(next), opts.lloyd);
        if (improved.centers.rows() <= k) {
            centers = std::move(improved.centers);
            break;
        }
        centers = std::move(improved.centers);
    }
    codebook.centers = std::move(centers);
    return codebook;
}

} // namespace symbolkit::cluster

#endif
