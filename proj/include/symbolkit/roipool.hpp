#ifndef SYMBOLKIT_ROIPOOL_HPP
#define SYMBOLKIT_ROIPOOL_HPP

#include "bundle.hpp"
#include "detail/matrix.hpp"
#include "error.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

/**
 * @file roipool.hpp
 *
 * @brief ROI max-pooling onto a fixed 3x3 grid, activity-vector assembly and the mean-activity filter.
 */

namespace symbolkit::roipool {

inline constexpr int grid_side = 3;
inline constexpr int grid_positions = grid_side * grid_side;

/// Half-open box of feature-map cells.
struct FeatureBox {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

    int width() const { return x1 - x0; }
    int height() const { return y1 - y0; }
    bool operator==(const FeatureBox&) const = default;
};

namespace detail {

// Grows [lo, hi) to at least `target` cells inside [0, limit), keeping it centred where possible.
inline void widen_axis(int& lo, int& hi, int target, int limit) {
    target = std::min(target, limit);
    const int need = target - (hi - lo);
    if (need <= 0) {
        return;
    }
    lo -= need / 2;
    hi += need - need / 2;
    if (lo < 0) {
        hi -= lo;
        lo = 0;
    }
    if (hi > limit) {
        lo -= hi - limit;
        hi = limit;
    }
}

} // namespace detail

/**
 * Maps a pixel box to feature-map cells.
 *
 * The box is scaled by (feature / input), outer-rounded (floor on mins, ceil on maxes),
 * clamped to the map and then widened to 3x3 cells wherever the map is large enough.
 */
inline FeatureBox project_roi(const tensorio::PixelBox& bbox, int input_width, int input_height, int feature_width,
                              int feature_height) {
    if (input_width <= 0 || input_height <= 0 || feature_width < 1 || feature_height < 1) {
        throw InvalidArgument("project_roi: non-positive input or feature size");
    }
    if (!(bbox.x0 < bbox.x1 && bbox.y0 < bbox.y1) || bbox.x0 < 0 || bbox.y0 < 0 || bbox.x1 > input_width ||
        bbox.y1 > input_height) {
        throw InvalidArgument("project_roi: bbox is degenerate or outside the input image");
    }
    auto lo = [](double v, int f, int in) { return static_cast<int>(std::floor(v * f / in)); };
    auto hi = [](double v, int f, int in) { return static_cast<int>(std::ceil(v * f / in)); };
    FeatureBox out{lo(bbox.x0, feature_width, input_width), lo(bbox.y0, feature_height, input_height),
                   hi(bbox.x1, feature_width, input_width), hi(bbox.y1, feature_height, input_height)};
    out.x0 = std::clamp(out.x0, 0, feature_width - 1);
    out.y0 = std::clamp(out.y0, 0, feature_height - 1);
    out.x1 = std::clamp(out.x1, out.x0 + 1, feature_width);
    out.y1 = std::clamp(out.y1, out.y0 + 1, feature_height);
    detail::widen_axis(out.x0, out.x1, grid_side, feature_width);
    detail::widen_axis(out.y0, out.y1, grid_side, feature_height);
    return out;
}

inline FeatureBox project_roi(const tensorio::PixelBox& bbox, const tensorio::LayerInfo& layer) {
    return project_roi(bbox, layer.input_width, layer.input_height, layer.feature_width, layer.feature_height);
}

/// Half-open cell range of bin `i` (0..2) along an axis of `extent` cells.
/// Bins overlap when extent is not a multiple of 3 and duplicate cells when extent < 3.
inline std::pair<int, int> bin_range(int i, int extent) {
    return {(i * extent) / grid_side, ((i + 1) * extent + grid_side - 1) / grid_side};
}

/// 3x3xC max-pooled response of one ROI; `grid[p * channels + c]` with p = row * 3 + col.
struct PooledRoi {
    std::string roi_id;
    int layer_id = 0;
    int channels = 0;
    std::vector<float> grid;

    float at(int position, int c) const { return grid[static_cast<std::size_t>(position) * channels + c]; }
    bool operator==(const PooledRoi&) const = default;
};

inline PooledRoi roi_pool(const tensorio::ActivationTensor& tensor, const FeatureBox& box, std::string roi_id = {}) {
    if (box.x0 < 0 || box.y0 < 0 || box.x1 > tensor.width || box.y1 > tensor.height || box.width() < 1 ||
        box.height() < 1) {
        throw InvalidArgument("roi_pool: box [" + std::to_string(box.x0) + "," + std::to_string(box.y0) + "," +
                              std::to_string(box.x1) + "," + std::to_string(box.y1) + ") outside " +
                              std::to_string(tensor.width) + "x" + std::to_string(tensor.height) + " map");
    }
    PooledRoi out;
    out.roi_id = std::move(roi_id);
    out.layer_id = tensor.layer_id;
    out.channels = tensor.channels;
    out.grid.assign(static_cast<std::size_t>(grid_positions) * tensor.channels, 0.0f);
    for (int i = 0; i < grid_side; ++i) {
        const auto [r0, r1] = bin_range(i, box.height());
        for (int j = 0; j < grid_side; ++j) {
            const auto [c0, c1] = bin_range(j, box.width());
            const int p = i * grid_side + j;
            for (int c = 0; c < tensor.channels; ++c) {
                float m = -std::numeric_limits<float>::infinity();
                for (int y = box.y0 + r0; y < box.y0 + r1; ++y) {
                    for (int x = box.x0 + c0; x < box.x0 + c1; ++x) {
                        m = std::max(m, tensor.at(c, y, x));
                    }
                }
                out.grid[static_cast<std::size_t>(p) * tensor.channels + c] = m;
            }
        }
    }
    return out;
}

/// C-dim vector of pooled activations at one grid position (1..9, row-major).
struct ActivityVector {
    std::string roi_id;
    int layer_id = 0;
    int position = 1;
    std::vector<float> components;

    bool operator==(const ActivityVector&) const = default;
};

inline std::array<ActivityVector, grid_positions> assemble_vectors(const PooledRoi& pooled) {
    std::array<ActivityVector, grid_positions> out;
    const auto c = static_cast<std::size_t>(pooled.channels);
    for (int p = 0; p < grid_positions; ++p) {
        auto& v = out[static_cast<std::size_t>(p)];
        v.roi_id = pooled.roi_id;
        v.layer_id = pooled.layer_id;
        v.position = p + 1;
        const auto begin = pooled.grid.begin() + static_cast<std::ptrdiff_t>(p * c);
        v.components.assign(begin, begin + static_cast<std::ptrdiff_t>(c));
    }
    return out;
}

/// Inverse of assemble_vectors.
inline PooledRoi grid_from_vectors(std::span<const ActivityVector> vectors) {
    if (vectors.size() != grid_positions) {
        throw InvalidArgument("grid_from_vectors: need exactly 9 vectors");
    }
    PooledRoi out;
    out.roi_id = vectors[0].roi_id;
    out.layer_id = vectors[0].layer_id;
    out.channels = static_cast<int>(vectors[0].components.size());
    out.grid.assign(static_cast<std::size_t>(grid_positions) * out.channels, 0.0f);
    for (const auto& v : vectors) {
        if (v.position < 1 || v.position > grid_positions ||
            v.components.size() != static_cast<std::size_t>(out.channels)) {
            throw InvalidArgument("grid_from_vectors: inconsistent vector");
        }
        std::copy(v.components.begin(), v.components.end(),
                  out.grid.begin() + static_cast<std::ptrdiff_t>((v.position - 1) * out.channels));
    }
    return out;
}

/// True iff at least one component reaches the layer mean (the vector is kept).
inline bool passes_mean_filter(std::span<const float> components, double layer_mean) {
    return std::any_of(components.begin(), components.end(),
                       [&](float v) { return static_cast<double>(v) >= layer_mean; });
}

struct FilterResult {
    std::vector<std::size_t> retained; ///< Row indices of the kept vectors, ascending.
    double layer_mean = 0.0;
};

/// Mean over every component of every row.
inline double layer_mean_activity(const Matrix<float>& vectors) {
    if (vectors.rows() == 0 || vectors.cols() == 0) {
        throw InvalidArgument("mean_activity_filter: no vectors");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < vectors.rows(); ++i) {
        double s = 0.0;
        for (float v : vectors.row(i)) {
            s += v;
        }
        total += s;
    }
    return total / (static_cast<double>(vectors.rows()) * static_cast<double>(vectors.cols()));
}

/// Applies a frozen layer mean (test time).
inline std::vector<std::size_t> apply_mean_filter(const Matrix<float>& vectors, double layer_mean) {
    std::vector<std::size_t> kept;
    for (std::size_t i = 0; i < vectors.rows(); ++i) {
        if (passes_mean_filter(vectors.row(i), layer_mean)) {
            kept.push_back(i);
        }
    }
    return kept;
}

/**
 * Removes vectors whose components all fall strictly below the layer-wide mean activity.
 * The mean is computed over the given (training) vectors and returned for reuse at test time.
 */
inline FilterResult mean_activity_filter(const Matrix<float>& vectors) {
    FilterResult out;
    out.layer_mean = layer_mean_activity(vectors);
    out.retained = apply_mean_filter(vectors, out.layer_mean);
    if (out.retained.empty()) {
        throw Error("mean_activity_filter: all vectors filtered");
    }
    return out;
}

inline std::pair<std::vector<ActivityVector>, double> mean_activity_filter(std::span<const ActivityVector> vectors) {
    Matrix<float> m;
    for (const auto& v : vectors) {
        if (!m.empty() && v.components.size() != m.cols()) {
            throw InvalidArgument("mean_activity_filter: vectors differ in dimension");
        }
        m.append_row(v.components);
    }
    const auto result = mean_activity_filter(m);
    std::vector<ActivityVector> kept;
    kept.reserve(result.retained.size());
    for (auto i : result.retained) {
        kept.push_back(vectors[i]);
    }
    return {std::move(kept), result.layer_mean};
}

} // namespace symbolkit::roipool

#endif
