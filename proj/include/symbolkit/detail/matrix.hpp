#ifndef SYMBOLKIT_DETAIL_MATRIX_HPP
#define SYMBOLKIT_DETAIL_MATRIX_HPP

#include <algorithm>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

namespace symbolkit {

/// Dense row-major matrix; one observation per row.
template <typename T>
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, T fill = T{}) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {}

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    bool empty() const { return rows_ == 0; }

    std::span<T> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
    std::span<const T> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }

    T& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    const T& operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    std::vector<T>& data() { return data_; }
    const std::vector<T>& data() const { return data_; }

    void append_row(std::span<const T> values) {
        if (rows_ == 0 && cols_ == 0) {
            cols_ = values.size();
        }
        data_.insert(data_.end(), values.begin(), values.end());
        ++rows_;
    }

    /// Copy of the listed rows, in the given order.
    Matrix select_rows(std::span<const std::size_t> indices) const {
        Matrix out(indices.size(), cols_);
        for (std::size_t k = 0; k < indices.size(); ++k) {
            const auto src = row(indices[k]);
            std::copy(src.begin(), src.end(), out.row(k).begin());
        }
        return out;
    }

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

/// Squared Euclidean distance of two equally sized ranges, accumulated in double.
template <typename A, typename B>
double squared_distance(const A& a, const B& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        s += d * d;
    }
    return s;
}

} // namespace symbolkit

#endif
