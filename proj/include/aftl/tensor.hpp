#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "aftl/errors.hpp"

namespace aftl {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

/// Dense row-major fp64 array. Carries every value and gradient in the library.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != shape_size(shape_))
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_string(shape_));
    }

    static Tensor vector(std::initializer_list<double> values) {
        return Tensor({values.size()}, std::vector<double>(values));
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
        return Tensor({rows, cols}, std::vector<double>(values));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    double* raw() noexcept { return data_.data(); }
    const double* raw() const noexcept { return data_.data(); }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    double& at(std::size_t r, std::size_t c) { return data_[r * shape_.at(1) + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * shape_.at(1) + c]; }

    /// Leading dimension, i.e. the batch size for batch-first tensors.
    std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
    /// Elements per leading-dimension slice.
    std::size_t row_size() const { return shape_.empty() || shape_[0] == 0 ? 0 : data_.size() / shape_[0]; }

    std::span<const double> row(std::size_t r) const {
        const auto n = row_size();
        return {data_.data() + r * n, n};
    }
    std::span<double> row(std::size_t r) {
        const auto n = row_size();
        return {data_.data() + r * n, n};
    }

    Tensor reshaped(Shape shape) const& {
        Tensor t = *this;
        t.reshape(std::move(shape));
        return t;
    }
    Tensor reshaped(Shape shape) && {
        reshape(std::move(shape));
        return std::move(*this);
    }
    void reshape(Shape shape) {
        if (shape_size(shape) != data_.size())
            throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
        shape_ = std::move(shape);
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    Tensor& operator+=(const Tensor& other) {
        require_same_shape(other, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
        return *this;
    }
    Tensor& operator-=(const Tensor& other) {
        require_same_shape(other, "-=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
        return *this;
    }
    Tensor& operator*=(double s) {
        for (auto& v : data_) v *= s;
        return *this;
    }

    friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
    friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
    friend Tensor operator*(Tensor a, double s) { return a *= s; }
    friend Tensor operator-(Tensor a) { return a *= -1.0; }

    /// Bitwise equality of shape and payload.
    friend bool operator==(const Tensor& a, const Tensor& b) {
        if (a.shape_ != b.shape_) return false;
        return std::equal(a.data_.begin(), a.data_.end(), b.data_.begin(), b.data_.end(),
                          [](double x, double y) { return std::bit_cast<std::uint64_t>(x) ==
                                                          std::bit_cast<std::uint64_t>(y); });
    }

    /// Copies the given leading-dimension rows into a new batch tensor.
    Tensor gather_rows(std::span<const std::size_t> indices) const {
        Shape s = shape_;
        s.at(0) = indices.size();
        Tensor out(std::move(s));
        const auto n = row_size();
        for (std::size_t i = 0; i < indices.size(); ++i) {
            if (indices[i] >= rows()) throw ShapeError("row index out of range");
            std::copy_n(data_.data() + indices[i] * n, n, out.data_.data() + i * n);
        }
        return out;
    }

private:
    void require_same_shape(const Tensor& other, const char* op) const {
        if (shape_ != other.shape_)
            throw ShapeError(std::string("shape mismatch in ") + op + ": " + shape_string(shape_) +
                             " vs " + shape_string(other.shape_));
    }

    Shape shape_;
    std::vector<double> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

/// Stacks same-shaped tensors along a new leading dimension.
inline Tensor stack(std::span<const Tensor> items) {
    if (items.empty()) return Tensor({0});
    Shape s{items.size()};
    s.insert(s.end(), items[0].shape().begin(), items[0].shape().end());
    Tensor out(std::move(s));
    const auto n = items[0].size();
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (items[i].shape() != items[0].shape()) throw ShapeError("stack: ragged inputs");
        std::copy(items[i].data().begin(), items[i].data().end(), out.raw() + i * n);
    }
    return out;
}

}  // namespace aftl
