#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace partcat {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape);

/// Dense row-major array. Every dimension is positive; scalars are shape {1}.
template <typename T>
class Array {
public:
    using value_type = T;

    Array() = default;

    explicit Array(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
        validate_shape();
        data_.assign(shape_size(shape_), fill);
    }

    Array(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        validate_shape();
        if (data_.size() != shape_size(shape_)) {
            throw ShapeError("array data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_string(shape_));
        }
    }

    static Array scalar(T v) { return Array(Shape{1}, std::vector<T>{v}); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> span() { return data_; }
    std::span<const T> span() const { return data_; }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    const T& at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
    T& at(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    const T& at(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    T item() const {
        if (data_.size() != 1) throw ShapeError("item() on array of shape " + shape_string(shape_));
        return data_[0];
    }

    /// Same data, new shape of equal size.
    Array reshaped(Shape shape) const {
        return Array(std::move(shape), data_);
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        for (T v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    template <typename U>
    Array<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return Array<U>(shape_, std::move(out));
    }

    friend bool operator==(const Array& a, const Array& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    void validate_shape() const {
        if (shape_.empty()) throw ShapeError("array rank must be at least 1");
        for (std::size_t d : shape_) {
            if (d == 0) throw ShapeError("zero-sized dimension in shape " + shape_string(shape_));
        }
    }

    Shape shape_;
    std::vector<T> data_;
};

/// Throws NonFiniteError naming `what` if any entry is NaN or infinite.
template <typename T>
void check_finite(const Array<T>& a, const std::string& what) {
    if (!a.all_finite()) throw NonFiniteError("non-finite value in " + what);
}

template <typename T>
T max_abs_diff(const Array<T>& a, const Array<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("max_abs_diff shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
    }
    T m{0};
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, static_cast<T>(std::abs(a[i] - b[i])));
    return m;
}

}  // namespace partcat
