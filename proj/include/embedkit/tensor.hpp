#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "embedkit/error.hpp"

namespace embedkit {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (std::int64_t d : shape) n *= d;
    return n;
}

inline std::string shape_string(const Shape& shape) {
    std::ostringstream oss;
    oss << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) oss << "x";
        oss << shape[i];
    }
    oss << "]";
    return oss.str();
}

// Dense row-major n-d array. Rank 0 (empty shape) is a scalar with one
// element. Immutable by convention once handed to the tape.
template <typename T>
class TensorT {
public:
    TensorT() : shape_{}, data_(1, T(0)) {}

    explicit TensorT(Shape shape) : shape_(std::move(shape)) {
        validate_shape();
        data_.assign(static_cast<std::size_t>(shape_numel(shape_)), T(0));
    }

    TensorT(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        validate_shape();
        if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_))
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_string(shape_));
    }

    static TensorT zeros(Shape shape) { return TensorT(std::move(shape)); }

    static TensorT full(Shape shape, T v) {
        TensorT t(std::move(shape));
        for (T& x : t.data_) x = v;
        return t;
    }

    static TensorT scalar(T v) { return TensorT({}, {v}); }

    static TensorT identity(std::int64_t n) {
        TensorT t({n, n});
        for (std::int64_t i = 0; i < n; ++i) t.data_[static_cast<std::size_t>(i * n + i)] = T(1);
        return t;
    }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    std::int64_t dim(int axis) const { return shape_[static_cast<std::size_t>(axis)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

    std::span<const T> data() const { return data_; }
    std::span<T> data() { return data_; }

    T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    T& at(std::int64_t r, std::int64_t c) { return data_[static_cast<std::size_t>(r * shape_[1] + c)]; }
    const T& at(std::int64_t r, std::int64_t c) const {
        return data_[static_cast<std::size_t>(r * shape_[1] + c)];
    }

    // Single-element extraction; used for loss scalars.
    T item() const {
        if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape_));
        return data_[0];
    }

    bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (T x : data_)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }

    template <typename U>
    TensorT<U> cast() const {
        std::vector<U> out(data_.size());
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return TensorT<U>(shape_, std::move(out));
    }

private:
    void validate_shape() const {
        for (std::int64_t d : shape_)
            if (d <= 0)
                throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape_));
    }

    Shape shape_;
    std::vector<T> data_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

}  // namespace embedkit
