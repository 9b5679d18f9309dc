#pragma once

#include <Eigen/Core>

#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "metairnet/error.hpp"

namespace metairnet {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
    os << ']';
    return os.str();
}

template <typename S>
using RowMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using Vector = Eigen::Matrix<S, Eigen::Dynamic, 1>;

/// Dense row-major n-d array. The last dimension is contiguous, so an image
/// batch is stored N, C, H, W.
template <typename S>
struct Tensor {
    using Scalar = S;
    using Array = Eigen::Array<S, Eigen::Dynamic, 1>;

    Shape shape;
    Array data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(Array::Zero(numel(shape))) {}
    Tensor(Shape s, Array values) : shape(std::move(s)), data(std::move(values)) {
        if (data.size() != numel(shape))
            throw ShapeError("tensor data size " + std::to_string(data.size()) +
                             " does not match shape " + to_string(shape));
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor constant(Shape s, S v) {
        Tensor t(std::move(s));
        t.data.setConstant(v);
        return t;
    }

    Index size() const { return data.size(); }
    int rank() const { return static_cast<int>(shape.size()); }
    Index dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }
    bool empty() const { return data.size() == 0; }

    S* ptr() { return data.data(); }
    const S* ptr() const { return data.data(); }

    /// View as [dim(0), size / dim(0)].
    Eigen::Map<RowMatrix<S>> matrix() { return {data.data(), dim(0), size() / dim(0)}; }
    Eigen::Map<const RowMatrix<S>> matrix() const { return {data.data(), dim(0), size() / dim(0)}; }

    template <typename T>
    Tensor<T> cast() const {
        return Tensor<T>(shape, data.template cast<T>());
    }

    bool all_finite() const { return data.isFinite().all(); }
};

template <typename S>
inline void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
    if (a.shape != b.shape)
        throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape) + " vs " +
                         to_string(b.shape));
}

}  // namespace metairnet
