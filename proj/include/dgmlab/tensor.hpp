#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dgmlab/errors.hpp"

namespace dgmlab {

// Dense tensor of 64-bit floats, row-major. Rank is dynamic; the library
// mostly uses rank 1 (vectors) and rank 2 (matrices, batches as columns).
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        values_.assign(numel_of(shape_), 0.0);
    }

    Tensor(std::vector<int> shape, std::vector<double> values)
        : shape_(std::move(shape)), values_(std::move(values)) {
        if (values_.size() != numel_of(shape_))
            throw ShapeMismatch("tensor values length " + std::to_string(values_.size()) +
                                " does not match shape product " +
                                std::to_string(numel_of(shape_)));
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, double v) {
        Tensor t(std::move(shape));
        for (double& x : t.values_) x = v;
        return t;
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor vector(std::vector<double> v) {
        int n = static_cast<int>(v.size());
        return Tensor({n}, std::move(v));
    }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    size_t size() const { return values_.size(); }

    // 2-D accessors; a rank-1 tensor behaves as a single column.
    int rows() const { return shape_.empty() ? 0 : shape_[0]; }
    int cols() const { return rank() >= 2 ? shape_[1] : 1; }

    double& operator[](size_t i) { return values_[i]; }
    double operator[](size_t i) const { return values_[i]; }
    double& at(int r, int c) { return values_[static_cast<size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return values_[static_cast<size_t>(r) * cols() + c]; }

    double* data() { return values_.data(); }
    const double* data() const { return values_.data(); }
    std::vector<double>& values() { return values_; }
    const std::vector<double>& values() const { return values_; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double v : values_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    bool bit_equal(const Tensor& o) const {
        if (shape_ != o.shape_) return false;
        for (size_t i = 0; i < values_.size(); ++i) {
            uint64_t a, b;
            static_assert(sizeof(double) == sizeof(uint64_t));
            __builtin_memcpy(&a, &values_[i], 8);
            __builtin_memcpy(&b, &o.values_[i], 8);
            if (a != b) return false;
        }
        return true;
    }

    Tensor reshaped(std::vector<int> shape) const {
        if (numel_of(shape) != values_.size())
            throw ShapeMismatch("reshape to incompatible size");
        return Tensor(std::move(shape), values_);
    }

    // Treat a rank-1 vector as a single-column matrix.
    Tensor as_column() const {
        if (rank() == 2) return *this;
        return reshaped({rows(), 1});
    }

    std::string shape_string() const {
        std::string s = "(";
        for (size_t i = 0; i < shape_.size(); ++i) {
            if (i) s += "x";
            s += std::to_string(shape_[i]);
        }
        return s + ")";
    }

    static size_t numel_of(const std::vector<int>& shape) {
        size_t n = 1;
        for (int d : shape) {
            if (d <= 0) throw ShapeMismatch("non-positive dimension in shape");
            n *= static_cast<size_t>(d);
        }
        return n;
    }

private:
    std::vector<int> shape_;
    std::vector<double> values_;
};

// Packs a list of equally sized vectors into a {dim, count} matrix, one
// vector per column.
Tensor columns_from(const std::vector<Tensor>& vecs);

// Extracts column j of a {dim, n} matrix as a rank-1 tensor.
Tensor column_of(const Tensor& m, int j);

double mean_squared_difference(const Tensor& a, const Tensor& b);
double sum_squared_difference(const Tensor& a, const Tensor& b);

}  // namespace dgmlab
