#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "dcglr/error.hpp"

namespace dcglr {

// Dense row-major array of doubles. Immutable by convention once it enters
// the tape; plain value semantics everywhere else.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<size_t>(numel_of(shape_)), 0.0);
    }
    Tensor(std::vector<int> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<long long>(data_.size()) != numel_of(shape_))
            throw DimensionError("tensor data length does not match shape");
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }
    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int> shape, double v) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = v;
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    long long numel() const { return static_cast<long long>(data_.size()); }
    int rows() const { return shape_.size() >= 1 ? shape_[0] : 0; }
    int cols() const { return shape_.size() >= 2 ? shape_[1] : 1; }
    bool is_scalar() const { return numel() == 1; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](size_t i) { return data_[i]; }
    double operator[](size_t i) const { return data_[i]; }
    double& at(int r, int c) { return data_[static_cast<size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return data_[static_cast<size_t>(r) * cols() + c]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::string shape_str() const {
        std::string s = "[";
        for (size_t i = 0; i < shape_.size(); ++i)
            s += (i ? "x" : "") + std::to_string(shape_[i]);
        return s + "]";
    }

private:
    static long long numel_of(const std::vector<int>& shape) {
        long long n = 1;
        for (int d : shape) {
            if (d <= 0) throw DimensionError("tensor dimensions must be positive");
            n *= d;
        }
        return n;
    }

    std::vector<int> shape_;
    std::vector<double> data_;
};

}  // namespace dcglr
