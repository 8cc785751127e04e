#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "mvit/common.hpp"

namespace mvit {

// Dense row-major double tensor, rank 0..4. All model math runs in double;
// file payloads are float32 (see io.hpp).
class Tensor {
   public:
    Tensor() = default;
    explicit Tensor(std::vector<int64_t> shape)
        : shape_(std::move(shape)), data_(checked_numel(shape_), 0.0) {}

    static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int64_t> shape, double v) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = v;
        return t;
    }
    static Tensor scalar(double v) {
        Tensor t(std::vector<int64_t>{});
        t.data_.assign(1, v);
        return t;
    }
    static Tensor from(std::vector<int64_t> shape, std::vector<double> values) {
        Tensor t;
        t.shape_ = std::move(shape);
        if (static_cast<int64_t>(values.size()) != checked_numel(t.shape_))
            throw ShapeError("Tensor::from: value count does not match shape");
        t.data_ = std::move(values);
        return t;
    }

    const std::vector<int64_t>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    double& at(int64_t i, int64_t j) { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
    double at(int64_t i, int64_t j) const { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
    double& at(int64_t i, int64_t j, int64_t k) {
        return data_[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
    }
    double at(int64_t i, int64_t j, int64_t k) const {
        return data_[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
    }
    double& at(int64_t i, int64_t j, int64_t k, int64_t l) {
        return data_[static_cast<size_t>(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
    }
    double at(int64_t i, int64_t j, int64_t k, int64_t l) const {
        return data_[static_cast<size_t>(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
    }

    double value() const {
        if (numel() != 1) throw ShapeError("Tensor::value: not a scalar");
        return data_[0];
    }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void add_(const Tensor& o) {
        if (!same_shape(o)) throw ShapeError("Tensor::add_: shape mismatch");
        for (size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    }
    void scale_(double s) {
        for (auto& v : data_) v *= s;
    }
    void fill_(double v) {
        for (auto& x : data_) x = v;
    }

    double max_abs() const {
        double m = 0.0;
        for (double v : data_) m = std::max(m, std::fabs(v));
        return m;
    }

    std::string shape_str() const {
        std::string s = "(";
        for (size_t i = 0; i < shape_.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape_[i]);
        }
        return s + ")";
    }

   private:
    static int64_t checked_numel(const std::vector<int64_t>& shape) {
        if (shape.size() > 4) throw ShapeError("Tensor: rank > 4 unsupported");
        int64_t n = 1;
        for (int64_t d : shape) {
            if (d <= 0) throw ShapeError("Tensor: nonpositive dimension");
            n *= d;
        }
        return n;
    }

    std::vector<int64_t> shape_;
    std::vector<double> data_;
};

}  // namespace mvit
