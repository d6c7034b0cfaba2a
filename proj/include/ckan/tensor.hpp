#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "ckan/errors.hpp"

namespace ckan {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

// Dense real-valued N-d array, row-major, float64.
class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(Shape shape)
        : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}

    Tensor(Shape shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_numel(shape_) != data_.size())
            throw DimensionError("Tensor: shape " + shape_str(shape_) + " does not match " +
                                 std::to_string(data_.size()) + " scalars");
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, double v) {
        Tensor t(std::move(shape));
        for (double& x : t.data_) x = v;
        return t;
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_[i]; }
    std::size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // 2-d accessors; most hot loops index flat data directly.
    double& at2(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    double at2(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double x : data_)
            if (!std::isfinite(x)) return false;
        return true;
    }

    double sum_squares() const {
        double s = 0.0;
        for (double x : data_) s += x * x;
        return s;
    }

    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != numel())
            throw DimensionError("Tensor::reshaped: element count mismatch " + shape_str(shape_) +
                                 " -> " + shape_str(shape));
        return Tensor(std::move(shape), data_);
    }

  private:
    Shape shape_;
    std::vector<double> data_;
};

// Complex array as a (re, im) pair of equal-shape real tensors.
class ComplexTensor {
  public:
    ComplexTensor() = default;

    explicit ComplexTensor(Shape shape) : re_(shape), im_(std::move(shape)) {}

    ComplexTensor(Tensor re, Tensor im) : re_(std::move(re)), im_(std::move(im)) {
        if (!re_.same_shape(im_))
            throw DimensionError("ComplexTensor: re " + shape_str(re_.shape()) + " vs im " +
                                 shape_str(im_.shape()));
    }

    const Shape& shape() const { return re_.shape(); }
    std::size_t rank() const { return re_.rank(); }
    std::size_t dim(std::size_t i) const { return re_.dim(i); }
    std::size_t numel() const { return re_.numel(); }

    Tensor& re() { return re_; }
    const Tensor& re() const { return re_; }
    Tensor& im() { return im_; }
    const Tensor& im() const { return im_; }

    bool all_finite() const { return re_.all_finite() && im_.all_finite(); }

    // Frobenius norm squared.
    double energy() const { return re_.sum_squares() + im_.sum_squares(); }

  private:
    Tensor re_;
    Tensor im_;
};

}  // namespace ckan
