#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "stereopose/rng.hpp"

namespace stereopose {

// Dense row-major tensor of doubles. Storage is shared (shallow copies view
// the same buffer); use clone() for a deep copy. All training-time math in
// this library runs in double precision, weight files are float32 on disk.
class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        std::size_t n = count(shape_);
        data_ = std::make_shared<std::vector<double>>(n, 0.0);
    }

    Tensor(std::vector<int> shape, double fill) : Tensor(std::move(shape)) {
        std::fill(data_->begin(), data_->end(), fill);
    }

    Tensor(std::vector<int> shape, std::vector<double> values) : shape_(std::move(shape)) {
        if (values.size() != count(shape_))
            throw std::invalid_argument("Tensor: value count does not match shape");
        data_ = std::make_shared<std::vector<double>>(std::move(values));
    }

    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

    static std::size_t count(const std::vector<int>& shape) {
        std::size_t n = 1;
        for (int d : shape) {
            if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
            n *= std::size_t(d);
        }
        return n;
    }

    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_.at(std::size_t(i)); }
    int rank() const { return int(shape_.size()); }
    std::size_t size() const { return data_ ? data_->size() : 0; }
    bool empty() const { return size() == 0; }

    double* data() { return data_->data(); }
    const double* data() const { return data_->data(); }
    double& operator[](std::size_t i) { return (*data_)[i]; }
    double operator[](std::size_t i) const { return (*data_)[i]; }

    double& at(std::initializer_list<int> idx) { return (*data_)[offset(idx)]; }
    double at(std::initializer_list<int> idx) const { return (*data_)[offset(idx)]; }

    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = std::make_shared<std::vector<double>>(*data_);
        return t;
    }

    // Same storage, new shape (element count must match).
    Tensor reshaped(std::vector<int> shape) const {
        if (count(shape) != size())
            throw std::invalid_argument("Tensor::reshaped: element count mismatch");
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = data_;
        return t;
    }

    void fill(double v) { std::fill(data_->begin(), data_->end(), v); }

    void fill_normal(Rng& rng, double mean, double stddev) {
        for (double& v : *data_) v = rng.normal(mean, stddev);
    }

    void fill_uniform(Rng& rng, double lo, double hi) {
        for (double& v : *data_) v = rng.uniform(lo, hi);
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double v : *data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    double sum() const { return std::accumulate(data_->begin(), data_->end(), 0.0); }

    double max_abs() const {
        double m = 0.0;
        for (double v : *data_) m = std::max(m, std::abs(v));
        return m;
    }

    std::string shape_str() const {
        std::string s = "[";
        for (std::size_t i = 0; i < shape_.size(); ++i)
            s += (i ? "," : "") + std::to_string(shape_[i]);
        return s + "]";
    }

  private:
    std::size_t offset(std::initializer_list<int> idx) const {
        if (idx.size() != shape_.size())
            throw std::invalid_argument("Tensor::at: index rank mismatch");
        std::size_t off = 0;
        auto it = idx.begin();
        for (std::size_t a = 0; a < shape_.size(); ++a, ++it)
            off = off * std::size_t(shape_[a]) + std::size_t(*it);
        return off;
    }

    std::vector<int> shape_;
    std::shared_ptr<std::vector<double>> data_;
};

} // namespace stereopose
