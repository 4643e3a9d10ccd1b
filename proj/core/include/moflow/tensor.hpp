#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "moflow/errors.hpp"

namespace moflow {

std::size_t shape_size(const std::vector<std::size_t>& shape);
std::string shape_str(const std::vector<std::size_t>& shape);

// Dense row-major double tensor. All model data lives in these.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
    static Tensor scalar(double v);
    static Tensor from(std::vector<std::size_t> shape, std::vector<double> data);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t extent(std::size_t axis) const;
    std::size_t size() const { return data_.size(); }
    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at2(std::size_t i, std::size_t j) {
        return data_[i * shape_[1] + j];
    }
    double at2(std::size_t i, std::size_t j) const {
        return data_[i * shape_[1] + j];
    }
    double& at3(std::size_t i, std::size_t j, std::size_t l) {
        return data_[(i * shape_[1] + j) * shape_[2] + l];
    }
    double at3(std::size_t i, std::size_t j, std::size_t l) const {
        return data_[(i * shape_[1] + j) * shape_[2] + l];
    }
    double& at4(std::size_t i, std::size_t j, std::size_t l, std::size_t m) {
        return data_[((i * shape_[1] + j) * shape_[2] + l) * shape_[3] + m];
    }
    double at4(std::size_t i, std::size_t j, std::size_t l, std::size_t m) const {
        return data_[((i * shape_[1] + j) * shape_[2] + l) * shape_[3] + m];
    }

    Tensor reshaped(std::vector<std::size_t> shape) const;
    void fill(double v);
    double item() const;  // requires size() == 1
    bool all_finite() const;

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

}  // namespace moflow
