#include "moflow/tensor.hpp"

#include <cmath>

namespace moflow {

std::size_t shape_size(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

std::string shape_str(const std::vector<std::size_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    for (std::size_t e : shape_) {
        if (e == 0) throw DimensionError("tensor extent must be >= 1, got " + shape_str(shape_));
    }
}

Tensor Tensor::scalar(double v) {
    Tensor t({1});
    t.data_[0] = v;
    return t;
}

Tensor Tensor::from(std::vector<std::size_t> shape, std::vector<double> data) {
    if (shape_size(shape) != data.size()) {
        throw DimensionError("data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    return t;
}

std::size_t Tensor::extent(std::size_t axis) const {
    if (axis >= shape_.size()) throw DimensionError("axis out of range");
    return shape_[axis];
}

Tensor Tensor::reshaped(std::vector<std::size_t> shape) const {
    if (shape_size(shape) != size()) {
        throw DimensionError("reshape " + shape_str(shape_) + " -> " + shape_str(shape));
    }
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
}

void Tensor::fill(double v) {
    for (double& x : data_) x = v;
}

double Tensor::item() const {
    if (size() != 1) throw DimensionError("item() on tensor of size " + std::to_string(size()));
    return data_[0];
}

bool Tensor::all_finite() const {
    for (double x : data_) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

}  // namespace moflow
