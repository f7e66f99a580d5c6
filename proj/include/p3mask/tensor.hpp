#pragma once

// Dense row-major tensor of 64-bit floats. This is the value type of the
// autodiff graph; it is deliberately minimal (shape vector plus flat storage)
// and performs no arithmetic itself beyond indexing.

#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace p3mask {

inline std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape, double fill = 0.0)
        : shape_(std::move(shape)) {
        data_.assign(checked_size(shape_), fill);
    }

    Tensor(std::vector<int> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != checked_size(shape_)) {
            throw std::invalid_argument("tensor data size " + std::to_string(data_.size()) +
                                        " does not match shape " + shape_str(shape_));
        }
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    /// 2-D accessor for [rows, cols] tensors.
    double& at2(int r, int c) {
        return data_[static_cast<std::size_t>(r) * shape_[1] + c];
    }
    double at2(int r, int c) const {
        return data_[static_cast<std::size_t>(r) * shape_[1] + c];
    }

    /// 3-D accessor for channel-first [C, H, W] tensors.
    double& at3(int c, int y, int x) {
        return data_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
    }
    double at3(int c, int y, int x) const {
        return data_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
    }

    /// Value of a single-element tensor.
    double item() const {
        if (data_.size() != 1) {
            throw std::invalid_argument("item() on tensor of shape " + shape_str(shape_));
        }
        return data_[0];
    }

    void fill(double v) { data_.assign(data_.size(), v); }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    static std::size_t checked_size(const std::vector<int>& shape) {
        if (shape.empty()) {
            throw std::invalid_argument("tensor shape must have at least one dimension");
        }
        std::size_t n = 1;
        for (int d : shape) {
            if (d <= 0) {
                throw std::invalid_argument("tensor shape " + shape_str(shape) +
                                            " has a non-positive dimension");
            }
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

    std::vector<int> shape_;
    std::vector<double> data_;
};

} // namespace p3mask
