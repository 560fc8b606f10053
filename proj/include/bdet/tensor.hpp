#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace bdet {

// Dense row-major tensor of 64-bit floats. Shapes are small vectors of
// extents; a scalar is represented as shape {1}. Values are expected to stay
// finite; ops that consume tensors check and throw NumericError otherwise.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape);
    Tensor(std::vector<int> shape, std::vector<double> values);

    static Tensor scalar(double v);
    static Tensor zeros(std::vector<int> shape);
    static Tensor full(std::vector<int> shape, double v);

    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    int rank() const { return static_cast<int>(shape_.size()); }
    std::size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // 3-d [C,H,W] and 4-d [K,C,H,W] accessors for the conv paths.
    double& at3(int c, int y, int x) {
        return data_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
    }
    double at3(int c, int y, int x) const {
        return data_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
    }
    double& at4(int k, int c, int y, int x) {
        return data_[((static_cast<std::size_t>(k) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
    }
    double at4(int k, int c, int y, int x) const {
        return data_[((static_cast<std::size_t>(k) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
    }

    double item() const;  // requires numel() == 1

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    bool all_finite() const;

    std::string shape_str() const;

private:
    std::vector<int> shape_;
    std::vector<double> data_;
};

std::size_t shape_numel(const std::vector<int>& shape);
std::string shape_to_string(const std::vector<int>& shape);

// Throws NumericError naming `what` if any entry is NaN/Inf.
void require_finite(const Tensor& t, const std::string& what);

}  // namespace bdet
