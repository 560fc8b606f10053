#include "bdet/tensor.hpp"

#include <cmath>
#include <sstream>

#include "bdet/errors.hpp"

namespace bdet {

std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int e : shape) {
        if (e <= 0) throw DataError("tensor extent must be positive, got " + shape_to_string(shape));
        n *= static_cast<std::size_t>(e);
    }
    return n;
}

std::string shape_to_string(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}

Tensor::Tensor(std::vector<int> shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
    if (data_.size() != shape_numel(shape_)) {
        throw DataError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                        shape_to_string(shape_));
    }
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
}

double Tensor::item() const {
    if (numel() != 1) throw DataError("item() requires a scalar tensor, shape is " + shape_str());
    return data_[0];
}

bool Tensor::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

void require_finite(const Tensor& t, const std::string& what) {
    if (!t.all_finite()) throw NumericError("non-finite values in " + what);
}

}  // namespace bdet
