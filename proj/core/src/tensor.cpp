#include "randlab/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace randlab {

int64_t Tensor::shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw std::invalid_argument("tensor dims must be positive");
        n *= d;
    }
    return n;
}

Tensor::Tensor(std::vector<int> shape)
    : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), 0.0f) {}

Tensor::Tensor(std::vector<int> shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != static_cast<int64_t>(data_.size())) {
        throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                    " does not match shape " + shape_str());
    }
}

void Tensor::fill(float v) {
    for (auto& x : data_) x = v;
}

bool Tensor::all_finite() const {
    for (float x : data_) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

void Tensor::check_finite(const std::string& what) const {
    if (!all_finite()) throw std::runtime_error("non-finite values in " + what);
}

double Tensor::l2_distance(const Tensor& other) const {
    if (!same_shape(other)) throw std::invalid_argument("l2_distance: shape mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < data_.size(); ++i) {
        const double d = static_cast<double>(data_[i]) - static_cast<double>(other.data_[i]);
        acc += d * d;
    }
    return std::sqrt(acc);
}

double Tensor::linf_distance(const Tensor& other) const {
    if (!same_shape(other)) throw std::invalid_argument("linf_distance: shape mismatch");
    double m = 0.0;
    for (size_t i = 0; i < data_.size(); ++i) {
        const double d = std::abs(static_cast<double>(data_[i]) - static_cast<double>(other.data_[i]));
        if (d > m) m = d;
    }
    return m;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape_.size(); ++i) {
        if (i) os << 'x';
        os << shape_[i];
    }
    os << ']';
    return os.str();
}

Tensor batch_row(const Tensor& batch, int i) {
    if (batch.ndim() < 1) throw std::invalid_argument("batch_row: tensor has no batch dim");
    const int n = batch.dim(0);
    if (i < 0 || i >= n) throw std::out_of_range("batch_row: index out of range");
    std::vector<int> row_shape(batch.shape().begin() + 1, batch.shape().end());
    if (row_shape.empty()) row_shape = {1};
    const int64_t stride = Tensor::shape_numel(row_shape);
    std::vector<float> out(static_cast<size_t>(stride));
    const float* src = batch.data() + static_cast<int64_t>(i) * stride;
    std::copy(src, src + stride, out.begin());
    return Tensor(std::move(row_shape), std::move(out));
}

void set_batch_row(Tensor& batch, int i, const Tensor& row) {
    const int64_t stride = row.numel();
    if (batch.numel() != static_cast<int64_t>(batch.dim(0)) * stride) {
        throw std::invalid_argument("set_batch_row: row size does not divide batch");
    }
    std::copy(row.data(), row.data() + stride, batch.data() + static_cast<int64_t>(i) * stride);
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
    if (rows.empty()) throw std::invalid_argument("stack_rows: empty");
    std::vector<int> shape;
    shape.push_back(static_cast<int>(rows.size()));
    for (int d : rows.front().shape()) shape.push_back(d);
    Tensor out(shape);
    for (size_t i = 0; i < rows.size(); ++i) {
        if (!rows[i].same_shape(rows.front())) {
            throw std::invalid_argument("stack_rows: mixed shapes");
        }
        set_batch_row(out, static_cast<int>(i), rows[i]);
    }
    return out;
}

}  // namespace randlab
