#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace randlab {

// Dense row-major array of f32 values tagged with a shape. The single
// numeric currency of the library: images, activations, weights and
// gradients are all Tensors. Distances and other reductions accumulate
// in f64.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape);
    Tensor(std::vector<int> shape, std::vector<float> data);

    const std::vector<int>& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    float& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    float operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    const std::vector<float>& values() const { return data_; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool same_data(const Tensor& other) const { return data_ == other.data_; }

    void fill(float v);
    bool all_finite() const;
    // Throws std::runtime_error naming `what` if any element is NaN/Inf.
    void check_finite(const std::string& what) const;

    double l2_distance(const Tensor& other) const;
    double linf_distance(const Tensor& other) const;

    std::string shape_str() const;

    static int64_t shape_numel(const std::vector<int>& shape);

private:
    std::vector<int> shape_;
    std::vector<float> data_;
};

// Per-sample slicing of a batch tensor {N, ...}: copies row i out / in.
Tensor batch_row(const Tensor& batch, int i);
void set_batch_row(Tensor& batch, int i, const Tensor& row);
// Stacks N equally shaped sample tensors into a {N, ...} batch.
Tensor stack_rows(const std::vector<Tensor>& rows);

}  // namespace randlab
