#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace afp {

// Dense row-major float tensor of rank <= 4. Images are H x W x C, batches
// N x H x W x C.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape, float fill = 0.0f);
    Tensor(std::vector<int> shape, std::vector<float> data);

    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::span<float> data() { return data_; }
    std::span<const float> data() const { return data_; }
    const std::vector<float>& values() const { return data_; }

    float& operator[](std::size_t i) { return data_[i]; }
    float operator[](std::size_t i) const { return data_[i]; }

    // Element (n, h, w, c) of a rank-4 tensor.
    float& at(int n, int h, int w, int c);
    float at(int n, int h, int w, int c) const;

    // Sample `n` of a batch, returned as a rank-3 image.
    Tensor sample(int n) const;
    // Contiguous samples [begin, end) of a batch.
    Tensor slice(int begin, int end) const;
    void set_sample(int n, const Tensor& image);

    Tensor reshaped(std::vector<int> shape) const;

    std::string shape_string() const;
    bool all_finite() const;

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    std::vector<int> shape_;
    std::vector<float> data_;
};

std::size_t shape_size(const std::vector<int>& shape);

// Stack equally shaped rank-3 images into an N x H x W x C batch.
Tensor stack(std::span<const Tensor> images);

Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator+(const Tensor& a, const Tensor& b);

double linf_norm(std::span<const float> v);
double l2_norm(std::span<const float> v);

}  // namespace afp
