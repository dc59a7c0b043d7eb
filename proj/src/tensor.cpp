#include "afp/tensor.hpp"

#include "afp/errors.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

namespace afp {

std::size_t shape_size(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw InvalidInput("negative tensor dimension");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

Tensor::Tensor(std::vector<int> shape, float fill) : shape_(std::move(shape)) {
    if (shape_.size() > 4) throw InvalidInput("tensor rank > 4");
    data_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(std::vector<int> shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_.size() > 4) throw InvalidInput("tensor rank > 4");
    if (data_.size() != shape_size(shape_)) {
        throw InvalidInput("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string());
    }
}

float& Tensor::at(int n, int h, int w, int c) {
    return data_[((static_cast<std::size_t>(n) * shape_[1] + h) * shape_[2] + w) * shape_[3] + c];
}

float Tensor::at(int n, int h, int w, int c) const {
    return data_[((static_cast<std::size_t>(n) * shape_[1] + h) * shape_[2] + w) * shape_[3] + c];
}

Tensor Tensor::sample(int n) const {
    if (rank() != 4 || n < 0 || n >= shape_[0]) throw InvalidInput("sample index out of range");
    const std::size_t stride = data_.size() / static_cast<std::size_t>(shape_[0]);
    std::vector<float> out(data_.begin() + static_cast<std::ptrdiff_t>(n * stride),
                           data_.begin() + static_cast<std::ptrdiff_t>((n + 1) * stride));
    return Tensor({shape_[1], shape_[2], shape_[3]}, std::move(out));
}

Tensor Tensor::slice(int begin, int end) const {
    if (rank() != 4 || begin < 0 || end > shape_[0] || begin > end) {
        throw InvalidInput("slice out of range");
    }
    const std::size_t stride = shape_[0] == 0 ? 0 : data_.size() / static_cast<std::size_t>(shape_[0]);
    std::vector<float> out(data_.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                           data_.begin() + static_cast<std::ptrdiff_t>(end * stride));
    return Tensor({end - begin, shape_[1], shape_[2], shape_[3]}, std::move(out));
}

void Tensor::set_sample(int n, const Tensor& image) {
    const std::size_t stride = data_.size() / static_cast<std::size_t>(shape_[0]);
    if (image.size() != stride) throw InvalidInput("sample shape mismatch");
    std::copy(image.data_.begin(), image.data_.end(),
              data_.begin() + static_cast<std::ptrdiff_t>(n * stride));
}

Tensor Tensor::reshaped(std::vector<int> shape) const {
    return Tensor(std::move(shape), data_);
}

std::string Tensor::shape_string() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape_[i]);
    }
    return s + "]";
}

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

Tensor stack(std::span<const Tensor> images) {
    if (images.empty()) throw InvalidInput("cannot stack zero images");
    const auto& s = images.front().shape();
    if (s.size() != 3) throw InvalidInput("stack expects rank-3 images");
    std::vector<float> data;
    data.reserve(images.size() * images.front().size());
    for (const auto& img : images) {
        if (img.shape() != s) throw InvalidInput("stack: image shapes differ");
        data.insert(data.end(), img.values().begin(), img.values().end());
    }
    return Tensor({static_cast<int>(images.size()), s[0], s[1], s[2]}, std::move(data));
}

namespace {
Tensor zip(const Tensor& a, const Tensor& b, auto op) {
    if (a.shape() != b.shape()) {
        throw InvalidInput("shape mismatch " + a.shape_string() + " vs " + b.shape_string());
    }
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = op(a[i], b[i]);
    return out;
}
}  // namespace

Tensor operator-(const Tensor& a, const Tensor& b) { return zip(a, b, std::minus<float>{}); }
Tensor operator+(const Tensor& a, const Tensor& b) { return zip(a, b, std::plus<float>{}); }

double linf_norm(std::span<const float> v) {
    double m = 0.0;
    for (float x : v) m = std::max(m, static_cast<double>(std::fabs(x)));
    return m;
}

double l2_norm(std::span<const float> v) {
    double s = 0.0;
    for (float x : v) s += static_cast<double>(x) * x;
    return std::sqrt(s);
}

}  // namespace afp
