#pragma once

#include "afp/tensor.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace afp {

enum class LayerKind { Conv2d, Relu, MaxPool2d, Flatten, Dense, Residual };

struct LayerSpec {
    LayerKind kind = LayerKind::Relu;
    int out_channels = 0;  // conv2d, residual
    int kernel = 0;        // conv2d, maxpool2d
    int stride = 1;        // conv2d
    int pad = 0;           // conv2d
    int units = 0;         // dense

    static LayerSpec conv2d(int out_ch, int k, int stride = 1, int pad = -1);
    static LayerSpec relu() { return {}; }
    static LayerSpec maxpool2d(int k);
    static LayerSpec flatten();
    static LayerSpec dense(int out);
    static LayerSpec residual(int ch);

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct Shape3 {
    int h = 0;
    int w = 0;
    int c = 0;

    int size() const { return h * w * c; }
    friend bool operator==(const Shape3&, const Shape3&) = default;
};

// Ordered layer list plus the input shape and class count. Shapes must
// compose and the final layer must emit `classes` values.
struct NetworkSpec {
    Shape3 input;
    int classes = 0;
    std::vector<LayerSpec> layers;

    // Output shape after every layer; throws InvalidInput if shapes do not compose.
    std::vector<Shape3> layer_shapes() const;
    std::size_t param_count() const;
    void validate() const;

    // Text form, e.g. "input=28x28x1;classes=10;conv2d(16,3,1,1);relu;...".
    std::string descriptor() const;
    static NetworkSpec parse(std::string_view descriptor);

    // conv(16,3)-relu-pool-conv(32,3)-relu-pool-flatten-dense(classes)
    static NetworkSpec victim(Shape3 input, int classes);
    // Victim backbone with two residual blocks of width 32 before the head.
    static NetworkSpec attributor(Shape3 input, int classes);

    friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

struct AdamState {
    std::vector<float> m;
    std::vector<float> v;
    std::uint64_t t = 0;

    friend bool operator==(const AdamState&, const AdamState&) = default;
};

struct ModelCheckpoint {
    NetworkSpec spec;
    std::vector<float> params;
    AdamState adam;
    std::uint64_t seed = 0;

    void validate() const;
    friend bool operator==(const ModelCheckpoint&, const ModelCheckpoint&) = default;
};

// He-normal weights, zero biases; the second conv of each residual block is
// scaled down so blocks start close to the identity map.
ModelCheckpoint init_model(const NetworkSpec& spec, std::uint64_t seed);

// Logits for an N x H x W x C batch.
Tensor forward(const ModelCheckpoint& model, const Tensor& batch);
// Same, in chunks of `chunk` samples to bound memory.
Tensor forward_chunked(const ModelCheckpoint& model, const Tensor& images, int chunk = 256);

struct LossAndGrad {
    double loss = 0.0;           // mean cross-entropy over the batch
    std::vector<double> grads;   // d loss / d params
};

LossAndGrad loss_and_param_gradients(const ModelCheckpoint& model, const Tensor& batch,
                                     std::span<const int> labels);

// Per-sample cross-entropy of each row; evaluated at double-precision params.
std::vector<double> per_sample_loss(const ModelCheckpoint& model, const Tensor& batch,
                                    std::span<const int> labels);

// Mean cross-entropy with an explicit double-precision parameter vector.
// `activation_pattern`, when given, receives a hash of every ReLU on/off
// state and max-pool winner; equal hashes mean the evaluation points share
// one linear region of the network.
double mean_loss(const NetworkSpec& spec, std::span<const double> params, const Tensor& batch,
                 std::span<const int> labels, std::uint64_t* activation_pattern = nullptr);
LossAndGrad loss_and_param_gradients(const NetworkSpec& spec, std::span<const double> params,
                                     const Tensor& batch, std::span<const int> labels);

// d CE(x_i, label_i) / d x_i for every sample (no 1/N factor). Optionally
// reports the per-sample losses of the same forward pass.
Tensor input_gradients(const ModelCheckpoint& model, const Tensor& batch,
                       std::span<const int> labels, std::vector<double>* losses = nullptr);

// Single image (H x W x C) convenience wrapper.
Tensor input_gradient(const ModelCheckpoint& model, const Tensor& x, int label);

std::vector<double> softmax(std::span<const float> logits);

// Argmax per row; ties go to the lowest index.
std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace afp
