#pragma once

#include "afp/network.hpp"

#include <span>

namespace afp {

struct AdamConfig {
    double learning_rate = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    int batch_size = 128;

    void validate() const;
};

// One bias-corrected Adam update of `params` in place. Moments are kept in
// float alongside the params; the update itself is computed in double.
void adam_update(std::span<float> params, AdamState& state, std::span<const double> grads, const AdamConfig& cfg);

void adam_step(ModelCheckpoint& model, std::span<const double> grads, const AdamConfig& cfg);

}  // namespace afp
