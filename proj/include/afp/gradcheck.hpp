#pragma once

#include "afp/network.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace afp {

// Max over `coords` of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8),
// where numeric is the central difference of the mean loss with step h.
// Probes that cross a ReLU or max-pool switch are retried with smaller steps.
double finite_diff_error(const NetworkSpec& spec, std::span<const double> params, const Tensor& batch,
                         std::span<const int> labels, std::span<const double> analytic,
                         std::span<const std::size_t> coords, double h);

// `count` distinct coordinates out of [0, n), seeded.
std::vector<std::size_t> sample_coords(std::size_t n, int count, std::uint64_t seed);

// finite_diff_error of the model's own analytic gradient on n_coords sampled
// parameter coordinates.
double finite_diff_check(const ModelCheckpoint& model, const Tensor& batch, std::span<const int> labels,
                         int n_coords, double h, std::uint64_t seed = 0);

}  // namespace afp
