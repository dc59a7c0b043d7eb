#include "afp/gradcheck.hpp"

#include "afp/errors.hpp"
#include "afp/rng.hpp"

#include <algorithm>
#include <cmath>

namespace afp {

double finite_diff_error(const NetworkSpec& spec, std::span<const double> params, const Tensor& batch,
                         std::span<const int> labels, std::span<const double> analytic,
                         std::span<const std::size_t> coords, double h) {
    if (!(h > 0.0)) throw InvalidInput("finite difference step must be > 0");
    std::vector<double> p(params.begin(), params.end());
    std::uint64_t base_pattern = 0;
    mean_loss(spec, p, batch, labels, &base_pattern);
    double worst = 0.0;
    for (std::size_t i : coords) {
        const double saved = p[i];
        double numeric = 0.0;
        // A probe that crosses a ReLU or max-pool switch measures a kink, not
        // the derivative; shrink the step until both probes stay in the
        // linear region of the base point.
        double step = h;
        for (int attempt = 0; attempt < 5; ++attempt, step *= 0.1) {
            std::uint64_t pat_up = 0;
            std::uint64_t pat_down = 0;
            p[i] = saved + step;
            const double up = mean_loss(spec, p, batch, labels, &pat_up);
            p[i] = saved - step;
            const double down = mean_loss(spec, p, batch, labels, &pat_down);
            numeric = (up - down) / (2.0 * step);
            if (pat_up == base_pattern && pat_down == base_pattern) break;
        }
        p[i] = saved;
        const double a = analytic[i];
        const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
        worst = std::max(worst, std::fabs(a - numeric) / denom);
    }
    return worst;
}

std::vector<std::size_t> sample_coords(std::size_t n, int count, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::size_t> coords(n);
    for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    shuffle(coords.begin(), coords.end(), rng);
    coords.resize(std::min(n, static_cast<std::size_t>(std::max(count, 0))));
    return coords;
}

double finite_diff_check(const ModelCheckpoint& model, const Tensor& batch, std::span<const int> labels,
                         int n_coords, double h, std::uint64_t seed) {
    if (n_coords < 1) throw InvalidInput("finite_diff_check needs n_coords >= 1");
    const std::vector<double> params(model.params.begin(), model.params.end());
    const auto analytic = loss_and_param_gradients(model.spec, params, batch, labels).grads;
    const auto coords = sample_coords(params.size(), n_coords, seed);
    return finite_diff_error(model.spec, params, batch, labels, analytic, coords, h);
}

}  // namespace afp
