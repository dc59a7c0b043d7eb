#include "afp/adam.hpp"

#include "afp/errors.hpp"

#include <cmath>

namespace afp {

void AdamConfig::validate() const {
    if (!(learning_rate > 0.0)) throw InvalidInput("adam learning rate must be > 0");
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
        throw InvalidInput("adam betas must lie in (0, 1)");
    }
    if (!(epsilon > 0.0)) throw InvalidInput("adam epsilon must be > 0");
    if (batch_size < 1) throw InvalidInput("batch size must be >= 1");
}

void adam_update(std::span<float> params, AdamState& state, std::span<const double> grads, const AdamConfig& cfg) {
    cfg.validate();
    if (grads.size() != params.size()) {
        throw InvalidInput("gradient length " + std::to_string(grads.size()) + " != parameter count " +
                           std::to_string(params.size()));
    }
    if (state.m.size() != params.size()) state.m.assign(params.size(), 0.0f);
    if (state.v.size() != params.size()) state.v.assign(params.size(), 0.0f);
    state.t += 1;
    const double t = static_cast<double>(state.t);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        const double m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        const double v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        state.m[i] = static_cast<float>(m);
        state.v[i] = static_cast<float>(v);
        const double step = cfg.learning_rate * (m / bc1) / (std::sqrt(v / bc2) + cfg.epsilon);
        params[i] = static_cast<float>(params[i] - step);
    }
}

void adam_step(ModelCheckpoint& model, std::span<const double> grads, const AdamConfig& cfg) {
    adam_update(model.params, model.adam, grads, cfg);
}

}  // namespace afp
