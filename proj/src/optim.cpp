#include "bf/optim.hpp"

#include <cmath>

namespace bf {

void OptimState::init(std::span<const Tensor> params) {
    m.clear();
    v.clear();
    step = 0;
    for (const auto& p : params) {
        m.emplace_back(static_cast<size_t>(p.size()), 0.0f);
        v.emplace_back(static_cast<size_t>(p.size()), 0.0f);
    }
}

float clip_global_norm(std::span<Tensor> params, float max_norm) {
    if (!(max_norm > 0.0f)) throw UsageError("clip_global_norm: max_norm must be > 0");
    double sq = 0.0;
    for (auto& p : params) {
        for (float g : p.grad()) sq += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(sq);
    if (norm <= max_norm) return 1.0f;
    const float s = static_cast<float>(max_norm / norm);
    for (auto& p : params) {
        for (auto& g : p.mutable_grad()) g *= s;
    }
    return s;
}

void adamw_step(std::span<Tensor> params, OptimState& state) {
    if (state.m.size() != params.size()) {
        throw UsageError("adamw_step: state not initialized for this parameter set");
    }
    const auto& cfg = state.cfg;
    state.step += 1;
    const double bc1 = 1.0 - std::pow(static_cast<double>(cfg.beta1), static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(static_cast<double>(cfg.beta2), static_cast<double>(state.step));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto theta = params[pi].mutable_data();
        auto grads = params[pi].grad();
        auto& mom = state.m[pi];
        auto& vel = state.v[pi];
        if (mom.size() != theta.size()) throw ShapeError("adamw_step: moment buffer shape mismatch");
        for (size_t i = 0; i < theta.size(); ++i) {
            const float g = i < grads.size() ? grads[i] : 0.0f;
            mom[i] = cfg.beta1 * mom[i] + (1.0f - cfg.beta1) * g;
            vel[i] = cfg.beta2 * vel[i] + (1.0f - cfg.beta2) * g * g;
            const float mhat = static_cast<float>(mom[i] / bc1);
            const float vhat = static_cast<float>(vel[i] / bc2);
            theta[i] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * theta[i]);
        }
    }
}

}  // namespace bf
