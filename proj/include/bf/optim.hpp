#pragma once

#include <span>
#include <vector>

#include "bf/tensor.hpp"

namespace bf {

struct AdamWConfig {
    float lr = 1e-3f;
    float weight_decay = 0.01f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
};

/// Per-parameter moment buffers plus the shared step counter.
struct OptimState {
    AdamWConfig cfg;
    int64_t step = 0;
    std::vector<std::vector<float>> m;
    std::vector<std::vector<float>> v;

    void init(std::span<const Tensor> params);
    bool initialized() const { return !m.empty(); }
};

/// Scales all gradients by max_norm/g when the global L2 norm g exceeds
/// max_norm. Returns the applied scale (1.0 when unchanged).
float clip_global_norm(std::span<Tensor> params, float max_norm);

/// One AdamW update: decoupled weight decay plus bias-corrected moments.
/// Parameters with absent gradients are treated as zero-gradient.
void adamw_step(std::span<Tensor> params, OptimState& state);

}  // namespace bf
