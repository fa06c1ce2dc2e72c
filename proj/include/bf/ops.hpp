#pragma once

#include <span>
#include <vector>

#include "bf/tensor.hpp"

namespace bf {

// Elementwise. Shapes must match exactly; the only broadcast in the engine
// is bias addition over leading dimensions (add_bias) and the structured
// ops below.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float c);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

/// a[... x k] · b[k x n] -> [... x n]. Leading dims of `a` fold into rows;
/// `b` is strictly 2-D.
Tensor matmul(const Tensor& a, const Tensor& b);

/// x[... x d] + b[d], broadcast over leading dims.
Tensor add_bias(const Tensor& x, const Tensor& b);

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add_bias(matmul(x, w), b);
}

/// Numerically stabilized softmax over the last dimension.
/// Throws NumericError on non-finite input.
Tensor softmax(const Tensor& x);

/// Per-last-dim normalization to mean 0 / variance 1 (eps inside the sqrt),
/// then affine with gamma/beta of length d.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);

/// Mean over rows of -log softmax(logits)[target], fused log-sum-exp.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

/// Mean of w_i * BCE(sigmoid(v_i), y_i), w_i = pos_weight when y_i = 1 else 1.
/// Stable log-sigmoid form. Targets must be exactly 0 or 1.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets, float pos_weight);

/// Mean over all elements of squared difference.
Tensor mse(const Tensor& pred, const Tensor& target);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// 2-D convolution on NHWC input. x: [B,H,W,C], w: [kh*kw*C, OC] with
/// column-major-in-(ky,kx,c) row layout matching im2col, b: [OC].
/// Output [B,OH,OW,OC], OH = (H + 2*pad - kh)/stride + 1.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int kh, int kw, int stride, int pad);

/// [B,H,W,C] -> [B,C], mean over spatial positions.
Tensor global_avg_pool(const Tensor& x);

/// [B,N,C] -> [B,C], elementwise max over the N dimension.
Tensor max_over_dim1(const Tensor& x);

/// tokens (each [B,d]) stacked behind a shared CLS vector, plus per-slot
/// type embeddings: out[b,0,:] = cls + types[0,:], out[b,1+i,:] =
/// tokens[i][b,:] + types[1+i,:]. types: [1+len(tokens), d].
Tensor assemble_tokens(std::span<const Tensor> tokens, const Tensor& cls, const Tensor& types);

/// [B,L,d] -> [B,d], selects one sequence position.
Tensor select_dim1(const Tensor& x, int index);

/// Scaled dot-product self-attention core over [B,L,d] query/key/value,
/// heads splitting the feature dimension. Attention rows sum to 1.
Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v, int heads);

/// (x - mean) * inv_std per last-dim feature, constants (no grad through stats).
Tensor standardize(const Tensor& x, std::vector<float> mean, std::vector<float> inv_std);

/// x * stdev + mean per last-dim feature.
Tensor destandardize(const Tensor& x, std::vector<float> mean, std::vector<float> stdev);

/// Same element order, new shape (copying view).
Tensor reshape(const Tensor& x, Shape new_shape);

struct AttentionParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;  // all [d,d] / [d]
};

/// Full multi-head self-attention block: QKV projections, attention core,
/// output projection. x: [B,L,d] (or [L,d], treated as B=1).
Tensor multi_head_attention(const Tensor& x, int heads, const AttentionParams& p);

}  // namespace bf
