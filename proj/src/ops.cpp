#include "bf/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>

namespace bf {

namespace {

using RM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RM>;
using CMapRM = Eigen::Map<const RM>;
using StridedMap = Eigen::Map<RM, 0, Eigen::OuterStride<>>;
using CStridedMap = Eigen::Map<const RM, 0, Eigen::OuterStride<>>;

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

int last_dim(const Tensor& t) { return t.dim(t.rank() - 1); }

// Rows when the last dim is treated as the feature axis.
int64_t folded_rows(const Tensor& t) { return t.size() / last_dim(t); }

void accumulate(Node& dst, const std::vector<float>& delta) {
    dst.ensure_grad();
    for (size_t i = 0; i < delta.size(); ++i) dst.grad[i] += delta[i];
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape("add", a, b);
    std::vector<float> out(a.data().begin(), a.data().end());
    for (int64_t i = 0; i < a.size(); ++i) out[i] += b.data()[i];
    return make_op("add", a.shape(), std::move(out), {a, b}, [a, b](Node& n) {
        if (a.requires_grad()) accumulate(*a.node(), n.grad);
        if (b.requires_grad()) accumulate(*b.node(), n.grad);
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape("sub", a, b);
    std::vector<float> out(a.data().begin(), a.data().end());
    for (int64_t i = 0; i < a.size(); ++i) out[i] -= b.data()[i];
    return make_op("sub", a.shape(), std::move(out), {a, b}, [a, b](Node& n) {
        if (a.requires_grad()) accumulate(*a.node(), n.grad);
        if (b.requires_grad()) {
            Node& bn = *b.node();
            bn.ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) bn.grad[i] -= n.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape("mul", a, b);
    std::vector<float> out(static_cast<size_t>(a.size()));
    for (int64_t i = 0; i < a.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return make_op("mul", a.shape(), std::move(out), {a, b}, [a, b](Node& n) {
        if (a.requires_grad()) {
            Node& an = *a.node();
            an.ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) an.grad[i] += n.grad[i] * b.data()[i];
        }
        if (b.requires_grad()) {
            Node& bn = *b.node();
            bn.ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) bn.grad[i] += n.grad[i] * a.data()[i];
        }
    });
}

Tensor scale(const Tensor& a, float c) {
    std::vector<float> out(static_cast<size_t>(a.size()));
    for (int64_t i = 0; i < a.size(); ++i) out[i] = a.data()[i] * c;
    return make_op("scale", a.shape(), std::move(out), {a}, [a, c](Node& n) {
        if (!a.requires_grad()) return;
        Node& an = *a.node();
        an.ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) an.grad[i] += n.grad[i] * c;
    });
}

Tensor relu(const Tensor& x) {
    std::vector<float> out(static_cast<size_t>(x.size()));
    for (int64_t i = 0; i < x.size(); ++i) out[i] = x.data()[i] > 0.0f ? x.data()[i] : 0.0f;
    return make_op("relu", x.shape(), std::move(out), {x}, [x](Node& n) {
        if (!x.requires_grad()) return;
        Node& xn = *x.node();
        xn.ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) {
            if (n.value[i] > 0.0f) xn.grad[i] += n.grad[i];
        }
    });
}

Tensor sigmoid(const Tensor& x) {
    std::vector<float> out(static_cast<size_t>(x.size()));
    for (int64_t i = 0; i < x.size(); ++i) {
        const float v = x.data()[i];
        out[i] = v >= 0.0f ? 1.0f / (1.0f + std::exp(-v))
                           : std::exp(v) / (1.0f + std::exp(v));
    }
    return make_op("sigmoid", x.shape(), std::move(out), {x}, [x](Node& n) {
        if (!x.requires_grad()) return;
        Node& xn = *x.node();
        xn.ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) {
            const float y = n.value[i];
            xn.grad[i] += n.grad[i] * y * (1.0f - y);
        }
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() != 2) {
        throw ShapeError("matmul: need a rank>=2 and b rank 2, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    }
    const int k = last_dim(a);
    if (k != b.dim(0)) {
        throw ShapeError("matmul: inner dims disagree, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    const auto m = folded_rows(a);
    const int n_cols = b.dim(1);

    std::vector<float> out(static_cast<size_t>(m) * n_cols);
    CMapRM am(a.data().data(), m, k);
    CMapRM bm(b.data().data(), k, n_cols);
    MapRM om(out.data(), m, n_cols);
    om.noalias() = am * bm;

    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.push_back(n_cols);

    return make_op("matmul", std::move(out_shape), std::move(out), {a, b},
                   [a, b, m, k, n_cols](Node& n) {
                       CMapRM gm(n.grad.data(), m, n_cols);
                       if (a.requires_grad()) {
                           Node& an = *a.node();
                           an.ensure_grad();
                           MapRM ga(an.grad.data(), m, k);
                           CMapRM bm(b.data().data(), k, n_cols);
                           ga.noalias() += gm * bm.transpose();
                       }
                       if (b.requires_grad()) {
                           Node& bn = *b.node();
                           bn.ensure_grad();
                           MapRM gb(bn.grad.data(), k, n_cols);
                           CMapRM am(a.data().data(), m, k);
                           gb.noalias() += am.transpose() * gm;
                       }
                   });
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
    if (b.rank() != 1 || b.dim(0) != last_dim(x)) {
        throw ShapeError("add_bias: bias " + shape_str(b.shape()) + " does not match last dim of " +
                         shape_str(x.shape()));
    }
    const int d = last_dim(x);
    const auto rows = folded_rows(x);
    std::vector<float> out(x.data().begin(), x.data().end());
    for (int64_t r = 0; r < rows; ++r) {
        float* row = out.data() + r * d;
        for (int j = 0; j < d; ++j) row[j] += b.data()[j];
    }
    return make_op("add_bias", x.shape(), std::move(out), {x, b}, [x, b, rows, d](Node& n) {
        if (x.requires_grad()) accumulate(*x.node(), n.grad);
        if (b.requires_grad()) {
            Node& bn = *b.node();
            bn.ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                const float* g = n.grad.data() + r * d;
                for (int j = 0; j < d; ++j) bn.grad[j] += g[j];
            }
        }
    });
}

Tensor softmax(const Tensor& x) {
    const int d = last_dim(x);
    if (d < 1) throw ShapeError("softmax: empty last dimension");
    const auto rows = folded_rows(x);
    std::vector<float> out(static_cast<size_t>(x.size()));
    for (int64_t r = 0; r < rows; ++r) {
        const float* in = x.data().data() + r * d;
        float* o = out.data() + r * d;
        float mx = -std::numeric_limits<float>::infinity();
        for (int j = 0; j < d; ++j) {
            if (!std::isfinite(in[j])) throw NumericError("softmax: non-finite input");
            mx = std::max(mx, in[j]);
        }
        double denom = 0.0;
        for (int j = 0; j < d; ++j) {
            o[j] = std::exp(in[j] - mx);
            denom += o[j];
        }
        const float inv = static_cast<float>(1.0 / denom);
        for (int j = 0; j < d; ++j) o[j] *= inv;
    }
    return make_op("softmax", x.shape(), std::move(out), {x}, [x, rows, d](Node& n) {
        if (!x.requires_grad()) return;
        Node& xn = *x.node();
        xn.ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            const float* y = n.value.data() + r * d;
            const float* g = n.grad.data() + r * d;
            float* gx = xn.grad.data() + r * d;
            double dot = 0.0;
            for (int j = 0; j < d; ++j) dot += static_cast<double>(g[j]) * y[j];
            for (int j = 0; j < d; ++j) gx[j] += y[j] * (g[j] - static_cast<float>(dot));
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
    const int d = last_dim(x);
    if (gamma.rank() != 1 || gamma.dim(0) != d || beta.rank() != 1 || beta.dim(0) != d) {
        throw ShapeError("layer_norm: gamma/beta must be [d] with d = " + std::to_string(d));
    }
    const auto rows = folded_rows(x);
    std::vector<float> out(static_cast<size_t>(x.size()));
    auto xhat = std::make_shared<std::vector<float>>(static_cast<size_t>(x.size()));
    auto inv_std = std::make_shared<std::vector<float>>(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const float* in = x.data().data() + r * d;
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += in[j];
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double c = in[j] - mean;
            var += c * c;
        }
        var /= d;
        const float is = static_cast<float>(1.0 / std::sqrt(var + eps));
        (*inv_std)[r] = is;
        float* xh = xhat->data() + r * d;
        float* o = out.data() + r * d;
        for (int j = 0; j < d; ++j) {
            xh[j] = (in[j] - static_cast<float>(mean)) * is;
            o[j] = xh[j] * gamma.data()[j] + beta.data()[j];
        }
    }
    return make_op("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                   [x, gamma, beta, rows, d, xhat, inv_std](Node& n) {
                       if (gamma.requires_grad()) gamma.node()->ensure_grad();
                       if (beta.requires_grad()) beta.node()->ensure_grad();
                       if (x.requires_grad()) x.node()->ensure_grad();
                       for (int64_t r = 0; r < rows; ++r) {
                           const float* g = n.grad.data() + r * d;
                           const float* xh = xhat->data() + r * d;
                           if (gamma.requires_grad()) {
                               float* gg = gamma.node()->grad.data();
                               for (int j = 0; j < d; ++j) gg[j] += g[j] * xh[j];
                           }
                           if (beta.requires_grad()) {
                               float* gb = beta.node()->grad.data();
                               for (int j = 0; j < d; ++j) gb[j] += g[j];
                           }
                           if (x.requires_grad()) {
                               // dx = inv_std * (dxh - mean(dxh) - xhat * mean(dxh * xhat))
                               double m1 = 0.0, m2 = 0.0;
                               for (int j = 0; j < d; ++j) {
                                   const double dxh = static_cast<double>(g[j]) * gamma.data()[j];
                                   m1 += dxh;
                                   m2 += dxh * xh[j];
                               }
                               m1 /= d;
                               m2 /= d;
                               float* gx = x.node()->grad.data() + r * d;
                               const float is = (*inv_std)[r];
                               for (int j = 0; j < d; ++j) {
                                   const float dxh = g[j] * gamma.data()[j];
                                   gx[j] += is * (dxh - static_cast<float>(m1) -
                                                  xh[j] * static_cast<float>(m2));
                               }
                           }
                       }
                   });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
    if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be [N,B]");
    const int n_rows = logits.dim(0);
    const int n_classes = logits.dim(1);
    if (static_cast<int>(targets.size()) != n_rows) {
        throw ShapeError("cross_entropy: target count mismatch");
    }
    for (int t : targets) {
        if (t < 0 || t >= n_classes) {
            throw IndexError("cross_entropy: target " + std::to_string(t) + " out of range [0," +
                             std::to_string(n_classes) + ")");
        }
    }
    auto probs = std::make_shared<std::vector<float>>(static_cast<size_t>(logits.size()));
    double loss = 0.0;
    for (int r = 0; r < n_rows; ++r) {
        const float* z = logits.data().data() + static_cast<int64_t>(r) * n_classes;
        float mx = z[0];
        for (int j = 1; j < n_classes; ++j) mx = std::max(mx, z[j]);
        double denom = 0.0;
        for (int j = 0; j < n_classes; ++j) denom += std::exp(static_cast<double>(z[j]) - mx);
        const double lse = mx + std::log(denom);
        loss += lse - z[targets[r]];
        float* p = probs->data() + static_cast<int64_t>(r) * n_classes;
        for (int j = 0; j < n_classes; ++j) {
            p[j] = static_cast<float>(std::exp(static_cast<double>(z[j]) - lse));
        }
    }
    loss /= n_rows;
    std::vector<int> tgt(targets.begin(), targets.end());
    auto out_t = make_op("cross_entropy", {1}, {static_cast<float>(loss)}, {logits},
                   [logits, probs, tgt, n_rows, n_classes](Node& n) {
                       if (!logits.requires_grad()) return;
                       Node& ln = *logits.node();
                       ln.ensure_grad();
                       const float g = n.grad[0] / static_cast<float>(n_rows);
                       for (int r = 0; r < n_rows; ++r) {
                           const float* p = probs->data() + static_cast<int64_t>(r) * n_classes;
                           float* gl = ln.grad.data() + static_cast<int64_t>(r) * n_classes;
                           for (int j = 0; j < n_classes; ++j) gl[j] += g * p[j];
                           gl[tgt[r]] -= g;
                       }
                   });
    out_t.node()->scalar64 = loss;
    return out_t;
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets, float pos_weight) {
    check_same_shape("bce_with_logits", logits, targets);
    if (!(pos_weight > 0.0f)) throw DomainError("bce_with_logits: pos_weight must be > 0");
    const auto n_elems = logits.size();
    for (int64_t i = 0; i < n_elems; ++i) {
        const float y = targets.data()[i];
        if (y != 0.0f && y != 1.0f) throw DomainError("bce_with_logits: targets must be 0 or 1");
    }
    // loss_i = w_i * (softplus(v_i) - y_i * v_i), softplus in stable form.
    double loss = 0.0;
    for (int64_t i = 0; i < n_elems; ++i) {
        const double v = logits.data()[i];
        const double y = targets.data()[i];
        const double w = y == 1.0 ? pos_weight : 1.0;
        const double sp = std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v)));
        loss += w * (sp - y * v);
    }
    loss /= static_cast<double>(n_elems);
    auto out_t = make_op("bce_with_logits", {1}, {static_cast<float>(loss)}, {logits, targets},
                   [logits, targets, pos_weight, n_elems](Node& n) {
                       if (!logits.requires_grad()) return;
                       Node& ln = *logits.node();
                       ln.ensure_grad();
                       const float g = n.grad[0] / static_cast<float>(n_elems);
                       for (int64_t i = 0; i < n_elems; ++i) {
                           const float v = logits.data()[i];
                           const float y = targets.data()[i];
                           const float w = y == 1.0f ? pos_weight : 1.0f;
                           const float s = v >= 0.0f ? 1.0f / (1.0f + std::exp(-v))
                                                     : std::exp(v) / (1.0f + std::exp(v));
                           ln.grad[i] += g * w * (s - y);
                       }
                   });
    out_t.node()->scalar64 = loss;
    return out_t;
}

Tensor mse(const Tensor& pred, const Tensor& target) {
    check_same_shape("mse", pred, target);
    const auto n_elems = pred.size();
    double loss = 0.0;
    for (int64_t i = 0; i < n_elems; ++i) {
        const double diff = static_cast<double>(pred.data()[i]) - target.data()[i];
        loss += diff * diff;
    }
    loss /= static_cast<double>(n_elems);
    auto out_t = make_op("mse", {1}, {static_cast<float>(loss)}, {pred, target},
                   [pred, target, n_elems](Node& n) {
                       const float g = n.grad[0] * 2.0f / static_cast<float>(n_elems);
                       if (pred.requires_grad()) {
                           Node& pn = *pred.node();
                           pn.ensure_grad();
                           for (int64_t i = 0; i < n_elems; ++i) {
                               pn.grad[i] += g * (pred.data()[i] - target.data()[i]);
                           }
                       }
                       if (target.requires_grad()) {
                           Node& tn = *target.node();
                           tn.ensure_grad();
                           for (int64_t i = 0; i < n_elems; ++i) {
                               tn.grad[i] -= g * (pred.data()[i] - target.data()[i]);
                           }
                       }
                   });
    out_t.node()->scalar64 = loss;
    return out_t;
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (float v : x.data()) acc += v;
    auto out_t = make_op("sum", {1}, {static_cast<float>(acc)}, {x}, [x](Node& n) {
        if (!x.requires_grad()) return;
        Node& xn = *x.node();
        xn.ensure_grad();
        for (auto& g : xn.grad) g += n.grad[0];
    });
    out_t.node()->scalar64 = acc;
    return out_t;
}

Tensor mean(const Tensor& x) {
    double acc = 0.0;
    for (float v : x.data()) acc += v;
    const auto n_elems = x.size();
    acc /= static_cast<double>(n_elems);
    auto out_t = make_op("mean", {1}, {static_cast<float>(acc)}, {x}, [x, n_elems](Node& n) {
        if (!x.requires_grad()) return;
        Node& xn = *x.node();
        xn.ensure_grad();
        const float g = n.grad[0] / static_cast<float>(n_elems);
        for (auto& gv : xn.grad) gv += g;
    });
    out_t.node()->scalar64 = acc;
    return out_t;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int kh, int kw, int stride,
              int pad) {
    if (x.rank() != 4) throw ShapeError("conv2d: input must be [B,H,W,C]");
    const int batch = x.dim(0), h = x.dim(1), wd = x.dim(2), c = x.dim(3);
    const int patch = kh * kw * c;
    if (w.rank() != 2 || w.dim(0) != patch) {
        throw ShapeError("conv2d: weight must be [" + std::to_string(patch) + ",OC], got " +
                         shape_str(w.shape()));
    }
    const int oc = w.dim(1);
    if (b.rank() != 1 || b.dim(0) != oc) throw ShapeError("conv2d: bias must be [OC]");
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (wd + 2 * pad - kw) / stride + 1;
    if (oh <= 0 || ow <= 0) throw ShapeError("conv2d: kernel larger than padded input");

    const int64_t out_rows = static_cast<int64_t>(batch) * oh * ow;
    auto cols = std::make_shared<std::vector<float>>(static_cast<size_t>(out_rows) * patch, 0.0f);
    const float* src = x.data().data();
    for (int bi = 0; bi < batch; ++bi) {
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                float* row = cols->data() + ((static_cast<int64_t>(bi) * oh + oy) * ow + ox) * patch;
                for (int ky = 0; ky < kh; ++ky) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    for (int kx = 0; kx < kw; ++kx) {
                        const int ix = ox * stride - pad + kx;
                        if (ix < 0 || ix >= wd) continue;
                        std::memcpy(row + (ky * kw + kx) * c,
                                    src + ((static_cast<int64_t>(bi) * h + iy) * wd + ix) * c,
                                    sizeof(float) * static_cast<size_t>(c));
                    }
                }
            }
        }
    }

    std::vector<float> out(static_cast<size_t>(out_rows) * oc);
    {
        CMapRM cm(cols->data(), out_rows, patch);
        CMapRM wm(w.data().data(), patch, oc);
        MapRM om(out.data(), out_rows, oc);
        om.noalias() = cm * wm;
        for (int64_t r = 0; r < out_rows; ++r) {
            float* row = out.data() + r * oc;
            for (int j = 0; j < oc; ++j) row[j] += b.data()[j];
        }
    }

    return make_op(
        "conv2d", {batch, oh, ow, oc}, std::move(out), {x, w, b},
        [x, w, b, cols, batch, h, wd, c, kh, kw, stride, pad, oh, ow, oc, patch,
         out_rows](Node& n) {
            CMapRM gm(n.grad.data(), out_rows, oc);
            if (w.requires_grad()) {
                Node& wn = *w.node();
                wn.ensure_grad();
                MapRM gw(wn.grad.data(), patch, oc);
                CMapRM cm(cols->data(), out_rows, patch);
                gw.noalias() += cm.transpose() * gm;
            }
            if (b.requires_grad()) {
                Node& bn = *b.node();
                bn.ensure_grad();
                for (int64_t r = 0; r < out_rows; ++r) {
                    const float* g = n.grad.data() + r * oc;
                    for (int j = 0; j < oc; ++j) bn.grad[j] += g[j];
                }
            }
            if (x.requires_grad()) {
                Node& xn = *x.node();
                xn.ensure_grad();
                std::vector<float> dcols(static_cast<size_t>(out_rows) * patch);
                MapRM dcm(dcols.data(), out_rows, patch);
                CMapRM wm(w.data().data(), patch, oc);
                dcm.noalias() = gm * wm.transpose();
                float* gx = xn.grad.data();
                for (int bi = 0; bi < batch; ++bi) {
                    for (int oy = 0; oy < oh; ++oy) {
                        for (int ox = 0; ox < ow; ++ox) {
                            const float* row =
                                dcols.data() +
                                ((static_cast<int64_t>(bi) * oh + oy) * ow + ox) * patch;
                            for (int ky = 0; ky < kh; ++ky) {
                                const int iy = oy * stride - pad + ky;
                                if (iy < 0 || iy >= h) continue;
                                for (int kx = 0; kx < kw; ++kx) {
                                    const int ix = ox * stride - pad + kx;
                                    if (ix < 0 || ix >= wd) continue;
                                    float* dst =
                                        gx + ((static_cast<int64_t>(bi) * h + iy) * wd + ix) * c;
                                    const float* s = row + (ky * kw + kx) * c;
                                    for (int j = 0; j < c; ++j) dst[j] += s[j];
                                }
                            }
                        }
                    }
                }
            }
        });
}

Tensor global_avg_pool(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("global_avg_pool: input must be [B,H,W,C]");
    const int batch = x.dim(0), spatial = x.dim(1) * x.dim(2), c = x.dim(3);
    std::vector<float> out(static_cast<size_t>(batch) * c, 0.0f);
    for (int bi = 0; bi < batch; ++bi) {
        const float* src = x.data().data() + static_cast<int64_t>(bi) * spatial * c;
        float* o = out.data() + static_cast<int64_t>(bi) * c;
        for (int s = 0; s < spatial; ++s) {
            for (int j = 0; j < c; ++j) o[j] += src[s * c + j];
        }
        for (int j = 0; j < c; ++j) o[j] /= static_cast<float>(spatial);
    }
    return make_op("global_avg_pool", {batch, c}, std::move(out), {x},
                   [x, batch, spatial, c](Node& n) {
                       if (!x.requires_grad()) return;
                       Node& xn = *x.node();
                       xn.ensure_grad();
                       for (int bi = 0; bi < batch; ++bi) {
                           const float* g = n.grad.data() + static_cast<int64_t>(bi) * c;
                           float* gx = xn.grad.data() + static_cast<int64_t>(bi) * spatial * c;
                           for (int s = 0; s < spatial; ++s) {
                               for (int j = 0; j < c; ++j) {
                                   gx[s * c + j] += g[j] / static_cast<float>(spatial);
                               }
                           }
                       }
                   });
}

Tensor max_over_dim1(const Tensor& x) {
    if (x.rank() != 3) throw ShapeError("max_over_dim1: input must be [B,N,C]");
    const int batch = x.dim(0), n_pts = x.dim(1), c = x.dim(2);
    if (n_pts < 1) throw ShapeError("max_over_dim1: need at least one element");
    std::vector<float> out(static_cast<size_t>(batch) * c);
    auto argmax = std::make_shared<std::vector<int>>(static_cast<size_t>(batch) * c, 0);
    for (int bi = 0; bi < batch; ++bi) {
        const float* src = x.data().data() + static_cast<int64_t>(bi) * n_pts * c;
        float* o = out.data() + static_cast<int64_t>(bi) * c;
        int* am = argmax->data() + static_cast<int64_t>(bi) * c;
        for (int j = 0; j < c; ++j) o[j] = src[j];
        for (int p = 1; p < n_pts; ++p) {
            for (int j = 0; j < c; ++j) {
                const float v = src[p * c + j];
                if (v > o[j]) {
                    o[j] = v;
                    am[j] = p;
                }
            }
        }
    }
    return make_op("max_over_dim1", {batch, c}, std::move(out), {x},
                   [x, argmax, batch, n_pts, c](Node& n) {
                       if (!x.requires_grad()) return;
                       Node& xn = *x.node();
                       xn.ensure_grad();
                       for (int bi = 0; bi < batch; ++bi) {
                           const float* g = n.grad.data() + static_cast<int64_t>(bi) * c;
                           const int* am = argmax->data() + static_cast<int64_t>(bi) * c;
                           float* gx = xn.grad.data() + static_cast<int64_t>(bi) * n_pts * c;
                           for (int j = 0; j < c; ++j) gx[am[j] * c + j] += g[j];
                       }
                   });
}

Tensor assemble_tokens(std::span<const Tensor> tokens, const Tensor& cls, const Tensor& types) {
    if (tokens.empty()) throw UsageError("assemble_tokens: no tokens");
    const int batch = tokens[0].dim(0);
    const int d = tokens[0].dim(1);
    const int seq_len = static_cast<int>(tokens.size()) + 1;
    if (cls.rank() != 1 || cls.dim(0) != d) throw ShapeError("assemble_tokens: cls must be [d]");
    if (types.rank() != 2 || types.dim(0) != seq_len || types.dim(1) != d) {
        throw ShapeError("assemble_tokens: types must be [" + std::to_string(seq_len) + "," +
                         std::to_string(d) + "]");
    }
    for (const auto& t : tokens) {
        if (t.rank() != 2 || t.dim(0) != batch || t.dim(1) != d) {
            throw ShapeError("assemble_tokens: every token must be [B,d]");
        }
    }
    std::vector<float> out(static_cast<size_t>(batch) * seq_len * d);
    for (int bi = 0; bi < batch; ++bi) {
        float* o = out.data() + static_cast<int64_t>(bi) * seq_len * d;
        for (int j = 0; j < d; ++j) o[j] = cls.data()[j] + types.data()[j];
        for (size_t ti = 0; ti < tokens.size(); ++ti) {
            const float* src = tokens[ti].data().data() + static_cast<int64_t>(bi) * d;
            const float* ty = types.data().data() + (ti + 1) * d;
            float* dst = o + (ti + 1) * static_cast<int64_t>(d);
            for (int j = 0; j < d; ++j) dst[j] = src[j] + ty[j];
        }
    }
    std::vector<Tensor> inputs(tokens.begin(), tokens.end());
    inputs.push_back(cls);
    inputs.push_back(types);
    std::vector<Tensor> toks(tokens.begin(), tokens.end());
    return make_op("assemble_tokens", {batch, seq_len, d}, std::move(out), std::move(inputs),
                   [toks, cls, types, batch, seq_len, d](Node& n) {
                       for (int bi = 0; bi < batch; ++bi) {
                           const float* g = n.grad.data() + static_cast<int64_t>(bi) * seq_len * d;
                           if (cls.requires_grad()) {
                               cls.node()->ensure_grad();
                               for (int j = 0; j < d; ++j) cls.node()->grad[j] += g[j];
                           }
                           if (types.requires_grad()) {
                               types.node()->ensure_grad();
                               for (int l = 0; l < seq_len; ++l) {
                                   for (int j = 0; j < d; ++j) {
                                       types.node()->grad[l * d + j] += g[l * d + j];
                                   }
                               }
                           }
                           for (size_t ti = 0; ti < toks.size(); ++ti) {
                               if (!toks[ti].requires_grad()) continue;
                               Node& tn = *toks[ti].node();
                               tn.ensure_grad();
                               float* gt = tn.grad.data() + static_cast<int64_t>(bi) * d;
                               const float* gs = g + (ti + 1) * static_cast<size_t>(d);
                               for (int j = 0; j < d; ++j) gt[j] += gs[j];
                           }
                       }
                   });
}

Tensor select_dim1(const Tensor& x, int index) {
    if (x.rank() != 3) throw ShapeError("select_dim1: input must be [B,L,d]");
    const int batch = x.dim(0), seq_len = x.dim(1), d = x.dim(2);
    if (index < 0 || index >= seq_len) throw IndexError("select_dim1: index out of range");
    std::vector<float> out(static_cast<size_t>(batch) * d);
    for (int bi = 0; bi < batch; ++bi) {
        std::memcpy(out.data() + static_cast<int64_t>(bi) * d,
                    x.data().data() + (static_cast<int64_t>(bi) * seq_len + index) * d,
                    sizeof(float) * static_cast<size_t>(d));
    }
    return make_op("select_dim1", {batch, d}, std::move(out), {x},
                   [x, index, batch, seq_len, d](Node& n) {
                       if (!x.requires_grad()) return;
                       Node& xn = *x.node();
                       xn.ensure_grad();
                       for (int bi = 0; bi < batch; ++bi) {
                           const float* g = n.grad.data() + static_cast<int64_t>(bi) * d;
                           float* gx =
                               xn.grad.data() + (static_cast<int64_t>(bi) * seq_len + index) * d;
                           for (int j = 0; j < d; ++j) gx[j] += g[j];
                       }
                   });
}

namespace {

Shape attn_shape(const Tensor& t) {
    if (t.rank() == 2) return {1, t.dim(0), t.dim(1)};
    if (t.rank() == 3) return {t.dim(0), t.dim(1), t.dim(2)};
    throw ShapeError("attention: tensors must be [L,d] or [B,L,d]");
}

}  // namespace

Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v, int heads) {
    const Shape qs = attn_shape(q);
    if (attn_shape(k) != qs || attn_shape(v) != qs) {
        throw ShapeError("attention_core: q/k/v shapes must agree");
    }
    const int batch = qs[0], seq_len = qs[1], d = qs[2];
    if (heads < 1 || d % heads != 0) {
        throw ConfigError("attention_core: model dim " + std::to_string(d) +
                          " not divisible by heads " + std::to_string(heads));
    }
    const int dh = d / heads;
    const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));

    std::vector<float> out(static_cast<size_t>(batch) * seq_len * d);
    auto attn = std::make_shared<std::vector<float>>(
        static_cast<size_t>(batch) * heads * seq_len * seq_len);

    for (int bi = 0; bi < batch; ++bi) {
        const int64_t base = static_cast<int64_t>(bi) * seq_len * d;
        for (int hi = 0; hi < heads; ++hi) {
            CStridedMap qh(q.data().data() + base + hi * dh, seq_len, dh,
                           Eigen::OuterStride<>(d));
            CStridedMap kh(k.data().data() + base + hi * dh, seq_len, dh,
                           Eigen::OuterStride<>(d));
            CStridedMap vh(v.data().data() + base + hi * dh, seq_len, dh,
                           Eigen::OuterStride<>(d));
            RM scores(seq_len, seq_len);
            scores.noalias() = qh * kh.transpose() * inv_sqrt;
            // rowwise softmax
            MapRM am(attn->data() + (static_cast<int64_t>(bi) * heads + hi) * seq_len * seq_len,
                     seq_len, seq_len);
            for (int r = 0; r < seq_len; ++r) {
                const float mx = scores.row(r).maxCoeff();
                am.row(r) = (scores.row(r).array() - mx).exp();
                am.row(r) /= am.row(r).sum();
            }
            StridedMap oh(out.data() + base + hi * dh, seq_len, dh, Eigen::OuterStride<>(d));
            oh.noalias() = am * vh;
        }
    }

    return make_op(
        "attention_core", q.shape(), std::move(out), {q, k, v},
        [q, k, v, attn, batch, seq_len, d, heads, dh, inv_sqrt](Node& n) {
            if (q.requires_grad()) q.node()->ensure_grad();
            if (k.requires_grad()) k.node()->ensure_grad();
            if (v.requires_grad()) v.node()->ensure_grad();
            for (int bi = 0; bi < batch; ++bi) {
                const int64_t base = static_cast<int64_t>(bi) * seq_len * d;
                for (int hi = 0; hi < heads; ++hi) {
                    CStridedMap qh(q.data().data() + base + hi * dh, seq_len, dh,
                                   Eigen::OuterStride<>(d));
                    CStridedMap kh(k.data().data() + base + hi * dh, seq_len, dh,
                                   Eigen::OuterStride<>(d));
                    CStridedMap vh(v.data().data() + base + hi * dh, seq_len, dh,
                                   Eigen::OuterStride<>(d));
                    CMapRM am(attn->data() +
                                  (static_cast<int64_t>(bi) * heads + hi) * seq_len * seq_len,
                              seq_len, seq_len);
                    CStridedMap go(n.grad.data() + base + hi * dh, seq_len, dh,
                                   Eigen::OuterStride<>(d));
                    if (v.requires_grad()) {
                        StridedMap gv(v.node()->grad.data() + base + hi * dh, seq_len, dh,
                                      Eigen::OuterStride<>(d));
                        gv.noalias() += am.transpose() * go;
                    }
                    if (q.requires_grad() || k.requires_grad()) {
                        RM da(seq_len, seq_len);
                        da.noalias() = go * vh.transpose();
                        // softmax jacobian per row
                        RM ds(seq_len, seq_len);
                        for (int r = 0; r < seq_len; ++r) {
                            const float dot = da.row(r).cwiseProduct(am.row(r)).sum();
                            ds.row(r) =
                                am.row(r).cwiseProduct(da.row(r).array().operator-(dot).matrix());
                        }
                        ds *= inv_sqrt;
                        if (q.requires_grad()) {
                            StridedMap gq(q.node()->grad.data() + base + hi * dh, seq_len, dh,
                                          Eigen::OuterStride<>(d));
                            gq.noalias() += ds * kh;
                        }
                        if (k.requires_grad()) {
                            StridedMap gk(k.node()->grad.data() + base + hi * dh, seq_len, dh,
                                          Eigen::OuterStride<>(d));
                            gk.noalias() += ds.transpose() * qh;
                        }
                    }
                }
            }
        });
}

Tensor standardize(const Tensor& x, std::vector<float> mean, std::vector<float> inv_std) {
    const int d = last_dim(x);
    if (static_cast<int>(mean.size()) != d || static_cast<int>(inv_std.size()) != d) {
        throw ShapeError("standardize: stats must match last dim");
    }
    const auto rows = folded_rows(x);
    std::vector<float> out(static_cast<size_t>(x.size()));
    for (int64_t r = 0; r < rows; ++r) {
        const float* in = x.data().data() + r * d;
        float* o = out.data() + r * d;
        for (int j = 0; j < d; ++j) o[j] = (in[j] - mean[j]) * inv_std[j];
    }
    auto is = std::make_shared<std::vector<float>>(std::move(inv_std));
    return make_op("standardize", x.shape(), std::move(out), {x}, [x, is, rows, d](Node& n) {
        if (!x.requires_grad()) return;
        Node& xn = *x.node();
        xn.ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            const float* g = n.grad.data() + r * d;
            float* gx = xn.grad.data() + r * d;
            for (int j = 0; j < d; ++j) gx[j] += g[j] * (*is)[j];
        }
    });
}

Tensor destandardize(const Tensor& x, std::vector<float> mean, std::vector<float> stdev) {
    const int d = last_dim(x);
    if (static_cast<int>(mean.size()) != d || static_cast<int>(stdev.size()) != d) {
        throw ShapeError("destandardize: stats must match last dim");
    }
    const auto rows = folded_rows(x);
    std::vector<float> out(static_cast<size_t>(x.size()));
    for (int64_t r = 0; r < rows; ++r) {
        const float* in = x.data().data() + r * d;
        float* o = out.data() + r * d;
        for (int j = 0; j < d; ++j) o[j] = in[j] * stdev[j] + mean[j];
    }
    auto sd = std::make_shared<std::vector<float>>(std::move(stdev));
    return make_op("destandardize", x.shape(), std::move(out), {x}, [x, sd, rows, d](Node& n) {
        if (!x.requires_grad()) return;
        Node& xn = *x.node();
        xn.ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            const float* g = n.grad.data() + r * d;
            float* gx = xn.grad.data() + r * d;
            for (int j = 0; j < d; ++j) gx[j] += g[j] * (*sd)[j];
        }
    });
}

Tensor reshape(const Tensor& x, Shape new_shape) {
    if (numel(new_shape) != x.size()) {
        throw ShapeError("reshape: element count mismatch " + shape_str(x.shape()) + " -> " +
                         shape_str(new_shape));
    }
    std::vector<float> out(x.data().begin(), x.data().end());
    return make_op("reshape", std::move(new_shape), std::move(out), {x}, [x](Node& n) {
        if (!x.requires_grad()) return;
        accumulate(*x.node(), n.grad);
    });
}

Tensor multi_head_attention(const Tensor& x, int heads, const AttentionParams& p) {
    const Shape xs = attn_shape(x);
    const int d = xs[2];
    if (d % heads != 0) {
        throw ConfigError("multi_head_attention: dim " + std::to_string(d) +
                          " not divisible by heads " + std::to_string(heads));
    }
    const Tensor q = linear(x, p.wq, p.bq);
    const Tensor k = linear(x, p.wk, p.bk);
    const Tensor v = linear(x, p.wv, p.bv);
    const Tensor attn = attention_core(q, k, v, heads);
    return linear(attn, p.wo, p.bo);
}

}  // namespace bf
