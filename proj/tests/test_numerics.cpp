#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "bf/checkpoint.hpp"
#include "bf/ops.hpp"
#include "bf/optim.hpp"
#include "bf/rng.hpp"
#include "bf/tensor.hpp"
#include "oracles.hpp"

using namespace bf;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = false, double scale = 1.0) {
    std::vector<float> data(static_cast<size_t>(numel(shape)));
    for (auto& v : data) v = static_cast<float>(rng.gaussian() * scale);
    return Tensor(std::move(shape), std::move(data), requires_grad);
}

// Positive-valued tensor in [lo, hi]. FD probes use these as taps so no
// probed gradient is left near zero, where an f32 forward cannot resolve
// the difference quotient.
Tensor uniform_tensor(Shape shape, Rng& rng, float lo, float hi, bool requires_grad = false) {
    std::vector<float> data(static_cast<size_t>(numel(shape)));
    for (auto& v : data) v = static_cast<float>(rng.uniform(lo, hi));
    return Tensor(std::move(shape), std::move(data), requires_grad);
}

double scalar_loss(const Tensor& t) { return t.item64(); }

}  // namespace

TEST_CASE("matmul matches identity and hand cases") {
    Tensor eye({2, 2}, {1, 0, 0, 1});
    Tensor v({2, 1}, {3, 4});
    auto out = matmul(eye, v);
    CHECK(out.data()[0] == doctest::Approx(3));
    CHECK(out.data()[1] == doctest::Approx(4));

    Tensor a({1, 2}, {1, 2});
    auto dot = matmul(a, v);
    CHECK(dot.data()[0] == doctest::Approx(11));
}

TEST_CASE("matmul matches naive triple-loop oracle") {
    Rng rng(42);
    auto a = random_tensor({4, 5}, rng);
    auto b = random_tensor({5, 6}, rng);
    auto out = matmul(a, b);
    auto ref = oracle::naive_matmul(a.data(), b.data(), 4, 5, 6);
    for (size_t i = 0; i < ref.size(); ++i) {
        CHECK(std::abs(out.data()[i] - ref[i]) <= 1e-6);
    }
}

TEST_CASE("matmul rejects shape mismatch") {
    Tensor a({2, 3}, std::vector<float>(6, 1.0f));
    Tensor b({4, 2}, std::vector<float>(8, 1.0f));
    CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("softmax basics") {
    Tensor z({1, 4}, {0, 0, 0, 0});
    auto p = softmax(z);
    for (float v : p.data()) CHECK(v == doctest::Approx(0.25));

    Tensor big({1, 2}, {1000, 0});
    auto q = softmax(big);
    CHECK(q.data()[0] == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(q.data()[1] == doctest::Approx(0.0).epsilon(1e-6));

    Tensor bad({1, 2}, {std::numeric_limits<float>::quiet_NaN(), 0.0f});
    CHECK_THROWS_AS(softmax(bad), NumericError);
}

TEST_CASE("softmax invariants: nonneg, sums to one, shift invariant") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        auto z = random_tensor({3, 8}, rng, false, 3.0);
        auto p = softmax(z);
        for (int r = 0; r < 3; ++r) {
            double s = 0.0;
            for (int j = 0; j < 8; ++j) {
                const float v = p.data()[r * 8 + j];
                CHECK(v >= 0.0f);
                s += v;
            }
            CHECK(std::abs(s - 1.0) <= 1e-5);
        }
        std::vector<float> shifted(z.data().begin(), z.data().end());
        for (auto& v : shifted) v += 13.5f;
        auto p2 = softmax(Tensor(z.shape(), std::move(shifted)));
        for (int64_t i = 0; i < p.size(); ++i) {
            CHECK(std::abs(p.data()[i] - p2.data()[i]) <= 1e-6);
        }
    }
}

TEST_CASE("softmax gradient matches finite differences") {
    Rng rng(11);
    auto z = random_tensor({2, 5}, rng, true);
    auto w = random_tensor({2, 5}, rng);
    auto loss = sum(mul(softmax(z), w));
    backward(loss);
    Tensor params[] = {z};
    auto loss_fn = [&] { return scalar_loss(sum(mul(softmax(z), w))); };
    CHECK(oracle::finite_diff_max_rel_err(loss_fn, params) <= 1e-3);
}

TEST_CASE("cross_entropy hand cases and oracle") {
    {
        Tensor logits({1, 2}, {10, -10});
        int t[] = {0};
        CHECK(cross_entropy(logits, t).item() <= 1e-4);
    }
    {
        Tensor logits({1, 2}, {0, 0});
        int t[] = {1};
        CHECK(cross_entropy(logits, t).item() == doctest::Approx(std::log(2.0)).epsilon(1e-5));
    }
    {
        Rng rng(3);
        auto logits = random_tensor({3, 5}, rng, false, 2.0);
        int t[] = {4, 0, 2};
        // direct -log(softmax) oracle
        double ref = 0.0;
        for (int r = 0; r < 3; ++r) {
            double denom = 0.0;
            for (int j = 0; j < 5; ++j) denom += std::exp(static_cast<double>(logits.data()[r * 5 + j]));
            ref += -std::log(std::exp(static_cast<double>(logits.data()[r * 5 + t[r]])) / denom);
        }
        ref /= 3.0;
        CHECK(std::abs(cross_entropy(logits, t).item() - ref) <= 1e-6);
    }
    {
        Tensor logits({1, 2}, {0, 0});
        int bad[] = {2};
        CHECK_THROWS_AS(cross_entropy(logits, bad), IndexError);
    }
}

TEST_CASE("cross_entropy is shift invariant") {
    Rng rng(5);
    auto logits = random_tensor({4, 6}, rng, false, 2.0);
    int t[] = {0, 5, 3, 1};
    const float base = cross_entropy(logits, t).item();
    std::vector<float> shifted(logits.data().begin(), logits.data().end());
    for (auto& v : shifted) v += 7.25f;
    const float moved = cross_entropy(Tensor(logits.shape(), std::move(shifted)), t).item();
    CHECK(std::abs(base - moved) <= 1e-5);
}

TEST_CASE("cross_entropy gradient matches finite differences") {
    Rng rng(17);
    auto logits = random_tensor({3, 4}, rng, true);
    int t[] = {1, 3, 0};
    backward(cross_entropy(logits, t));
    Tensor params[] = {logits};
    auto loss_fn = [&] { return scalar_loss(cross_entropy(logits, t)); };
    CHECK(oracle::finite_diff_max_rel_err(loss_fn, params) <= 1e-3);
}

TEST_CASE("bce_with_logits hand cases") {
    {
        Tensor v({1}, {0});
        Tensor y({1}, {1});
        CHECK(bce_with_logits(v, y, 1.0f).item() == doctest::Approx(std::log(2.0)).epsilon(1e-6));
    }
    {
        Tensor v({1}, {20});
        Tensor y({1}, {1});
        CHECK(bce_with_logits(v, y, 1.0f).item() <= 1e-6);
    }
    {
        Tensor v({2}, {0, 0});
        Tensor y({2}, {1, 0});
        // (3*ln2 + ln2)/2 = 2*ln2
        CHECK(bce_with_logits(v, y, 3.0f).item() ==
              doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-6));
    }
    {
        Tensor v({1}, {0});
        Tensor y({1}, {0.5f});
        CHECK_THROWS_AS(bce_with_logits(v, y, 1.0f), DomainError);
    }
}

TEST_CASE("bce_with_logits gradient matches finite differences") {
    Rng rng(23);
    auto v = random_tensor({6}, rng, true);
    Tensor y({6}, {1, 0, 1, 1, 0, 0});
    backward(bce_with_logits(v, y, 2.5f));
    Tensor params[] = {v};
    auto loss_fn = [&] { return scalar_loss(bce_with_logits(v, y, 2.5f)); };
    CHECK(oracle::finite_diff_max_rel_err(loss_fn, params) <= 1e-3);
}

TEST_CASE("mse hand cases and loop oracle") {
    Rng rng(31);
    auto p = random_tensor({4, 2}, rng);
    CHECK(mse(p, p).item() == 0.0f);

    std::vector<float> shifted(p.data().begin(), p.data().end());
    for (size_t i = 0; i < shifted.size(); i += 2) shifted[i] += 1.0f;  // offset (1,0) per row
    CHECK(mse(p, Tensor(p.shape(), std::move(shifted))).item() == doctest::Approx(0.5));

    auto q = random_tensor({4, 2}, rng);
    double ref = 0.0;
    for (int64_t i = 0; i < p.size(); ++i) {
        const double d = static_cast<double>(p.data()[i]) - q.data()[i];
        ref += d * d;
    }
    ref /= static_cast<double>(p.size());
    CHECK(std::abs(mse(p, q).item() - ref) <= 1e-6);
}

TEST_CASE("layer_norm normalizes rows") {
    Tensor gamma({4}, {1, 1, 1, 1});
    Tensor beta({4}, {0, 0, 0, 0});
    Tensor constant({1, 4}, {3, 3, 3, 3});
    auto y = layer_norm(constant, gamma, beta);
    for (float v : y.data()) CHECK(std::abs(v) <= 1e-5);

    Rng rng(13);
    auto x = random_tensor({8, 16}, rng, false, 2.0);
    Tensor g16 = Tensor::full({16}, 1.0f);
    Tensor b16 = Tensor::zeros({16});
    auto out = layer_norm(x, g16, b16);
    for (int r = 0; r < 8; ++r) {
        double m = 0.0, sq = 0.0;
        for (int j = 0; j < 16; ++j) m += out.data()[r * 16 + j];
        m /= 16;
        for (int j = 0; j < 16; ++j) {
            const double c = out.data()[r * 16 + j] - m;
            sq += c * c;
        }
        sq /= 16;
        CHECK(std::abs(m) <= 1e-6);
        CHECK(std::abs(sq - 1.0) <= 1e-4);
    }
}

TEST_CASE("layer_norm gradient matches finite differences") {
    Rng rng(29);
    auto x = random_tensor({3, 6}, rng, true);
    auto gamma = random_tensor({6}, rng, true, 0.5);
    auto beta = random_tensor({6}, rng, true, 0.5);
    auto w = random_tensor({3, 6}, rng);
    auto make_loss = [&] { return sum(mul(layer_norm(x, gamma, beta), w)); };
    backward(make_loss());
    Tensor params[] = {x, gamma, beta};
    auto loss_fn = [&] { return scalar_loss(make_loss()); };
    CHECK(oracle::finite_diff_max_rel_err(loss_fn, params) <= 1e-3);
}

namespace {

AttentionParams random_attention(int d, Rng& rng) {
    AttentionParams p;
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    auto mk = [&](Shape shape, double sc) { return random_tensor(std::move(shape), rng, true, sc); };
    p.wq = mk({d, d}, s);
    p.bq = mk({d}, 0.1);
    p.wk = mk({d, d}, s);
    p.bk = mk({d}, 0.1);
    p.wv = mk({d, d}, s);
    p.bv = mk({d}, 0.1);
    p.wo = mk({d, d}, s);
    p.bo = mk({d}, 0.1);
    return p;
}

}  // namespace

TEST_CASE("attention with one token reduces to the value path") {
    Rng rng(37);
    const int d = 8;
    auto p = random_attention(d, rng);
    auto x = random_tensor({1, d}, rng);
    auto out = multi_head_attention(x, 2, p);
    auto expected = linear(linear(x, p.wv, p.bv), p.wo, p.bo);
    for (int64_t i = 0; i < out.size(); ++i) {
        CHECK(out.data()[i] == doctest::Approx(expected.data()[i]).epsilon(1e-5));
    }
}

TEST_CASE("attention is permutation equivariant") {
    Rng rng(41);
    const int d = 8, L = 5;
    auto p = random_attention(d, rng);
    auto x = random_tensor({L, d}, rng);
    auto out = multi_head_attention(x, 2, p);

    const int perm[L] = {3, 0, 4, 1, 2};
    std::vector<float> px(static_cast<size_t>(L) * d);
    for (int r = 0; r < L; ++r) {
        for (int j = 0; j < d; ++j) px[r * d + j] = x.data()[perm[r] * d + j];
    }
    auto pout = multi_head_attention(Tensor({L, d}, std::move(px)), 2, p);
    for (int r = 0; r < L; ++r) {
        for (int j = 0; j < d; ++j) {
            CHECK(pout.data()[r * d + j] == doctest::Approx(out.data()[perm[r] * d + j]).epsilon(1e-6));
        }
    }
}

TEST_CASE("attention rejects indivisible head count") {
    Rng rng(43);
    auto p = random_attention(6, rng);
    auto x = random_tensor({2, 6}, rng);
    CHECK_THROWS_AS(multi_head_attention(x, 4, p), ConfigError);
}

TEST_CASE("attention gradients match finite differences") {
    Rng rng(47);
    const int d = 8, L = 3;
    auto p = random_attention(d, rng);
    auto x = random_tensor({L, d}, rng, true);
    auto w = random_tensor({L, d}, rng);
    auto make_loss = [&] { return sum(mul(multi_head_attention(x, 2, p), w)); };
    backward(make_loss());
    Tensor params[] = {x, p.wq, p.bq, p.wk, p.bk, p.wv, p.bv, p.wo, p.bo};
    auto loss_fn = [&] { return scalar_loss(make_loss()); };
    CHECK(oracle::finite_diff_max_rel_err(loss_fn, params) <= 1e-3);
}

TEST_CASE("backward basics") {
    Rng rng(53);
    auto x = random_tensor({5}, rng, true);
    backward(sum(x));
    for (float g : x.grad()) CHECK(g == doctest::Approx(1.0));

    x.zero_grad();
    backward(sum(mul(x, x)));
    for (int64_t i = 0; i < x.size(); ++i) {
        CHECK(x.grad()[i] == doctest::Approx(2.0f * x.data()[i]).epsilon(1e-5));
    }

    CHECK_THROWS_AS(backward(mul(x, x)), UsageError);
}

TEST_CASE("conv2d gradient matches finite differences") {
    Rng rng(59);
    auto x = random_tensor({2, 5, 5, 2}, rng, true);
    auto w = random_tensor({3 * 3 * 2, 4}, rng, true, 0.4);
    auto b = random_tensor({4}, rng, true, 0.1);
    auto tap = random_tensor({2, 3, 3, 4}, rng);
    auto make_loss = [&] { return sum(mul(conv2d(x, w, b, 3, 3, 2, 1), tap)); };
    backward(make_loss());
    Tensor params[] = {x, w, b};
    auto loss_fn = [&] { return scalar_loss(make_loss()); };
    CHECK(oracle::finite_diff_max_rel_err(loss_fn, params) <= 1e-3);
}

TEST_CASE("pooling and token ops gradients match finite differences") {
    Rng rng(61);
    auto img = random_tensor({2, 4, 4, 3}, rng, true);
    auto w1 = random_tensor({2, 4, 4, 3}, rng);
    backward(sum(mul(global_avg_pool(img), global_avg_pool(w1))));
    {
        Tensor params[] = {img};
        auto loss_fn = [&] {
            return scalar_loss(sum(mul(global_avg_pool(img), global_avg_pool(w1))));
        };
        CHECK(oracle::finite_diff_max_rel_err(loss_fn, params) <= 1e-3);
    }

    auto pts = random_tensor({2, 7, 4}, rng, true);
    // widen each (batch, channel) top-2 margin so the FD step cannot flip the argmax
    for (int b = 0; b < 2; ++b) {
        for (int c = 0; c < 4; ++c) {
            auto vals = pts.mutable_data();
            int best = 0;
            for (int p = 1; p < 7; ++p) {
                if (vals[(b * 7 + p) * 4 + c] > vals[(b * 7 + best) * 4 + c]) best = p;
            }
            vals[(b * 7 + best) * 4 + c] += 0.05f;
        }
    }
    auto w2 = random_tensor({2, 4}, rng);
    backward(sum(mul(max_over_dim1(pts), w2)));
    {
        Tensor params[] = {pts};
        auto loss_fn = [&] { return scalar_loss(sum(mul(max_over_dim1(pts), w2))); };
        CHECK(oracle::finite_diff_max_rel_err(loss_fn, params) <= 1e-3);
    }

    const int d = 6;
    Tensor toks[2] = {random_tensor({3, d}, rng, true), random_tensor({3, d}, rng, true)};
    auto cls = random_tensor({d}, rng, true);
    auto types = random_tensor({3, d}, rng, true);
    auto w3 = random_tensor({3, 3, d}, rng);
    auto make_loss = [&] {
        return sum(mul(assemble_tokens(std::span<const Tensor>(toks, 2), cls, types), w3));
    };
    backward(make_loss());
    {
        Tensor params[] = {toks[0], toks[1], cls, types};
        auto loss_fn = [&] { return scalar_loss(make_loss()); };
        CHECK(oracle::finite_diff_max_rel_err(loss_fn, params) <= 1e-3);
    }
}

TEST_CASE("max_over_dim1 is permutation invariant") {
    Rng rng(67);
    auto pts = random_tensor({1, 9, 5}, rng);
    auto base = max_over_dim1(pts);
    std::vector<int> order(9);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    std::vector<float> permuted(pts.size());
    for (int r = 0; r < 9; ++r) {
        for (int j = 0; j < 5; ++j) permuted[r * 5 + j] = pts.data()[order[r] * 5 + j];
    }
    auto shuffled = max_over_dim1(Tensor({1, 9, 5}, std::move(permuted)));
    for (int64_t i = 0; i < base.size(); ++i) CHECK(base.data()[i] == shuffled.data()[i]);
}

TEST_CASE("clip_global_norm") {
    {
        Tensor g({2}, {0.3f, 0.4f}, true);
        g.mutable_grad()[0] = 0.3f;
        g.mutable_grad()[1] = 0.4f;
        Tensor params[] = {g};
        CHECK(clip_global_norm(params, 1.0f) == doctest::Approx(1.0));
        CHECK(g.grad()[0] == doctest::Approx(0.3f));
    }
    {
        Tensor g({2}, {0.0f, 0.0f}, true);
        g.mutable_grad()[0] = 3.0f;
        g.mutable_grad()[1] = 4.0f;
        Tensor params[] = {g};
        const float s = clip_global_norm(params, 1.0f);
        CHECK(s == doctest::Approx(0.2));
        CHECK(g.grad()[0] == doctest::Approx(0.6f));
        CHECK(g.grad()[1] == doctest::Approx(0.8f));
    }
    {
        Rng rng(71);
        std::vector<Tensor> params;
        for (int i = 0; i < 4; ++i) {
            auto t = random_tensor({5}, rng, true);
            auto g = t.mutable_grad();
            for (auto& v : g) v = static_cast<float>(rng.gaussian() * 2.0);
            params.push_back(t);
        }
        std::vector<double> before;
        for (auto& p : params) {
            for (float g : p.grad()) before.push_back(std::abs(g));
        }
        clip_global_norm(params, 0.75f);
        double sq = 0.0;
        size_t idx = 0;
        for (auto& p : params) {
            for (float g : p.grad()) {
                sq += static_cast<double>(g) * g;
                CHECK(std::abs(g) <= before[idx++] + 1e-9);  // never increases a magnitude
            }
        }
        CHECK(std::sqrt(sq) <= 0.75 + 1e-6);
    }
}

TEST_CASE("adamw_step behaviour") {
    {
        Tensor x({3}, {1, 2, 3}, true);
        x.mutable_grad();  // zero grads
        Tensor params[] = {x};
        OptimState st;
        st.cfg.weight_decay = 0.0f;
        st.init(params);
        adamw_step(params, st);
        CHECK(x.data()[0] == 1.0f);
        CHECK(x.data()[1] == 2.0f);
        CHECK(x.data()[2] == 3.0f);
        CHECK(st.step == 1);
    }
    {
        Tensor x({1}, {1.0f}, true);
        Tensor params[] = {x};
        OptimState st;
        st.cfg.lr = 0.1f;
        st.cfg.weight_decay = 0.0f;
        st.init(params);
        backward(mul(x, x));
        adamw_step(params, st);
        CHECK(x.data()[0] < 1.0f);
    }
    {
        // 200 steps on f(x) = (x-3)^2 from x=0 reaches |x-3| <= 0.05
        Tensor x({1}, {0.0f}, true);
        Tensor target({1}, {3.0f});
        Tensor params[] = {x};
        OptimState st;
        st.cfg.lr = 0.1f;
        st.cfg.weight_decay = 0.0f;
        st.init(params);
        for (int i = 0; i < 200; ++i) {
            x.zero_grad();
            auto diff = sub(x, target);
            backward(mul(diff, diff));
            adamw_step(params, st);
        }
        CHECK(std::abs(x.data()[0] - 3.0f) <= 0.05f);
    }
}

TEST_CASE("ops are deterministic") {
    Rng rng(73);
    auto a = random_tensor({6, 6}, rng);
    auto b = random_tensor({6, 6}, rng);
    auto r1 = matmul(a, b);
    auto r2 = matmul(a, b);
    for (int64_t i = 0; i < r1.size(); ++i) CHECK(r1.data()[i] == r2.data()[i]);
    auto s1 = softmax(a);
    auto s2 = softmax(a);
    for (int64_t i = 0; i < s1.size(); ++i) CHECK(s1.data()[i] == s2.data()[i]);
}

TEST_CASE("no-grad mode records no graph") {
    Rng rng(79);
    auto x = random_tensor({4}, rng, true);
    NoGradGuard guard;
    auto y = sum(mul(x, x));
    CHECK_FALSE(y.requires_grad());
    CHECK_THROWS_AS(backward(y), UsageError);
}

TEST_CASE("checkpoint round-trips bit-exactly") {
    Rng rng(83);
    std::vector<NamedTensor> params;
    params.push_back({"enc.w", random_tensor({7, 3}, rng)});
    params.push_back({"enc.b", random_tensor({3}, rng)});
    params.push_back({"head.w", random_tensor({3, 64}, rng)});
    const auto path = std::filesystem::temp_directory_path() / "bf_test_ckpt.bfck";
    save_checkpoint(path, params);
    auto loaded = load_checkpoint(path);
    REQUIRE(loaded.size() == params.size());
    for (size_t i = 0; i < params.size(); ++i) {
        CHECK(loaded[i].name == params[i].name);
        REQUIRE(loaded[i].tensor.shape() == params[i].tensor.shape());
        const auto a = params[i].tensor.data();
        const auto b = loaded[i].tensor.data();
        for (int64_t j = 0; j < params[i].tensor.size(); ++j) {
            CHECK(std::memcmp(&a[j], &b[j], sizeof(float)) == 0);
        }
    }
    std::filesystem::remove(path);
}

TEST_CASE("rng is reproducible and gaussian has sane moments") {
    Rng a(123), b(123);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng g(99);
    double m = 0.0, sq = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double v = g.gaussian();
        m += v;
        sq += v * v;
    }
    m /= n;
    sq /= n;
    CHECK(std::abs(m) <= 0.01);
    CHECK(std::abs(sq - 1.0) <= 0.02);
}
