#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "carrygpt/nn.hpp"
#include "carrygpt/tensor.hpp"
#include "testutil.hpp"

using namespace carrygpt;
using testutil::check_gradient;
using testutil::grad_close;

namespace {

Tensor randn(std::vector<int> shape, Rng& rng, bool rg = false, Real std = Real(1)) {
    return Tensor::randn(std::move(shape), std, rng, rg);
}

// Independent matrix product oracle: plain index-by-index recomputation.
std::vector<Real> matmul_oracle(const Tensor& a, const Tensor& b) {
    const int n = a.rows(), k = a.cols(), m = b.cols();
    std::vector<Real> c(static_cast<std::size_t>(n) * m, Real(0));
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) {
            Real acc = 0;
            for (int p = 0; p < k; ++p) acc += a.at(i, p) * b.at(p, j);
            c[static_cast<std::size_t>(i) * m + j] = acc;
        }
    return c;
}

} // namespace

TEST_CASE("matmul identity and hand-multiplied values") {
    const Tensor i2 = Tensor::identity(2);
    const Tensor out = matmul(i2, i2);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) CHECK(out.at(i, j) == (i == j ? 1.0 : 0.0));

    const Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    const Tensor b = Tensor::from_data({2, 1}, {1, 1});
    const Tensor c = matmul(a, b);
    CHECK(c.at(0, 0) == 3.0);
    CHECK(c.at(1, 0) == 7.0);
}

TEST_CASE("matmul agrees with the index oracle on random shapes") {
    Rng rng(11);
    for (int iter = 0; iter < 20; ++iter) {
        const int n = 1 + static_cast<int>(rng.below(8));
        const int k = 1 + static_cast<int>(rng.below(8));
        const int m = 1 + static_cast<int>(rng.below(8));
        const Tensor a = randn({n, k}, rng);
        const Tensor b = randn({k, m}, rng);
        const Tensor c = matmul(a, b);
        const auto want = matmul_oracle(a, b);
        for (std::size_t i = 0; i < want.size(); ++i)
            CHECK(grad_close(c.data()[i], want[i], 1e-12, 1e-12));
    }
}

TEST_CASE("matmul shape mismatch names both shapes") {
    const Tensor a = Tensor::zeros({2, 3});
    const Tensor b = Tensor::zeros({4, 2});
    try {
        matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("[4x2]") != std::string::npos);
    }
}

TEST_CASE("matmul gradient matches finite differences") {
    Rng rng(3);
    Tensor a = randn({3, 4}, rng, true);
    Tensor b = randn({4, 2}, rng, true);
    const auto loss = [&] { return sum(matmul(a, b)); };
    CHECK(check_gradient(loss, a, 1e-6).empty());
    CHECK(check_gradient(loss, b, 1e-6).empty());
}

TEST_CASE("softmax rows: symmetry, saturation, normalization") {
    const Tensor flat = softmax_rows(Tensor::from_data({1, 3}, {0, 0, 0}));
    for (int j = 0; j < 3; ++j) CHECK(grad_close(flat.at(0, j), 1.0 / 3.0, 1e-15));

    const Tensor sat = softmax_rows(Tensor::from_data({1, 3}, {1000, 0, 0}));
    CHECK(sat.at(0, 0) == 1.0);
    CHECK(sat.at(0, 1) == 0.0);
    CHECK(sat.at(0, 2) == 0.0);

    Rng rng(5);
    for (int iter = 0; iter < 50; ++iter) {
        const int n = 1 + static_cast<int>(rng.below(6));
        const int m = 1 + static_cast<int>(rng.below(8));
        Tensor x = Tensor::zeros({n, m});
        for (auto& v : x.data()) v = (rng.uniform() * 2 - 1) * 50;
        const Tensor y = softmax_rows(x);
        for (int i = 0; i < n; ++i) {
            Real row = 0;
            for (int j = 0; j < m; ++j) {
                CHECK(y.at(i, j) >= 0.0);
                row += y.at(i, j);
            }
            CHECK(std::abs(row - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("softmax gradient matches finite differences") {
    Rng rng(7);
    Tensor x = randn({3, 5}, rng, true);
    const Tensor w = randn({3, 5}, rng); // random projection makes the scalar loss generic
    const auto loss = [&] { return sum(mul(softmax_rows(x), w)); };
    CHECK(check_gradient(loss, x, 1e-6).empty());
}

TEST_CASE("rms norm: unit row, homogeneity, gradient") {
    const Tensor gain = Tensor::full({1, 4}, 1.0);
    const Tensor ones = Tensor::full({1, 4}, 1.0);
    const Tensor y = rms_norm(ones, gain, 1e-12);
    for (int j = 0; j < 4; ++j) CHECK(grad_close(y.at(0, j), 1.0, 1e-9));

    Rng rng(9);
    Tensor x = randn({2, 6}, rng);
    const Tensor g6 = Tensor::full({1, 6}, 1.0);
    const Tensor a = rms_norm(x, g6, 1e-10);
    const Tensor b = rms_norm(mul_scalar(x, 7.0), g6, 1e-10);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(grad_close(a.data()[i], b.data()[i], 1e-8));

    Tensor xg = randn({3, 4}, rng, true);
    Tensor gg = randn({1, 4}, rng, true);
    const Tensor w = randn({3, 4}, rng);
    const auto loss = [&] { return sum(mul(rms_norm(xg, gg, 1e-6), w)); };
    CHECK(check_gradient(loss, xg, 1e-6).empty());
    CHECK(check_gradient(loss, gg, 1e-6).empty());
}

TEST_CASE("attention single token reduces to value-output projection") {
    Rng rng(13);
    const int d = 4;
    const Tensor x = randn({1, d}, rng);
    const Tensor wq = randn({d, d}, rng), wk = randn({d, d}, rng);
    const Tensor wv = randn({d, d}, rng), wo = randn({d, d}, rng);

    const Tensor weights = attention_weights(x, wq, wk, /*heads=*/2, /*head=*/0, /*causal=*/true);
    REQUIRE(weights.numel() == 1);
    CHECK(weights.at(0, 0) == 1.0);

    const Tensor out = attention(x, wq, wk, wv, wo, 2, true);
    const Tensor want = matmul(matmul(x, wv), wo);
    for (std::size_t i = 0; i < out.numel(); ++i) CHECK(grad_close(out.data()[i], want.data()[i], 1e-12));
}

TEST_CASE("causal mask zeroes attention to future positions") {
    Rng rng(17);
    const int n = 5, d = 4;
    const Tensor x = randn({n, d}, rng);
    const Tensor wq = randn({d, d}, rng), wk = randn({d, d}, rng);
    for (int h = 0; h < 2; ++h) {
        const Tensor w = attention_weights(x, wq, wk, 2, h, true);
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) CHECK(w.at(i, j) == 0.0);
    }
}

TEST_CASE("attention gradient w.r.t. query weights matches finite differences") {
    Rng rng(19);
    const int n = 4, d = 4;
    const Tensor x = randn({n, d}, rng);
    Tensor wq = randn({d, d}, rng, true);
    Tensor wk = randn({d, d}, rng, true);
    Tensor wv = randn({d, d}, rng, true);
    Tensor wo = randn({d, d}, rng, true);
    const Tensor w = randn({n, d}, rng);
    const auto loss = [&] { return sum(mul(attention(x, wq, wk, wv, wo, 2, true), w)); };
    CHECK(check_gradient(loss, wq, 1e-5).empty());
    CHECK(check_gradient(loss, wk, 1e-5).empty());
    CHECK(check_gradient(loss, wv, 1e-5).empty());
    CHECK(check_gradient(loss, wo, 1e-5).empty());
}

TEST_CASE("attention rejects indivisible head split") {
    Rng rng(21);
    const Tensor x = randn({2, 6}, rng);
    const Tensor w = randn({6, 6}, rng);
    CHECK_THROWS_AS(attention(x, w, w, w, w, 4, true), ConfigError);
}

TEST_CASE("cross entropy: uniform, margin limit, single position") {
    const int v = 7;
    const Tensor uniform = Tensor::zeros({3, v});
    const Tensor l1 = cross_entropy_next_token(uniform, {1, 2, 3}, 0);
    CHECK(grad_close(l1.data()[0], std::log(static_cast<double>(v)), 1e-12));

    for (double margin : {5.0, 20.0, 60.0}) {
        Tensor onehot = Tensor::zeros({2, v});
        onehot.at(0, 4) = static_cast<Real>(margin);
        onehot.at(1, 2) = static_cast<Real>(margin);
        const Tensor l = cross_entropy_next_token(onehot, {4, 2}, 0);
        CHECK(l.data()[0] <= (v - 1) * std::exp(-margin) * 1.01 + 1e-12);
    }

    // mask_before = n-1 equals direct single-position recomputation
    Rng rng(23);
    const int n = 5;
    Tensor logits = Tensor::randn({n, v}, 1.0, rng);
    const std::vector<int> targets{0, 1, 2, 3, 4};
    const Tensor masked = cross_entropy_next_token(logits, targets, n - 1);
    double mx = logits.at(n - 1, 0);
    for (int j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(logits.at(n - 1, j)));
    double z = 0;
    for (int j = 0; j < v; ++j) z += std::exp(logits.at(n - 1, j) - mx);
    const double want = std::log(z) + mx - logits.at(n - 1, targets[n - 1]);
    CHECK(grad_close(masked.data()[0], want, 1e-12));
}

TEST_CASE("cross entropy rejects an empty unmasked set") {
    const Tensor logits = Tensor::zeros({3, 4});
    CHECK_THROWS_AS(cross_entropy_next_token(logits, {0, 1, 2}, 3), EvalError);
}

TEST_CASE("masked positions contribute exactly zero gradient") {
    Rng rng(29);
    const int n = 6, v = 5;
    Tensor logits = Tensor::randn({n, v}, 1.0, rng, true);
    const std::vector<int> targets{1, 2, 3, 0, 4, 1};
    const int mask_before = 3;
    cross_entropy_next_token(logits, targets, mask_before).backward();
    for (int i = 0; i < mask_before; ++i)
        for (int j = 0; j < v; ++j) CHECK(logits.grad_at(i, j) == 0.0);
    bool any_nonzero = false;
    for (int i = mask_before; i < n; ++i)
        for (int j = 0; j < v; ++j) any_nonzero = any_nonzero || logits.grad_at(i, j) != 0.0;
    CHECK(any_nonzero);
}

TEST_CASE("cross entropy gradient matches finite differences") {
    Rng rng(31);
    Tensor logits = Tensor::randn({4, 6}, 1.0, rng, true);
    const std::vector<int> targets{5, 0, 3, 2};
    const auto loss = [&] { return cross_entropy_next_token(logits, targets, 1); };
    CHECK(check_gradient(loss, logits, 1e-6).empty());
}

TEST_CASE("finite-difference suite over randomized small shapes") {
    Rng rng(37);
    for (int iter = 0; iter < 6; ++iter) {
        const int n = 2 + static_cast<int>(rng.below(7));
        const int d = 2 + static_cast<int>(rng.below(7));
        Tensor x = randn({n, d}, rng, true);
        const Tensor other = randn({n, d}, rng);
        const Tensor w = randn({n, d}, rng);
        const Tensor wn1 = randn({n, 1}, rng);
        Tensor bias = randn({1, d}, rng, true);
        Tensor scale = Tensor::scalar(0.7, true);

        CHECK(check_gradient([&] { return sum(mul(add(x, other), w)); }, x, 1e-4).empty());
        CHECK(check_gradient([&] { return sum(mul(sub(x, other), w)); }, x, 1e-4).empty());
        CHECK(check_gradient([&] { return sum(mul(mul(x, other), w)); }, x, 1e-4).empty());
        CHECK(check_gradient([&] { return sum(mul(silu(x), w)); }, x, 1e-4).empty());
        CHECK(check_gradient([&] { return sum(mul(sigmoid(x), w)); }, x, 1e-4).empty());
        CHECK(check_gradient([&] { return sum(mul(add_bias(x, bias), w)); }, x, 1e-4).empty());
        CHECK(check_gradient([&] { return sum(mul(add_bias(x, bias), w)); }, bias, 1e-4).empty());
        CHECK(check_gradient([&] { return sum(mul(mul_rowvec(x, wn1), w)); }, x, 1e-4).empty());
        CHECK(check_gradient([&] { return sum(mul(scale_by(x, scale), w)); }, scale, 1e-4).empty());
        CHECK(check_gradient([&] { return sum(mul(transpose(x), transpose(w))); }, x, 1e-4).empty());
        if (d >= 2) {
            CHECK(check_gradient([&] { return sum(slice_cols(x, 1, d - 1)); }, x, 1e-4).empty());
            CHECK(check_gradient(
                      [&] {
                          return sum(mul(concat_cols({slice_cols(x, 0, 1), slice_cols(x, 1, d - 1)}), w));
                      },
                      x, 1e-4)
                      .empty());
        }
    }
}

TEST_CASE("embedding gather gradient scatter-adds") {
    Rng rng(41);
    Tensor table = Tensor::randn({5, 3}, 1.0, rng, true);
    const std::vector<int> ids{1, 4, 1, 0};
    const Tensor w = Tensor::randn({4, 3}, 1.0, rng);
    const auto loss = [&] { return sum(mul(embedding_rows(table, ids), w)); };
    CHECK(check_gradient(loss, table, 1e-6).empty());
    CHECK_THROWS_AS(embedding_rows(table, {5}), DataError);
}

TEST_CASE("backward through a frozen param leaves grad exactly zero") {
    Rng rng(43);
    ParamStore store;
    Param& frozen = store.add("frozen", Tensor::randn({3, 3}, 1.0, rng), /*trainable=*/false);
    Param& live = store.add("live", Tensor::randn({3, 3}, 1.0, rng), true);
    const Tensor x = Tensor::randn({2, 3}, 1.0, rng);
    sum(matmul(matmul(x, frozen.value), live.value)).backward();
    for (Real g : frozen.value.grad()) CHECK(g == 0.0);
    bool any = false;
    for (Real g : live.value.grad()) any = any || g != 0.0;
    CHECK(any);
}

TEST_CASE("forward pass is bit-deterministic") {
    const auto run = [] {
        Rng rng(47);
        const Tensor x = Tensor::randn({4, 8}, 1.0, rng);
        const Tensor wq = Tensor::randn({8, 8}, 0.1, rng);
        const Tensor wv = Tensor::randn({8, 8}, 0.1, rng);
        const Tensor g = Tensor::full({1, 8}, 1.0);
        return rms_norm(attention(x, wq, wq, wv, wv, 2, true), g, 1e-6);
    };
    const Tensor a = run();
    const Tensor b = run();
    REQUIRE(a.numel() == b.numel());
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == b.data()[i]);
}

TEST_CASE("documented ops keep finite inputs finite") {
    Rng rng(53);
    for (int iter = 0; iter < 10; ++iter) {
        const Tensor x = randn({3, 4}, rng);
        CHECK(softmax_rows(x).all_finite());
        CHECK(rms_norm(x, Tensor::full({1, 4}, 1.0), 1e-6).all_finite());
        CHECK(silu(x).all_finite());
        const Tensor w = randn({4, 4}, rng);
        CHECK(attention(x, w, w, w, w, 2, true).all_finite());
    }
    // zero rows stay finite through rms_norm
    CHECK(rms_norm(Tensor::zeros({2, 4}), Tensor::full({1, 4}, 1.0), 1e-6).all_finite());
}
