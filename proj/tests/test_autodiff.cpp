#include <doctest.h>

#include <cmath>
#include <set>

#include "nictkit/error.hpp"
#include "nictkit/gradcheck.hpp"
#include "nictkit/losses.hpp"
#include "nictkit/ops.hpp"
#include "oracles.hpp"

using namespace nictkit;
using ad::Tensor;

TEST_CASE("relu gradient is the step function") {
    auto x = Tensor::from({2}, {-1.0f, 1.0f}, true);
    ad::backward(ad::sum(ad::relu(x)));
    CHECK(x.grad() == std::vector<float>{0.0f, 1.0f});
}

TEST_CASE("1x1 identity convolution returns its input") {
    auto x = Tensor::from({1, 3, 4, 4}, oracle::random_vector(48, 3));
    std::vector<float> w(9, 0.0f);
    for (int c = 0; c < 3; ++c) w[c * 3 + c] = 1.0f;
    const auto y = ad::conv2d(x, Tensor::from({3, 3, 1, 1}, w));
    CHECK(std::vector<float>(y.values().begin(), y.values().end()) ==
          std::vector<float>(x.values().begin(), x.values().end()));
}

TEST_CASE("conv2d matches a direct loop") {
    const auto xv = oracle::random_vector(2 * 2 * 5 * 5, 8);
    const auto wv = oracle::random_vector(3 * 2 * 3 * 3, 9);
    const auto y = ad::conv2d(Tensor::from({2, 2, 5, 5}, xv), Tensor::from({3, 2, 3, 3}, wv), {}, 2, 1);
    REQUIRE(y.shape() == ad::Shape{2, 3, 3, 3});
    for (int b = 0; b < 2; ++b)
        for (int o = 0; o < 3; ++o)
            for (int r = 0; r < 3; ++r)
                for (int c = 0; c < 3; ++c) {
                    double s = 0;
                    for (int i = 0; i < 2; ++i)
                        for (int kr = 0; kr < 3; ++kr)
                            for (int kc = 0; kc < 3; ++kc) {
                                const int yr = 2 * r - 1 + kr, yc = 2 * c - 1 + kc;
                                if (yr < 0 || yc < 0 || yr >= 5 || yc >= 5) continue;
                                s += double(xv[((b * 2 + i) * 5 + yr) * 5 + yc]) * wv[((o * 2 + i) * 3 + kr) * 3 + kc];
                            }
                    CHECK(y.values()[((b * 3 + o) * 3 + r) * 3 + c] == doctest::Approx(s).epsilon(1e-5));
                }
}

TEST_CASE("sum gives unit gradients and fan-out accumulates") {
    auto x = Tensor::from({3}, {1.0f, -2.0f, 0.5f}, true);
    ad::backward(ad::sum(x));
    CHECK(x.grad() == std::vector<float>{1, 1, 1});

    auto y = Tensor::from({3}, {1.0f, -2.0f, 0.5f}, true);
    ad::backward(ad::add(ad::sum(y), ad::sum(y)));
    CHECK(y.grad() == std::vector<float>{2, 2, 2});

    // a leaf that does not reach the loss stays at zero
    auto z = Tensor::from({2}, {1.0f, 1.0f}, true);
    auto w = Tensor::from({2}, {3.0f, 4.0f}, true);
    ad::backward(ad::sum(ad::mul(w, w)));
    CHECK(z.grad() == std::vector<float>{0, 0});
    CHECK(w.grad() == std::vector<float>{6, 8});
}

TEST_CASE("backward rejects non-scalar losses") {
    auto x = Tensor::from({2}, {1.0f, 2.0f}, true);
    CHECK_THROWS_AS(ad::backward(ad::scale(x, 2.0f)), NonScalarLoss);
}

TEST_CASE("kernels reject mismatched shapes and non-finite results") {
    const auto a = Tensor::zeros({2, 3}), b = Tensor::zeros({3, 2});
    CHECK_THROWS_AS(ad::add(a, b), ShapeMismatch);
    CHECK_THROWS_AS(ad::matmul(a, Tensor::zeros({2, 3})), ShapeMismatch);
    CHECK_THROWS_AS(ad::div(Tensor::full({1}, 1.0f), Tensor::zeros({1})), NonFiniteValue);
}

TEST_CASE("softmax rows sum to one even for large logits") {
    const auto x = Tensor::from({2, 3}, {1000.0f, 1001.0f, 999.0f, -5.0f, 0.0f, 5.0f});
    const auto y = ad::softmax(x);
    for (int r = 0; r < 2; ++r) {
        double s = 0;
        for (int c = 0; c < 3; ++c) s += y.values()[r * 3 + c];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("central differences are exact on a quadratic") {
    auto f = [](const std::vector<Tensor>& x) { return ad::sum(ad::mul(x[0], x[0])); };
    const auto r = ad::grad_check(f, {Tensor::from({2}, {1.0f, 2.0f})});
    CHECK(r.max_rel_error < 1e-6);
    CHECK(r.coordinates == 2);
}

TEST_CASE("every kernel and loss passes the finite-difference suite") {
    auto cases = ad::kernel_grad_cases();
    for (auto& c : loss_grad_cases()) cases.push_back(std::move(c));
    const auto rows = ad::run_grad_cases(cases, 1e-2);
    std::set<std::string> names;
    for (const auto& row : rows) {
        INFO(row.name << " err " << row.result.max_rel_error << " " << row.error);
        CHECK(row.passed);
        CHECK(names.insert(row.name).second);
    }
    for (const char* k : {"linear", "conv2d", "relu", "gelu", "layer_norm", "softmax", "matmul", "concat", "slice",
                          "reshape", "upsample_nearest2x", "window_partition", "window_reverse", "add", "sub", "mul",
                          "scale", "mean", "sum", "loss_mse_image", "loss_ssim", "loss_perceptual",
                          "loss_mse_projection"})
        CHECK(names.count(k) == 1);
}

TEST_CASE("a corrupted backward rule is caught") {
    auto broken = [](const std::vector<Tensor>& x) {
        const Tensor& in = x[0];
        std::vector<float> out(in.values().begin(), in.values().end());
        for (auto& v : out) v = v * v;
        const Tensor y = ad::make_result("square_broken", in.shape(), std::move(out), {in},
                                         [](std::span<const float> g, std::span<const Tensor> inputs) {
                                             float* gi = ad::grad_buffer(inputs[0]);
                                             if (!gi) return;
                                             const auto v = inputs[0].values();
                                             // should be 2x
                                             for (std::size_t i = 0; i < g.size(); ++i) gi[i] += 3.0f * v[i] * g[i];
                                         });
        return ad::sum(y);
    };
    const auto r = ad::grad_check(broken, {Tensor::from({4}, {0.5f, -1.0f, 2.0f, 0.25f})});
    CHECK(r.max_rel_error > 0.3);

    std::vector<ad::GradCase> cases{{"square_broken", [&] {
                                         return ad::grad_check(broken, {Tensor::from({3}, {1.0f, 2.0f, 3.0f})});
                                     }}};
    CHECK_FALSE(ad::run_grad_cases(cases).front().passed);
}

TEST_CASE("gradients are bit-identical across repeated runs") {
    auto run = [] {
        auto x = Tensor::from({1, 2, 8, 8}, oracle::random_vector(128, 5), true);
        auto w = Tensor::from({3, 2, 3, 3}, oracle::random_vector(54, 6), true);
        ad::backward(ad::mean(ad::gelu(ad::conv2d(x, w, {}, 1, 1))));
        auto g = x.grad();
        const auto gw = w.grad();
        g.insert(g.end(), gw.begin(), gw.end());
        return g;
    };
    CHECK(run() == run());
}

TEST_CASE("window partition round-trips with and without a shift") {
    const auto x = Tensor::from({2, 8, 8, 3}, oracle::random_vector(384, 12));
    for (std::size_t shift : {0u, 2u}) {
        const auto w = ad::window_partition(x, 4, shift);
        CHECK(w.shape() == ad::Shape{8, 16, 3});
        const auto back = ad::window_reverse(w, 2, 8, 8, 4, shift);
        CHECK(std::equal(back.values().begin(), back.values().end(), x.values().begin()));
    }
}

TEST_CASE("no-grad mode records nothing") {
    auto x = Tensor::from({2}, {1.0f, 2.0f}, true);
    ad::NoGradGuard guard;
    const auto y = ad::scale(x, 3.0f);
    CHECK(y.is_leaf());
    CHECK_FALSE(y.requires_grad());
}
