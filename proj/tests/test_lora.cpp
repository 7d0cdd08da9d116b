#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "nictkit/adan.hpp"
#include "nictkit/checkpoint.hpp"
#include "nictkit/error.hpp"
#include "nictkit/lora.hpp"
#include "nictkit/losses.hpp"
#include "nictkit/mitnet.hpp"
#include "nictkit/ops.hpp"
#include "oracles.hpp"

using namespace nictkit;
using ad::Tensor;

namespace {

MitnetConfig little() {
    MitnetConfig c;
    c.levels = 2;
    c.patch_sizes = {1, 2};
    c.embed_dims = {8, 8};
    c.depths = 1;
    c.window_size = 4;
    c.num_heads = {2, 2};
    return c;
}

Tensor image(std::size_t side, std::uint64_t seed, std::size_t batch = 1) {
    return Tensor::from({batch, 1, side, side}, oracle::random_vector(batch * side * side, seed, 0.0f, 1.0f));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, double(std::abs(a.values()[i] - b.values()[i])));
    return m;
}

std::string bytes_of(const ad::ParamTable& t) { return encode_checkpoint(t); }

void randomise_b(LoraModel& m, std::uint64_t seed) {
    for (auto& [name, t] : m.trainable())
        if (name.ends_with(".lora_b")) {
            const auto v = oracle::random_vector(t.numel(), seed++, -0.05f, 0.05f);
            std::copy(v.begin(), v.end(), t.mutable_values().begin());
        }
}

}  // namespace

TEST_CASE("fresh attach is a no-op") {
    const auto base = init_mitnet(little(), 1);
    const auto m = attach_lora(base, LoraConfig{}, 2);
    for (std::uint64_t s = 0; s < 3; ++s) {
        const auto x = image(16, 10 + s);
        CHECK(max_abs_diff(lora_forward(m, little(), x), mitnet_forward(base, little(), x)) <= 1e-6);
    }
    const auto merged = merge_lora(m);
    for (const auto& [name, t] : base) {
        REQUIRE(merged.count(name));
        CHECK(merged.at(name).shape() == t.shape());
        CHECK(max_abs_diff(merged.at(name), t) <= 1e-7);
    }
    CHECK(merged.size() == base.size());
}

TEST_CASE("targets, trainable fraction and pattern errors") {
    const auto base = init_mitnet(mitnet_tiny(), 1);
    const auto m = attach_lora(base, LoraConfig{}, 3);
    const double frac = double(m.trainable_count()) / double(mitnet_param_count(mitnet_tiny()));
    INFO("fraction " << frac);
    CHECK(frac < 0.10);
    for (const auto& t : lora_targets(base, LoraConfig{})) {
        CHECK(t.ends_with(".weight"));
        CHECK(t.find("norm") == std::string::npos);
    }
    for (const auto& [name, bp] : m.bypasses()) {
        for (float v : bp.b.values()) CHECK(v == 0.0f);
        for (float v : bp.a.values()) CHECK(std::abs(v) <= 0.04f);
        const auto& w = base.at(name);
        CHECK(bp.a.dim(0) == std::min<std::size_t>({4, w.dim(0), w.numel() / w.dim(0)}));
    }
    LoraConfig none;
    none.target_patterns = {"nothing.*"};
    CHECK_THROWS_AS(attach_lora(base, none, 1), NoTargetsMatched);
    LoraConfig qkv;
    qkv.target_patterns = {"*.attn.qkv.weight"};
    CHECK(lora_targets(base, qkv).size() == 2);
    LoraConfig bad;
    bad.rank = 0;
    CHECK_THROWS_AS(bad.validate(), InvalidConfig);
}

TEST_CASE("bypass scale is linear and zero scale restores the base") {
    const auto base = init_mitnet(little(), 4);
    auto m = attach_lora(base, LoraConfig{}, 5);
    randomise_b(m, 50);
    const auto x = Tensor::from({3, 8}, oracle::random_vector(24, 6));
    const std::string layer = "level0.block0.mlp.fc1";
    const auto plain = ad::linear(x, base.at(layer + ".weight"), base.at(layer + ".bias"));

    m.set_scale(1.0);
    const auto one = m.linear(layer, x);
    m.set_scale(2.0);
    const auto two = m.linear(layer, x);
    for (std::size_t i = 0; i < plain.numel(); ++i) {
        const double d1 = one.values()[i] - plain.values()[i];
        const double d2 = two.values()[i] - plain.values()[i];
        CHECK(d2 == doctest::Approx(2.0 * d1).epsilon(1e-4).scale(1e-6));
    }
    m.set_scale(0.0);
    const auto img = image(16, 7);
    CHECK(max_abs_diff(lora_forward(m, little(), img), mitnet_forward(base, little(), img)) == 0.0);
}

TEST_CASE("gradients reach the bypasses and never the base") {
    const auto base = init_mitnet(little(), 8);
    auto m = attach_lora(base, LoraConfig{}, 9);
    randomise_b(m, 70);
    ad::backward(loss_mse_image(lora_forward(m, little(), image(16, 10)), image(16, 11)));
    std::size_t with_grad = 0;
    for (const auto& [name, t] : m.trainable()) {
        double s = 0;
        for (float g : t.grad()) s += std::abs(g);
        with_grad += s > 0;
    }
    CHECK(with_grad == m.trainable().size());
    for (const auto& [name, t] : m.base()) {
        CHECK_FALSE(t.requires_grad());
        CHECK_FALSE(t.has_grad());
    }
}

TEST_CASE("merge matches the bypass model after adaptation") {
    const auto base = init_mitnet(little(), 12);
    const std::string before = bytes_of(base);
    auto m = attach_lora(base, LoraConfig{}, 13);
    auto trainable = m.trainable();
    AdanState st;
    AdanHyper h;
    h.lr = 1e-2;
    const auto x = image(16, 14, 2), t = image(16, 15, 2);
    for (int k = 0; k < 50; ++k) {
        for (auto& [n, p] : trainable) p.zero_grad();
        ad::backward(loss_mse_image(lora_forward(m, little(), x), t));
        adan_step(trainable, st, h);
    }
    CHECK(bytes_of(m.base()) == before);
    CHECK(bytes_of(base) == before);

    const auto merged = merge_lora(m);
    CHECK(merged.size() == base.size());
    double worst = 0;
    for (std::uint64_t s = 0; s < 10; ++s) {
        const auto in = image(16, 100 + s);
        worst = std::max(worst, max_abs_diff(mitnet_forward(merged, little(), in), lora_forward(m, little(), in)));
    }
    CHECK(worst <= 1e-5);
    CHECK(max_abs_diff(merged.at("head.conv1.weight"), base.at("head.conv1.weight")) > 0);

    // merged weight = W + s * B A, checked directly for one conv
    const auto& bp = m.bypasses().at("head.conv1.weight");
    const auto& W = base.at("head.conv1.weight");
    const std::size_t out = W.dim(0), in = W.numel() / out, r = bp.a.dim(0);
    for (std::size_t o = 0; o < out; ++o)
        for (std::size_t j = 0; j < in; ++j) {
            double s = W.values()[o * in + j];
            for (std::size_t k = 0; k < r; ++k) s += m.scale() * bp.b.values()[o * r + k] * bp.a.values()[k * in + j];
            CHECK(merged.at("head.conv1.weight").values()[o * in + j] == doctest::Approx(s).epsilon(1e-5).scale(1e-6));
        }

    const auto dir = std::filesystem::temp_directory_path() / "nictkit_lora_test";
    std::filesystem::create_directories(dir);
    save_lora(dir / "a.lora", m);
    const auto back = load_lora(dir / "a.lora", base);
    CHECK(max_abs_diff(lora_forward(back, little(), x), lora_forward(m, little(), x)) == 0.0);
    auto other = init_mitnet(little(), 99);
    CHECK_THROWS_AS(load_lora(dir / "a.lora", other), InvalidConfig);
}

TEST_CASE("dropout only acts while training") {
    const auto base = init_mitnet(little(), 20);
    LoraConfig cfg;
    cfg.dropout = 0.5;
    auto m = attach_lora(base, cfg, 21);
    randomise_b(m, 90);
    const auto x = image(16, 22);
    const auto eval1 = lora_forward(m, little(), x);
    m.set_training(true);
    const auto train = lora_forward(m, little(), x);
    m.set_training(false);
    CHECK(max_abs_diff(eval1, lora_forward(m, little(), x)) == 0.0);
    CHECK(max_abs_diff(eval1, train) > 0.0);
}
