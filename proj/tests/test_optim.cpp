#include <doctest.h>

#include <cmath>
#include <map>
#include <set>

#include "nictkit/adan.hpp"
#include "nictkit/error.hpp"
#include "nictkit/ops.hpp"
#include "nictkit/queue.hpp"
#include "nictkit/train.hpp"
#include "oracles.hpp"

using namespace nictkit;
using ad::Tensor;

namespace {

ad::ParamTable one_param(std::vector<float> v) {
    ad::ParamTable t;
    const std::size_t n = v.size();
    t.emplace("w", Tensor::from({n}, std::move(v), true));
    return t;
}

// f(w) = |w - w*|^2, gradient written into the parameter
void quadratic_grad(ad::ParamTable& t, const std::vector<float>& target) {
    auto& w = t.at("w");
    w.zero_grad();
    ad::backward(ad::sum(ad::mul(ad::sub(w, Tensor::from(w.shape(), target)), ad::sub(w, Tensor::from(w.shape(), target)))));
}

double distance(const ad::ParamTable& t, const std::vector<float>& target) {
    double s = 0;
    const auto v = t.at("w").values();
    for (std::size_t i = 0; i < v.size(); ++i) s += (double(v[i]) - target[i]) * (double(v[i]) - target[i]);
    return std::sqrt(s);
}

// Reference Adan in double precision: bias-corrected moments of g, of the
// gradient difference and of (g + b_d * diff)^2; proximal weight decay.
struct RefAdan {
    double bm, bd, bn, lr, eps, wd;
    std::vector<double> m, d, n, prev;
    int k = 0;
    void step(std::vector<double>& w, const std::vector<double>& g) {
        if (k == 0) {
            m.assign(w.size(), 0);
            d.assign(w.size(), 0);
            n.assign(w.size(), 0);
            prev = g;
        }
        ++k;
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double diff = g[i] - prev[i];
            m[i] = bm * m[i] + (1 - bm) * g[i];
            d[i] = bd * d[i] + (1 - bd) * diff;
            const double u = g[i] + bd * diff;
            n[i] = bn * n[i] + (1 - bn) * u * u;
            const double mh = m[i] / (1 - std::pow(bm, k)), dh = d[i] / (1 - std::pow(bd, k)),
                         nh = n[i] / (1 - std::pow(bn, k));
            w[i] = (w[i] - lr * (mh + bd * dh) / (std::sqrt(nh) + eps)) / (1 + lr * wd);
        }
        prev = g;
    }
};

std::vector<QueueVolume> corpus(std::size_t n) {
    std::vector<QueueVolume> c;
    for (std::size_t i = 0; i < n; ++i) c.push_back({"v" + std::to_string(i), kAllKinds[i % 3], 2 + i % 3});
    return c;
}

}  // namespace

TEST_CASE("Adan: zero gradients are a fixed point") {
    auto t = one_param(oracle::random_vector(10, 1));
    const std::vector<float> before(t.at("w").values().begin(), t.at("w").values().end());
    AdanState st;
    for (int i = 0; i < 100; ++i) {
        auto& w = t.at("w");
        w.zero_grad();
        ad::backward(ad::scale(ad::sum(w), 0.0f));
        adan_step(t, st, AdanHyper{});
    }
    CHECK(std::vector<float>(t.at("w").values().begin(), t.at("w").values().end()) == before);
    CHECK(st.step == 100);
}

TEST_CASE("Adan converges on a convex quadratic under both mappings") {
    for (auto mapping : {AdanMapping::Sequential, AdanMapping::AdamLike}) {
        auto t = one_param(std::vector<float>(10, 0.0f));
        const auto target = oracle::random_vector(10, 2, -0.5f, 0.5f);
        AdanState st;
        AdanHyper h;
        h.mapping = mapping;
        int reached = -1;
        for (int k = 1; k <= 5000 && reached < 0; ++k) {
            quadratic_grad(t, target);
            adan_step(t, st, h);
            if (distance(t, target) < 1e-3) reached = k;
        }
        INFO(to_string(mapping) << " reached at " << reached);
        CHECK(reached > 0);
    }
}

TEST_CASE("Adan matches a double-precision reference") {
    for (auto mapping : {AdanMapping::Sequential, AdanMapping::AdamLike}) {
        AdanHyper h;
        h.mapping = mapping;
        h.lr = 1e-2;
        h.weight_decay = 0.1;
        const auto dec = h.decays();
        RefAdan ref{dec.m, dec.diff, dec.n, h.lr, h.eps, h.weight_decay};
        auto t = one_param(oracle::random_vector(6, 3));
        std::vector<double> w(t.at("w").values().begin(), t.at("w").values().end());
        AdanState st;
        for (int k = 0; k < 20; ++k) {
            const auto gv = oracle::random_vector(6, 100 + k);
            auto& p = t.at("w");
            p.zero_grad();
            ad::backward(ad::sum(ad::mul(p, Tensor::from({6}, gv))));
            adan_step(t, st, h);
            ref.step(w, std::vector<double>(gv.begin(), gv.end()));
        }
        for (std::size_t i = 0; i < 6; ++i) CHECK(t.at("w").values()[i] == doctest::Approx(w[i]).epsilon(1e-5));
    }
    AdanHyper seq;
    CHECK(seq.decays().diff == 0.999);
    seq.mapping = AdanMapping::AdamLike;
    CHECK(seq.decays().n == 0.999);
}

TEST_CASE("Adan is deterministic and its state round-trips") {
    auto run = [](int split) {
        auto t = one_param(std::vector<float>(4, 1.0f));
        AdanState st;
        const std::vector<float> target{0.1f, -0.2f, 0.3f, 0.0f};
        for (int k = 0; k < 30; ++k) {
            if (k == split) st = AdanState::from_table(st.to_table());
            quadratic_grad(t, target);
            adan_step(t, st, AdanHyper{});
        }
        return std::vector<float>(t.at("w").values().begin(), t.at("w").values().end());
    };
    CHECK(run(-1) == run(-1));
    CHECK(run(-1) == run(13));

    AdanState big;
    big.step = (1ULL << 40) + 12345;
    CHECK(AdanState::from_table(big.to_table()).step == big.step);
}

TEST_CASE("Adan rejects non-finite gradients by name") {
    ad::ParamTable t;
    t.emplace("level0.embed.weight", Tensor::from({2}, {1.0f, 2.0f}, true));
    ad::grad_buffer(t.at("level0.embed.weight"))[1] = std::nanf("");
    AdanState st;
    try {
        adan_step(t, st, AdanHyper{});
        FAIL("no exception");
    } catch (const NonFiniteGradient& e) {
        CHECK(std::string(e.what()).find("level0.embed.weight") != std::string::npos);
    }
    AdanHyper bad;
    bad.b2 = 1.0;
    CHECK_THROWS_AS(bad.validate(), InvalidConfig);
    CHECK_THROWS_AS(parse_adan_mapping("nesterov"), InvalidConfig);
}

TEST_CASE("learning-rate schedules") {
    CHECK(lr_schedule(Stage::Pretrain, 0, 5e-4) == doctest::Approx(5e-4).epsilon(1e-12));
    CHECK(lr_schedule(Stage::Pretrain, 99, 5e-4) == doctest::Approx(5e-4).epsilon(1e-12));
    CHECK(lr_schedule(Stage::Pretrain, 100, 5e-4) == doctest::Approx(4.75e-4).epsilon(1e-12));
    CHECK(lr_schedule(Stage::Pretrain, 250, 5e-4) == doctest::Approx(5e-4 * 0.95 * 0.95).epsilon(1e-12));
    CHECK(lr_schedule(Stage::Adapt, 9, 5e-4) == doctest::Approx(5e-4).epsilon(1e-12));
    CHECK(lr_schedule(Stage::Adapt, 10, 5e-4) == doctest::Approx(2.5e-4).epsilon(1e-12));
    CHECK(lr_at(1.0, {0.5, 3}, 7) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("queue keeps every kind resident over 1000 refills") {
    for (std::size_t size : {3u, 4u, 12u, 17u})
        for (std::uint64_t seed : {1u, 2u, 3u}) {
            VolumeQueue q(corpus(size), 5, seed);
            std::map<std::size_t, std::size_t> loads;
            std::size_t epoch = q.epoch(), violations = 0;
            for (int r = 0; r < 1000; ++r) {
                try {
                    q.refill();
                } catch (const CorpusExhausted&) {
                    for (std::size_t v = 0; v < size; ++v) CHECK(q.epoch_loads()[v] == 1);
                    q.start_epoch();
                }
                if (q.epoch() != epoch) epoch = q.epoch();
                if (q.resident().size() > 5) ++violations;
                std::set<NictKind> kinds;
                for (auto v : q.resident()) kinds.insert(q.corpus()[v].kind);
                if (kinds.size() != 3) ++violations;
                for (auto v : q.epoch_loads()) violations += v > 1;
            }
            INFO("corpus " << size << " seed " << seed);
            CHECK(violations == 0);
        }
}

TEST_CASE("queue: 12 volumes, one full pass") {
    VolumeQueue q(corpus(12), 5, 4);
    std::size_t refills = 0;
    for (;;) {
        try {
            q.refill();
            ++refills;
        } catch (const CorpusExhausted&) {
            break;
        }
    }
    CHECK(q.consumed() == 12);
    for (auto n : q.epoch_loads()) CHECK(n == 1);
    std::set<std::size_t> loaded;
    for (const auto& e : q.events()) loaded.insert(e.loaded);
    CHECK(loaded.size() == 12);
}

TEST_CASE("queue sequences are seeded") {
    auto trace = [](std::uint64_t seed) {
        VolumeQueue q(corpus(9), 5, seed);
        std::vector<std::size_t> out;
        for (int i = 0; i < 200; ++i) {
            const auto s = q.next();
            out.push_back(s.volume * 100 + s.slice);
        }
        for (const auto& e : q.events()) out.push_back(1000 + e.loaded * 10 + e.evicted.value_or(9));
        return out;
    };
    CHECK(trace(5) == trace(5));
    CHECK(trace(5) != trace(6));
}

TEST_CASE("queue slice stream visits resident slices only and each once per fill") {
    VolumeQueue q(corpus(7), 5, 9);
    for (int i = 0; i < 300; ++i) {
        const auto s = q.next();
        CHECK(q.is_resident(s.volume));
        CHECK(s.slice < q.corpus()[s.volume].num_slices);
    }
    CHECK_THROWS_AS(VolumeQueue({}, 5, 1), InvalidConfig);
    CHECK_THROWS_AS(VolumeQueue(corpus(3), 0, 1), InvalidConfig);
}
