#include "nictkit/adan.hpp"

#include <cmath>

#include "nictkit/error.hpp"

namespace nictkit {

AdanMapping parse_adan_mapping(const std::string& s) {
    if (s == "sequential") return AdanMapping::Sequential;
    if (s == "adam_like") return AdanMapping::AdamLike;
    throw InvalidConfig("unknown adan mapping '" + s + "' (sequential | adam_like)");
}

std::string to_string(AdanMapping m) { return m == AdanMapping::Sequential ? "sequential" : "adam_like"; }

AdanHyper::Decays AdanHyper::decays() const {
    if (mapping == AdanMapping::Sequential) return {b1, b2, b3};
    return {b1, b3, b2};
}

void AdanHyper::validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw InvalidConfig("adan: lr must be > 0");
    for (double b : {b1, b2, b3})
        if (!(b >= 0.0 && b < 1.0)) throw InvalidConfig("adan: momentum coefficients must lie in [0, 1)");
    if (!(eps > 0.0)) throw InvalidConfig("adan: eps must be > 0");
    if (!(weight_decay >= 0.0)) throw InvalidConfig("adan: weight_decay must be >= 0");
}

ad::ParamTable AdanState::to_table() const {
    ad::ParamTable t;
    for (const auto& [name, s] : slots) {
        const ad::Shape shape{s.m.size()};
        t.emplace("adan.m/" + name, ad::Tensor::from(shape, s.m));
        t.emplace("adan.diff/" + name, ad::Tensor::from(shape, s.diff));
        t.emplace("adan.n/" + name, ad::Tensor::from(shape, s.n));
        t.emplace("adan.prev/" + name, ad::Tensor::from(shape, s.prev));
    }
    // two 24-bit halves so the count survives f32 storage
    t.emplace("adan.step", ad::Tensor::from({2}, {static_cast<float>(step >> 24), static_cast<float>(step & 0xFFFFFF)}));
    return t;
}

AdanState AdanState::from_table(const ad::ParamTable& table) {
    AdanState st;
    for (const auto& [key, t] : table) {
        if (key == "adan.step") {
            if (t.numel() != 2) throw IoError("optimizer state: malformed adan.step");
            st.step = (static_cast<std::uint64_t>(t.data()[0]) << 24) | static_cast<std::uint64_t>(t.data()[1]);
            continue;
        }
        const auto slash = key.find('/');
        if (slash == std::string::npos) throw IoError("optimizer state: unexpected entry " + key);
        const std::string kind = key.substr(0, slash), name = key.substr(slash + 1);
        std::vector<float> v(t.values().begin(), t.values().end());
        auto& slot = st.slots[name];
        if (kind == "adan.m") slot.m = std::move(v);
        else if (kind == "adan.diff") slot.diff = std::move(v);
        else if (kind == "adan.n") slot.n = std::move(v);
        else if (kind == "adan.prev") slot.prev = std::move(v);
        else throw IoError("optimizer state: unexpected entry " + key);
    }
    return st;
}

void adan_step(ad::ParamTable& params, AdanState& state, const AdanHyper& hyper) {
    for (const auto& [name, p] : params) {
        if (!p.requires_grad()) continue;
        const auto g = p.grad();
        for (float v : g)
            if (!std::isfinite(v)) throw NonFiniteGradient("non-finite gradient in parameter '" + name + "'");
    }
    const auto [bm, bd, bn] = hyper.decays();
    const std::uint64_t k = ++state.step;
    const double bc1 = 1.0 - std::pow(bm, static_cast<double>(k));
    const double bc2 = 1.0 - std::pow(bd, static_cast<double>(k));
    const double bc3 = 1.0 - std::pow(bn, static_cast<double>(k));
    const double sqrt_bc3 = std::sqrt(bc3);
    const double decay = 1.0 + hyper.lr * hyper.weight_decay;

    for (auto& [name, p] : params) {
        if (!p.requires_grad()) continue;
        const auto g = p.grad();
        auto& s = state.slots[name];
        const std::size_t n = g.size();
        if (s.m.size() != n) {
            s.m.assign(n, 0.0f);
            s.diff.assign(n, 0.0f);
            s.n.assign(n, 0.0f);
            s.prev = g;
        }
        auto w = p.mutable_values();
        for (std::size_t i = 0; i < n; ++i) {
            const double gi = g[i];
            const double di = gi - s.prev[i];
            const double m = bm * s.m[i] + (1.0 - bm) * gi;
            const double dm = bd * s.diff[i] + (1.0 - bd) * di;
            const double u = gi + bd * di;
            const double nv = bn * s.n[i] + (1.0 - bn) * u * u;
            s.m[i] = static_cast<float>(m);
            s.diff[i] = static_cast<float>(dm);
            s.n[i] = static_cast<float>(nv);
            s.prev[i] = g[i];
            const double denom = std::sqrt(static_cast<double>(s.n[i])) / sqrt_bc3 + hyper.eps;
            const double step = (static_cast<double>(s.m[i]) / bc1 + bd * static_cast<double>(s.diff[i]) / bc2) / denom;
            w[i] = static_cast<float>((w[i] - hyper.lr * step) / decay);
        }
    }
}

}  // namespace nictkit
