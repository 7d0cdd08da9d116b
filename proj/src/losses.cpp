#include "nictkit/losses.hpp"

#include <cmath>

#include "nictkit/error.hpp"
#include "nictkit/ops.hpp"
#include "nictkit/random.hpp"

namespace nictkit {

using ad::Tensor;

void DdelWeights::validate() const {
    for (double w : {w1, w2, w3, w4})
        if (!std::isfinite(w) || w < 0.0) throw InvalidConfig("ddel_weights must be finite and >= 0");
}

DdelWeights DdelWeights::from_json(const nlohmann::json& j) {
    if (!j.is_array() || j.size() != 4) throw InvalidConfig("ddel_weights must be an array [w1, w2, w3, w4]");
    DdelWeights w;
    try {
        w = {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
    } catch (const nlohmann::json::exception& e) {
        throw InvalidConfig(std::string("ddel_weights: ") + e.what());
    }
    w.validate();
    return w;
}

double weighted_total(const DdelWeights& w, double a, double b, double c, double d) {
    return w.w1 * a + w.w2 * b + w.w3 * c + w.w4 * d;
}

LossBreakdown combine(const DdelWeights& w, double a, double b, double c, double d) {
    return {a, b, c, d, weighted_total(w, a, b, c, d)};
}

FeatureExtractor FeatureExtractor::seeded(std::uint64_t seed, std::vector<std::size_t> taps) {
    const std::size_t channels[] = {1, 8, 8, 16, 16};
    Rng rng(seed);
    ad::ParamTable table;
    for (std::size_t i = 0; i < 4; ++i) {
        const std::size_t in = channels[i], out = channels[i + 1];
        const double std = std::sqrt(2.0 / static_cast<double>(in * 9));
        std::vector<float> w(out * in * 9);
        for (auto& v : w) v = static_cast<float>(rng.normal() * std);
        const std::string p = "extractor.conv" + std::to_string(i);
        table.emplace(p + ".weight", Tensor::from({out, in, 3, 3}, std::move(w)));
        table.emplace(p + ".bias", Tensor::zeros({out}));
    }
    return from_table(table, {1, 2, 1, 2}, std::move(taps), Activation::Gelu);
}

FeatureExtractor FeatureExtractor::from_table(const ad::ParamTable& table, std::vector<std::size_t> strides,
                                              std::vector<std::size_t> taps, Activation activation) {
    FeatureExtractor fe;
    fe.activation_ = activation;
    for (std::size_t i = 0; i < strides.size(); ++i) {
        const std::string p = "extractor.conv" + std::to_string(i);
        auto w = table.find(p + ".weight");
        auto b = table.find(p + ".bias");
        if (w == table.end() || b == table.end()) throw InvalidConfig("feature extractor: missing " + p);
        fe.weights_.push_back(w->second.detach());
        fe.biases_.push_back(b->second.detach());
    }
    if (taps.empty()) throw InvalidConfig("feature extractor: no layers selected");
    for (auto t : taps)
        if (t >= strides.size()) throw InvalidConfig("feature extractor: tap " + std::to_string(t) + " out of range");
    fe.strides_ = std::move(strides);
    fe.taps_ = std::move(taps);
    return fe;
}

std::vector<Tensor> FeatureExtractor::features(const Tensor& x) const {
    std::vector<Tensor> all;
    Tensor h = x;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
        h = ad::conv2d(h, weights_[i], biases_[i], strides_[i], weights_[i].dim(2) / 2);
        h = activation_ == Activation::Relu ? ad::relu(h) : ad::gelu(h);
        all.push_back(h);
    }
    std::vector<Tensor> out;
    for (auto t : taps_) out.push_back(all[t]);
    return out;
}

namespace {

void same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape())
        throw ShapeMismatch(std::string(what) + ": " + ad::to_string(a.shape()) + " vs " + ad::to_string(b.shape()));
}

Tensor square_mean(const Tensor& d) { return ad::mean(ad::mul(d, d)); }

Tensor gaussian_window() {
    constexpr int n = 11;
    constexpr double sigma = 1.5;
    std::vector<double> g(n);
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
        g[i] = std::exp(-((i - 5) * (i - 5)) / (2.0 * sigma * sigma));
        s += g[i];
    }
    std::vector<float> k(n * n);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) k[y * n + x] = static_cast<float>(g[y] * g[x] / (s * s));
    return Tensor::from({1, 1, n, n}, std::move(k));
}

}  // namespace

Tensor loss_mse_image(const Tensor& pred, const Tensor& target) {
    same_shape(pred, target, "loss_mse_image");
    return square_mean(ad::sub(pred, target));
}

Tensor ssim_mean(const Tensor& a, const Tensor& b) {
    same_shape(a, b, "ssim");
    if (a.rank() != 4 || a.dim(1) != 1) throw ShapeMismatch("ssim expects [B, 1, H, W], got " + ad::to_string(a.shape()));
    if (a.dim(2) < 11 || a.dim(3) < 11)
        throw ImageTooSmall("ssim needs at least 11x11 pixels, got " + ad::to_string(a.shape()));
    static const Tensor win = gaussian_window();
    constexpr float c1 = 0.01f * 0.01f;
    constexpr float c2 = 0.03f * 0.03f;
    auto blur = [](const Tensor& t) { return ad::conv2d(t, win); };
    const Tensor mu_a = blur(a), mu_b = blur(b);
    const Tensor mu_aa = ad::mul(mu_a, mu_a), mu_bb = ad::mul(mu_b, mu_b), mu_ab = ad::mul(mu_a, mu_b);
    // second moments about mid-range; the local variances are unchanged
    const Tensor ac = ad::add_scalar(a, -0.5f), bc = ad::add_scalar(b, -0.5f);
    const Tensor ma = blur(ac), mb = blur(bc);
    const Tensor s_aa = ad::sub(blur(ad::mul(ac, ac)), ad::mul(ma, ma));
    const Tensor s_bb = ad::sub(blur(ad::mul(bc, bc)), ad::mul(mb, mb));
    const Tensor s_ab = ad::sub(blur(ad::mul(ac, bc)), ad::mul(ma, mb));
    const Tensor num = ad::mul(ad::add_scalar(ad::scale(mu_ab, 2.0f), c1), ad::add_scalar(ad::scale(s_ab, 2.0f), c2));
    const Tensor den = ad::mul(ad::add_scalar(ad::add(mu_aa, mu_bb), c1), ad::add_scalar(ad::add(s_aa, s_bb), c2));
    return ad::mean(ad::div(num, den));
}

Tensor loss_ssim(const Tensor& pred, const Tensor& target) {
    return ad::add_scalar(ad::scale(ssim_mean(pred, target), -1.0f), 1.0f);
}

Tensor loss_perceptual(const Tensor& pred, const Tensor& target, const FeatureExtractor& extractor) {
    same_shape(pred, target, "loss_perceptual");
    const auto fp = extractor.features(pred);
    const auto ft = extractor.features(target);
    Tensor acc;
    for (std::size_t i = 0; i < fp.size(); ++i) {
        const Tensor term = square_mean(ad::sub(fp[i], ft[i]));
        acc = acc.defined() ? ad::add(acc, term) : term;
    }
    return ad::scale(acc, 1.0f / static_cast<float>(fp.size()));
}

Tensor loss_mse_projection(const Tensor& pred, const Tensor& target, const ProjectionGeometry& geom) {
    same_shape(pred, target, "loss_mse_projection");
    return square_mean(ad::radon(ad::sub(pred, target), geom));
}

ProjectionGeometry projection_loss_geometry(std::size_t side, std::size_t views) {
    return make_geometry(views, default_detector_count(side), 0.0, 180.0, 1.0);
}

DdelTerms loss_total(const Tensor& pred, const Tensor& target, const ProjectionGeometry& geom,
                     const DdelWeights& weights, const FeatureExtractor& extractor) {
    weights.validate();
    DdelTerms t;
    t.l_mse_img = loss_mse_image(pred, target);
    t.l_ssim = loss_ssim(pred, target);
    t.l_perc = loss_perceptual(pred, target, extractor);
    t.l_mse_proj = loss_mse_projection(pred, target, geom);
    t.total = ad::add(ad::add(ad::scale(t.l_mse_img, static_cast<float>(weights.w1)),
                              ad::scale(t.l_ssim, static_cast<float>(weights.w2))),
                      ad::add(ad::scale(t.l_perc, static_cast<float>(weights.w3)),
                              ad::scale(t.l_mse_proj, static_cast<float>(weights.w4))));
    t.breakdown = combine(weights, t.l_mse_img.item(), t.l_ssim.item(), t.l_perc.item(), t.l_mse_proj.item());
    return t;
}

namespace {

Tensor random_image(Rng& rng, std::size_t side) {
    std::vector<float> v(side * side);
    for (auto& x : v) x = static_cast<float>(rng.uniform());
    return Tensor::from({1, 1, side, side}, std::move(v));
}

}  // namespace

std::vector<ad::GradCase> loss_grad_cases(std::uint64_t seed) {
    Rng rng(seed);
    std::vector<ad::GradCase> cases;
    auto pair_case = [&](std::string name, std::size_t side, std::function<Tensor(const Tensor&, const Tensor&)> f) {
        std::vector<Tensor> in{random_image(rng, side), random_image(rng, side)};
        const std::uint64_t s = rng.next();
        cases.push_back({std::move(name), [in, f, s]() {
                             return ad::grad_check([&](const std::vector<Tensor>& x) { return f(x[0], x[1]); }, in,
                                                   1e-3, s);
                         }});
    };
    pair_case("loss_mse_image", 16, loss_mse_image);
    pair_case("loss_ssim", 16, loss_ssim);
    const auto fe = FeatureExtractor::seeded();
    pair_case("loss_perceptual", 16, [fe](const Tensor& a, const Tensor& b) { return loss_perceptual(a, b, fe); });
    const auto geom = projection_loss_geometry(32);
    pair_case("loss_mse_projection", 32, [geom](const Tensor& a, const Tensor& b) { return loss_mse_projection(a, b, geom); });
    return cases;
}

}  // namespace nictkit
