#include "nictkit/phantom.hpp"

#include <cmath>
#include <numbers>
#include <vector>

#include "nictkit/random.hpp"

namespace nictkit {
namespace {

struct Ellipse {
    double value;
    double a, b;    // semi-axes, unit-square coordinates in [-1, 1]
    double x0, y0;  // centre
    double phi_deg;
};

Image rasterize(std::size_t side, const std::vector<Ellipse>& ellipses, double background, int supersample) {
    Image img(side, side);
    const double n = static_cast<double>(side);
    const int ss = std::max(1, supersample);
    for (std::size_t r = 0; r < side; ++r) {
        for (std::size_t c = 0; c < side; ++c) {
            double acc = 0.0;
            for (int sy = 0; sy < ss; ++sy) {
                for (int sx = 0; sx < ss; ++sx) {
                    const double x = (static_cast<double>(c) + (sx + 0.5) / ss) / n * 2.0 - 1.0;
                    const double y = 1.0 - (static_cast<double>(r) + (sy + 0.5) / ss) / n * 2.0;
                    double v = background;
                    for (const auto& e : ellipses) {
                        const double phi = e.phi_deg * std::numbers::pi / 180.0;
                        const double dx = x - e.x0;
                        const double dy = y - e.y0;
                        const double u = dx * std::cos(phi) + dy * std::sin(phi);
                        const double w = -dx * std::sin(phi) + dy * std::cos(phi);
                        if ((u * u) / (e.a * e.a) + (w * w) / (e.b * e.b) <= 1.0) v += e.value;
                    }
                    acc += v;
                }
            }
            img.at(r, c) = static_cast<float>(acc / (ss * ss));
        }
    }
    return img;
}

}  // namespace

Image shepp_logan(std::size_t side, int supersample) {
    static const std::vector<Ellipse> kToft = {
        {1.0, 0.69, 0.92, 0.0, 0.0, 0.0},        {-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0},
        {-0.2, 0.11, 0.31, 0.22, 0.0, -18.0},    {-0.2, 0.16, 0.41, -0.22, 0.0, 18.0},
        {0.1, 0.21, 0.25, 0.0, 0.35, 0.0},       {0.1, 0.046, 0.046, 0.0, 0.1, 0.0},
        {0.1, 0.046, 0.046, 0.0, -0.1, 0.0},     {0.1, 0.046, 0.023, -0.08, -0.605, 0.0},
        {0.1, 0.023, 0.023, 0.0, -0.606, 0.0},   {0.1, 0.023, 0.046, 0.06, -0.605, 0.0},
    };
    return rasterize(side, kToft, 0.0, supersample);
}

Image centered_disk(std::size_t side, double radius, float value, int supersample) {
    const double r = 2.0 * radius / static_cast<double>(side);
    return rasterize(side, {{value, r, r, 0.0, 0.0, 0.0}}, 0.0, supersample);
}

Image random_phantom(std::size_t side, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Ellipse> es;
    const double body_a = rng.uniform(0.70, 0.85);
    const double body_b = rng.uniform(0.55, 0.75);
    const double body_phi = rng.uniform(-10.0, 10.0);
    // Body: air (-1024) + 1064 -> ~40 HU soft tissue.
    es.push_back({1024.0 + rng.uniform(20.0, 60.0), body_a, body_b, 0.0, 0.0, body_phi});
    const int inserts = 3 + static_cast<int>(rng.index(4));
    for (int i = 0; i < inserts; ++i) {
        static const double kContrast[] = {-120.0, 40.0, 80.0, 900.0, -700.0};
        const double value = kContrast[rng.index(5)] * rng.uniform(0.6, 1.2);
        const double a = rng.uniform(0.06, 0.25) * body_a;
        const double b = rng.uniform(0.06, 0.25) * body_b;
        const double x0 = rng.uniform(-0.5, 0.5) * body_a;
        const double y0 = rng.uniform(-0.5, 0.5) * body_b;
        es.push_back({value, a, b, x0, y0, rng.uniform(0.0, 180.0)});
    }
    Image img = rasterize(side, es, -1024.0, 2);
    return ingest_hu(std::move(img));
}

}  // namespace nictkit
