#pragma once

// Reference implementations written independently of the library, used as
// test oracles.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <vector>

namespace oracle {

inline std::vector<float> random_vector(std::size_t n, std::uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
    std::mt19937_64 g(seed);
    std::uniform_real_distribution<double> d(lo, hi);
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(d(g));
    return v;
}

inline double dot(const std::vector<float>& a, const std::vector<float>& b) {
    long double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<long double>(a[i]) * b[i];
    return static_cast<double>(s);
}

inline double mse(const std::vector<float>& a, const std::vector<float>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (double(a[i]) - b[i]) * (double(a[i]) - b[i]);
    return s / double(a.size());
}

inline double psnr(const std::vector<float>& a, const std::vector<float>& b, double range) {
    const double m = mse(a, b);
    if (m == 0) return std::numeric_limits<double>::infinity();
    return 20.0 * std::log10(range) - 10.0 * std::log10(m);
}

// chord of a centred disk at signed detector offset s
inline double chord(double radius, double s) {
    return std::abs(s) >= radius ? 0.0 : 2.0 * std::sqrt(radius * radius - s * s);
}

// spatial Ram-Lak kernel for unit spacing
inline double ram_lak(long n) {
    if (n == 0) return 0.25;
    if (n % 2 == 0) return 0.0;
    return -1.0 / (std::numbers::pi * std::numbers::pi * double(n) * double(n));
}

// Gaussian-window SSIM (11x11, sigma 1.5, valid mode), straight from the
// definition with double sums.
inline double ssim(const std::vector<float>& a, const std::vector<float>& b, std::size_t h, std::size_t w,
                   double range = 1.0) {
    const int k = 11;
    double g[11], gs = 0;
    for (int i = 0; i < k; ++i) {
        g[i] = std::exp(-((i - 5) * (i - 5)) / (2 * 1.5 * 1.5));
        gs += g[i];
    }
    for (auto& x : g) x /= gs;
    const double c1 = (0.01 * range) * (0.01 * range), c2 = (0.03 * range) * (0.03 * range);
    double total = 0;
    std::size_t count = 0;
    for (std::size_t r = 0; r + k <= h; ++r)
        for (std::size_t c = 0; c + k <= w; ++c) {
            double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
            for (int i = 0; i < k; ++i)
                for (int j = 0; j < k; ++j) {
                    const double wt = g[i] * g[j];
                    const double x = a[(r + i) * w + c + j], y = b[(r + i) * w + c + j];
                    ma += wt * x;
                    mb += wt * y;
                    saa += wt * x * x;
                    sbb += wt * y * y;
                    sab += wt * x * y;
                }
            const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
            total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            ++count;
        }
    return total / double(count);
}

}  // namespace oracle
