#include "nictkit/geometry.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numbers>
#include <string>

#include "nictkit/error.hpp"
#include "nictkit/parallel.hpp"

namespace nictkit {
namespace {

constexpr double kMaxRayStep = 0.5;

/// Sample positions along every ray of a square `side` grid. All rays share
/// the same t-grid so forward and transpose visit identical samples.
struct RayGrid {
    double half_length = 0.0;
    double step = 0.0;
    std::size_t count = 0;

    explicit RayGrid(std::size_t side) {
        const double half = 0.5 * static_cast<double>(side);
        half_length = std::sqrt(2.0 * half * half) + 1.0;
        count = static_cast<std::size_t>(std::ceil(2.0 * half_length / kMaxRayStep)) + 1;
        step = 2.0 * half_length / static_cast<double>(count - 1);
    }
};

/// Visits (pixel index, weight) pairs of the ray at detector coordinate `u`
/// for direction (cos_t, sin_t). Weight = bilinear weight * step length.
template <typename Visit>
void trace_ray(std::size_t side, const RayGrid& grid, double cos_t, double sin_t, double u, Visit&& visit) {
    const double center = 0.5 * static_cast<double>(side - 1);
    const double n = static_cast<double>(side);
    // col(t) = col0 - t*sin_t ; row(t) = row0 - t*cos_t
    const double col0 = u * cos_t + center;
    const double row0 = center - u * sin_t;

    double t_lo = -grid.half_length;
    double t_hi = grid.half_length;
    auto clip = [&](double p0, double slope) {
        // keep p0 + slope*t within (-1, n)
        if (std::abs(slope) < 1e-12) {
            if (p0 <= -1.0 || p0 >= n) t_hi = t_lo - 1.0;
            return;
        }
        double a = (-1.0 - p0) / slope;
        double b = (n - p0) / slope;
        if (a > b) std::swap(a, b);
        t_lo = std::max(t_lo, a);
        t_hi = std::min(t_hi, b);
    };
    clip(col0, -sin_t);
    clip(row0, -cos_t);
    if (t_hi < t_lo) return;

    const auto last = static_cast<long>(grid.count) - 1;
    const long k_lo = std::max(0L, static_cast<long>(std::floor((t_lo + grid.half_length) / grid.step)));
    const long k_hi = std::min(last, static_cast<long>(std::ceil((t_hi + grid.half_length) / grid.step)));
    const auto iside = static_cast<long>(side);

    for (long k = k_lo; k <= k_hi; ++k) {
        const double t = -grid.half_length + static_cast<double>(k) * grid.step;
        const double col = col0 - t * sin_t;
        const double row = row0 - t * cos_t;
        const double rf = std::floor(row);
        const double cf = std::floor(col);
        const long r = static_cast<long>(rf);
        const long c = static_cast<long>(cf);
        const double fr = row - rf;
        const double fc = col - cf;
        if (r >= 0 && c >= 0 && r + 1 < iside && c + 1 < iside) {
            const auto base = static_cast<std::size_t>(r * iside + c);
            const double s = grid.step;
            visit(base, (1 - fr) * (1 - fc) * s);
            visit(base + 1, (1 - fr) * fc * s);
            visit(base + static_cast<std::size_t>(iside), fr * (1 - fc) * s);
            visit(base + static_cast<std::size_t>(iside) + 1, fr * fc * s);
            continue;
        }
        const double w[4] = {(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc};
        const long rr[4] = {r, r, r + 1, r + 1};
        const long cc[4] = {c, c + 1, c, c + 1};
        for (int q = 0; q < 4; ++q) {
            if (rr[q] < 0 || rr[q] >= iside || cc[q] < 0 || cc[q] >= iside || w[q] == 0.0) continue;
            visit(static_cast<std::size_t>(rr[q] * iside + cc[q]), w[q] * grid.step);
        }
    }
}

double detector_coordinate(const ProjectionGeometry& g, std::size_t d) {
    return (static_cast<double>(d) - 0.5 * static_cast<double>(g.num_detectors - 1)) * g.detector_spacing;
}

void validate(const ProjectionGeometry& g) {
    if (g.num_views == 0 || g.num_detectors == 0)
        throw InvalidGeometry("num_views and num_detectors must be >= 1");
    if (!(g.angle_range_deg > 0.0) || g.angle_range_deg > 180.0)
        throw InvalidGeometry("angle_range_deg must lie in (0, 180], got " + std::to_string(g.angle_range_deg));
    if (!(g.detector_spacing > 0.0))
        throw InvalidGeometry("detector_spacing must be > 0");
    if (g.view_angles_deg.size() != g.num_views)
        throw InvalidGeometry("view angle list length differs from num_views");
    for (std::size_t i = 1; i < g.view_angles_deg.size(); ++i)
        if (!(g.view_angles_deg[i] > g.view_angles_deg[i - 1]))
            throw InvalidGeometry("view angles must be strictly increasing");
}

std::size_t next_pow2(std::size_t n) {
    std::size_t p = 1;
    while (p < n) p <<= 1;
    return p;
}

std::mutex g_fftw_plan_mutex;

}  // namespace

Image ingest_hu(Image image) {
    for (float& v : image.values) {
        if (!std::isfinite(v)) throw NonFiniteValue("image contains NaN/Inf");
        v = std::clamp(v, kHuMin, kHuMax);
    }
    return image;
}

ProjectionGeometry make_geometry(std::size_t num_views, std::size_t num_detectors, double angle_start_deg,
                                 double angle_range_deg, double detector_spacing) {
    if (num_views == 0 || num_detectors == 0)
        throw InvalidGeometry("num_views and num_detectors must be >= 1");
    if (!(angle_range_deg > 0.0) || angle_range_deg > 180.0)
        throw InvalidGeometry("angle_range_deg must lie in (0, 180], got " + std::to_string(angle_range_deg));
    std::vector<double> angles(num_views);
    const double step = angle_range_deg / static_cast<double>(num_views);
    for (std::size_t i = 0; i < num_views; ++i) angles[i] = angle_start_deg + step * static_cast<double>(i);
    return make_geometry_with_angles(std::move(angles), num_detectors, angle_start_deg, angle_range_deg,
                                     detector_spacing);
}

ProjectionGeometry make_geometry_with_angles(std::vector<double> view_angles_deg, std::size_t num_detectors,
                                             double angle_start_deg, double angle_range_deg,
                                             double detector_spacing) {
    ProjectionGeometry g;
    g.num_views = view_angles_deg.size();
    g.num_detectors = num_detectors;
    g.angle_start_deg = angle_start_deg;
    g.angle_range_deg = angle_range_deg;
    g.detector_spacing = detector_spacing;
    g.view_angles_deg = std::move(view_angles_deg);
    validate(g);
    return g;
}

std::size_t default_detector_count(std::size_t side) {
    auto n = static_cast<std::size_t>(std::ceil(std::numbers::sqrt2 * static_cast<double>(side) - 1e-9));
    return n % 2 == 0 ? n + 1 : n;
}

ProjectionGeometry default_geometry(std::size_t side, std::size_t num_views) {
    return make_geometry(num_views, default_detector_count(side), 0.0, 180.0, 1.0);
}

std::size_t implied_side(const ProjectionGeometry& geom) {
    auto side = static_cast<std::size_t>(static_cast<double>(geom.num_detectors) * geom.detector_spacing /
                                         std::numbers::sqrt2);
    side -= side % 2;
    return std::max<std::size_t>(side, 1);
}

FilterWindow parse_window(const std::string& name) {
    if (name == "ram-lak" || name == "ramlak") return FilterWindow::RamLak;
    if (name == "hann") return FilterWindow::Hann;
    throw InvalidGeometry("unknown filter window '" + name + "'");
}

Sinogram forward_project(const Image& image, const ProjectionGeometry& geom) {
    if (!image.square())
        throw ShapeMismatch("forward_project needs a square image, got " + std::to_string(image.height) + "x" +
                            std::to_string(image.width));
    validate(geom);
    Sinogram sino(geom);
    const std::size_t side = image.width;
    const RayGrid grid(side);
    const float* px = image.values.data();
    parallel_for(geom.num_views, [&](std::size_t v) {
        const double theta = geom.view_angles_deg[v] * std::numbers::pi / 180.0;
        const double ct = std::cos(theta);
        const double st = std::sin(theta);
        for (std::size_t d = 0; d < geom.num_detectors; ++d) {
            double acc = 0.0;
            trace_ray(side, grid, ct, st, detector_coordinate(geom, d),
                      [&](std::size_t idx, double w) { acc += w * static_cast<double>(px[idx]); });
            sino.at(v, d) = static_cast<float>(acc);
        }
    });
    return sino;
}

Image back_project(const Sinogram& sino, std::size_t side) {
    const auto& geom = sino.geometry;
    validate(geom);
    if (sino.values.size() != geom.num_views * geom.num_detectors)
        throw ShapeMismatch("sinogram holds " + std::to_string(sino.values.size()) + " values, geometry expects " +
                            std::to_string(geom.num_views * geom.num_detectors));
    if (side == 0) side = implied_side(geom);
    const RayGrid grid(side);
    std::vector<double> acc(side * side, 0.0);
    for (std::size_t v = 0; v < geom.num_views; ++v) {
        const double theta = geom.view_angles_deg[v] * std::numbers::pi / 180.0;
        const double ct = std::cos(theta);
        const double st = std::sin(theta);
        for (std::size_t d = 0; d < geom.num_detectors; ++d) {
            const double y = sino.at(v, d);
            if (y == 0.0) continue;
            trace_ray(side, grid, ct, st, detector_coordinate(geom, d),
                      [&](std::size_t idx, double w) { acc[idx] += w * y; });
        }
    }
    Image out(side, side);
    for (std::size_t i = 0; i < acc.size(); ++i) out.values[i] = static_cast<float>(acc[i]);
    return out;
}

Sinogram ramp_filter(const Sinogram& sino, FilterWindow window) {
    const auto& geom = sino.geometry;
    const std::size_t n = geom.num_detectors;
    if (n < 2) throw ShapeMismatch("ramp_filter needs at least 2 detectors");
    if (sino.values.size() != geom.num_views * n) throw ShapeMismatch("sinogram/geometry size disagreement");

    const std::size_t len = std::max<std::size_t>(512, next_pow2(2 * n));
    const std::size_t bins = len / 2 + 1;
    const double du = geom.detector_spacing;

    std::vector<double> buf(len);
    std::vector<fftw_complex> spec(bins);
    fftw_plan fwd;
    fftw_plan inv;
    {
        std::lock_guard lock(g_fftw_plan_mutex);
        fwd = fftw_plan_dft_r2c_1d(static_cast<int>(len), buf.data(), spec.data(), FFTW_ESTIMATE);
        inv = fftw_plan_dft_c2r_1d(static_cast<int>(len), spec.data(), buf.data(), FFTW_ESTIMATE);
    }

    // Band-limited ramp from its sampled spatial kernel:
    // h[0] = 1/(4du^2), h[odd k] = -1/(pi k du)^2, h[even k] = 0; scaled by du.
    for (std::size_t i = 0; i < len; ++i) {
        const long k = i <= len / 2 ? static_cast<long>(i) : static_cast<long>(i) - static_cast<long>(len);
        double h = 0.0;
        if (k == 0)
            h = 1.0 / (4.0 * du * du);
        else if (k % 2 != 0)
            h = -1.0 / (std::numbers::pi * std::numbers::pi * static_cast<double>(k * k) * du * du);
        buf[i] = h * du;
    }
    fftw_execute(fwd);
    std::vector<double> response(bins);
    for (std::size_t b = 0; b < bins; ++b) {
        double r = spec[b][0];
        if (window == FilterWindow::Hann)
            r *= 0.5 * (1.0 + std::cos(2.0 * std::numbers::pi * static_cast<double>(b) / static_cast<double>(len)));
        response[b] = r / static_cast<double>(len);
    }

    Sinogram out(geom);
    for (std::size_t v = 0; v < geom.num_views; ++v) {
        // Edge-extended padding: the row continues with its boundary values.
        const float* row = &sino.values[v * n];
        for (std::size_t i = 0; i < n; ++i) buf[i] = row[i];
        const std::size_t pad = len - n;
        const std::size_t right = pad / 2;
        for (std::size_t i = 0; i < right; ++i) buf[n + i] = row[n - 1];
        for (std::size_t i = n + right; i < len; ++i) buf[i] = row[0];
        fftw_execute(fwd);
        for (std::size_t b = 0; b < bins; ++b) {
            spec[b][0] *= response[b];
            spec[b][1] *= response[b];
        }
        fftw_execute(inv);
        for (std::size_t i = 0; i < n; ++i) out.at(v, i) = static_cast<float>(buf[i]);
    }
    {
        std::lock_guard lock(g_fftw_plan_mutex);
        fftw_destroy_plan(fwd);
        fftw_destroy_plan(inv);
    }
    return out;
}

Image fbp(const Sinogram& sino, FilterWindow window, std::size_t side) {
    Image img = back_project(ramp_filter(sino, window), side);
    // Angular step is range/num_views (pi/num_views at full coverage). The
    // transpose spreads each bin over a unit-area footprint, so it
    // interpolates the filtered row divided by the detector spacing.
    const auto& g = sino.geometry;
    const double weight = g.angle_range_deg * std::numbers::pi / 180.0 / static_cast<double>(g.num_views) *
                          g.detector_spacing;
    for (float& v : img.values) v = static_cast<float>(v * weight);
    return img;
}

}  // namespace nictkit
