#include "nictkit/nict_sim.hpp"

#include <algorithm>
#include <cmath>

#include "nictkit/binary_io.hpp"
#include "nictkit/error.hpp"
#include "nictkit/image_io.hpp"
#include "nictkit/random.hpp"

namespace nictkit {
namespace {

constexpr std::string_view kPairMagic = "NICTPR01";
constexpr float kAirOffset = 1024.0f;

Sinogram select_views(const Sinogram& sino, const std::vector<std::size_t>& rows, double angle_start_deg,
                      double angle_range_deg) {
    const auto& g = sino.geometry;
    std::vector<double> angles;
    angles.reserve(rows.size());
    for (auto r : rows) angles.push_back(g.view_angles_deg[r]);
    Sinogram out(make_geometry_with_angles(std::move(angles), g.num_detectors, angle_start_deg, angle_range_deg,
                                           g.detector_spacing));
    for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy_n(&sino.values[rows[i] * g.num_detectors], g.num_detectors, &out.values[i * g.num_detectors]);
    return out;
}

}  // namespace

std::string to_string(NictKind kind) {
    switch (kind) {
        case NictKind::LowDose: return "ldct";
        case NictKind::SparseView: return "svct";
        case NictKind::LimitedAngle: return "lact";
    }
    return "?";
}

std::string to_string(DefectDegree degree) {
    switch (degree) {
        case DefectDegree::Low: return "low";
        case DefectDegree::Mid: return "mid";
        case DefectDegree::High: return "high";
    }
    return "?";
}

NictKind parse_kind(const std::string& name) {
    for (auto k : kAllKinds)
        if (to_string(k) == name) return k;
    throw InvalidConfig("unknown NICT setting '" + name + "' (expected ldct, svct or lact)");
}

DefectDegree parse_degree(const std::string& name) {
    for (auto d : kAllDegrees)
        if (to_string(d) == name) return d;
    throw InvalidConfig("unknown defect degree '" + name + "' (expected low, mid or high)");
}

NictSetting low_dose(double sigma_frac) {
    if (!(sigma_frac >= 0.0) || !std::isfinite(sigma_frac)) throw InvalidConfig("sigma_frac must be >= 0");
    return {NictKind::LowDose, sigma_frac, 1, 180.0, false};
}

NictSetting sparse_view(std::size_t stride) {
    if (stride < 1) throw InvalidStride("view stride must be >= 1");
    return {NictKind::SparseView, 0.0, stride, 180.0, false};
}

NictSetting limited_angle(double keep_range_deg, bool centered_window) {
    if (!(keep_range_deg > 0.0) || keep_range_deg > 180.0)
        throw InvalidRange("keep_range_deg must lie in (0, 180]");
    return {NictKind::LimitedAngle, 0.0, 1, keep_range_deg, centered_window};
}

DefectPresets DefectPresets::from_json(const nlohmann::json& j) {
    DefectPresets p;
    for (const auto& [key, value] : j.items()) {
        if (!value.is_array() || value.size() != 3)
            throw InvalidConfig("defect preset '" + key + "' must be a [low, mid, high] array");
        if (key == "ldct")
            p.sigma_frac = value.get<std::array<double, 3>>();
        else if (key == "svct")
            p.view_stride = value.get<std::array<std::size_t, 3>>();
        else if (key == "lact")
            p.keep_range_deg = value.get<std::array<double, 3>>();
        else
            throw InvalidConfig("unknown defect preset key '" + key + "'");
    }
    for (int i = 0; i < 3; ++i) {
        low_dose(p.sigma_frac[i]);
        sparse_view(p.view_stride[i]);
        limited_angle(p.keep_range_deg[i]);
    }
    return p;
}

nlohmann::json DefectPresets::to_json() const {
    return {{"ldct", sigma_frac}, {"svct", view_stride}, {"lact", keep_range_deg}};
}

NictSetting defect_preset(NictKind kind, DefectDegree degree, const DefectPresets& presets) {
    const auto i = static_cast<std::size_t>(degree);
    switch (kind) {
        case NictKind::LowDose: return low_dose(presets.sigma_frac[i]);
        case NictKind::SparseView: return sparse_view(presets.view_stride[i]);
        case NictKind::LimitedAngle: return limited_angle(presets.keep_range_deg[i]);
    }
    throw InvalidConfig("unknown NICT kind");
}

Sinogram degrade_low_dose(const Sinogram& sino, double sigma_frac, std::uint64_t seed) {
    if (!(sigma_frac >= 0.0)) throw InvalidConfig("sigma_frac must be >= 0");
    Sinogram out = sino;
    if (sigma_frac == 0.0) return out;
    double peak = 0.0;
    for (float v : sino.values) peak = std::max(peak, std::abs(static_cast<double>(v)));
    const double sigma = sigma_frac * peak;
    Rng rng(seed);
    for (float& v : out.values) v = static_cast<float>(v + sigma * rng.normal());
    return out;
}

Sinogram degrade_sparse_view(const Sinogram& sino, std::size_t stride) {
    const auto& g = sino.geometry;
    if (stride < 1 || stride > g.num_views)
        throw InvalidStride("stride " + std::to_string(stride) + " outside [1, " + std::to_string(g.num_views) + "]");
    if (stride == 1) return sino;
    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < g.num_views; r += stride) rows.push_back(r);
    // Kept views stay on a regular grid of step stride*delta; the nominal
    // range shrinks only when the count does not divide evenly.
    const double delta = g.angle_range_deg / static_cast<double>(g.num_views);
    const double range = std::min(g.angle_range_deg, static_cast<double>(rows.size() * stride) * delta);
    return select_views(sino, rows, g.angle_start_deg, range);
}

Sinogram degrade_limited_angle(const Sinogram& sino, double keep_range_deg, bool centered_window) {
    const auto& g = sino.geometry;
    if (!(keep_range_deg > 0.0) || keep_range_deg > g.angle_range_deg + 1e-9)
        throw InvalidRange("keep_range_deg " + std::to_string(keep_range_deg) + " outside (0, " +
                           std::to_string(g.angle_range_deg) + "]");
    const double start = centered_window ? g.angle_start_deg + 0.5 * (g.angle_range_deg - keep_range_deg)
                                         : g.angle_start_deg;
    const double stop = start + keep_range_deg;
    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < g.num_views; ++r) {
        const double a = g.view_angles_deg[r];
        if (a >= start - 1e-9 && a < stop - 1e-9) rows.push_back(r);
    }
    if (rows.empty()) throw InvalidRange("keep_range_deg retains no views");
    if (rows.size() == g.num_views) return sino;
    const double delta = g.angle_range_deg / static_cast<double>(g.num_views);
    return select_views(sino, rows, g.view_angles_deg[rows.front()], static_cast<double>(rows.size()) * delta);
}

Sinogram degrade(const Sinogram& sino, const NictSetting& setting, std::uint64_t seed) {
    switch (setting.kind) {
        case NictKind::LowDose: return degrade_low_dose(sino, setting.sigma_frac, seed);
        case NictKind::SparseView: return degrade_sparse_view(sino, setting.view_stride);
        case NictKind::LimitedAngle:
            return degrade_limited_angle(sino, setting.keep_range_deg, setting.centered_window);
    }
    throw InvalidConfig("unknown NICT kind");
}

NictPair simulate_nict(const Image& ict_hu, const NictSetting& setting, std::uint64_t seed,
                       const SimulationOptions& options) {
    if (!ict_hu.square()) throw ShapeMismatch("simulate_nict needs a square slice");
    const std::size_t side = ict_hu.width;
    Image mu = ingest_hu(ict_hu);
    for (float& v : mu.values) v += kAirOffset;

    const Sinogram clean = forward_project(mu, default_geometry(side, options.num_views));
    const Sinogram degraded = degrade(clean, setting, seed);

    auto to_hu = [](Image img) {
        for (float& v : img.values) v -= kAirOffset;
        return ingest_hu(std::move(img));
    };
    NictPair pair;
    pair.ict = to_hu(fbp(clean, options.window, side));
    pair.nict = to_hu(fbp(degraded, options.window, side));
    pair.setting = setting;
    pair.seed = seed;
    return pair;
}

void save_pair(const std::filesystem::path& path, const NictPair& pair) {
    ByteWriter w;
    w.magic(kPairMagic);
    encode_image(w, pair.nict);
    encode_image(w, pair.ict);
    w.u8(static_cast<std::uint8_t>(pair.setting.kind));
    w.f32(static_cast<float>(pair.setting.sigma_frac));
    w.u32(static_cast<std::uint32_t>(pair.setting.view_stride));
    w.f32(static_cast<float>(pair.setting.keep_range_deg));
    w.u8(pair.setting.centered_window ? 1 : 0);
    w.u64(pair.seed);
    write_file_atomic(path, w.bytes());
}

NictPair load_pair(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    ByteReader r(bytes, path.string());
    if (!r.expect_magic(kPairMagic)) r.fail("missing NICTPR01 magic");
    NictPair p;
    p.nict = decode_image(r);
    p.ict = decode_image(r);
    const auto kind = r.u8();
    if (kind > 2) r.fail("unknown setting kind " + std::to_string(kind));
    p.setting.kind = static_cast<NictKind>(kind);
    p.setting.sigma_frac = r.f32();
    p.setting.view_stride = r.u32();
    p.setting.keep_range_deg = r.f32();
    p.setting.centered_window = r.u8() != 0;
    p.seed = r.u64();
    if (r.remaining() != 0) r.fail("trailing bytes after pair record");
    if (p.nict.height != p.ict.height || p.nict.width != p.ict.width) r.fail("nict/ict shapes differ");
    return p;
}

}  // namespace nictkit
