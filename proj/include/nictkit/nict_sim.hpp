#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nictkit/geometry.hpp"

namespace nictkit {

enum class NictKind : std::uint8_t { LowDose = 0, SparseView = 1, LimitedAngle = 2 };
enum class DefectDegree : std::uint8_t { Low = 0, Mid = 1, High = 2 };

inline constexpr std::array<NictKind, 3> kAllKinds = {NictKind::LowDose, NictKind::SparseView,
                                                      NictKind::LimitedAngle};
inline constexpr std::array<DefectDegree, 3> kAllDegrees = {DefectDegree::Low, DefectDegree::Mid,
                                                            DefectDegree::High};

/// "ldct" / "svct" / "lact"
std::string to_string(NictKind kind);
/// "low" / "mid" / "high"
std::string to_string(DefectDegree degree);
NictKind parse_kind(const std::string& name);
DefectDegree parse_degree(const std::string& name);

/// One degradation. Only the field belonging to `kind` is meaningful; the
/// others stay at their identity values.
struct NictSetting {
    NictKind kind = NictKind::LowDose;
    double sigma_frac = 0.0;        // LowDose: noise std as a fraction of max |sinogram|
    std::size_t view_stride = 1;    // SparseView
    double keep_range_deg = 180.0;  // LimitedAngle
    bool centered_window = false;   // LimitedAngle: keep the middle of the scan instead of its start

    bool operator==(const NictSetting&) const = default;
};

NictSetting low_dose(double sigma_frac);
NictSetting sparse_view(std::size_t stride);
NictSetting limited_angle(double keep_range_deg, bool centered_window = false);

/// Severity presets per kind, indexed by DefectDegree (low, mid, high).
struct DefectPresets {
    std::array<double, 3> sigma_frac = {0.005, 0.01, 0.02};
    std::array<std::size_t, 3> view_stride = {2, 4, 8};
    std::array<double, 3> keep_range_deg = {150.0, 120.0, 90.0};

    /// Reads {"ldct": [..], "svct": [..], "lact": [..]}; missing keys keep defaults.
    static DefectPresets from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

NictSetting defect_preset(NictKind kind, DefectDegree degree, const DefectPresets& presets = {});

Sinogram degrade_low_dose(const Sinogram& sino, double sigma_frac, std::uint64_t seed);
Sinogram degrade_sparse_view(const Sinogram& sino, std::size_t stride);
Sinogram degrade_limited_angle(const Sinogram& sino, double keep_range_deg, bool centered_window = false);
Sinogram degrade(const Sinogram& sino, const NictSetting& setting, std::uint64_t seed);

struct SimulationOptions {
    std::size_t num_views = 720;
    FilterWindow window = FilterWindow::RamLak;
};

struct NictPair {
    Image nict;
    Image ict;
    NictSetting setting;
    std::uint64_t seed = 0;
    std::string volume_id;
    std::size_t slice = 0;
};

/// forward_project -> degrade -> fbp. The ICT side is the undegraded
/// reconstruction of the same sinogram. Inputs and outputs are HU; the
/// projector sees attenuation relative to air (HU + 1024).
NictPair simulate_nict(const Image& ict_hu, const NictSetting& setting, std::uint64_t seed,
                       const SimulationOptions& options = {});

// Pair file: "NICTPR01" + NICTIMG(nict) + NICTIMG(ict)
//   + u8 kind, f32 sigma_frac, u32 view_stride, f32 keep_range_deg, u8 centered + u64 seed
void save_pair(const std::filesystem::path& path, const NictPair& pair);
NictPair load_pair(const std::filesystem::path& path);

}  // namespace nictkit
