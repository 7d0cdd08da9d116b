#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace nictkit {

/// 2D slice on a row-major grid. Values are HU for CT data; the projector
/// itself is unit-agnostic.
struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> values;

    Image() = default;
    Image(std::size_t h, std::size_t w, float fill = 0.0f) : height(h), width(w), values(h * w, fill) {}

    float& at(std::size_t r, std::size_t c) { return values[r * width + c]; }
    float at(std::size_t r, std::size_t c) const { return values[r * width + c]; }
    std::size_t size() const { return values.size(); }
    bool square() const { return height == width; }
};

inline constexpr float kHuMin = -1024.0f;
inline constexpr float kHuMax = 3071.0f;

/// Clamps to the stored HU range and rejects non-finite values.
Image ingest_hu(Image image);

/// Parallel-beam layout. View angles are equally spaced over
/// [angle_start_deg, angle_start_deg + angle_range_deg).
struct ProjectionGeometry {
    std::size_t num_views = 0;
    std::size_t num_detectors = 0;
    double angle_start_deg = 0.0;
    double angle_range_deg = 180.0;
    double detector_spacing = 1.0;
    std::vector<double> view_angles_deg;

    bool operator==(const ProjectionGeometry&) const = default;
};

ProjectionGeometry make_geometry(std::size_t num_views, std::size_t num_detectors, double angle_start_deg,
                                 double angle_range_deg, double detector_spacing);

/// Geometry with an explicit angle list (used after view decimation, where
/// the kept angles are no longer a regular grid over the nominal range).
ProjectionGeometry make_geometry_with_angles(std::vector<double> view_angles_deg, std::size_t num_detectors,
                                             double angle_start_deg, double angle_range_deg,
                                             double detector_spacing);

/// Detector count covering the image diagonal, rounded up to odd.
std::size_t default_detector_count(std::size_t side);

/// Full-coverage geometry: 720 views over 180 degrees.
ProjectionGeometry default_geometry(std::size_t side, std::size_t num_views = 720);

/// Inverse of default_detector_count: side length implied by a geometry.
std::size_t implied_side(const ProjectionGeometry& geom);

struct Sinogram {
    ProjectionGeometry geometry;
    std::vector<float> values;  // [num_views x num_detectors], row-major

    Sinogram() = default;
    explicit Sinogram(ProjectionGeometry geom)
        : geometry(std::move(geom)), values(geometry.num_views * geometry.num_detectors, 0.0f) {}

    float& at(std::size_t view, std::size_t det) { return values[view * geometry.num_detectors + det]; }
    float at(std::size_t view, std::size_t det) const { return values[view * geometry.num_detectors + det]; }
};

enum class FilterWindow { RamLak, Hann };

FilterWindow parse_window(const std::string& name);

/// Line integrals by bilinear sampling along each ray (step <= 0.5 px).
Sinogram forward_project(const Image& image, const ProjectionGeometry& geom);

/// Exact transpose of forward_project. `side` = 0 uses implied_side().
Image back_project(const Sinogram& sino, std::size_t side = 0);

/// Row-wise ramp filtering in the frequency domain.
Sinogram ramp_filter(const Sinogram& sino, FilterWindow window = FilterWindow::RamLak);

/// Filtered backprojection with pi/num_views angular weighting.
Image fbp(const Sinogram& sino, FilterWindow window = FilterWindow::RamLak, std::size_t side = 0);

}  // namespace nictkit
