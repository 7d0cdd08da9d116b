#pragma once

#include <cstdint>

#include "nictkit/geometry.hpp"

namespace nictkit {

/// Modified (Toft) Shepp-Logan head phantom, intensities in [0, 1], each
/// pixel averaged over `supersample`^2 sub-samples.
Image shepp_logan(std::size_t side, int supersample = 4);

/// Uniform disk of `value` centred on the grid.
Image centered_disk(std::size_t side, double radius, float value = 1.0f, int supersample = 4);

/// Seeded body-like ellipse phantom in HU: air background, soft-tissue body,
/// and randomly placed fat/organ/bone/lung inserts.
Image random_phantom(std::size_t side, std::uint64_t seed);

}  // namespace nictkit
