#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "nictkit/binary_io.hpp"
#include "nictkit/geometry.hpp"

namespace nictkit {

// "NICTIMG1" u32 height u32 width f32[height*width]
void encode_image(ByteWriter& out, const Image& img);
Image decode_image(ByteReader& in);
void save_image(const std::filesystem::path& path, const Image& img);
Image load_image(const std::filesystem::path& path);

// "NICTSIN1" u32 views u32 detectors f32 start f32 range f32 spacing f32[...]
void encode_sinogram(ByteWriter& out, const Sinogram& sino);
Sinogram decode_sinogram(ByteReader& in);
void save_sinogram(const std::filesystem::path& path, const Sinogram& sino);
Sinogram load_sinogram(const std::filesystem::path& path);

/// Stack of equally sized slices.
struct Volume {
    std::vector<Image> slices;
};

// "NICTVOL1" u32 slices u32 height u32 width f32[slices*height*width]
void save_volume(const std::filesystem::path& path, const Volume& vol);
/// Throws CorruptVolume on a bad magic or size mismatch, IoError if unreadable.
Volume load_volume(const std::filesystem::path& path);

/// 8-bit grayscale PNG with a HU display window.
void save_png(const std::filesystem::path& path, const Image& img, double window_center, double window_width);
/// HU -> [0,255] display mapping used by save_png.
unsigned char window_to_byte(float hu, double window_center, double window_width);

}  // namespace nictkit
