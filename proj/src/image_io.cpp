#include "nictkit/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>

namespace nictkit {
namespace {

constexpr std::string_view kImageMagic = "NICTIMG1";
constexpr std::string_view kSinogramMagic = "NICTSIN1";
constexpr std::string_view kVolumeMagic = "NICTVOL1";

void check_regular(const ProjectionGeometry& g) {
    auto regular = make_geometry(g.num_views, g.num_detectors, g.angle_start_deg, g.angle_range_deg,
                                 g.detector_spacing);
    for (std::size_t i = 0; i < g.num_views; ++i)
        if (std::abs(regular.view_angles_deg[i] - g.view_angles_deg[i]) > 1e-6)
            throw InvalidGeometry("sinogram file format only stores equally spaced view angles");
}

}  // namespace

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw IoError("read failed for " + path.string());
    return std::move(ss).str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
    std::error_code ec;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename " + tmp.string() + " -> " + path.string() + ": " + ec.message());
}

void encode_image(ByteWriter& out, const Image& img) {
    out.magic(kImageMagic);
    out.u32(static_cast<std::uint32_t>(img.height));
    out.u32(static_cast<std::uint32_t>(img.width));
    out.f32s(img.values);
}

Image decode_image(ByteReader& in) {
    if (!in.expect_magic(kImageMagic)) in.fail("missing NICTIMG1 magic");
    Image img;
    img.height = in.u32();
    img.width = in.u32();
    img.values = in.f32s(img.height * img.width);
    return img;
}

void save_image(const std::filesystem::path& path, const Image& img) {
    ByteWriter w;
    encode_image(w, img);
    write_file_atomic(path, w.bytes());
}

Image load_image(const std::filesystem::path& path) {
    auto bytes = read_file(path);
    ByteReader r(bytes, path.string());
    return decode_image(r);
}

void encode_sinogram(ByteWriter& out, const Sinogram& sino) {
    const auto& g = sino.geometry;
    check_regular(g);
    out.magic(kSinogramMagic);
    out.u32(static_cast<std::uint32_t>(g.num_views));
    out.u32(static_cast<std::uint32_t>(g.num_detectors));
    out.f32(static_cast<float>(g.angle_start_deg));
    out.f32(static_cast<float>(g.angle_range_deg));
    out.f32(static_cast<float>(g.detector_spacing));
    out.f32s(sino.values);
}

Sinogram decode_sinogram(ByteReader& in) {
    if (!in.expect_magic(kSinogramMagic)) in.fail("missing NICTSIN1 magic");
    const std::uint32_t views = in.u32();
    const std::uint32_t dets = in.u32();
    const float start = in.f32();
    const float range = in.f32();
    const float spacing = in.f32();
    Sinogram s(make_geometry(views, dets, start, range, spacing));
    s.values = in.f32s(static_cast<std::size_t>(views) * dets);
    return s;
}

void save_sinogram(const std::filesystem::path& path, const Sinogram& sino) {
    ByteWriter w;
    encode_sinogram(w, sino);
    write_file_atomic(path, w.bytes());
}

Sinogram load_sinogram(const std::filesystem::path& path) {
    auto bytes = read_file(path);
    ByteReader r(bytes, path.string());
    return decode_sinogram(r);
}

void save_volume(const std::filesystem::path& path, const Volume& vol) {
    ByteWriter w;
    w.magic(kVolumeMagic);
    const std::size_t h = vol.slices.empty() ? 0 : vol.slices.front().height;
    const std::size_t wd = vol.slices.empty() ? 0 : vol.slices.front().width;
    w.u32(static_cast<std::uint32_t>(vol.slices.size()));
    w.u32(static_cast<std::uint32_t>(h));
    w.u32(static_cast<std::uint32_t>(wd));
    for (const auto& s : vol.slices) {
        if (s.height != h || s.width != wd) throw ShapeMismatch("volume slices must share one shape");
        w.f32s(s.values);
    }
    write_file_atomic(path, w.bytes());
}

Volume load_volume(const std::filesystem::path& path) {
    auto bytes = read_file(path);
    ByteReader r(bytes, path.string());
    if (!r.expect_magic(kVolumeMagic)) throw CorruptVolume(path.string() + ": missing NICTVOL1 magic");
    if (r.remaining() < 12) throw CorruptVolume(path.string() + ": truncated header");
    const std::uint32_t n = r.u32();
    const std::uint32_t h = r.u32();
    const std::uint32_t w = r.u32();
    const std::size_t expect = static_cast<std::size_t>(n) * h * w * 4;
    if (r.remaining() != expect)
        throw CorruptVolume(path.string() + ": header declares " + std::to_string(expect) + " payload bytes, file has " +
                            std::to_string(r.remaining()));
    Volume vol;
    vol.slices.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        Image img(h, w);
        img.values = r.f32s(static_cast<std::size_t>(h) * w);
        vol.slices.push_back(std::move(img));
    }
    return vol;
}

unsigned char window_to_byte(float hu, double window_center, double window_width) {
    const double lo = window_center - 0.5 * window_width;
    const double t = (static_cast<double>(hu) - lo) / window_width;
    return static_cast<unsigned char>(std::lround(std::clamp(t, 0.0, 1.0) * 255.0));
}

void save_png(const std::filesystem::path& path, const Image& img, double window_center, double window_width) {
    if (!(window_width > 0.0)) throw InvalidConfig("PNG window width must be positive");
    std::vector<unsigned char> pixels(img.size());
    for (std::size_t i = 0; i < img.size(); ++i) pixels[i] = window_to_byte(img.values[i], window_center, window_width);

    std::string bytes;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) throw IoError("libpng initialisation failed");
    std::unique_ptr<png_struct, void (*)(png_structp)> guard(png, [](png_structp p) {
        png_infop i = nullptr;
        png_destroy_write_struct(&p, &i);
    });
    if (setjmp(png_jmpbuf(png))) throw IoError("PNG encoding failed for " + path.string());
    png_set_write_fn(
        png, &bytes,
        [](png_structp p, png_bytep data, png_size_t len) {
            static_cast<std::string*>(png_get_io_ptr(p))->append(reinterpret_cast<const char*>(data), len);
        },
        nullptr);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::size_t r = 0; r < img.height; ++r) png_write_row(png, &pixels[r * img.width]);
    png_write_end(png, info);
    png_destroy_info_struct(png, &info);
    write_file_atomic(path, bytes);
}

}  // namespace nictkit
