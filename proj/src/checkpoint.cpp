#include "nictkit/checkpoint.hpp"

#include "nictkit/binary_io.hpp"
#include "nictkit/error.hpp"
#include "nictkit/random.hpp"

namespace nictkit {

namespace {
constexpr std::string_view kMagic = "NICTCKPT";
}

std::string encode_checkpoint(const ad::ParamTable& table) {
    ByteWriter w;
    w.magic(kMagic);
    w.u32(static_cast<std::uint32_t>(table.size()));
    for (const auto& [name, t] : table) {
        if (name.size() > 0xFFFF) throw InvalidConfig("parameter name too long: " + name.substr(0, 64));
        w.u16(static_cast<std::uint16_t>(name.size()));
        w.raw(name);
        w.u8(static_cast<std::uint8_t>(t.rank()));
        for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
        w.f32s(t.values());
    }
    return w.bytes();
}

ad::ParamTable decode_checkpoint(std::string_view bytes, const std::string& source) {
    ByteReader r(bytes, source);
    if (!r.expect_magic(kMagic)) throw IoError(source + ": not a NICTCKPT checkpoint");
    const std::uint32_t count = r.u32();
    ad::ParamTable table;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = r.str(r.u16());
        const std::uint8_t rank = r.u8();
        ad::Shape shape(rank);
        for (auto& d : shape) d = r.u32();
        auto values = r.f32s(ad::numel(shape));
        if (!table.emplace(name, ad::Tensor::from(shape, std::move(values))).second)
            throw IoError(source + ": duplicate entry " + name);
    }
    if (r.remaining() != 0) throw IoError(source + ": trailing bytes after checkpoint");
    return table;
}

void save_checkpoint(const std::filesystem::path& path, const ad::ParamTable& table) {
    write_file_atomic(path, encode_checkpoint(table));
}

ad::ParamTable load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(read_file(path), path.string());
}

std::uint64_t checkpoint_hash(const ad::ParamTable& table) { return fnv1a(encode_checkpoint(table)); }

}  // namespace nictkit
