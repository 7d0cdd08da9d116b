#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "nictkit/error.hpp"

namespace nictkit {

/// Little-endian serializer into an in-memory byte buffer.
class ByteWriter {
public:
    void magic(std::string_view m) { bytes_.append(m); }
    void u8(std::uint8_t v) { bytes_.push_back(static_cast<char>(v)); }
    void u16(std::uint16_t v) { put(v); }
    void u32(std::uint32_t v) { put(v); }
    void u64(std::uint64_t v) { put(v); }
    void f32(float v) { put(std::bit_cast<std::uint32_t>(v)); }
    void f32s(std::span<const float> vs) {
        for (float v : vs) f32(v);
    }
    void raw(std::string_view s) { bytes_.append(s); }

    const std::string& bytes() const { return bytes_; }

private:
    template <typename U>
    void put(U v) {
        for (std::size_t i = 0; i < sizeof(U); ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
    std::string bytes_;
};

/// Bounds-checked little-endian reader. Errors name `source`.
class ByteReader {
public:
    ByteReader(std::string_view data, std::string source) : data_(data), source_(std::move(source)) {}

    bool expect_magic(std::string_view m) {
        if (remaining() < m.size() || data_.substr(pos_, m.size()) != m) return false;
        pos_ += m.size();
        return true;
    }
    std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }
    std::uint16_t u16() { return get<std::uint16_t>(); }
    std::uint32_t u32() { return get<std::uint32_t>(); }
    std::uint64_t u64() { return get<std::uint64_t>(); }
    float f32() { return std::bit_cast<float>(get<std::uint32_t>()); }
    std::vector<float> f32s(std::size_t n) {
        if (remaining() / 4 < n) fail("payload truncated");
        std::vector<float> out(n);
        for (auto& v : out) v = f32();
        return out;
    }
    std::string str(std::size_t n) { return std::string(take(n)); }

    std::size_t remaining() const { return data_.size() - pos_; }
    const std::string& source() const { return source_; }
    [[noreturn]] void fail(const std::string& why) const { throw IoError(source_ + ": " + why); }

private:
    std::string_view take(std::size_t n) {
        if (remaining() < n) fail("unexpected end of data");
        auto s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    template <typename U>
    U get() {
        auto s = take(sizeof(U));
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i)
            v |= static_cast<U>(static_cast<std::uint8_t>(s[i])) << (8 * i);
        return v;
    }

    std::string_view data_;
    std::size_t pos_ = 0;
    std::string source_;
};

std::string read_file(const std::filesystem::path& path);

/// Writes via a sibling temp file and rename, creating parent directories.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

}  // namespace nictkit
