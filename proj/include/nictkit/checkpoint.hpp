#pragma once

#include <filesystem>
#include <string>

#include "nictkit/tensor.hpp"

namespace nictkit {

// "NICTCKPT", u32 count, then per entry: u16 name length, name, u8 rank,
// u32 per dim, f32 payload. Entries are written in name order.
std::string encode_checkpoint(const ad::ParamTable& table);
ad::ParamTable decode_checkpoint(std::string_view bytes, const std::string& source = "<memory>");

void save_checkpoint(const std::filesystem::path& path, const ad::ParamTable& table);
ad::ParamTable load_checkpoint(const std::filesystem::path& path);

// Hash of the encoded table; identifies the base a LoRA file belongs to.
std::uint64_t checkpoint_hash(const ad::ParamTable& table);

}  // namespace nictkit
