#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace ctrlstruct {

/// Lowercase hex SHA-256 of a byte string.
std::string sha256_hex(std::string_view bytes);

/// SHA-256 of a file's contents; throws Error if the file cannot be read.
std::string sha256_file(const std::filesystem::path& path);

/// Stable 64-bit seed derived from a base seed and a label (first 8 bytes of SHA-256).
std::uint64_t derive_seed(std::uint64_t base, std::string_view label);

}  // namespace ctrlstruct
