#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace protosim {

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
std::string read_file_text(const std::filesystem::path& path);

/// Writes to a sibling temporary file and renames it over `path`, so readers
/// never observe a partially written file.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);
void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& contents);

/// FNV-1a digest of a file's bytes as 16 hex digits.
std::string file_hash(const std::filesystem::path& path);

}  // namespace protosim
