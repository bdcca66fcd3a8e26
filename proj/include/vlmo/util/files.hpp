#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace vlmo::util {

// Writes to a sibling temp file then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

void put_u32(std::string& out, std::uint32_t v);
void put_u64(std::string& out, std::uint64_t v);
void put_f32(std::string& out, float v);
std::uint32_t get_u32(std::string_view in, std::size_t offset);
std::uint64_t get_u64(std::string_view in, std::size_t offset);
float get_f32(std::string_view in, std::size_t offset);

// 64-bit FNV-1a, stable across platforms.
std::uint64_t fnv1a(std::string_view bytes);
std::string hex64(std::uint64_t v);

// splitmix64 step, used to derive independent seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace vlmo::util
