#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

namespace octcvd {

// Little-endian binary primitives shared by the volume / checkpoint / model
// file formats.
void write_u32_le(std::ostream& os, std::uint32_t v);
void write_u64_le(std::ostream& os, std::uint64_t v);
void write_f64_le(std::ostream& os, double v);
std::uint32_t read_u32_le(std::istream& is);
std::uint64_t read_u64_le(std::istream& is);
double read_f64_le(std::istream& is);
void write_f64_block_le(std::ostream& os, const std::vector<double>& v);
std::vector<double> read_f64_block_le(std::istream& is, std::size_t n);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

// FNV-1a 64-bit, used for manifest input hashes.
std::uint64_t fnv1a64(const void* data, std::size_t n);
std::uint64_t fnv1a64_file(const std::filesystem::path& path);
std::string hex64(std::uint64_t v);

// Round-trip-exact double formatting for CSV output.
std::string format_double(double v);

// Minimal CSV support: our files never contain commas inside fields.
std::vector<std::string> split_csv_line(const std::string& line);
std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path);

}  // namespace octcvd
