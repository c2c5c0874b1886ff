#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace lcnn {

/// Little-endian byte sink used by every versioned cache format.
class BinaryWriter {
public:
    void magic(std::string_view tag);
    void u8(std::uint8_t v) { bytes_.push_back(v); }
    void u16(std::uint16_t v);
    void u32(std::uint32_t v);
    void u64(std::uint64_t v);
    void f32(float v);
    void f64(double v);
    void str(std::string_view s);
    void f32_array(std::span<const float> v);

    const std::vector<std::uint8_t>& bytes() const { return bytes_; }

private:
    std::vector<std::uint8_t> bytes_;
};

class BinaryReader {
public:
    BinaryReader(std::vector<std::uint8_t> bytes, std::string source);

    /// Throws FormatError if the next bytes are not `tag`.
    void expect_magic(std::string_view tag);
    std::uint8_t u8();
    std::uint16_t u16();
    std::uint32_t u32();
    std::uint64_t u64();
    float f32();
    double f64();
    std::string str();
    std::vector<float> f32_array(std::size_t n);

    bool at_end() const { return pos_ == bytes_.size(); }
    const std::string& source() const { return source_; }

private:
    const std::uint8_t* take(std::size_t n);

    std::vector<std::uint8_t> bytes_;
    std::size_t pos_ = 0;
    std::string source_;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

/// Writes to a sibling temp file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_file_atomic(const std::filesystem::path& path, std::string_view text);

/// 64-bit FNV-1a, used for content-addressed cache keys.
std::uint64_t fnv1a(std::span<const std::uint8_t> bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a(std::string_view text, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);

} // namespace lcnn
