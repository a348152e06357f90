#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "crk/errors.hpp"

namespace crk {

// Dense row-major float32 matrix; the in-memory twin of the .mat file format.
struct Matrix {
    uint32_t rows = 0;
    uint32_t cols = 0;
    std::vector<float> values;  // rows * cols, row-major

    Matrix() = default;
    Matrix(uint32_t r, uint32_t c) : rows(r), cols(c), values(size_t(r) * c, 0.0f) {}

    float& at(uint32_t r, uint32_t c) { return values[size_t(r) * cols + c]; }
    float at(uint32_t r, uint32_t c) const { return values[size_t(r) * cols + c]; }

    bool operator==(const Matrix&) const = default;
};

// File layout: 8-byte magic "CRKMAT01", rows (u32 LE), cols (u32 LE), then
// rows*cols float32 LE values row-major.
inline constexpr char MATRIX_MAGIC[9] = "CRKMAT01";

namespace detail {

inline void put_u32_le(std::string& out, uint32_t v) {
    out.push_back(static_cast<char>(v & 0xFF));
    out.push_back(static_cast<char>((v >> 8) & 0xFF));
    out.push_back(static_cast<char>((v >> 16) & 0xFF));
    out.push_back(static_cast<char>((v >> 24) & 0xFF));
}

inline uint32_t get_u32_le(const unsigned char* p) {
    return uint32_t(p[0]) | (uint32_t(p[1]) << 8) | (uint32_t(p[2]) << 16) |
           (uint32_t(p[3]) << 24);
}

}  // namespace detail

inline void write_matrix(const std::filesystem::path& path, const Matrix& m) {
    if (m.values.size() != size_t(m.rows) * m.cols)
        throw InputError("write_matrix: value count does not match rows*cols");
    std::string buf;
    buf.reserve(16 + m.values.size() * 4);
    buf.append(MATRIX_MAGIC, 8);
    detail::put_u32_le(buf, m.rows);
    detail::put_u32_le(buf, m.cols);
    for (float v : m.values) detail::put_u32_le(buf, std::bit_cast<uint32_t>(v));
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot open matrix file for writing: " + path.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw InputError("failed writing matrix file: " + path.string());
}

inline Matrix load_matrix(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open matrix file: " + path.string());
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 16 || std::memcmp(buf.data(), MATRIX_MAGIC, 8) != 0)
        throw InputError("matrix magic mismatch: " + path.string());
    const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
    Matrix m;
    m.rows = detail::get_u32_le(p + 8);
    m.cols = detail::get_u32_le(p + 12);
    const uint64_t count = uint64_t(m.rows) * m.cols;
    if (buf.size() != 16 + count * 4)
        throw InputError("matrix size mismatch in " + path.string() + ": header says " +
                         std::to_string(m.rows) + "x" + std::to_string(m.cols) + " (" +
                         std::to_string(16 + count * 4) + " bytes) but file has " +
                         std::to_string(buf.size()));
    m.values.resize(count);
    for (uint64_t i = 0; i < count; ++i)
        m.values[i] = std::bit_cast<float>(detail::get_u32_le(p + 16 + i * 4));
    return m;
}

}  // namespace crk
