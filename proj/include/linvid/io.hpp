#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "linvid/common.hpp"
#include "linvid/tensor.hpp"

namespace linvid {

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

// Shortest round-trip decimal form; keeps CSV/JSON output byte-stable.
std::string fmt_g17(double v);

// ---- LTZ tensor container ----
// magic "LTZ1", u32 LE rank, u32 LE per dimension, row-major f32 LE payload.

namespace detail {
inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xFF));
    out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xFF));
    out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xFF));
    out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xFF));
}
inline std::uint32_t get_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
}  // namespace detail

template <typename T>
std::vector<std::uint8_t> ltz_encode(const Tensor<T>& t) {
    std::vector<std::uint8_t> out;
    out.reserve(8 + 4 * t.rank() + 4 * t.size());
    out.insert(out.end(), {'L', 'T', 'Z', '1'});
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (std::size_t i = 0; i < t.size(); ++i) {
        const float f = static_cast<float>(t[i]);
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        detail::put_u32(out, bits);
    }
    return out;
}

template <typename T>
Tensor<T> ltz_decode(const std::vector<std::uint8_t>& bytes, const std::string& what) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), "LTZ1", 4) != 0)
        throw IoError(what + ": not an LTZ1 tensor file");
    const std::uint32_t rank = detail::get_u32(bytes.data() + 4);
    if (rank > 8) throw IoError(what + ": implausible rank " + std::to_string(rank));
    if (bytes.size() < 8 + 4 * static_cast<std::size_t>(rank)) throw IoError(what + ": truncated header");
    Shape shape(rank);
    std::size_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        shape[i] = detail::get_u32(bytes.data() + 8 + 4 * i);
        if (shape[i] == 0) throw IoError(what + ": zero dimension");
        numel *= shape[i];
    }
    const std::size_t payload = 8 + 4 * static_cast<std::size_t>(rank);
    if (bytes.size() != payload + 4 * numel)
        throw IoError(what + ": payload size mismatch (" + std::to_string(bytes.size() - payload) +
                      " bytes for " + std::to_string(numel) + " elements)");
    Tensor<T> t(shape);
    for (std::size_t i = 0; i < numel; ++i) {
        const std::uint32_t bits = detail::get_u32(bytes.data() + payload + 4 * i);
        float f;
        std::memcpy(&f, &bits, 4);
        t[i] = static_cast<T>(f);
    }
    t.require_finite(what);
    return t;
}

template <typename T>
void write_ltz(const std::filesystem::path& path, const Tensor<T>& t) {
    write_file_bytes(path, ltz_encode(t));
}

template <typename T>
Tensor<T> read_ltz(const std::filesystem::path& path) {
    return ltz_decode<T>(read_file_bytes(path), path.string());
}

// ---- binary PGM (P5, 8-bit) ----

struct PgmImage {
    std::size_t width = 0, height = 0;
    std::vector<std::uint8_t> pixels;  // row-major
};

PgmImage read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const PgmImage& img);

// [1,H,W] in [0,1] <-> 8-bit grayscale; values are clamped before quantizing.
Tensor<double> pgm_to_frame(const PgmImage& img);
PgmImage frame_to_pgm(const Tensor<double>& frame);

template <typename T>
PgmImage frame_to_pgm_t(const Tensor<T>& frame) {
    return frame_to_pgm(frame.template cast<double>());
}

}  // namespace linvid
