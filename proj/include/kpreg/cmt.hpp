// CMT tensor container.
//
//   bytes 0..3   "CMT1"
//   byte  4      dtype code (1 = float32 little-endian)
//   byte  5      ndim
//   then         ndim x u64 little-endian extents
//   then         raw element data, row-major
#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include "kpreg/tensor.hpp"

namespace kpreg {

class FormatError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

namespace cmt {

inline constexpr std::array<char, 4> magic{'C', 'M', 'T', '1'};
inline constexpr std::uint8_t dtype_f32le = 1;

inline std::vector<std::uint8_t> encode(const Tensor &t) {
    if (t.ndim() > 255) {
        throw std::invalid_argument("CMT supports at most 255 axes");
    }
    std::vector<std::uint8_t> out;
    out.reserve(6 + 8 * t.ndim() + 4 * t.size());
    out.insert(out.end(), magic.begin(), magic.end());
    out.push_back(dtype_f32le);
    out.push_back(static_cast<std::uint8_t>(t.ndim()));
    for (std::size_t e : t.shape()) {
        const auto v = static_cast<std::uint64_t>(e);
        for (int b = 0; b < 8; ++b) {
            out.push_back(static_cast<std::uint8_t>((v >> (8 * b)) & 0xffu));
        }
    }
    for (float f : t.values()) {
        const auto bits = std::bit_cast<std::uint32_t>(f);
        for (int b = 0; b < 4; ++b) {
            out.push_back(static_cast<std::uint8_t>((bits >> (8 * b)) & 0xffu));
        }
    }
    return out;
}

inline Tensor decode(const std::vector<std::uint8_t> &bytes, const std::string &origin = "<memory>") {
    auto fail = [&](const std::string &why) { return FormatError(origin + ": " + why); };
    if (bytes.size() < 6 || !std::equal(magic.begin(), magic.end(), bytes.begin())) {
        throw fail("missing CMT1 magic");
    }
    if (bytes[4] != dtype_f32le) {
        throw fail("unsupported dtype code " + std::to_string(bytes[4]));
    }
    const std::size_t ndim = bytes[5];
    std::size_t pos = 6;
    if (bytes.size() < pos + 8 * ndim) {
        throw fail("truncated header");
    }
    Shape dims(ndim);
    for (std::size_t a = 0; a < ndim; ++a) {
        std::uint64_t v = 0;
        for (int b = 0; b < 8; ++b) {
            v |= static_cast<std::uint64_t>(bytes[pos++]) << (8 * b);
        }
        if (v == 0) {
            throw fail("zero extent on axis " + std::to_string(a));
        }
        dims[a] = static_cast<std::size_t>(v);
    }
    const std::size_t n = shape_numel(dims);
    if (bytes.size() - pos != 4 * n) {
        throw fail("payload holds " + std::to_string(bytes.size() - pos) + " bytes, expected " +
                   std::to_string(4 * n));
    }
    std::vector<float> values(n);
    for (std::size_t k = 0; k < n; ++k, pos += 4) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) {
            bits |= static_cast<std::uint32_t>(bytes[pos + b]) << (8 * b);
        }
        values[k] = std::bit_cast<float>(bits);
    }
    return Tensor(std::move(dims), std::move(values));
}

inline void write(const std::filesystem::path &path, const Tensor &t) {
    const auto bytes = encode(t);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw std::runtime_error("cannot open " + path.string() + " for writing");
    }
    os.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) {
        throw std::runtime_error("failed writing " + path.string());
    }
}

inline Tensor read(const std::filesystem::path &path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw FormatError(path.string() + ": cannot open");
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return decode(bytes, path.string());
}

} // namespace cmt
} // namespace kpreg
