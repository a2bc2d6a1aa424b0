#pragma once

// Minimal NPY v1.0 codec for little-endian float32, C-order arrays.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mdsafe/detail/codec.hpp"
#include "mdsafe/error.hpp"

namespace mdsafe::detail {

static_assert(std::endian::native == std::endian::little, "NPY codec assumes a little-endian host");

inline constexpr std::string_view kNpyMagic{"\x93NUMPY", 6};
inline constexpr std::size_t kNpyPrefix = 10;  // magic + version + header length

struct NpyHeader {
    std::vector<std::size_t> shape;
    std::size_t data_offset = 0;

    std::size_t element_count() const {
        std::size_t n = 1;
        for (auto d : shape) n *= d;
        return n;
    }
};

struct NpyArray {
    std::vector<std::size_t> shape;
    std::vector<float> data;
};

namespace npy_impl {

inline void skip_ws(std::string_view s, std::size_t& i) {
    while (i < s.size() && (s[i] == ' ' || s[i] == '\t' || s[i] == '\n')) ++i;
}

inline bool consume(std::string_view s, std::size_t& i, char c) {
    skip_ws(s, i);
    if (i < s.size() && s[i] == c) {
        ++i;
        return true;
    }
    return false;
}

inline std::string parse_quoted(std::string_view s, std::size_t& i) {
    skip_ws(s, i);
    if (i >= s.size() || (s[i] != '\'' && s[i] != '"')) throw FormatError("npy: expected quoted string in header");
    const char q = s[i++];
    const auto end = s.find(q, i);
    if (end == std::string_view::npos) throw FormatError("npy: unterminated string in header");
    std::string out(s.substr(i, end - i));
    i = end + 1;
    return out;
}

inline std::vector<std::size_t> parse_shape(std::string_view s, std::size_t& i) {
    if (!consume(s, i, '(')) throw FormatError("npy: shape is not a tuple");
    std::vector<std::size_t> shape;
    while (true) {
        skip_ws(s, i);
        if (consume(s, i, ')')) break;
        std::size_t v = 0;
        std::size_t digits = 0;
        while (i < s.size() && s[i] >= '0' && s[i] <= '9') {
            if (v > (std::size_t{1} << 40)) throw FormatError("npy: shape dimension too large");
            v = v * 10 + static_cast<std::size_t>(s[i] - '0');
            ++i;
            ++digits;
        }
        if (digits == 0) throw FormatError("npy: malformed shape tuple");
        shape.push_back(v);
        if (consume(s, i, ',')) continue;
        if (consume(s, i, ')')) break;
        throw FormatError("npy: malformed shape tuple");
    }
    return shape;
}

}  // namespace npy_impl

/// Parses the fixed prefix and header dict. `bytes` may hold only the
/// beginning of the file; only the header is inspected.
inline NpyHeader parse_npy_header(std::span<const std::uint8_t> bytes) {
    using namespace npy_impl;
    if (bytes.size() < kNpyPrefix) throw FormatError("npy: file shorter than header prefix");
    if (std::memcmp(bytes.data(), kNpyMagic.data(), kNpyMagic.size()) != 0) throw FormatError("npy: bad magic");
    if (bytes[6] != 1 || bytes[7] != 0) {
        throw FormatError("npy: unsupported version " + std::to_string(bytes[6]) + "." + std::to_string(bytes[7]));
    }
    const std::size_t hlen = static_cast<std::size_t>(bytes[8]) | (static_cast<std::size_t>(bytes[9]) << 8);
    if (bytes.size() < kNpyPrefix + hlen) throw FormatError("npy: truncated header");
    const std::string_view s(reinterpret_cast<const char*>(bytes.data()) + kNpyPrefix, hlen);

    std::string descr;
    bool have_descr = false, have_order = false, have_shape = false;
    NpyHeader hdr;
    std::size_t i = 0;
    if (!consume(s, i, '{')) throw FormatError("npy: header is not a dict");
    while (true) {
        if (consume(s, i, '}')) break;
        const std::string key = parse_quoted(s, i);
        if (!consume(s, i, ':')) throw FormatError("npy: expected ':' in header");
        if (key == "descr") {
            descr = parse_quoted(s, i);
            have_descr = true;
        } else if (key == "fortran_order") {
            skip_ws(s, i);
            if (s.substr(i, 5) == "False") {
                i += 5;
            } else if (s.substr(i, 4) == "True") {
                throw FormatError("npy: fortran_order arrays are not supported");
            } else {
                throw FormatError("npy: malformed fortran_order");
            }
            have_order = true;
        } else if (key == "shape") {
            hdr.shape = parse_shape(s, i);
            have_shape = true;
        } else {
            throw FormatError("npy: unexpected header key '" + key + "'");
        }
        if (consume(s, i, ',')) continue;
        if (consume(s, i, '}')) break;
        throw FormatError("npy: malformed header dict");
    }
    if (!have_descr || !have_order || !have_shape) throw FormatError("npy: header missing required keys");
    if (descr != "<f4") throw FormatError("npy: unsupported dtype '" + descr + "', expected '<f4'");
    hdr.data_offset = kNpyPrefix + hlen;
    return hdr;
}

inline NpyArray decode_npy(std::span<const std::uint8_t> bytes) {
    NpyHeader hdr = parse_npy_header(bytes);
    const std::size_t n = hdr.element_count();
    const std::size_t payload = bytes.size() - hdr.data_offset;
    if (payload != n * sizeof(float)) {
        throw FormatError("npy: payload is " + std::to_string(payload) + " bytes, shape requires " +
                          std::to_string(n * sizeof(float)));
    }
    NpyArray arr;
    arr.shape = std::move(hdr.shape);
    arr.data.resize(n);
    if (n > 0) std::memcpy(arr.data.data(), bytes.data() + hdr.data_offset, n * sizeof(float));
    return arr;
}

inline std::vector<std::uint8_t> encode_npy(std::span<const std::size_t> shape, std::span<const float> data) {
    std::string dict = "{'descr': '<f4', 'fortran_order': False, 'shape': (";
    for (std::size_t d = 0; d < shape.size(); ++d) {
        dict += std::to_string(shape[d]);
        if (d + 1 < shape.size() || shape.size() == 1) dict += ",";
        if (d + 1 < shape.size()) dict += " ";
    }
    dict += "), }";
    // Pad with spaces so the data starts on a 64-byte boundary; header ends in '\n'.
    std::size_t total = kNpyPrefix + dict.size() + 1;
    dict.append((64 - total % 64) % 64, ' ');
    dict.push_back('\n');

    std::vector<std::uint8_t> out;
    out.reserve(kNpyPrefix + dict.size() + data.size() * sizeof(float));
    out.insert(out.end(), kNpyMagic.begin(), kNpyMagic.end());
    out.push_back(1);
    out.push_back(0);
    out.push_back(static_cast<std::uint8_t>(dict.size() & 0xFF));
    out.push_back(static_cast<std::uint8_t>(dict.size() >> 8));
    out.insert(out.end(), dict.begin(), dict.end());
    const auto* raw = reinterpret_cast<const std::uint8_t*>(data.data());
    out.insert(out.end(), raw, raw + data.size() * sizeof(float));
    return out;
}

/// Reads just enough of a file to parse its header.
inline NpyHeader peek_npy_header(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<std::uint8_t> buf(kNpyPrefix);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() != static_cast<std::streamsize>(kNpyPrefix)) throw FormatError("npy: truncated header in " + path.string());
    const std::size_t hlen = static_cast<std::size_t>(buf[8]) | (static_cast<std::size_t>(buf[9]) << 8);
    buf.resize(kNpyPrefix + hlen);
    in.read(reinterpret_cast<char*>(buf.data() + kNpyPrefix), static_cast<std::streamsize>(hlen));
    if (in.gcount() != static_cast<std::streamsize>(hlen)) throw FormatError("npy: truncated header in " + path.string());
    return parse_npy_header(buf);
}

}  // namespace mdsafe::detail
