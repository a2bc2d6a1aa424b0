#pragma once

// 8-bit single-channel PNG read/write through libpng's simplified API.

#include <png.h>

#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "mdsafe/error.hpp"

namespace mdsafe::detail {

struct Gray8Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> pixels;  // row-major
};

inline Gray8Image decode_gray8_png(std::span<const std::uint8_t> bytes) {
    static constexpr std::uint8_t kSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
    // Signature + IHDR length/type + width + height, then bit depth and color type.
    if (bytes.size() < 26 || std::memcmp(bytes.data(), kSig, 8) != 0 ||
        std::memcmp(bytes.data() + 12, "IHDR", 4) != 0) {
        throw FormatError("png: not a PNG file");
    }
    if (bytes[24] != 8 || bytes[25] != 0) {
        throw FormatError("png: expected 8-bit grayscale (bit depth " + std::to_string(bytes[24]) +
                          ", color type " + std::to_string(bytes[25]) + ")");
    }

    // libpng tolerates a missing trailer; a file cut after the image data is still truncated.
    static constexpr std::uint8_t kIend[12] = {0, 0, 0, 0, 'I', 'E', 'N', 'D', 0xAE, 0x42, 0x60, 0x82};
    if (bytes.size() < 38 || std::memcmp(bytes.data() + bytes.size() - 12, kIend, 12) != 0) {
        throw FormatError("png: truncated file (missing IEND)");
    }

    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    if (png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()) == 0) {
        std::string msg = image.message;
        png_image_free(&image);
        throw FormatError("png: " + msg);
    }
    image.format = PNG_FORMAT_GRAY;
    Gray8Image out;
    out.height = image.height;
    out.width = image.width;
    out.pixels.resize(PNG_IMAGE_SIZE(image));
    if (png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr) == 0) {
        std::string msg = image.message;
        png_image_free(&image);
        throw FormatError("png: " + msg);
    }
    return out;
}

inline std::vector<std::uint8_t> encode_gray8_png(std::size_t height, std::size_t width,
                                                  std::span<const std::uint8_t> pixels) {
    if (pixels.size() != height * width) throw Error("png: pixel buffer does not match dimensions");
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(width);
    image.height = static_cast<png_uint_32>(height);
    image.format = PNG_FORMAT_GRAY;

    png_alloc_size_t size = 0;
    if (png_image_write_to_memory(&image, nullptr, &size, 0, pixels.data(), 0, nullptr) == 0) {
        throw Error(std::string("png: ") + image.message);
    }
    std::vector<std::uint8_t> out(size);
    if (png_image_write_to_memory(&image, out.data(), &size, 0, pixels.data(), 0, nullptr) == 0) {
        throw Error(std::string("png: ") + image.message);
    }
    out.resize(size);
    return out;
}

}  // namespace mdsafe::detail
