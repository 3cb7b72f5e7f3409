#pragma once

// PNG and binary PPM (P6, maxval 255) decoding/encoding. PNG goes through
// libpng's simplified API; PPM is handled here so fixtures stay byte-exact.

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include "mcan/image.hpp"

namespace mcan {

class ImageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};
class ImageNotFound : public ImageError {
public:
    using ImageError::ImageError;
};
class UnsupportedImageFormat : public ImageError {
public:
    using ImageError::ImageError;
};
class CorruptImage : public ImageError {
public:
    using ImageError::ImageError;
};

namespace detail {

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ImageNotFound("cannot open image '" + path.string() + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline ImagePlanes planes_from_interleaved(const unsigned char* rgb, int h, int w) {
    ImagePlanes img(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(c, y, x) = static_cast<float>(rgb[(std::size_t(y) * w + x) * 3 + c]) / 255.0f;
    return img;
}

inline std::vector<unsigned char> interleaved_from_planes(const ImagePlanes& img) {
    std::vector<unsigned char> rgb(img.plane_size() * 3);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) {
                const float v = std::clamp(img.at(c, y, x), 0.0f, 1.0f);
                rgb[(std::size_t(y) * img.width + x) * 3 + c] = static_cast<unsigned char>(std::lround(v * 255.0f));
            }
    return rgb;
}

inline ImagePlanes decode_ppm(const std::vector<unsigned char>& bytes, const std::string& path) {
    std::size_t pos = 2;
    auto skip_space_and_comments = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(bytes[pos])) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto read_int = [&]() -> long {
        skip_space_and_comments();
        long v = 0;
        int digits = 0;
        while (pos < bytes.size() && std::isdigit(bytes[pos]) && digits < 9) {
            v = v * 10 + (bytes[pos++] - '0');
            ++digits;
        }
        if (digits == 0) throw CorruptImage("corrupt PPM header in '" + path + "'");
        return v;
    };
    const long w = read_int();
    const long h = read_int();
    const long maxval = read_int();
    if (w < 1 || h < 1) throw CorruptImage("corrupt PPM header in '" + path + "': zero dimension");
    if (maxval != 255) throw UnsupportedImageFormat("unsupported PPM maxval " + std::to_string(maxval) + " in '" + path + "'");
    if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw CorruptImage("corrupt PPM header in '" + path + "'");
    ++pos;
    const std::size_t need = std::size_t(w) * h * 3;
    if (bytes.size() - pos < need) throw CorruptImage("truncated PPM payload in '" + path + "'");
    return planes_from_interleaved(bytes.data() + pos, int(h), int(w));
}

inline ImagePlanes decode_png(const std::vector<unsigned char>& bytes, const std::string& path) {
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
        throw CorruptImage("corrupt PNG '" + path + "': " + image.message);
    image.format = PNG_FORMAT_RGB;
    std::vector<unsigned char> rgb(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, rgb.data(), 0, nullptr)) {
        std::string msg = image.message;
        png_image_free(&image);
        throw CorruptImage("corrupt PNG '" + path + "': " + msg);
    }
    return planes_from_interleaved(rgb.data(), int(image.height), int(image.width));
}

}  // namespace detail

/// Decode a PNG or binary PPM file. 8-bit values map to [0, 1] by v / 255.
inline ImagePlanes load_image(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw ImageNotFound("image file not found: '" + path.string() + "'");
    const auto bytes = detail::read_file_bytes(path);
    static constexpr unsigned char png_sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    if (bytes.size() >= 8 && std::memcmp(bytes.data(), png_sig, 8) == 0) return detail::decode_png(bytes, path.string());
    if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return detail::decode_ppm(bytes, path.string());
    throw UnsupportedImageFormat("unsupported image format (expected PNG or P6 PPM): '" + path.string() + "'");
}

inline std::vector<unsigned char> encode_ppm(const ImagePlanes& img) {
    const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    std::vector<unsigned char> out(header.begin(), header.end());
    const auto rgb = detail::interleaved_from_planes(img);
    out.insert(out.end(), rgb.begin(), rgb.end());
    return out;
}

inline void save_ppm(const ImagePlanes& img, const std::filesystem::path& path) {
    const auto bytes = encode_ppm(img);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ImageError("cannot write '" + path.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

inline void save_png(const ImagePlanes& img, const std::filesystem::path& path) {
    const auto rgb = detail::interleaved_from_planes(img);
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(img.width);
    image.height = static_cast<png_uint_32>(img.height);
    image.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&image, path.string().c_str(), 0, rgb.data(), 0, nullptr))
        throw ImageError("cannot write PNG '" + path.string() + "': " + image.message);
}

}  // namespace mcan
