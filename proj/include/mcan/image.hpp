#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace mcan {

/// Three-channel image stored channel-planar (r, g, b), each plane row-major.
/// Values are linear-range reals; sRGB gamma is not undone on load.
struct ImagePlanes {
    int height = 0;
    int width = 0;
    std::vector<float> data;

    static constexpr int channels = 3;

    ImagePlanes() = default;
    ImagePlanes(int h, int w, float fill = 0.0f) : height(h), width(w), data(std::size_t(3) * h * w, fill) {
        if (h < 1 || w < 1) throw std::invalid_argument("ImagePlanes: dimensions must be positive");
    }

    std::size_t plane_size() const { return std::size_t(height) * width; }

    float& at(int c, int y, int x) { return data[c * plane_size() + std::size_t(y) * width + x]; }
    float at(int c, int y, int x) const { return data[c * plane_size() + std::size_t(y) * width + x]; }

    bool same_shape(const ImagePlanes& o) const { return height == o.height && width == o.width; }
};

/// Single-channel real plane, row-major.
struct Plane {
    int height = 0;
    int width = 0;
    std::vector<double> data;

    Plane() = default;
    Plane(int h, int w, double fill = 0.0) : height(h), width(w), data(std::size_t(h) * w, fill) {}

    double& at(int y, int x) { return data[std::size_t(y) * width + x]; }
    double at(int y, int x) const { return data[std::size_t(y) * width + x]; }
};

enum class Channel { r = 0, g = 1, b = 2 };

/// Clamp every value into [0, 1]. NaN is rejected; infinities clamp.
inline ImagePlanes to_unit_range(const ImagePlanes& img) {
    ImagePlanes out = img;
    for (float& v : out.data) {
        if (std::isnan(v)) throw std::invalid_argument("to_unit_range: NaN in input image");
        v = std::clamp(v, 0.0f, 1.0f);
    }
    return out;
}

/// Bilinear resampling with half-pixel centers: output pixel (y, x) samples the
/// source at ((y + 0.5) * in_h / out_h - 0.5, ...), clamped to the border.
inline ImagePlanes resize_bilinear(const ImagePlanes& img, int out_h, int out_w) {
    if (out_h < 2 || out_w < 2)
        throw std::invalid_argument("resize_bilinear: target must be at least 2x2, got " + std::to_string(out_h) +
                                    "x" + std::to_string(out_w));
    if (out_h == img.height && out_w == img.width) return img;

    struct Tap {
        int i0, i1;
        double w1;
    };
    auto taps = [](int in, int out) {
        std::vector<Tap> t(out);
        const double scale = double(in) / out;
        for (int o = 0; o < out; ++o) {
            double s = std::clamp((o + 0.5) * scale - 0.5, 0.0, double(in - 1));
            const int i0 = static_cast<int>(std::floor(s));
            const int i1 = std::min(i0 + 1, in - 1);
            t[o] = {i0, i1, s - i0};
        }
        return t;
    };
    const auto ty = taps(img.height, out_h);
    const auto tx = taps(img.width, out_w);

    ImagePlanes out(out_h, out_w);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < out_h; ++y)
            for (int x = 0; x < out_w; ++x) {
                const auto& a = ty[y];
                const auto& b = tx[x];
                const double top = (1 - b.w1) * img.at(c, a.i0, b.i0) + b.w1 * img.at(c, a.i0, b.i1);
                const double bot = (1 - b.w1) * img.at(c, a.i1, b.i0) + b.w1 * img.at(c, a.i1, b.i1);
                out.at(c, y, x) = static_cast<float>(std::clamp((1 - a.w1) * top + a.w1 * bot, 0.0, 1.0));
            }
    return out;
}

}  // namespace mcan
