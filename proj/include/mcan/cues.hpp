#pragma once

// The three cue representations fed to the detector (raw image, Haar
// high-frequency magnitude, chromaticity inconsistency) and a local-variance
// diagnostic for how consistent a chromaticity plane is.

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "mcan/image.hpp"

namespace mcan {

inline constexpr double kDefaultCiEps = 1e-3;

struct CueBundle {
    ImagePlanes img;
    ImagePlanes hf;
    ImagePlanes ci;
};

struct DwtSubbands {
    ImagePlanes ll, lh, hl, hh;
};

/// Per pixel: exp(-(r+eps)/(g+eps)), exp(-(g+eps)/(b+eps)), exp(-(b+eps)/(r+eps)).
/// Outputs are floored at the smallest normal float so they stay strictly positive.
inline ImagePlanes ci_transform(const ImagePlanes& img, double eps = kDefaultCiEps) {
    if (!(eps >= 0.0)) throw std::invalid_argument("ci_transform: eps must be non-negative");
    ImagePlanes out(img.height, img.width);
    const std::size_t n = img.plane_size();
    const float* ch[3] = {img.data.data(), img.data.data() + n, img.data.data() + 2 * n};
    constexpr double floor = std::numeric_limits<float>::min();
    for (int c = 0; c < 3; ++c) {
        const float* num = ch[c];
        const float* den = ch[(c + 1) % 3];
        float* dst = out.data.data() + c * n;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = double(den[i]) + eps;
            if (d <= 0.0) throw std::invalid_argument("ci_transform: zero denominator (use eps > 0)");
            dst[i] = static_cast<float>(std::max(std::exp(-(double(num[i]) + eps) / d), floor));
        }
    }
    return out;
}

inline Plane chromaticity_ratio(const ImagePlanes& img, Channel j, Channel k, double eps = kDefaultCiEps) {
    if (j == k) throw std::invalid_argument("chromaticity_ratio: channels must differ");
    Plane out(img.height, img.width);
    const std::size_t n = img.plane_size();
    const float* num = img.data.data() + int(j) * n;
    const float* den = img.data.data() + int(k) * n;
    for (std::size_t i = 0; i < n; ++i) out.data[i] = (double(num[i]) + eps) / (double(den[i]) + eps);
    return out;
}

/// Mean, over every fully-contained window position, of the population
/// variance inside a window x window neighbourhood.
inline double consistency_score(const Plane& plane, int window) {
    if (window < 3 || window % 2 == 0)
        throw std::invalid_argument("consistency_score: window must be odd and >= 3, got " + std::to_string(window));
    if (window > std::min(plane.height, plane.width))
        throw std::invalid_argument("consistency_score: window " + std::to_string(window) + " exceeds plane size");

    // Integral images over values centred on the global mean to limit cancellation.
    double mean = 0.0;
    for (double v : plane.data) mean += v;
    mean /= double(plane.data.size());

    const int h = plane.height, w = plane.width;
    std::vector<double> s((h + 1) * std::size_t(w + 1), 0.0), s2 = s;
    auto idx = [w](int y, int x) { return std::size_t(y) * (w + 1) + x; };
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double v = plane.at(y, x) - mean;
            s[idx(y + 1, x + 1)] = v + s[idx(y, x + 1)] + s[idx(y + 1, x)] - s[idx(y, x)];
            s2[idx(y + 1, x + 1)] = v * v + s2[idx(y, x + 1)] + s2[idx(y + 1, x)] - s2[idx(y, x)];
        }
    const double count = double(window) * window;
    double total = 0.0;
    long positions = 0;
    for (int y0 = 0; y0 + window <= h; ++y0)
        for (int x0 = 0; x0 + window <= w; ++x0) {
            const int y1 = y0 + window, x1 = x0 + window;
            const double sum = s[idx(y1, x1)] - s[idx(y0, x1)] - s[idx(y1, x0)] + s[idx(y0, x0)];
            const double sq = s2[idx(y1, x1)] - s2[idx(y0, x1)] - s2[idx(y1, x0)] + s2[idx(y0, x0)];
            const double m = sum / count;
            total += std::max(sq / count - m * m, 0.0);
            ++positions;
        }
    return total / double(positions);
}

/// Channel-averaged consistency score of a three-channel image (typically a CI image).
inline double consistency_score(const ImagePlanes& img, int window) {
    double acc = 0.0;
    for (int c = 0; c < 3; ++c) {
        Plane p(img.height, img.width);
        for (std::size_t i = 0; i < img.plane_size(); ++i) p.data[i] = img.data[c * img.plane_size() + i];
        acc += consistency_score(p, window);
    }
    return acc / 3.0;
}

namespace detail {

// numpy-style "reflect" padding (edge sample not repeated) to even dimensions.
inline ImagePlanes pad_to_even(const ImagePlanes& img) {
    const int h = img.height + (img.height % 2), w = img.width + (img.width % 2);
    if (h == img.height && w == img.width) return img;
    ImagePlanes out(h, w);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const int sy = y < img.height ? y : img.height - 2;
                const int sx = x < img.width ? x : img.width - 2;
                out.at(c, y, x) = img.at(c, sy, sx);
            }
    return out;
}

}  // namespace detail

/// One level of the orthonormal 2D Haar transform. For each 2x2 block
/// (a b; c d): ll=(a+b+c+d)/2, lh=(a-b+c-d)/2, hl=(a+b-c-d)/2, hh=(a-b-c+d)/2.
/// Odd dimensions are reflect-padded by one row/column first.
inline DwtSubbands haar_dwt_level(const ImagePlanes& img) {
    if (img.height < 2 || img.width < 2) throw std::invalid_argument("haar_dwt_level: image must be at least 2x2");
    const ImagePlanes src = detail::pad_to_even(img);
    const int h = src.height / 2, w = src.width / 2;
    DwtSubbands s{ImagePlanes(h, w), ImagePlanes(h, w), ImagePlanes(h, w), ImagePlanes(h, w)};
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double a = src.at(c, 2 * y, 2 * x), b = src.at(c, 2 * y, 2 * x + 1);
                const double cc = src.at(c, 2 * y + 1, 2 * x), d = src.at(c, 2 * y + 1, 2 * x + 1);
                s.ll.at(c, y, x) = float((a + b + cc + d) / 2);
                s.lh.at(c, y, x) = float((a - b + cc - d) / 2);
                s.hl.at(c, y, x) = float((a + b - cc - d) / 2);
                s.hh.at(c, y, x) = float((a - b - cc + d) / 2);
            }
    return s;
}

/// Inverse of haar_dwt_level; output has the (padded) even dimensions.
inline ImagePlanes haar_idwt_level(const DwtSubbands& s) {
    const int h = s.ll.height, w = s.ll.width;
    if (!s.lh.same_shape(s.ll) || !s.hl.same_shape(s.ll) || !s.hh.same_shape(s.ll))
        throw std::invalid_argument("haar_idwt_level: subband shapes differ");
    ImagePlanes out(2 * h, 2 * w);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double ll = s.ll.at(c, y, x), lh = s.lh.at(c, y, x);
                const double hl = s.hl.at(c, y, x), hh = s.hh.at(c, y, x);
                out.at(c, 2 * y, 2 * x) = float((ll + lh + hl + hh) / 2);
                out.at(c, 2 * y, 2 * x + 1) = float((ll - lh + hl - hh) / 2);
                out.at(c, 2 * y + 1, 2 * x) = float((ll + lh - hl - hh) / 2);
                out.at(c, 2 * y + 1, 2 * x + 1) = float((ll - lh - hl + hh) / 2);
            }
    return out;
}

/// Mean absolute Haar detail (|lh|+|hl|+|hh|)/3 per channel, nearest-neighbour
/// upsampled back to the input size and min-max normalized over the whole image.
/// A constant image maps to all zeros.
inline ImagePlanes highfreq_cue(const ImagePlanes& img) {
    const DwtSubbands s = haar_dwt_level(img);
    ImagePlanes out(img.height, img.width);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                const int sy = y / 2, sx = x / 2;
                out.at(c, y, x) = float((std::abs(double(s.lh.at(c, sy, sx))) + std::abs(double(s.hl.at(c, sy, sx))) +
                                         std::abs(double(s.hh.at(c, sy, sx)))) /
                                        3.0);
            }
    const auto [lo, hi] = std::minmax_element(out.data.begin(), out.data.end());
    const double vmin = *lo, range = double(*hi) - vmin;
    for (float& v : out.data) v = range > 0.0 ? float((v - vmin) / range) : 0.0f;
    return out;
}

inline CueBundle extract_cues(const ImagePlanes& img, double eps = kDefaultCiEps) {
    if (img.height < 2 || img.width < 2) throw std::invalid_argument("extract_cues: image must be at least 2x2");
    return CueBundle{img, highfreq_cue(img), ci_transform(img, eps)};
}

}  // namespace mcan
