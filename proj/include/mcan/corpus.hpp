#pragma once

// Synthetic real/fake corpus.
//
// Both classes draw from the same texture family: a multi-octave value-noise
// shading field multiplied by a two-colour chroma field, so channel ratios are
// piecewise constant. "Real" samples add i.i.d. Gaussian sensor noise per
// channel (breaking ratio constancy); "fake" samples are box-blurred and noise
// free. With noise_sigma = 0 and smooth_kernel = 1 the classes coincide.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "mcan/image.hpp"
#include "mcan/image_io.hpp"
#include "mcan/rng.hpp"

namespace mcan {

inline constexpr int kLabelFake = 0;
inline constexpr int kLabelReal = 1;

struct SyntheticCorpusSpec {
    int n_per_class = 2000;
    int n_test_per_class = 500;
    int img_size = 32;
    double noise_sigma = 0.02;
    int smooth_kernel = 5;
    int texture_octaves = 3;
    std::uint64_t seed = 0;

    void validate() const {
        auto fail = [](const std::string& m) { throw std::invalid_argument("SyntheticCorpusSpec: " + m); };
        if (n_per_class < 1) fail("n_per_class must be >= 1");
        if (n_test_per_class < 0) fail("n_test_per_class must be >= 0");
        if (img_size < 2) fail("img_size must be >= 2");
        if (!(noise_sigma >= 0)) fail("noise_sigma must be >= 0");
        if (smooth_kernel < 1 || smooth_kernel % 2 == 0) fail("smooth_kernel must be odd and >= 1");
        if (texture_octaves < 1) fail("texture_octaves must be >= 1");
    }
};

struct Sample {
    ImagePlanes image;
    int label = kLabelFake;
};

using Dataset = std::vector<Sample>;

enum class Split : std::uint64_t { train = 1, test = 2 };

namespace detail {

// Bilinearly interpolated lattice of uniform values; octave o has 2^(o+1)+1 knots per side.
inline std::vector<double> value_noise(Rng& rng, int size, int octaves) {
    std::vector<double> field(std::size_t(size) * size, 0.0);
    double amp = 1.0, norm = 0.0;
    for (int o = 0; o < octaves; ++o) {
        const int knots = (1 << (o + 1)) + 1;
        std::vector<double> lattice(std::size_t(knots) * knots);
        for (double& v : lattice) v = rng.uniform();
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                const double fy = (y + 0.5) / size * (knots - 1), fx = (x + 0.5) / size * (knots - 1);
                const int y0 = std::min(int(fy), knots - 2), x0 = std::min(int(fx), knots - 2);
                const double ty = fy - y0, tx = fx - x0;
                const auto at = [&](int yy, int xx) { return lattice[std::size_t(yy) * knots + xx]; };
                const double v = (1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x0 + 1)) +
                                 ty * ((1 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1));
                field[std::size_t(y) * size + x] += amp * v;
            }
        norm += amp;
        amp *= 0.5;
    }
    for (double& v : field) v /= norm;
    return field;
}

inline ImagePlanes texture_image(Rng& rng, int size, int octaves) {
    const auto shade = value_noise(rng, size, octaves);
    const auto mask = value_noise(rng, size, std::max(1, octaves - 1));
    double c1[3], c2[3];
    for (double& c : c1) c = rng.uniform(0.35, 1.0);
    for (double& c : c2) c = rng.uniform(0.35, 1.0);
    const double level = rng.uniform(0.4, 0.6);
    ImagePlanes img(size, size);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const std::size_t i = std::size_t(y) * size + x;
            const double s = 0.25 + 0.65 * shade[i];
            const double t = std::clamp((mask[i] - level) * 8.0 + 0.5, 0.0, 1.0);
            const double m = t * t * (3 - 2 * t);
            for (int c = 0; c < 3; ++c) img.at(c, y, x) = float(s * ((1 - m) * c1[c] + m * c2[c]));
        }
    return img;
}

}  // namespace detail

/// Mean filter over a kernel x kernel window with clamped borders.
inline ImagePlanes box_blur(const ImagePlanes& img, int kernel) {
    if (kernel < 1 || kernel % 2 == 0) throw std::invalid_argument("box_blur: kernel must be odd and >= 1");
    if (kernel == 1) return img;
    const int r = kernel / 2;
    ImagePlanes out(img.height, img.width);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                double acc = 0.0;
                for (int dy = -r; dy <= r; ++dy)
                    for (int dx = -r; dx <= r; ++dx)
                        acc += img.at(c, std::clamp(y + dy, 0, img.height - 1), std::clamp(x + dx, 0, img.width - 1));
                out.at(c, y, x) = float(acc / (kernel * kernel));
            }
    return out;
}

/// One sample; every (seed, split, label, index) owns an independent stream.
inline Sample synthesize_sample(const SyntheticCorpusSpec& spec, Split split, int label, int index) {
    Rng rng(derive_seed(spec.seed, std::uint64_t(split), std::uint64_t(label), std::uint64_t(index)));
    ImagePlanes img = detail::texture_image(rng, spec.img_size, spec.texture_octaves);
    if (label == kLabelReal) {
        if (spec.noise_sigma > 0)
            for (float& v : img.data) v = float(std::clamp(double(v) + rng.normal(0.0, spec.noise_sigma), 0.0, 1.0));
    } else {
        img = box_blur(img, spec.smooth_kernel);
    }
    return {std::move(img), label};
}

/// n real samples followed by n fake samples (n = n_per_class for train,
/// n_test_per_class for test).
inline Dataset generate_corpus(const SyntheticCorpusSpec& spec, Split split = Split::train) {
    spec.validate();
    const int n = split == Split::train ? spec.n_per_class : spec.n_test_per_class;
    Dataset ds;
    ds.reserve(std::size_t(2 * n));
    for (int label : {kLabelReal, kLabelFake})
        for (int i = 0; i < n; ++i) ds.push_back(synthesize_sample(spec, split, label, i));
    return ds;
}

/// Folder-of-images adapter: <dir>/real/* and <dir>/fake/* (PNG or PPM),
/// resized to img_size when needed. Files are taken in sorted name order.
inline Dataset load_folder_dataset(const std::filesystem::path& dir, int img_size) {
    Dataset ds;
    for (auto [sub, label] : {std::pair{"real", kLabelReal}, std::pair{"fake", kLabelFake}}) {
        const auto d = dir / sub;
        if (!std::filesystem::is_directory(d)) throw std::runtime_error("dataset directory missing '" + d.string() + "'");
        std::vector<std::filesystem::path> files;
        for (const auto& e : std::filesystem::directory_iterator(d))
            if (e.is_regular_file()) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            ImagePlanes img = load_image(f);
            if (img.height != img_size || img.width != img_size) img = resize_bilinear(img, img_size, img_size);
            ds.push_back({std::move(img), label});
        }
    }
    if (ds.empty()) throw std::runtime_error("dataset directory '" + dir.string() + "' contains no images");
    return ds;
}

}  // namespace mcan
