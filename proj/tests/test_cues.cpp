#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "mcan/corpus.hpp"
#include "mcan/cues.hpp"
#include "mcan/image_io.hpp"
#include "test_util.hpp"

using namespace mcan;
using mcan::testing::random_image;

namespace {

ImagePlanes constant_image(int h, int w, float r, float g, float b) {
    ImagePlanes img(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            img.at(0, y, x) = r;
            img.at(1, y, x) = g;
            img.at(2, y, x) = b;
        }
    return img;
}

// Direct double-loop local variance, no integral images.
double consistency_oracle(const Plane& p, int window) {
    double total = 0.0;
    int positions = 0;
    for (int y0 = 0; y0 + window <= p.height; ++y0)
        for (int x0 = 0; x0 + window <= p.width; ++x0) {
            double mean = 0.0;
            for (int y = y0; y < y0 + window; ++y)
                for (int x = x0; x < x0 + window; ++x) mean += p.at(y, x);
            mean /= window * window;
            double var = 0.0;
            for (int y = y0; y < y0 + window; ++y)
                for (int x = x0; x < x0 + window; ++x) var += (p.at(y, x) - mean) * (p.at(y, x) - mean);
            total += var / (window * window);
            ++positions;
        }
    return total / positions;
}

double plane_variance(const Plane& p) {
    double m = 0.0;
    for (double v : p.data) m += v;
    m /= double(p.data.size());
    double s = 0.0;
    for (double v : p.data) s += (v - m) * (v - m);
    return s / double(p.data.size());
}

double energy(const ImagePlanes& img) {
    double e = 0.0;
    for (float v : img.data) e += double(v) * v;
    return e;
}

// Smooth low-frequency colour field in [0.2, 0.8].
ImagePlanes smooth_image(Rng& rng, int size) {
    ImagePlanes img(size, size);
    for (int c = 0; c < 3; ++c) {
        const double a = rng.uniform(0.3, 0.6), fx = rng.uniform(0.5, 1.5), fy = rng.uniform(0.5, 1.5), ph = rng.uniform(0, 6.28);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x)
                img.at(c, y, x) = float(a + 0.15 * std::sin(fx * x / size * 3.14159 + fy * y / size * 3.14159 + ph));
    }
    return img;
}

}  // namespace

// ---------------------------------------------------------------------------
// ci_transform

TEST(CiTransform, GrayPixelGivesExpMinusOne) {
    const ImagePlanes out = ci_transform(constant_image(2, 2, 0.5f, 0.5f, 0.5f), 1e-3);
    for (float v : out.data) EXPECT_NEAR(v, std::exp(-1.0), 1e-6);
}

TEST(CiTransform, ScalarPixelAtZeroEps) {
    const ImagePlanes out = ci_transform(constant_image(1, 1, 1.0f, 0.5f, 0.25f), 0.0);
    EXPECT_NEAR(out.at(0, 0, 0), 0.135335, 1e-6);
    EXPECT_NEAR(out.at(1, 0, 0), 0.135335, 1e-6);
    EXPECT_NEAR(out.at(2, 0, 0), 0.778801, 1e-6);
}

TEST(CiTransform, BlackPixelIsRegularized) {
    const ImagePlanes out = ci_transform(constant_image(1, 1, 0, 0, 0), 1e-3);
    for (float v : out.data) EXPECT_NEAR(v, std::exp(-1.0), 1e-7);
}

TEST(CiTransform, MatchesScalarOracleOnRandomImages) {
    Rng rng(17);
    for (int trial = 0; trial < 100; ++trial) {
        const double eps = trial % 4 == 0 ? 0.0 : rng.uniform(1e-4, 1e-1);
        const ImagePlanes img = random_image(rng, 3, 4, eps == 0.0 ? 0.05 : 0.0, 1.0);
        const ImagePlanes out = ci_transform(img, eps);
        for (int y = 0; y < 3; ++y)
            for (int x = 0; x < 4; ++x) {
                const double r = img.at(0, y, x), g = img.at(1, y, x), b = img.at(2, y, x);
                const double want[3] = {std::exp(-(r + eps) / (g + eps)), std::exp(-(g + eps) / (b + eps)),
                                        std::exp(-(b + eps) / (r + eps))};
                for (int c = 0; c < 3; ++c) EXPECT_LE(mcan::testing::rel_diff(out.at(c, y, x), want[c]), 1e-5);
            }
    }
}

TEST(CiTransform, IntensityScalingInvariantAtZeroEps) {
    Rng rng(23);
    for (int trial = 0; trial < 50; ++trial) {
        const ImagePlanes img = random_image(rng, 4, 4, 0.05, 0.5);
        const double alpha = rng.uniform(0.1, 2.0);
        ImagePlanes scaled = img;
        for (float& v : scaled.data) v = float(v * alpha);
        const ImagePlanes a = ci_transform(img, 0.0), b = ci_transform(scaled, 0.0);
        for (std::size_t i = 0; i < a.data.size(); ++i) EXPECT_NEAR(a.data[i], b.data[i], 1e-6);
    }
}

TEST(CiTransform, OutputsInUnitIntervalForExtremeInputs) {
    ImagePlanes img(2, 2);
    const float vals[] = {0.0f, 1.0f, 0.0f, 1e-7f, 1.0f, 0.0f, 0.5f, 0.0f, 1.0f, 1.0f, 0.0f, 0.0f};
    std::copy(std::begin(vals), std::end(vals), img.data.begin());
    for (double eps : {1e-3, 1e-6}) {
        const ImagePlanes out = ci_transform(img, eps);
        for (float v : out.data) {
            EXPECT_TRUE(std::isfinite(v));
            EXPECT_GT(v, 0.0f);
            EXPECT_LE(v, 1.0f);
        }
    }
}

TEST(CiTransform, RejectsNegativeEpsAndZeroDenominator) {
    EXPECT_THROW(ci_transform(constant_image(1, 1, 0.5f, 0.5f, 0.5f), -1e-3), std::invalid_argument);
    EXPECT_THROW(ci_transform(constant_image(1, 1, 0.5f, 0.0f, 0.5f), 0.0), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// chromaticity_ratio

TEST(ChromaticityRatio, ConstantImageGivesConstantPlane) {
    const Plane p = chromaticity_ratio(constant_image(3, 3, 0.3f, 0.6f, 0.9f), Channel::g, Channel::b);
    for (double v : p.data) EXPECT_NEAR(v, (0.6 + 1e-3) / (0.9 + 1e-3), 1e-7);
}

TEST(ChromaticityRatio, DirectDivision) {
    const Plane p = chromaticity_ratio(constant_image(1, 1, 0.6f, 0.3f, 0.1f), Channel::r, Channel::g, 0.0);
    EXPECT_NEAR(p.at(0, 0), 2.0, 1e-6);
}

TEST(ChromaticityRatio, RejectsSameChannel) {
    EXPECT_THROW(chromaticity_ratio(constant_image(1, 1, 0.5f, 0.5f, 0.5f), Channel::r, Channel::r), std::invalid_argument);
}

TEST(ChromaticityRatio, NoiseRaisesRatioVariance) {
    // A uniform surface has a constant ratio plane; i.i.d. channel noise breaks it.
    const ImagePlanes clean = constant_image(16, 16, 0.55f, 0.45f, 0.35f);
    const double base = plane_variance(chromaticity_ratio(clean, Channel::r, Channel::g));
    int greater = 0;
    for (int seed = 0; seed < 100; ++seed) {
        Rng rng(derive_seed(99, seed));
        ImagePlanes noisy = clean;
        for (float& v : noisy.data) v = float(std::clamp(v + rng.normal(0.0, 0.02), 0.0, 1.0));
        greater += plane_variance(chromaticity_ratio(noisy, Channel::r, Channel::g)) > base;
    }
    EXPECT_EQ(greater, 100);
}

// ---------------------------------------------------------------------------
// consistency_score

TEST(ConsistencyScore, ConstantPlaneIsZero) {
    EXPECT_EQ(consistency_score(Plane(7, 9, 0.3), 3), 0.0);
}

TEST(ConsistencyScore, ImpulseMatchesBruteForce) {
    Plane p(9, 9, 0.2);
    p.at(4, 4) += 1.5;
    for (int window : {3, 5, 7, 9}) {
        const double got = consistency_score(p, window);
        EXPECT_GT(got, 0.0);
        EXPECT_NEAR(got, consistency_oracle(p, window), 1e-12);
    }
    // 3x3: of the 49 window positions, the 9 covering the impulse each hold
    // variance h^2 * (1/9)(8/9); the rest are flat.
    EXPECT_NEAR(consistency_score(p, 3), 9.0 / 49.0 * 1.5 * 1.5 * 8.0 / 81.0, 1e-12);
}

TEST(ConsistencyScore, RandomPlanesMatchBruteForce) {
    Rng rng(31);
    for (int trial = 0; trial < 100; ++trial) {
        const int h = 3 + int(rng.index(10)), w = 3 + int(rng.index(10));
        Plane p(h, w);
        for (double& v : p.data) v = rng.uniform(-2, 2);
        const int max_w = std::min(h, w);
        int window = 3 + 2 * int(rng.index(std::size_t((max_w - 1) / 2)));
        EXPECT_LE(mcan::testing::rel_diff(consistency_score(p, window), consistency_oracle(p, window)), 1e-9);
    }
}

TEST(ConsistencyScore, ShiftInvariant) {
    Rng rng(2);
    Plane p(8, 8);
    for (double& v : p.data) v = rng.uniform();
    Plane q = p;
    for (double& v : q.data) v += 3.25;
    EXPECT_NEAR(consistency_score(p, 5), consistency_score(q, 5), 1e-9);
}

TEST(ConsistencyScore, RejectsBadWindows) {
    Plane p(5, 6);
    EXPECT_THROW(consistency_score(p, 4), std::invalid_argument);
    EXPECT_THROW(consistency_score(p, 1), std::invalid_argument);
    EXPECT_THROW(consistency_score(p, 7), std::invalid_argument);
}

TEST(ConsistencyScore, NoiseLowersCiConsistency) {
    Rng rng(4);
    int hits = 0;
    const ImagePlanes base = smooth_image(rng, 16);
    const double clean = consistency_score(ci_transform(base), 3);
    for (int seed = 0; seed < 100; ++seed) {
        Rng nrng(derive_seed(1234, seed));
        ImagePlanes noisy = base;
        for (float& v : noisy.data) v = float(std::clamp(v + nrng.normal(0.0, 0.02), 0.0, 1.0));
        hits += consistency_score(ci_transform(noisy), 3) > clean;
    }
    EXPECT_GE(hits, 95);
}

TEST(ConsistencyScore, CorpusRealCiLessConsistentThanFake) {
    SyntheticCorpusSpec spec;
    spec.n_per_class = 100;
    spec.n_test_per_class = 0;
    spec.seed = 8;
    const Dataset ds = generate_corpus(spec);
    double real = 0.0, fake = 0.0;
    for (const auto& s : ds) (s.label == kLabelReal ? real : fake) += consistency_score(ci_transform(s.image), 3);
    EXPECT_GT(real / 100.0, fake / 100.0);
}

// ---------------------------------------------------------------------------
// Haar DWT

TEST(HaarDwt, ConstantImage) {
    const DwtSubbands s = haar_dwt_level(constant_image(4, 6, 0.3f, 0.3f, 0.3f));
    ASSERT_EQ(s.ll.height, 2);
    ASSERT_EQ(s.ll.width, 3);
    for (float v : s.ll.data) EXPECT_NEAR(v, 0.6, 1e-7);
    for (const auto* b : {&s.lh, &s.hl, &s.hh})
        for (float v : b->data) EXPECT_EQ(v, 0.0f);
}

TEST(HaarDwt, SingleBlockFormulas) {
    ImagePlanes img(2, 2);
    img.at(0, 0, 0) = 1.0f;
    const DwtSubbands s = haar_dwt_level(img);
    EXPECT_NEAR(s.ll.at(0, 0, 0), 0.5, 1e-7);
    EXPECT_NEAR(s.lh.at(0, 0, 0), 0.5, 1e-7);
    EXPECT_NEAR(s.hl.at(0, 0, 0), 0.5, 1e-7);
    EXPECT_NEAR(s.hh.at(0, 0, 0), 0.5, 1e-7);

    // Distinct corners separate the subbands: (a b; c d) = (1 2; 3 4).
    img.at(0, 0, 0) = 1, img.at(0, 0, 1) = 2, img.at(0, 1, 0) = 3, img.at(0, 1, 1) = 4;
    const DwtSubbands t = haar_dwt_level(img);
    EXPECT_NEAR(t.ll.at(0, 0, 0), 5.0, 1e-6);
    EXPECT_NEAR(t.lh.at(0, 0, 0), -1.0, 1e-6);
    EXPECT_NEAR(t.hl.at(0, 0, 0), -2.0, 1e-6);
    EXPECT_NEAR(t.hh.at(0, 0, 0), 0.0, 1e-6);
}

TEST(HaarDwt, RandomImagesMatchBlockOracle) {
    Rng rng(41);
    for (int trial = 0; trial < 100; ++trial) {
        const int h = 2 * (1 + int(rng.index(5))), w = 2 * (1 + int(rng.index(5)));
        const ImagePlanes img = random_image(rng, h, w);
        const DwtSubbands s = haar_dwt_level(img);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < h / 2; ++y)
                for (int x = 0; x < w / 2; ++x) {
                    const double a = img.at(c, 2 * y, 2 * x), b = img.at(c, 2 * y, 2 * x + 1);
                    const double cc = img.at(c, 2 * y + 1, 2 * x), d = img.at(c, 2 * y + 1, 2 * x + 1);
                    EXPECT_NEAR(s.ll.at(c, y, x), (a + b + cc + d) / 2, 1e-6);
                    EXPECT_NEAR(s.lh.at(c, y, x), (a - b + cc - d) / 2, 1e-6);
                    EXPECT_NEAR(s.hl.at(c, y, x), (a + b - cc - d) / 2, 1e-6);
                    EXPECT_NEAR(s.hh.at(c, y, x), (a - b - cc + d) / 2, 1e-6);
                }
    }
}

TEST(HaarDwt, PerfectReconstructionAndEnergy) {
    Rng rng(43);
    for (int trial = 0; trial < 50; ++trial) {
        const int h = 2 * (1 + int(rng.index(8))), w = 2 * (1 + int(rng.index(8)));
        const ImagePlanes img = random_image(rng, h, w);
        const DwtSubbands s = haar_dwt_level(img);
        const ImagePlanes back = haar_idwt_level(s);
        ASSERT_TRUE(back.same_shape(img));
        for (std::size_t i = 0; i < img.data.size(); ++i) EXPECT_NEAR(back.data[i], img.data[i], 1e-6);
        const double sub = energy(s.ll) + energy(s.lh) + energy(s.hl) + energy(s.hh);
        EXPECT_LE(mcan::testing::rel_diff(energy(img), sub), 1e-5);
    }
}

TEST(HaarDwt, OddSizesAreReflectPadded) {
    Rng rng(47);
    const ImagePlanes img = random_image(rng, 5, 3);
    const DwtSubbands s = haar_dwt_level(img);
    EXPECT_EQ(s.ll.height, 3);
    EXPECT_EQ(s.ll.width, 2);
    const ImagePlanes back = haar_idwt_level(s);
    ASSERT_EQ(back.height, 6);
    ASSERT_EQ(back.width, 4);
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < 5; ++y)
            for (int x = 0; x < 3; ++x) EXPECT_NEAR(back.at(c, y, x), img.at(c, y, x), 1e-6);
        // Padded row/column mirror the second-to-last sample.
        EXPECT_NEAR(back.at(c, 5, 0), img.at(c, 3, 0), 1e-6);
        EXPECT_NEAR(back.at(c, 0, 3), img.at(c, 0, 1), 1e-6);
    }
}

TEST(HaarDwt, RejectsDegenerateImages) {
    EXPECT_THROW(haar_dwt_level(ImagePlanes(1, 4)), std::invalid_argument);
    EXPECT_THROW(haar_dwt_level(ImagePlanes(4, 1)), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// highfreq_cue

TEST(HighfreqCue, ConstantImageIsZero) {
    const ImagePlanes hf = highfreq_cue(constant_image(6, 6, 0.2f, 0.7f, 0.4f));
    for (float v : hf.data) EXPECT_EQ(v, 0.0f);
}

TEST(HighfreqCue, StepEdgeOnBlockBoundaryIsInvisible) {
    // Edge between columns 1 and 2 of a 4x4 image lies on a 2x2 block
    // boundary, so every detail coefficient vanishes.
    ImagePlanes img(4, 4);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 4; ++y)
            for (int x = 2; x < 4; ++x) img.at(c, y, x) = 1.0f;
    const DwtSubbands s = haar_dwt_level(img);
    for (const auto* b : {&s.lh, &s.hl, &s.hh})
        for (float v : b->data) EXPECT_EQ(v, 0.0f);
    for (float v : highfreq_cue(img).data) EXPECT_EQ(v, 0.0f);
}

TEST(HighfreqCue, StepEdgeInsideBlockColumn) {
    // 4x6 image, step from 0 to 1 at column 3: the blocks covering columns
    // 2-3 see (0 1; 0 1), giving lh = -1, hl = hh = 0 and mean |detail| 1/3.
    ImagePlanes img(4, 6);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 4; ++y)
            for (int x = 3; x < 6; ++x) img.at(c, y, x) = 1.0f;
    const DwtSubbands s = haar_dwt_level(img);
    for (int y = 0; y < 2; ++y) {
        EXPECT_NEAR(s.lh.at(0, y, 1), -1.0, 1e-7);
        EXPECT_EQ(s.hl.at(0, y, 1), 0.0f);
        EXPECT_EQ(s.hh.at(0, y, 1), 0.0f);
    }
    const ImagePlanes hf = highfreq_cue(img);
    ASSERT_TRUE(hf.same_shape(img));
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 6; ++x) EXPECT_EQ(hf.at(c, y, x), (x == 2 || x == 3) ? 1.0f : 0.0f) << y << "," << x;
}

TEST(HighfreqCue, ShapeAndRangeOnRandomImages) {
    Rng rng(53);
    for (int trial = 0; trial < 30; ++trial) {
        const int h = 2 + int(rng.index(9)), w = 2 + int(rng.index(9));
        const ImagePlanes hf = highfreq_cue(random_image(rng, h, w));
        ASSERT_EQ(hf.height, h);
        ASSERT_EQ(hf.width, w);
        for (float v : hf.data) {
            EXPECT_GE(v, 0.0f);
            EXPECT_LE(v, 1.0f);
        }
    }
}

// ---------------------------------------------------------------------------
// extract_cues

TEST(ExtractCues, MembersShareShape) {
    Rng rng(59);
    const CueBundle b = extract_cues(random_image(rng, 5, 7));
    EXPECT_TRUE(b.img.same_shape(b.hf));
    EXPECT_TRUE(b.img.same_shape(b.ci));
    EXPECT_EQ(b.img.height, 5);
}

TEST(ExtractCues, GrayImage) {
    const CueBundle b = extract_cues(constant_image(4, 4, 0.4f, 0.4f, 0.4f));
    for (float v : b.ci.data) EXPECT_NEAR(v, std::exp(-1.0), 1e-6);
    for (float v : b.hf.data) EXPECT_EQ(v, 0.0f);
}

TEST(ExtractCues, NoNonFiniteValuesOnEdgeInputs) {
    Rng rng(61);
    for (int trial = 0; trial < 50; ++trial) {
        ImagePlanes img = random_image(rng, 4, 4);
        for (float& v : img.data)
            if (rng.uniform() < 0.4) v = rng.uniform() < 0.5 ? 0.0f : 1.0f;
        const CueBundle b = extract_cues(img);
        for (const auto* p : {&b.hf, &b.ci})
            for (float v : p->data) ASSERT_TRUE(std::isfinite(v));
    }
}

TEST(ExtractCues, MatchesNumpyGoldens) {
    const std::string dir = MCAN_FIXTURES;
    const ImagePlanes img = load_image(dir + "/cue_golden.ppm");
    std::ifstream in(dir + "/cue_golden.json");
    ASSERT_TRUE(in) << "missing golden json";
    const auto golden = nlohmann::json::parse(in);
    const CueBundle b = extract_cues(img, golden.at("eps").get<double>());
    for (const char* name : {"img", "hf", "ci"}) {
        const auto want = golden.at(name).get<std::vector<double>>();
        const ImagePlanes& got = std::string(name) == "img" ? b.img : std::string(name) == "hf" ? b.hf : b.ci;
        ASSERT_EQ(want.size(), got.data.size()) << name;
        for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got.data[i], want[i], 1e-5) << name << "[" << i << "]";
    }
}
