#pragma once

// Toy vision transformer trunk shared by the three cues.
//
// tokens = [cls; patches W_patch + b] + positional embedding (shuffled for CI)
// block  = x += Attn(LN1(x)); x += MLP(LN2(x)); x = MoEA(x) in adapter blocks
// heads  = LN(cls) -> one linear logit per cue, combined by taking the minimum
//          probability of "real".
//
// Patch filters are zero-mean within each colour channel.
// The trunk (patch projection, class token, attention, MLP, norms) is random
// initialised and never updated; adapters and heads are trainable, positional
// embeddings optionally so.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mcan/cues.hpp"
#include "mcan/image.hpp"
#include "mcan/moea.hpp"
#include "mcan/rng.hpp"

namespace mcan {

enum class Cue : int { img = 0, hf = 1, ci = 2 };
inline constexpr int kNumCues = 3;
inline constexpr const char* kCueNames[kNumCues] = {"img", "hf", "ci"};

struct BackboneConfig {
    int img_size = 32;
    int patch_size = 4;
    int dim = 32;
    int depth = 4;
    int heads = 2;
    int mlp_ratio = 4;
    std::vector<int> moea_blocks = {2, 3};
    int n_experts = 4;
    int router_dim = 8;
    std::uint64_t seed = 0;
    bool train_pos_embed = false;
    double ci_eps = kDefaultCiEps;

    int grid() const { return img_size / patch_size; }
    int n_patches() const { return grid() * grid(); }
    int n_tokens() const { return n_patches() + 1; }
    int patch_features() const { return 3 * patch_size * patch_size; }
    bool has_moea(int block) const { return std::find(moea_blocks.begin(), moea_blocks.end(), block) != moea_blocks.end(); }

    void validate() const {
        auto fail = [](const std::string& m) { throw std::invalid_argument("BackboneConfig: " + m); };
        if (img_size < 2 || patch_size < 1) fail("img_size >= 2 and patch_size >= 1 required");
        if (img_size % patch_size != 0) fail("img_size must be divisible by patch_size");
        if (dim < 1 || heads < 1 || dim % heads != 0) fail("dim must be divisible by heads");
        if (depth < 1) fail("depth must be >= 1");
        if (mlp_ratio < 1) fail("mlp_ratio must be >= 1");
        if (n_experts < 1 || n_experts > dim) fail("n_experts must be in [1, dim]");
        if (router_dim < 1) fail("router_dim must be >= 1");
        std::set<int> seen;
        for (int b : moea_blocks) {
            if (b < 0 || b >= depth) fail("moea_blocks entry " + std::to_string(b) + " outside [0, depth)");
            if (!seen.insert(b).second) fail("duplicate moea_blocks entry " + std::to_string(b));
        }
        if (!(ci_eps > 0)) fail("ci_eps must be positive");
    }
};

/// Class-token position plus one embedding per patch.
template <class T>
struct PositionalEmbedding {
    RowVec<T> p_cls;
    Mat<T> p_patch;  // L x d

    Eigen::Index length() const { return p_patch.rows() + 1; }
};

/// Uniform random permutation of [0, n) drawn deterministically from seed.
inline std::vector<int> shuffle_permutation(int n, std::uint64_t seed) {
    std::vector<int> perm(std::size_t(std::max(n, 0)));
    for (int i = 0; i < n; ++i) perm[std::size_t(i)] = i;
    Rng rng(derive_seed(seed, 0x5348'5546ULL));
    rng.shuffle(perm);
    return perm;
}

/// Keeps p_cls in place and permutes the patch embeddings: row i of the
/// result is row perm[i] of the input.
template <class T>
PositionalEmbedding<T> make_shuffled_positions(const PositionalEmbedding<T>& pe, std::uint64_t seed) {
    const auto perm = shuffle_permutation(int(pe.p_patch.rows()), seed);
    PositionalEmbedding<T> out{pe.p_cls, Mat<T>(pe.p_patch.rows(), pe.p_patch.cols())};
    for (std::size_t i = 0; i < perm.size(); ++i) out.p_patch.row(Eigen::Index(i)) = pe.p_patch.row(perm[i]);
    return out;
}

struct MultiCueLogits {
    double img = 0.0, hf = 0.0, ci = 0.0;

    double operator[](int cue) const { return cue == 0 ? img : cue == 1 ? hf : ci; }
};

inline double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

struct Decision {
    bool real = false;
    double score = 0.0;  // min over cues of P(real)
    double p_img = 0.0, p_hf = 0.0, p_ci = 0.0;
};

inline constexpr double kDefaultThreshold = 0.5;

/// Any cue can veto realness: score = min of per-cue P(real); real iff score >= threshold.
inline Decision aggregate_min(const MultiCueLogits& logits, double threshold = kDefaultThreshold) {
    if (!std::isfinite(logits.img) || !std::isfinite(logits.hf) || !std::isfinite(logits.ci))
        throw std::invalid_argument("aggregate_min: non-finite logit");
    Decision d;
    d.p_img = sigmoid(logits.img);
    d.p_hf = sigmoid(logits.hf);
    d.p_ci = sigmoid(logits.ci);
    d.score = std::min({d.p_img, d.p_hf, d.p_ci});
    d.real = d.score >= threshold;
    return d;
}

// ---------------------------------------------------------------------------
// Parameters

// Within-patch contrast of [0,1] images is a few hundredths, so the stem
// filters carry a large gain to keep patch tokens well above the 0.02-scale
// class and positional embeddings.
inline constexpr double kPatchInitStd = 2.0;

template <class T>
struct LayerNormParams {
    RowVec<T> gamma, beta;
};

template <class T>
struct BlockParams {
    LayerNormParams<T> ln1, ln2;
    Mat<T> wq, wk, wv, wo;
    RowVec<T> bq, bk, bv, bo;
    Mat<T> fc1, fc2;
    RowVec<T> b1, b2;
    std::optional<MoeaLayer<T>> moea;
};

template <class T>
struct ModelParams {
    Mat<T> patch_w;  // (3 P^2) x d
    RowVec<T> patch_b;
    RowVec<T> cls;
    Mat<T> pos;  // (L + 1) x d, row 0 is the class position
    std::vector<BlockParams<T>> blocks;
    LayerNormParams<T> final_ln;
    Mat<T> head_w;  // d x 3, one column per cue
    RowVec<T> head_b;
};

template <class T>
struct ParamSlot {
    std::string name;
    T* data;
    Eigen::Index rows, cols;
    bool trainable;

    Eigen::Index size() const { return rows * cols; }
    std::span<T> values() const { return {data, std::size_t(size())}; }
};

// ---------------------------------------------------------------------------
// Small building blocks with explicit backward passes

namespace nn {

inline constexpr double kLnEps = 1e-5;

template <class T>
struct LayerNormCache {
    Mat<T> xhat;
    std::vector<T> inv_std;
};

template <class T>
Mat<T> layer_norm(const Mat<T>& x, const LayerNormParams<T>& p, LayerNormCache<T>* cache) {
    Mat<T> out(x.rows(), x.cols());
    if (cache) {
        cache->xhat.resize(x.rows(), x.cols());
        cache->inv_std.resize(std::size_t(x.rows()));
    }
    for (Eigen::Index t = 0; t < x.rows(); ++t) {
        const T mean = x.row(t).mean();
        const auto centered = (x.row(t).array() - mean).eval();
        const T var = centered.square().mean();
        const T inv = T(1) / std::sqrt(var + T(kLnEps));
        const auto xhat = (centered * inv).eval();
        out.row(t) = (xhat * p.gamma.array() + p.beta.array()).matrix();
        if (cache) {
            cache->xhat.row(t) = xhat.matrix();
            cache->inv_std[std::size_t(t)] = inv;
        }
    }
    return out;
}

// Input gradient only; norm parameters belong to the frozen trunk.
template <class T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const LayerNormParams<T>& p, const LayerNormCache<T>& c) {
    Mat<T> dx(dy.rows(), dy.cols());
    for (Eigen::Index t = 0; t < dy.rows(); ++t) {
        const auto dxhat = (dy.row(t).array() * p.gamma.array()).eval();
        const auto xhat = c.xhat.row(t).array();
        const T m1 = dxhat.mean();
        const T m2 = (dxhat * xhat).mean();
        dx.row(t) = ((dxhat - m1 - xhat * m2) * c.inv_std[std::size_t(t)]).matrix();
    }
    return dx;
}

template <class T>
T gelu(T x) {
    constexpr T k = T(0.7978845608028654);  // sqrt(2/pi)
    return T(0.5) * x * (T(1) + std::tanh(k * (x + T(0.044715) * x * x * x)));
}

template <class T>
T gelu_grad(T x) {
    constexpr T k = T(0.7978845608028654);
    const T t = std::tanh(k * (x + T(0.044715) * x * x * x));
    return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * k * (T(1) + T(3 * 0.044715) * x * x);
}

template <class T>
void softmax_rows(Mat<T>& s) {
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
        const T mx = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - mx).exp().matrix();
        s.row(r) /= s.row(r).sum();
    }
}

}  // namespace nn

template <class T>
struct BlockCache {
    nn::LayerNormCache<T> ln1, ln2;
    Mat<T> q, k, v;
    std::vector<Mat<T>> attn;  // per head, tokens x tokens
    Mat<T> u;                  // MLP pre-activation
    std::optional<MoeaCache<T>> moea;
};

template <class T>
struct CueCache {
    bool shuffled = false;
    std::vector<BlockCache<T>> blocks;  // indexed by block; entries before the start block are unused
    nn::LayerNormCache<T> final_ln;
    RowVec<T> feature;
};

/// Flattened non-overlapping patches in raster order; feature index = c*P*P + py*P + px.
template <class T>
Mat<T> extract_patches(const ImagePlanes& img, int patch) {
    if (img.height % patch != 0 || img.width % patch != 0)
        throw std::invalid_argument("extract_patches: image not divisible by patch size");
    const int gh = img.height / patch, gw = img.width / patch;
    Mat<T> out(gh * gw, 3 * patch * patch);
    for (int py = 0; py < gh; ++py)
        for (int px = 0; px < gw; ++px) {
            const int row = py * gw + px;
            for (int c = 0; c < 3; ++c)
                for (int y = 0; y < patch; ++y)
                    for (int x = 0; x < patch; ++x)
                        out(row, c * patch * patch + y * patch + x) = T(img.at(c, py * patch + y, px * patch + x));
        }
    return out;
}

template <class T>
class Model {
public:
    Model() = default;

    explicit Model(BackboneConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        init();
    }

    const BackboneConfig& config() const { return cfg_; }
    ModelParams<T>& params() { return p_; }
    const ModelParams<T>& params() const { return p_; }
    const std::vector<int>& shuffle_perm() const { return perm_; }

    PositionalEmbedding<T> positional_embedding() const {
        return {p_.pos.row(0), p_.pos.bottomRows(p_.pos.rows() - 1)};
    }
    PositionalEmbedding<T> shuffled_positional_embedding() const {
        return make_shuffled_positions(positional_embedding(), shuffle_seed());
    }

    std::uint64_t shuffle_seed() const { return derive_seed(cfg_.seed, 0x504f53ULL); }

    /// Every parameter in a fixed order; trainable marks adapters, heads and
    /// (when enabled) positional embeddings.
    std::vector<ParamSlot<T>> slots() { return slots_of(p_); }

    std::vector<ParamSlot<T>> slots_of(ModelParams<T>& p) const {
        std::vector<ParamSlot<T>> s;
        auto add = [&s](std::string name, T* data, Eigen::Index r, Eigen::Index c, bool tr) {
            s.push_back({std::move(name), data, r, c, tr});
        };
        add("patch.w", p.patch_w.data(), p.patch_w.rows(), p.patch_w.cols(), false);
        add("patch.b", p.patch_b.data(), 1, p.patch_b.cols(), false);
        add("cls", p.cls.data(), 1, p.cls.cols(), false);
        add("pos", p.pos.data(), p.pos.rows(), p.pos.cols(), cfg_.train_pos_embed);
        for (std::size_t b = 0; b < p.blocks.size(); ++b) {
            auto& blk = p.blocks[b];
            const std::string pre = "block" + std::to_string(b) + ".";
            add(pre + "ln1.gamma", blk.ln1.gamma.data(), 1, blk.ln1.gamma.cols(), false);
            add(pre + "ln1.beta", blk.ln1.beta.data(), 1, blk.ln1.beta.cols(), false);
            add(pre + "attn.wq", blk.wq.data(), blk.wq.rows(), blk.wq.cols(), false);
            add(pre + "attn.wk", blk.wk.data(), blk.wk.rows(), blk.wk.cols(), false);
            add(pre + "attn.wv", blk.wv.data(), blk.wv.rows(), blk.wv.cols(), false);
            add(pre + "attn.wo", blk.wo.data(), blk.wo.rows(), blk.wo.cols(), false);
            add(pre + "attn.bq", blk.bq.data(), 1, blk.bq.cols(), false);
            add(pre + "attn.bk", blk.bk.data(), 1, blk.bk.cols(), false);
            add(pre + "attn.bv", blk.bv.data(), 1, blk.bv.cols(), false);
            add(pre + "attn.bo", blk.bo.data(), 1, blk.bo.cols(), false);
            add(pre + "ln2.gamma", blk.ln2.gamma.data(), 1, blk.ln2.gamma.cols(), false);
            add(pre + "ln2.beta", blk.ln2.beta.data(), 1, blk.ln2.beta.cols(), false);
            add(pre + "mlp.fc1", blk.fc1.data(), blk.fc1.rows(), blk.fc1.cols(), false);
            add(pre + "mlp.b1", blk.b1.data(), 1, blk.b1.cols(), false);
            add(pre + "mlp.fc2", blk.fc2.data(), blk.fc2.rows(), blk.fc2.cols(), false);
            add(pre + "mlp.b2", blk.b2.data(), 1, blk.b2.cols(), false);
            if (blk.moea)
                visit_params(*blk.moea, pre + "moea.", [&](std::string name, T* d, Eigen::Index r, Eigen::Index c) {
                    add(std::move(name), d, r, c, true);
                });
        }
        add("final_ln.gamma", p.final_ln.gamma.data(), 1, p.final_ln.gamma.cols(), false);
        add("final_ln.beta", p.final_ln.beta.data(), 1, p.final_ln.beta.cols(), false);
        add("head.w", p.head_w.data(), p.head_w.rows(), p.head_w.cols(), true);
        add("head.b", p.head_b.data(), 1, p.head_b.cols(), true);
        return s;
    }

    ModelParams<T> zero_grads() const {
        ModelParams<T> g = p_;
        for (auto& s : slots_of(g)) std::fill(s.data, s.data + s.size(), T(0));
        return g;
    }

    /// Re-project constrained parameters after an update.
    void project() {
        for (auto& b : p_.blocks)
            if (b.moea) clamp_tau(b.moea->router);
    }

    template <class U>
    Model<U> cast() const {
        Model<U> out(cfg_);
        auto src = const_cast<Model*>(this)->slots();
        auto dst = out.slots();
        for (std::size_t i = 0; i < src.size(); ++i)
            for (Eigen::Index j = 0; j < src[i].size(); ++j) dst[i].data[j] = U(src[i].data[j]);
        return out;
    }

    /// Linear projection of the patches with the class token prepended;
    /// positional embeddings are not included.
    Mat<T> patch_embed(const ImagePlanes& img) const {
        if (img.height != cfg_.img_size || img.width != cfg_.img_size)
            throw std::invalid_argument("patch_embed: image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                                        " does not match img_size " + std::to_string(cfg_.img_size));
        const Mat<T> patches = extract_patches<T>(img, cfg_.patch_size);
        Mat<T> tokens(patches.rows() + 1, cfg_.dim);
        tokens.row(0) = p_.cls;
        tokens.bottomRows(patches.rows()).noalias() = patches * p_.patch_w;
        tokens.bottomRows(patches.rows()).rowwise() += p_.patch_b;
        return tokens;
    }

    /// Patch tokens plus (optionally shuffled) positional embeddings.
    Mat<T> embed(const ImagePlanes& img, bool shuffled) const {
        Mat<T> x = patch_embed(img);
        x.row(0) += p_.pos.row(0);
        for (int i = 0; i < cfg_.n_patches(); ++i) x.row(i + 1) += p_.pos.row(1 + pos_index(i, shuffled));
        return x;
    }

    Mat<T> block_forward(const Mat<T>& x, int b, BlockCache<T>* cache = nullptr) const {
        const auto& blk = p_.blocks[std::size_t(b)];
        if (x.cols() != cfg_.dim) throw std::invalid_argument("block_forward: token width mismatch");
        BlockCache<T> local;
        BlockCache<T>& c = cache ? *cache : local;
        const Eigen::Index tokens = x.rows();
        const int hd = cfg_.dim / cfg_.heads;
        const T scale = T(1) / std::sqrt(T(hd));

        const Mat<T> a = nn::layer_norm(x, blk.ln1, &c.ln1);
        c.q.noalias() = a * blk.wq;
        c.q.rowwise() += blk.bq;
        c.k.noalias() = a * blk.wk;
        c.k.rowwise() += blk.bk;
        c.v.noalias() = a * blk.wv;
        c.v.rowwise() += blk.bv;
        Mat<T> o(tokens, cfg_.dim);
        c.attn.resize(std::size_t(cfg_.heads));
        for (int h = 0; h < cfg_.heads; ++h) {
            Mat<T>& s = c.attn[std::size_t(h)];
            s.noalias() = c.q.middleCols(h * hd, hd) * c.k.middleCols(h * hd, hd).transpose();
            s *= scale;
            nn::softmax_rows(s);
            o.middleCols(h * hd, hd).noalias() = s * c.v.middleCols(h * hd, hd);
        }
        Mat<T> x1 = x;
        x1.noalias() += o * blk.wo;
        x1.rowwise() += blk.bo;

        const Mat<T> m = nn::layer_norm(x1, blk.ln2, &c.ln2);
        c.u.noalias() = m * blk.fc1;
        c.u.rowwise() += blk.b1;
        const Mat<T> gl = c.u.unaryExpr([](T v) { return nn::gelu(v); });
        Mat<T> x2 = x1;
        x2.noalias() += gl * blk.fc2;
        x2.rowwise() += blk.b2;

        if (!blk.moea) {
            c.moea.reset();
            return x2;
        }
        c.moea.emplace();
        return moea_forward_batch(*blk.moea, x2, &*c.moea);
    }

    /// Backward through one block. Adapter gradients accumulate into grads;
    /// returns dL/dx (empty when need_dx is false).
    Mat<T> block_backward(const Mat<T>& dy, int b, const BlockCache<T>& c, const Mat<T>* d_gates, ModelParams<T>& grads,
                          bool need_dx) const {
        const auto& blk = p_.blocks[std::size_t(b)];
        Mat<T> dx2 = dy;
        if (blk.moea) {
            dx2 = moea_backward_batch(*blk.moea, *c.moea, dy, d_gates, *grads.blocks[std::size_t(b)].moea, need_dx);
            if (!need_dx) return {};
        }
        if (!need_dx) return {};
        const int hd = cfg_.dim / cfg_.heads;
        const T scale = T(1) / std::sqrt(T(hd));

        // MLP
        Mat<T> du = dx2 * blk.fc2.transpose();
        du.array() *= c.u.unaryExpr([](T v) { return nn::gelu_grad(v); }).array();
        const Mat<T> dm = du * blk.fc1.transpose();
        Mat<T> dx1 = dx2 + nn::layer_norm_backward(dm, blk.ln2, c.ln2);

        // Attention
        const Mat<T> d_o = dx1 * blk.wo.transpose();
        Mat<T> dq(d_o.rows(), cfg_.dim), dk(d_o.rows(), cfg_.dim), dv(d_o.rows(), cfg_.dim);
        for (int h = 0; h < cfg_.heads; ++h) {
            const Mat<T>& a = c.attn[std::size_t(h)];
            const auto d_oh = d_o.middleCols(h * hd, hd);
            dv.middleCols(h * hd, hd).noalias() = a.transpose() * d_oh;
            Mat<T> da = d_oh * c.v.middleCols(h * hd, hd).transpose();
            const auto rowdot = (da.array() * a.array()).rowwise().sum().eval();
            Mat<T> ds = (a.array() * (da.array().colwise() - rowdot)).matrix() * scale;
            dq.middleCols(h * hd, hd).noalias() = ds * c.k.middleCols(h * hd, hd);
            dk.middleCols(h * hd, hd).noalias() = ds.transpose() * c.q.middleCols(h * hd, hd);
        }
        Mat<T> d_a = dq * blk.wq.transpose();
        d_a.noalias() += dk * blk.wk.transpose();
        d_a.noalias() += dv * blk.wv.transpose();
        return dx1 + nn::layer_norm_backward(d_a, blk.ln1, c.ln1);
    }

    /// Trunk pass for one cue; returns the normalized class-token feature.
    RowVec<T> encode(const ImagePlanes& cue, bool shuffled, CueCache<T>* cache = nullptr) const {
        return encode_tokens(embed(cue, shuffled), 0, shuffled, cache);
    }

    /// Continue a trunk pass from the input of block `start`.
    RowVec<T> encode_tokens(Mat<T> x, int start, bool shuffled, CueCache<T>* cache = nullptr) const {
        if (cache) {
            cache->shuffled = shuffled;
            cache->blocks.resize(std::size_t(cfg_.depth));
        }
        for (int b = start; b < cfg_.depth; ++b) x = block_forward(x, b, cache ? &cache->blocks[std::size_t(b)] : nullptr);
        Mat<T> cls = x.topRows(1);
        const Mat<T> f = nn::layer_norm(cls, p_.final_ln, cache ? &cache->final_ln : nullptr);
        if (cache) cache->feature = f.row(0);
        return f.row(0);
    }

    /// Tokens entering block `end` (the frozen prefix of the trunk).
    Mat<T> trunk_prefix(const ImagePlanes& cue, bool shuffled, int end) const {
        Mat<T> x = embed(cue, shuffled);
        for (int b = 0; b < end; ++b) x = block_forward(x, b);
        return x;
    }

    double head_logit(const RowVec<T>& feature, Cue cue) const {
        const int c = int(cue);
        return double(feature.dot(p_.head_w.col(c)) + p_.head_b(c));
    }

    /// First block whose input gradient is ever needed by a trainable parameter.
    int backward_floor() const {
        if (cfg_.train_pos_embed) return 0;
        int lo = cfg_.depth;
        for (int b : cfg_.moea_blocks) lo = std::min(lo, b);
        return lo;
    }

    /// Backward for one cue pass. d_logit is dL/dlogit of this cue's head;
    /// d_gates[b] (may be null) holds auxiliary-loss gradients for block b's gates.
    void backward_cue(const CueCache<T>& c, Cue cue, T d_logit, const std::vector<const Mat<T>*>& d_gates,
                      ModelParams<T>& grads, int start = 0) const {
        const int ci = int(cue);
        grads.head_w.col(ci) += d_logit * c.feature.transpose();
        grads.head_b(ci) += d_logit;
        const RowVec<T> d_feat = d_logit * p_.head_w.col(ci).transpose();
        Mat<T> dx = Mat<T>::Zero(cfg_.n_tokens(), cfg_.dim);
        dx.row(0) = nn::layer_norm_backward(Mat<T>(d_feat), p_.final_ln, c.final_ln).row(0);
        const int floor = std::max(backward_floor(), start);
        for (int b = cfg_.depth - 1; b >= floor; --b) {
            const bool need_dx = b > floor || (cfg_.train_pos_embed && start == 0);
            const Mat<T>* dg = std::size_t(b) < d_gates.size() ? d_gates[std::size_t(b)] : nullptr;
            dx = block_backward(dx, b, c.blocks[std::size_t(b)], dg, grads, need_dx);
            if (!need_dx) return;
        }
        if (cfg_.train_pos_embed && start == 0) {
            grads.pos.row(0) += dx.row(0);
            for (int i = 0; i < cfg_.n_patches(); ++i) grads.pos.row(1 + pos_index(i, c.shuffled)) += dx.row(i + 1);
        }
    }

private:
    int pos_index(int patch, bool shuffled) const { return shuffled ? perm_[std::size_t(patch)] : patch; }

    void init() {
        Rng rng(derive_seed(cfg_.seed, 0x54524bULL));
        const int d = cfg_.dim, f = cfg_.patch_features(), hidden = cfg_.mlp_ratio * d;
        auto normal = [&rng](Eigen::Index r, Eigen::Index c, double std) {
            Mat<T> m(r, c);
            for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = T(rng.normal(0.0, std));
            return m;
        };
        auto ln = [d] { return LayerNormParams<T>{RowVec<T>::Ones(d), RowVec<T>::Zero(d)}; };
        p_.patch_w = normal(f, d, kPatchInitStd);
        // Zero-mean filters per colour channel: the stem sees local structure,
        // not absolute brightness.
        const Eigen::Index pp = Eigen::Index(cfg_.patch_size) * cfg_.patch_size;
        for (int c = 0; c < 3; ++c) {
            auto band = p_.patch_w.middleRows(c * pp, pp);
            band.rowwise() -= band.colwise().mean();
        }
        p_.patch_b = RowVec<T>::Zero(d);
        p_.cls = normal(1, d, 0.02);
        p_.pos = normal(cfg_.n_tokens(), d, 0.02);
        p_.blocks.clear();
        for (int b = 0; b < cfg_.depth; ++b) {
            BlockParams<T> blk;
            blk.ln1 = ln();
            blk.ln2 = ln();
            blk.wq = normal(d, d, 1.0 / std::sqrt(double(d)));
            blk.wk = normal(d, d, 1.0 / std::sqrt(double(d)));
            blk.wv = normal(d, d, 1.0 / std::sqrt(double(d)));
            blk.wo = normal(d, d, 1.0 / std::sqrt(double(d)));
            blk.bq = blk.bk = blk.bv = blk.bo = RowVec<T>::Zero(d);
            blk.fc1 = normal(d, hidden, 1.0 / std::sqrt(double(d)));
            blk.fc2 = normal(hidden, d, 1.0 / std::sqrt(double(hidden)));
            blk.b1 = RowVec<T>::Zero(hidden);
            blk.b2 = RowVec<T>::Zero(d);
            p_.blocks.push_back(std::move(blk));
        }
        Rng adapter_rng(derive_seed(cfg_.seed, 0x4d4f4541ULL));
        for (int b = 0; b < cfg_.depth; ++b)
            if (cfg_.has_moea(b)) p_.blocks[std::size_t(b)].moea = make_moea_layer<T>(d, cfg_.router_dim, cfg_.n_experts, adapter_rng);
        p_.final_ln = ln();
        p_.head_w = Mat<T>::Zero(d, kNumCues);
        p_.head_b = RowVec<T>::Zero(kNumCues);
        perm_ = shuffle_permutation(cfg_.n_patches(), shuffle_seed());
    }

    BackboneConfig cfg_;
    ModelParams<T> p_;
    std::vector<int> perm_;
};

// ---------------------------------------------------------------------------
// Multi-cue forward

struct MultiCueOutput {
    MultiCueLogits logits;
    std::vector<GateRecord> gates;
};

template <class T>
struct MultiCueCache {
    CueCache<T> cue[kNumCues];
};

inline const ImagePlanes& cue_image(const CueBundle& b, int cue) { return cue == 0 ? b.img : cue == 1 ? b.hf : b.ci; }

/// Runs each cue through the shared trunk (CI with shuffled positions) and its own head.
template <class T>
MultiCueOutput forward_multicue(const CueBundle& bundle, const Model<T>& model, MultiCueCache<T>* cache = nullptr) {
    if (!bundle.img.same_shape(bundle.hf) || !bundle.img.same_shape(bundle.ci))
        throw std::invalid_argument("forward_multicue: cue shapes differ");
    MultiCueOutput out;
    double logit[kNumCues];
    for (int c = 0; c < kNumCues; ++c) {
        CueCache<T> local;
        CueCache<T>& cc = cache ? cache->cue[c] : local;
        const RowVec<T> feat = model.encode(cue_image(bundle, c), c == int(Cue::ci), &cc);
        logit[c] = model.head_logit(feat, Cue(c));
        for (int b = 0; b < model.config().depth; ++b) {
            const auto& bc = cc.blocks[std::size_t(b)];
            if (!bc.moea) continue;
            const auto& g = bc.moea->route.gates;
            for (Eigen::Index t = 0; t < g.rows(); ++t) {
                GateRecord r;
                r.gates.resize(std::size_t(g.cols()));
                for (Eigen::Index i = 0; i < g.cols(); ++i) r.gates[std::size_t(i)] = double(g(t, i));
                r.token_index = int(t);
                r.layer_index = b;
                r.cue = c;
                out.gates.push_back(std::move(r));
            }
        }
    }
    out.logits = {logit[0], logit[1], logit[2]};
    return out;
}

}  // namespace mcan
