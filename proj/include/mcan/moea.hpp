#pragma once

// Mixture-of-Encoder Adapter.
//
//   gates(z)  = softmax_i( cos(z W1, We[:, i]) / tau )
//   Wd(z)     = sum_i gates_i(z) * E_i,   E_0 full d x c,  E_i = D_i U_i with rank floor(c / i)
//   M(z)      = z Wu Wd(z) + z
//
// Tokens are row vectors. Training evaluates M with one matrix product per
// expert followed by a gate-weighted sum; single-token inference collapses the
// experts into one mixed matrix first. Both are the same linear map.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mcan/rng.hpp"

namespace mcan {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

inline constexpr double kTauMin = 1e-3;
inline constexpr double kTauInit = 0.07;
inline constexpr double kAdapterInitScale = 0.02;

template <class T>
struct RouterParams {
    Mat<T> w1;   // d x d_e
    Mat<T> w_e;  // d_e x N, one expert embedding per column
    T tau = T(kTauInit);

    int n_experts() const { return int(w_e.cols()); }
};

template <class T>
struct LowRankExpert {
    Mat<T> down;  // d x floor(c / i)
    Mat<T> up;    // floor(c / i) x c
};

template <class T>
struct ExpertBank {
    Mat<T> full;                          // expert 0, d x c
    std::vector<LowRankExpert<T>> lowrank;  // experts 1..N-1

    int size() const { return 1 + int(lowrank.size()); }
};

template <class T>
struct MoeaLayer {
    Mat<T> w_u;  // d x d
    RouterParams<T> router;
    ExpertBank<T> bank;

    int dim() const { return int(w_u.rows()); }
    int n_experts() const { return bank.size(); }
};

struct GateRecord {
    std::vector<double> gates;
    int token_index = 0;
    int layer_index = 0;
    int cue = 0;
};

inline int lowrank_rank(int c, int i) { return c / i; }

template <class T>
Mat<T> uniform_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale) {
    Mat<T> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = T(rng.uniform(-scale, scale));
    return m;
}

/// Fresh adapter: zero Wu (identity map), small uniform experts and router, tau = 0.07.
template <class T>
MoeaLayer<T> make_moea_layer(int d, int router_dim, int n_experts, Rng& rng) {
    if (d < 1 || router_dim < 1 || n_experts < 1) throw std::invalid_argument("make_moea_layer: sizes must be >= 1");
    if (n_experts > d) throw std::invalid_argument("make_moea_layer: n_experts must not exceed d (rank floor(d/i) >= 1)");
    MoeaLayer<T> l;
    l.w_u = Mat<T>::Zero(d, d);
    l.router.w1 = uniform_matrix<T>(rng, d, router_dim, kAdapterInitScale);
    l.router.w_e = uniform_matrix<T>(rng, router_dim, n_experts, kAdapterInitScale);
    l.router.tau = T(kTauInit);
    l.bank.full = uniform_matrix<T>(rng, d, d, kAdapterInitScale);
    for (int i = 1; i < n_experts; ++i) {
        const int r = lowrank_rank(d, i);
        l.bank.lowrank.push_back({uniform_matrix<T>(rng, d, r, kAdapterInitScale), uniform_matrix<T>(rng, r, d, kAdapterInitScale)});
    }
    return l;
}

template <class T>
MoeaLayer<T> zeros_like(const MoeaLayer<T>& l) {
    MoeaLayer<T> z;
    z.w_u = Mat<T>::Zero(l.w_u.rows(), l.w_u.cols());
    z.router.w1 = Mat<T>::Zero(l.router.w1.rows(), l.router.w1.cols());
    z.router.w_e = Mat<T>::Zero(l.router.w_e.rows(), l.router.w_e.cols());
    z.router.tau = T(0);
    z.bank.full = Mat<T>::Zero(l.bank.full.rows(), l.bank.full.cols());
    for (const auto& e : l.bank.lowrank)
        z.bank.lowrank.push_back({Mat<T>::Zero(e.down.rows(), e.down.cols()), Mat<T>::Zero(e.up.rows(), e.up.cols())});
    return z;
}

/// Visit every parameter as (name, data, rows, cols).
template <class T, class F>
void visit_params(MoeaLayer<T>& l, const std::string& prefix, F&& f) {
    f(prefix + "w_u", l.w_u.data(), l.w_u.rows(), l.w_u.cols());
    f(prefix + "router.w1", l.router.w1.data(), l.router.w1.rows(), l.router.w1.cols());
    f(prefix + "router.w_e", l.router.w_e.data(), l.router.w_e.rows(), l.router.w_e.cols());
    f(prefix + "router.tau", &l.router.tau, Eigen::Index(1), Eigen::Index(1));
    f(prefix + "expert0", l.bank.full.data(), l.bank.full.rows(), l.bank.full.cols());
    for (std::size_t i = 0; i < l.bank.lowrank.size(); ++i) {
        auto& e = l.bank.lowrank[i];
        const std::string base = prefix + "expert" + std::to_string(i + 1);
        f(base + ".down", e.down.data(), e.down.rows(), e.down.cols());
        f(base + ".up", e.up.data(), e.up.rows(), e.up.cols());
    }
}

template <class T>
void clamp_tau(RouterParams<T>& r) {
    if (!(r.tau >= T(kTauMin))) r.tau = T(kTauMin);
}

template <class T>
Mat<T> materialize_expert(const ExpertBank<T>& bank, int i) {
    if (i < 0 || i >= bank.size())
        throw std::out_of_range("materialize_expert: index " + std::to_string(i) + " outside [0, " + std::to_string(bank.size()) + ")");
    if (i == 0) return bank.full;
    const auto& e = bank.lowrank[std::size_t(i - 1)];
    return e.down * e.up;
}

template <class T>
Mat<T> mix_experts(const ExpertBank<T>& bank, std::span<const double> gates) {
    if (int(gates.size()) != bank.size())
        throw std::invalid_argument("mix_experts: " + std::to_string(gates.size()) + " gates for " + std::to_string(bank.size()) + " experts");
    Mat<T> w = T(gates[0]) * bank.full;
    for (int i = 1; i < bank.size(); ++i) w.noalias() += T(gates[std::size_t(i)]) * materialize_expert(bank, i);
    return w;
}

// ---------------------------------------------------------------------------
// Routing

template <class T>
struct RouterCache {
    Mat<T> p;               // T x d_e, projected tokens
    Mat<T> pn;              // row-normalized p (zero rows stay zero)
    std::vector<T> pnorm;   // row norms of p
    Mat<T> en;              // column-normalized We
    std::vector<T> enorm;   // column norms of We
    Mat<T> cos;             // T x N
    Mat<T> gates;           // T x N
};

/// Route a batch of tokens (rows of x). A token whose projection has zero
/// norm gets uniform gates.
template <class T>
Mat<T> route_batch(const RouterParams<T>& r, const Mat<T>& x, RouterCache<T>* cache = nullptr) {
    if (x.cols() != r.w1.rows())
        throw std::invalid_argument("route: token dim " + std::to_string(x.cols()) + " != router input dim " + std::to_string(r.w1.rows()));
    const Eigen::Index n = r.w_e.cols();
    RouterCache<T> local;
    RouterCache<T>& c = cache ? *cache : local;
    c.p.noalias() = x * r.w1;
    c.pn = c.p;
    c.pnorm.assign(std::size_t(x.rows()), T(0));
    for (Eigen::Index t = 0; t < x.rows(); ++t) {
        const T nrm = c.p.row(t).norm();
        c.pnorm[std::size_t(t)] = nrm;
        if (nrm > T(0)) c.pn.row(t) /= nrm;
    }
    c.en = r.w_e;
    c.enorm.assign(std::size_t(n), T(0));
    for (Eigen::Index i = 0; i < n; ++i) {
        const T nrm = r.w_e.col(i).norm();
        c.enorm[std::size_t(i)] = nrm;
        if (nrm > T(0)) c.en.col(i) /= nrm;
    }
    c.cos.noalias() = c.pn * c.en;
    c.gates.resize(x.rows(), n);
    for (Eigen::Index t = 0; t < x.rows(); ++t) {
        if (!(c.pnorm[std::size_t(t)] > T(0))) {
            c.gates.row(t).setConstant(T(1) / T(n));
            continue;
        }
        const auto logits = (c.cos.row(t) / r.tau).eval();
        const T mx = logits.maxCoeff();
        auto e = (logits.array() - mx).exp().eval();
        c.gates.row(t) = e / e.sum();
    }
    return c.gates;
}

template <class T>
GateRecord route(const RouterParams<T>& r, std::span<const T> token, int token_index = 0, int layer_index = 0) {
    Mat<T> x(1, Eigen::Index(token.size()));
    for (std::size_t i = 0; i < token.size(); ++i) x(0, Eigen::Index(i)) = token[i];
    const Mat<T> g = route_batch(r, x);
    GateRecord rec;
    rec.gates.resize(std::size_t(g.cols()));
    for (Eigen::Index i = 0; i < g.cols(); ++i) rec.gates[std::size_t(i)] = double(g(0, i));
    rec.token_index = token_index;
    rec.layer_index = layer_index;
    return rec;
}

/// Backward through route_batch: accumulates into grads.w1 / w_e / tau and returns dL/dx.
template <class T>
Mat<T> route_backward(const RouterParams<T>& r, const RouterCache<T>& c, const Mat<T>& x, const Mat<T>& d_gates,
                      RouterParams<T>& grads) {
    const Eigen::Index tokens = x.rows(), n = r.w_e.cols();
    Mat<T> d_logits(tokens, n);
    for (Eigen::Index t = 0; t < tokens; ++t) {
        if (!(c.pnorm[std::size_t(t)] > T(0))) {
            d_logits.row(t).setZero();
            continue;
        }
        const auto g = c.gates.row(t);
        const T dot = g.dot(d_gates.row(t));
        d_logits.row(t) = (g.array() * (d_gates.row(t).array() - dot)).matrix();
    }
    grads.tau -= (d_logits.array() * c.cos.array()).sum() / (r.tau * r.tau);
    const Mat<T> d_cos = d_logits / r.tau;

    Mat<T> d_pn = d_cos * c.en.transpose();  // T x d_e
    Mat<T> d_en = c.pn.transpose() * d_cos;  // d_e x N

    Mat<T> d_p(tokens, d_pn.cols());
    for (Eigen::Index t = 0; t < tokens; ++t) {
        const T nrm = c.pnorm[std::size_t(t)];
        if (!(nrm > T(0))) {
            d_p.row(t).setZero();
            continue;
        }
        const auto u = c.pn.row(t);
        d_p.row(t) = (d_pn.row(t) - u * u.dot(d_pn.row(t))) / nrm;
    }
    for (Eigen::Index i = 0; i < n; ++i) {
        const T nrm = c.enorm[std::size_t(i)];
        if (!(nrm > T(0))) continue;
        const auto u = c.en.col(i);
        grads.w_e.col(i) += (d_en.col(i) - u * u.dot(d_en.col(i))) / nrm;
    }
    grads.w1.noalias() += x.transpose() * d_p;
    return d_p * r.w1.transpose();
}

// ---------------------------------------------------------------------------
// Adapter forward / backward

template <class T>
struct MoeaCache {
    Mat<T> x;
    Mat<T> h;  // x Wu
    RouterCache<T> route;
    std::vector<Mat<T>> experts;  // materialized E_i
    std::vector<Mat<T>> y;        // h E_i
};

/// Single-token forward via the collapsed mixed encoder: z Wu Wd(z) + z.
template <class T>
RowVec<T> moea_forward(const MoeaLayer<T>& l, std::span<const T> token) {
    if (int(token.size()) != l.dim())
        throw std::invalid_argument("moea_forward: token dim " + std::to_string(token.size()) + " != " + std::to_string(l.dim()));
    if (l.bank.full.cols() != l.w_u.rows()) throw std::invalid_argument("moea_forward: expert width c must equal d");
    RowVec<T> z(Eigen::Index(token.size()));
    for (std::size_t i = 0; i < token.size(); ++i) z(Eigen::Index(i)) = token[i];
    const GateRecord g = route(l.router, token);
    const Mat<T> wd = mix_experts(l.bank, g.gates);
    return (z * l.w_u) * wd + z;
}

/// Batched forward, applying each expert and mixing the outputs per token.
template <class T>
Mat<T> moea_forward_batch(const MoeaLayer<T>& l, const Mat<T>& x, MoeaCache<T>* cache = nullptr) {
    if (x.cols() != l.dim())
        throw std::invalid_argument("moea_forward: token dim " + std::to_string(x.cols()) + " != " + std::to_string(l.dim()));
    MoeaCache<T> local;
    MoeaCache<T>& c = cache ? *cache : local;
    c.x = x;
    route_batch(l.router, x, &c.route);
    c.h.noalias() = x * l.w_u;
    const int n = l.n_experts();
    c.experts.resize(std::size_t(n));
    c.y.resize(std::size_t(n));
    Mat<T> out = x;
    for (int i = 0; i < n; ++i) {
        c.experts[std::size_t(i)] = materialize_expert(l.bank, i);
        c.y[std::size_t(i)].noalias() = c.h * c.experts[std::size_t(i)];
        out.array() += c.y[std::size_t(i)].array().colwise() * c.route.gates.col(i).array();
    }
    return out;
}

/// Backward through moea_forward_batch. d_gates_extra (may be null) carries
/// gradients of auxiliary routing losses w.r.t. the gates. Parameter gradients
/// accumulate into grads; returns dL/dx (empty when need_dx is false).
template <class T>
Mat<T> moea_backward_batch(const MoeaLayer<T>& l, const MoeaCache<T>& c, const Mat<T>& dy, const Mat<T>* d_gates_extra,
                           MoeaLayer<T>& grads, bool need_dx = true) {
    const int n = l.n_experts();
    const Eigen::Index tokens = c.x.rows();
    Mat<T> d_gates = d_gates_extra ? *d_gates_extra : Mat<T>::Zero(tokens, n);
    Mat<T> dh = Mat<T>::Zero(tokens, l.dim());
    for (int i = 0; i < n; ++i) {
        const auto& e = c.experts[std::size_t(i)];
        d_gates.col(i) += (c.y[std::size_t(i)].array() * dy.array()).rowwise().sum().matrix();
        const Mat<T> scaled = (dy.array().colwise() * c.route.gates.col(i).array()).matrix();
        dh.noalias() += scaled * e.transpose();
        const Mat<T> de = c.h.transpose() * scaled;
        if (i == 0) {
            grads.bank.full += de;
        } else {
            const auto& f = l.bank.lowrank[std::size_t(i - 1)];
            auto& g = grads.bank.lowrank[std::size_t(i - 1)];
            g.down.noalias() += de * f.up.transpose();
            g.up.noalias() += f.down.transpose() * de;
        }
    }
    grads.w_u.noalias() += c.x.transpose() * dh;
    Mat<T> d_route_x = route_backward(l.router, c.route, c.x, d_gates, grads.router);
    if (!need_dx) return {};
    Mat<T> dx = dy;
    dx.noalias() += dh * l.w_u.transpose();
    dx += d_route_x;
    return dx;
}

// ---------------------------------------------------------------------------
// Routing losses

/// Squared coefficient of variation (population std) of per-expert total gate mass.
/// Rows of g are tokens. When d_g is non-null it receives dLoss/dg.
inline double importance_loss(const Mat<double>& g, Mat<double>* d_g = nullptr) {
    if (g.rows() == 0) throw std::invalid_argument("importance_loss: empty batch");
    const Eigen::Index n = g.cols();
    const RowVec<double> imp = g.colwise().sum();
    const double mean = imp.mean();
    const double var = (imp.array() - mean).square().sum() / double(n);
    if (d_g) {
        d_g->resize(g.rows(), n);
        if (mean > 0) {
            RowVec<double> d_imp(n);
            for (Eigen::Index i = 0; i < n; ++i)
                d_imp(i) = 2.0 * (imp(i) - mean) / (double(n) * mean * mean) - 2.0 * var / (double(n) * mean * mean * mean);
            d_g->rowwise() = d_imp;
        } else {
            d_g->setZero();
        }
    }
    return mean > 0 ? var / (mean * mean) : 0.0;
}

inline constexpr double kEntropyLogFloor = 1e-12;

/// Mean over tokens of -sum_i g_i ln(g_i + 1e-12).
inline double entropy_loss(const Mat<double>& g, Mat<double>* d_g = nullptr) {
    if (g.rows() == 0) throw std::invalid_argument("entropy_loss: empty batch");
    const double inv = 1.0 / double(g.rows());
    double total = 0.0;
    if (d_g) d_g->resize(g.rows(), g.cols());
    for (Eigen::Index t = 0; t < g.rows(); ++t)
        for (Eigen::Index i = 0; i < g.cols(); ++i) {
            const double v = g(t, i);
            total -= v * std::log(v + kEntropyLogFloor);
            if (d_g) (*d_g)(t, i) = -(std::log(v + kEntropyLogFloor) + v / (v + kEntropyLogFloor)) * inv;
        }
    return total * inv;
}

inline Mat<double> gates_matrix(std::span<const GateRecord> records) {
    if (records.empty()) throw std::invalid_argument("routing loss: empty batch");
    const auto n = Eigen::Index(records.front().gates.size());
    Mat<double> g(Eigen::Index(records.size()), n);
    for (std::size_t t = 0; t < records.size(); ++t) {
        if (Eigen::Index(records[t].gates.size()) != n) throw std::invalid_argument("routing loss: inconsistent expert count");
        for (Eigen::Index i = 0; i < n; ++i) g(Eigen::Index(t), i) = records[t].gates[std::size_t(i)];
    }
    return g;
}

inline double importance_loss(std::span<const GateRecord> records) { return importance_loss(gates_matrix(records)); }
inline double entropy_loss(std::span<const GateRecord> records) { return entropy_loss(gates_matrix(records)); }

}  // namespace mcan
