#pragma once

// Training objective: one binary cross-entropy per cue head plus the two
// routing regularizers, summed with (by default unit) weights.

#include <cmath>
#include <map>
#include <span>
#include <stdexcept>
#include <vector>

#include "mcan/backbone.hpp"
#include "mcan/moea.hpp"

namespace mcan {

/// Label 1 = real, 0 = fake. Stable form max(x,0) - x*y + log(1 + e^-|x|).
inline double bce_loss(double logit, int label) {
    const double y = label ? 1.0 : 0.0;
    return std::max(logit, 0.0) - logit * y + std::log1p(std::exp(-std::abs(logit)));
}

inline double bce_grad(double logit, int label) { return sigmoid(logit) - (label ? 1.0 : 0.0); }

struct LossWeights {
    double img = 1.0, ci = 1.0, hf = 1.0, imp = 1.0, ent = 1.0;

    double cue(int c) const { return c == int(Cue::img) ? img : c == int(Cue::hf) ? hf : ci; }
};

struct LossBreakdown {
    double l_img = 0.0, l_ci = 0.0, l_hf = 0.0, l_imp = 0.0, l_ent = 0.0;
    double total = 0.0;
};

/// Routing terms over per-layer gate matrices (rows = tokens): importance and
/// entropy are each averaged over layers. Optional per-layer gate gradients
/// are scaled by the given weights.
struct RoutingTerms {
    double importance = 0.0;
    double entropy = 0.0;
};

inline RoutingTerms routing_terms(const std::vector<Mat<double>>& layers, std::vector<Mat<double>>* d_gates = nullptr,
                                  double w_imp = 1.0, double w_ent = 1.0) {
    RoutingTerms r;
    if (layers.empty()) return r;
    const double inv = 1.0 / double(layers.size());
    if (d_gates) d_gates->resize(layers.size());
    for (std::size_t l = 0; l < layers.size(); ++l) {
        Mat<double> di, de;
        r.importance += importance_loss(layers[l], d_gates ? &di : nullptr) * inv;
        r.entropy += entropy_loss(layers[l], d_gates ? &de : nullptr) * inv;
        if (d_gates) (*d_gates)[l] = (w_imp * inv) * di + (w_ent * inv) * de;
    }
    return r;
}

/// Loss of a single sample from its logits and gate records.
inline LossBreakdown total_loss(const MultiCueLogits& logits, int label, std::span<const GateRecord> records,
                                const LossWeights& w = {}) {
    LossBreakdown b;
    b.l_img = bce_loss(logits.img, label);
    b.l_hf = bce_loss(logits.hf, label);
    b.l_ci = bce_loss(logits.ci, label);
    if (!records.empty()) {
        std::map<int, std::vector<GateRecord>> by_layer;
        for (const auto& r : records) by_layer[r.layer_index].push_back(r);
        std::vector<Mat<double>> layers;
        for (const auto& [idx, recs] : by_layer) layers.push_back(gates_matrix(recs));
        const auto rt = routing_terms(layers);
        b.l_imp = rt.importance;
        b.l_ent = rt.entropy;
    }
    b.total = w.img * b.l_img + w.ci * b.l_ci + w.hf * b.l_hf + w.imp * b.l_imp + w.ent * b.l_ent;
    return b;
}

}  // namespace mcan
