#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "mcan/backbone.hpp"

namespace mcan {

enum class OptimizerKind { sgd, adam };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

inline OptimizerKind parse_optimizer(const std::string& s) {
    if (s == "sgd") return OptimizerKind::sgd;
    if (s == "adam") return OptimizerKind::adam;
    throw std::invalid_argument("unknown optimizer '" + s + "' (expected sgd or adam)");
}

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::adam;
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Plain SGD or bias-corrected Adam over the trainable slots of a model.
/// Moment estimates are kept in double regardless of the parameter type.
template <class T>
class Optimizer {
public:
    explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {}

    void step(std::vector<ParamSlot<T>>& params, const std::vector<ParamSlot<T>>& grads) {
        if (params.size() != grads.size()) throw std::logic_error("Optimizer: parameter/gradient layout mismatch");
        if (m_.empty()) {
            m_.resize(params.size());
            v_.resize(params.size());
            for (std::size_t i = 0; i < params.size(); ++i)
                if (params[i].trainable) {
                    m_[i].assign(std::size_t(params[i].size()), 0.0);
                    v_[i].assign(std::size_t(params[i].size()), 0.0);
                }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (!params[i].trainable) continue;
            T* p = params[i].data;
            const T* g = grads[i].data;
            for (Eigen::Index j = 0; j < params[i].size(); ++j) {
                const double gj = double(g[j]);
                if (cfg_.kind == OptimizerKind::sgd) {
                    p[j] = T(double(p[j]) - cfg_.lr * gj);
                    continue;
                }
                double& m = m_[i][std::size_t(j)];
                double& v = v_[i][std::size_t(j)];
                m = cfg_.beta1 * m + (1 - cfg_.beta1) * gj;
                v = cfg_.beta2 * v + (1 - cfg_.beta2) * gj * gj;
                p[j] = T(double(p[j]) - cfg_.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps));
            }
        }
    }

    long steps_taken() const { return t_; }

private:
    OptimizerConfig cfg_;
    long t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

}  // namespace mcan
