#pragma once

// Batch loss with analytic gradients, the optimization loop, evaluation and
// finite-difference gradient verification.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mcan/backbone.hpp"
#include "mcan/corpus.hpp"
#include "mcan/cues.hpp"
#include "mcan/loss.hpp"
#include "mcan/optim.hpp"
#include "mcan/parallel.hpp"
#include "mcan/rng.hpp"

namespace mcan {

struct TrainConfig {
    double lr = 1e-4;
    int batch = 16;
    int steps = 2000;
    OptimizerKind optimizer = OptimizerKind::adam;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;
    bool balanced_batches = true;
    int eval_every = 0;  // 0 disables periodic evaluation
    double threshold = kDefaultThreshold;
    LossWeights weights;
    bool log_wall_clock = true;

    void validate() const {
        auto fail = [](const std::string& m) { throw std::invalid_argument("TrainConfig: " + m); };
        if (!(lr >= 0)) fail("lr must be >= 0");
        if (batch < 1) fail("batch must be >= 1");
        if (balanced_batches && batch % 2 != 0) fail("batch must be even when balanced_batches is on");
        if (steps < 0) fail("steps must be >= 0");
        if (eval_every < 0) fail("eval_every must be >= 0");
    }

    OptimizerConfig optimizer_config() const { return {optimizer, lr, beta1, beta2, adam_eps}; }
};

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct StepMetrics {
    int step = 0;
    LossBreakdown loss;
    double wall_ms = 0.0;
};

struct EvalResult {
    double accuracy = 0.0;
    double cue_accuracy[kNumCues] = {0.0, 0.0, 0.0};
    std::size_t n = 0;
};

struct EvalPoint {
    int step = 0;
    EvalResult result;
};

struct TrainResult {
    std::vector<StepMetrics> steps;
    std::vector<EvalPoint> evals;
};

// ---------------------------------------------------------------------------
// Batch objective

/// Optional pre-computed frozen-prefix tokens for one sample (one per cue).
template <class T>
struct PrefixTokens {
    Mat<T> cue[kNumCues];
};

template <class T>
struct BatchInput {
    std::vector<const CueBundle*> bundles;
    std::vector<int> labels;
    std::vector<const PrefixTokens<T>*> prefix;  // empty, or one (possibly null) entry per sample
    int prefix_end = 0;                           // blocks already applied in prefix tokens
};

template <class T>
struct BatchOutput {
    LossBreakdown loss;
    std::vector<MultiCueLogits> logits;
};

/// Mean per-cue BCE over the batch plus routing terms pooled per adapter layer
/// over every token of every cue in the batch. If grads is non-null it
/// receives dL/dparams (trainable entries only; frozen entries stay zero).
template <class T>
BatchOutput<T> batch_objective(const Model<T>& model, const BatchInput<T>& in, const LossWeights& w, ModelParams<T>* grads,
                               int threads = thread_count()) {
    const std::size_t n = in.bundles.size();
    if (n == 0 || in.labels.size() != n) throw std::invalid_argument("batch_objective: empty or inconsistent batch");
    const auto& cfg = model.config();
    const bool use_prefix = !in.prefix.empty();

    std::vector<MultiCueCache<T>> caches(n);
    std::vector<MultiCueLogits> logits(n);
    parallel_for(
        n,
        [&](std::size_t s) {
            double l[kNumCues];
            for (int c = 0; c < kNumCues; ++c) {
                const bool shuffled = c == int(Cue::ci);
                auto& cc = caches[s].cue[c];
                RowVec<T> feat;
                if (use_prefix && in.prefix[s])
                    feat = model.encode_tokens(in.prefix[s]->cue[c], in.prefix_end, shuffled, &cc);
                else
                    feat = model.encode(cue_image(*in.bundles[s], c), shuffled, &cc);
                l[c] = model.head_logit(feat, Cue(c));
            }
            logits[s] = {l[0], l[1], l[2]};
        },
        threads);

    BatchOutput<T> out;
    LossBreakdown& b = out.loss;
    for (std::size_t s = 0; s < n; ++s) {
        b.l_img += bce_loss(logits[s].img, in.labels[s]) / double(n);
        b.l_hf += bce_loss(logits[s].hf, in.labels[s]) / double(n);
        b.l_ci += bce_loss(logits[s].ci, in.labels[s]) / double(n);
    }

    // Gate matrices per adapter block: rows ordered by sample, cue, token.
    std::vector<int> moea_blocks;
    for (int blk = 0; blk < cfg.depth; ++blk)
        if (cfg.has_moea(blk)) moea_blocks.push_back(blk);
    const Eigen::Index tokens = cfg.n_tokens();
    std::vector<Mat<double>> layers;
    for (int blk : moea_blocks) {
        Mat<double> g(Eigen::Index(n) * kNumCues * tokens, cfg.n_experts);
        for (std::size_t s = 0; s < n; ++s)
            for (int c = 0; c < kNumCues; ++c)
                g.middleRows((Eigen::Index(s) * kNumCues + c) * tokens, tokens) =
                    caches[s].cue[c].blocks[std::size_t(blk)].moea->route.gates.template cast<double>();
        layers.push_back(std::move(g));
    }
    std::vector<Mat<double>> d_layers;
    const auto rt = routing_terms(layers, grads ? &d_layers : nullptr, w.imp, w.ent);
    b.l_imp = rt.importance;
    b.l_ent = rt.entropy;
    b.total = w.img * b.l_img + w.ci * b.l_ci + w.hf * b.l_hf + w.imp * b.l_imp + w.ent * b.l_ent;
    out.logits = logits;
    if (!grads) return out;

    std::vector<ModelParams<T>> per_sample(n);
    const int start = use_prefix ? in.prefix_end : 0;
    parallel_for(
        n,
        [&](std::size_t s) {
            per_sample[s] = model.zero_grads();
            for (int c = 0; c < kNumCues; ++c) {
                std::vector<Mat<T>> dg_store(std::size_t(cfg.depth));
                std::vector<const Mat<T>*> dg(std::size_t(cfg.depth), nullptr);
                for (std::size_t l = 0; l < moea_blocks.size(); ++l) {
                    const auto blk = std::size_t(moea_blocks[l]);
                    dg_store[blk] = d_layers[l].middleRows((Eigen::Index(s) * kNumCues + c) * tokens, tokens).template cast<T>();
                    dg[blk] = &dg_store[blk];
                }
                const double d_logit = w.cue(c) * bce_grad(logits[s][c], in.labels[s]) / double(n);
                model.backward_cue(caches[s].cue[c], Cue(c), T(d_logit), dg, per_sample[s], start);
            }
        },
        threads);

    // Fixed-order reduction keeps the sum independent of the thread count.
    auto dst = model.slots_of(*grads);
    for (std::size_t s = 0; s < n; ++s) {
        auto src = model.slots_of(per_sample[s]);
        for (std::size_t i = 0; i < dst.size(); ++i) {
            if (!dst[i].trainable) continue;
            for (Eigen::Index j = 0; j < dst[i].size(); ++j) dst[i].data[j] += src[i].data[j];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation

/// Scores precomputed decisions against labels (1 = real).
inline EvalResult score_decisions(std::span<const Decision> dec, std::span<const int> labels,
                                  double threshold = kDefaultThreshold) {
    if (dec.empty() || dec.size() != labels.size()) throw std::invalid_argument("score_decisions: size mismatch");
    EvalResult r;
    r.n = dec.size();
    std::size_t correct = 0, cue_correct[kNumCues] = {0, 0, 0};
    for (std::size_t i = 0; i < dec.size(); ++i) {
        const bool real = labels[i] == kLabelReal;
        correct += dec[i].real == real;
        const double p[kNumCues] = {dec[i].p_img, dec[i].p_hf, dec[i].p_ci};
        for (int c = 0; c < kNumCues; ++c) cue_correct[c] += (p[c] >= threshold) == real;
    }
    r.accuracy = double(correct) / double(dec.size());
    for (int c = 0; c < kNumCues; ++c) r.cue_accuracy[c] = double(cue_correct[c]) / double(dec.size());
    return r;
}

/// Fraction of correct min-aggregated decisions plus each head's own accuracy.
template <class T>
EvalResult evaluate(const Model<T>& model, const Dataset& data, double threshold = kDefaultThreshold,
                    std::vector<Decision>* decisions = nullptr, int threads = thread_count()) {
    if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
    std::vector<Decision> dec(data.size());
    parallel_for(
        data.size(),
        [&](std::size_t i) {
            const CueBundle bundle = extract_cues(data[i].image, model.config().ci_eps);
            dec[i] = aggregate_min(forward_multicue(bundle, model).logits, threshold);
        },
        threads);
    std::vector<int> labels;
    labels.reserve(data.size());
    for (const auto& s : data) labels.push_back(s.label);
    const EvalResult r = score_decisions(dec, labels, threshold);
    if (decisions) *decisions = std::move(dec);
    return r;
}

/// Mean gate entropy of the adapters over a dataset (all cues, tokens and layers).
template <class T>
double mean_gate_entropy(const Model<T>& model, const Dataset& data, int threads = thread_count()) {
    if (data.empty()) throw std::invalid_argument("mean_gate_entropy: empty dataset");
    std::vector<double> per(data.size());
    parallel_for(
        data.size(),
        [&](std::size_t i) {
            const auto out = forward_multicue(extract_cues(data[i].image, model.config().ci_eps), model);
            per[i] = out.gates.empty() ? 0.0 : entropy_loss(std::span<const GateRecord>(out.gates));
        },
        threads);
    double acc = 0.0;
    for (double v : per) acc += v;
    return acc / double(per.size());
}

// ---------------------------------------------------------------------------
// Training loop

/// Draws batches: balanced batches take batch/2 from each class, walking a
/// per-class permutation that is reshuffled at the end of each pass.
class BatchSampler {
public:
    BatchSampler(const Dataset& data, const TrainConfig& cfg) : cfg_(cfg), rng_(derive_seed(cfg.seed, 0x42415443ULL)) {
        for (std::size_t i = 0; i < data.size(); ++i) {
            all_.push_back(i);
            (data[i].label == kLabelReal ? real_ : fake_).push_back(i);
        }
        if (cfg_.balanced_batches && (real_.empty() || fake_.empty()))
            throw std::invalid_argument("balanced batches need at least one sample of each class");
        rng_.shuffle(real_);
        rng_.shuffle(fake_);
        rng_.shuffle(all_);
    }

    std::vector<std::size_t> next() {
        std::vector<std::size_t> out;
        if (cfg_.balanced_batches) {
            for (int i = 0; i < cfg_.batch / 2; ++i) out.push_back(draw(real_, pos_real_));
            for (int i = 0; i < cfg_.batch / 2; ++i) out.push_back(draw(fake_, pos_fake_));
        } else {
            for (int i = 0; i < cfg_.batch; ++i) out.push_back(draw(all_, pos_all_));
        }
        return out;
    }

private:
    std::size_t draw(std::vector<std::size_t>& pool, std::size_t& pos) {
        if (pos == pool.size()) {
            rng_.shuffle(pool);
            pos = 0;
        }
        return pool[pos++];
    }

    TrainConfig cfg_;
    Rng rng_;
    std::vector<std::size_t> real_, fake_, all_;
    std::size_t pos_real_ = 0, pos_fake_ = 0, pos_all_ = 0;
};

struct TrainCallbacks {
    std::function<void(const StepMetrics&)> on_step;
    std::function<void(const EvalPoint&)> on_eval;
};

/// Runs cfg.steps optimizer steps on the trainable parameters. Cue bundles and
/// frozen-prefix tokens are computed once per sample on first use.
template <class T>
TrainResult train(Model<T>& model, const Dataset& data, const TrainConfig& cfg, const Dataset* eval_set = nullptr,
                  const TrainCallbacks& cb = {}) {
    cfg.validate();
    if (data.empty()) throw std::invalid_argument("train: empty dataset");
    TrainResult result;
    if (cfg.steps == 0) return result;

    const int threads = thread_count();
    const int prefix_end = model.backward_floor();
    const bool use_prefix = !model.config().train_pos_embed && prefix_end > 0;
    std::vector<std::optional<CueBundle>> bundles(data.size());
    std::vector<std::optional<PrefixTokens<T>>> prefix(data.size());

    BatchSampler sampler(data, cfg);
    Optimizer<T> opt(cfg.optimizer_config());
    const auto t0 = std::chrono::steady_clock::now();

    for (int step = 0; step < cfg.steps; ++step) {
        const auto idx = sampler.next();
        std::vector<std::size_t> missing;
        for (auto i : idx)
            if (!bundles[i] && std::find(missing.begin(), missing.end(), i) == missing.end()) missing.push_back(i);
        parallel_for(
            missing.size(),
            [&](std::size_t k) {
                const std::size_t i = missing[k];
                bundles[i] = extract_cues(data[i].image, model.config().ci_eps);
                if (use_prefix) {
                    PrefixTokens<T> p;
                    for (int c = 0; c < kNumCues; ++c)
                        p.cue[c] = model.trunk_prefix(cue_image(*bundles[i], c), c == int(Cue::ci), prefix_end);
                    prefix[i] = std::move(p);
                }
            },
            threads);

        BatchInput<T> in;
        for (auto i : idx) {
            in.bundles.push_back(&*bundles[i]);
            in.labels.push_back(data[i].label);
            if (use_prefix) in.prefix.push_back(&*prefix[i]);
        }
        in.prefix_end = use_prefix ? prefix_end : 0;

        ModelParams<T> grads = model.zero_grads();
        const auto out = batch_objective(model, in, cfg.weights, &grads, threads);
        const auto& l = out.loss;
        if (!std::isfinite(l.total)) {
            std::ostringstream msg;
            msg << "non-finite loss at step " << step << " (l_img=" << l.l_img << " l_ci=" << l.l_ci << " l_hf=" << l.l_hf
                << " l_imp=" << l.l_imp << " l_ent=" << l.l_ent << "); batch sample indices:";
            for (auto i : idx) msg << ' ' << i;
            throw TrainingError(msg.str());
        }

        auto params = model.slots();
        const auto grad_slots = model.slots_of(grads);
        opt.step(params, grad_slots);
        model.project();

        StepMetrics m;
        m.step = step;
        m.loss = l;
        m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        result.steps.push_back(m);
        if (cb.on_step) cb.on_step(m);

        if (eval_set && cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps)) {
            EvalPoint e{step, evaluate(model, *eval_set, cfg.threshold, nullptr, threads)};
            result.evals.push_back(e);
            if (cb.on_eval) cb.on_eval(e);
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Gradient verification

inline constexpr double kGradCheckEps = 1e-3;
inline constexpr double kGradCheckFloor = 1e-8;

inline double relative_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kGradCheckFloor});
}

/// Central differences (f(x+eps) - f(x-eps)) / 2eps at each target scalar,
/// compared against the supplied analytic gradients. Returns the max relative error.
inline double finite_difference_check(const std::vector<double*>& targets, const std::vector<double>& analytic,
                                      const std::function<double()>& f, double eps = kGradCheckEps,
                                      std::vector<double>* numeric_out = nullptr) {
    if (targets.size() != analytic.size()) throw std::invalid_argument("finite_difference_check: size mismatch");
    double worst = 0.0;
    for (std::size_t k = 0; k < targets.size(); ++k) {
        double* p = targets[k];
        const double orig = *p;
        *p = orig + eps;
        const double fp = f();
        *p = orig - eps;
        const double fm = f();
        *p = orig;
        const double numeric = (fp - fm) / (2 * eps);
        if (numeric_out) numeric_out->push_back(numeric);
        worst = std::max(worst, relative_error(analytic[k], numeric));
    }
    return worst;
}

struct GradCheckEntry {
    std::string param;
    Eigen::Index index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_error = 0.0;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::vector<GradCheckEntry> checked;
    int frozen_sampled = 0;         // frozen scalars probed (reported as exactly zero, excluded)
    bool frozen_grads_zero = true;  // every frozen gradient entry is exactly zero
};

/// Samples n_params trainable scalars (and as many frozen scalars, which must
/// carry exactly zero analytic gradient) and compares the analytic gradient of
/// the batch objective against central differences. Runs in double precision.
inline GradCheckReport grad_check(Model<double>& model, const Dataset& batch, int n_params, double eps_fd = kGradCheckEps,
                                  std::uint64_t seed = 0, const LossWeights& w = {}) {
    if (n_params < 1) throw std::invalid_argument("grad_check: n_params must be >= 1");
    if (batch.empty()) throw std::invalid_argument("grad_check: empty batch");
    std::vector<CueBundle> bundles;
    for (const auto& s : batch) bundles.push_back(extract_cues(s.image, model.config().ci_eps));
    BatchInput<double> in;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        in.bundles.push_back(&bundles[i]);
        in.labels.push_back(batch[i].label);
    }

    ModelParams<double> grads = model.zero_grads();
    batch_objective(model, in, w, &grads);
    auto pslots = model.slots();
    auto gslots = model.slots_of(grads);

    GradCheckReport report;
    std::vector<std::pair<std::size_t, Eigen::Index>> trainable, frozen;
    for (std::size_t i = 0; i < pslots.size(); ++i)
        for (Eigen::Index j = 0; j < pslots[i].size(); ++j) {
            (pslots[i].trainable ? trainable : frozen).emplace_back(i, j);
            if (!pslots[i].trainable && gslots[i].data[j] != 0.0) report.frozen_grads_zero = false;
        }

    Rng rng(derive_seed(seed, 0x4743ULL));
    for (int k = 0; k < n_params && !frozen.empty(); ++k) {
        const auto [i, j] = frozen[rng.index(frozen.size())];
        if (gslots[i].data[j] != 0.0) report.frozen_grads_zero = false;
        ++report.frozen_sampled;
    }

    std::vector<double*> targets;
    std::vector<double> analytic;
    for (int k = 0; k < n_params && !trainable.empty(); ++k) {
        const auto [i, j] = trainable[rng.index(trainable.size())];
        targets.push_back(pslots[i].data + j);
        analytic.push_back(gslots[i].data[j]);
        report.checked.push_back({pslots[i].name, j, gslots[i].data[j], 0.0, 0.0});
    }
    std::vector<double> numeric;
    report.max_rel_error =
        finite_difference_check(targets, analytic, [&] { return batch_objective<double>(model, in, w, nullptr).loss.total; }, eps_fd, &numeric);
    for (std::size_t k = 0; k < numeric.size(); ++k) {
        report.checked[k].numeric = numeric[k];
        report.checked[k].rel_error = relative_error(report.checked[k].analytic, numeric[k]);
    }
    return report;
}

/// Moves every trainable parameter to a generic random point: matrices drawn
/// from N(0, 1/fan_in), bias rows from N(0, 0.1^2); router temperatures keep
/// their value. At initialization w_u and the heads are zero, which leaves most
/// gradient paths inactive.
template <class T>
void randomize_trainable(Model<T>& model, std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0x52414e44ULL));
    for (auto& s : model.slots()) {
        if (!s.trainable || s.name.ends_with("router.tau")) continue;
        const double std = s.rows > 1 ? 1.0 / std::sqrt(double(s.rows)) : 0.1;
        for (Eigen::Index j = 0; j < s.size(); ++j) s.data[j] = T(rng.normal(0.0, std));
    }
}

}  // namespace mcan
