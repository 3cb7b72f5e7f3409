#pragma once

// Experiment configuration file:
//
//   {"model":  {BackboneConfig fields},
//    "train":  {TrainConfig fields, "loss_weights": {"img","ci","hf","imp","ent"}},
//    "corpus": {SyntheticCorpusSpec fields}}
//
// Every section and key is optional; unknown keys are rejected. Overrides of
// the form "section.key=value" are applied on top of the file.

#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mcan/backbone.hpp"
#include "mcan/corpus.hpp"
#include "mcan/train.hpp"

namespace mcan {

using nlohmann::json;

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ExperimentConfig {
    BackboneConfig model;
    TrainConfig train;
    SyntheticCorpusSpec corpus;
};

namespace detail {

inline void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
    if (!j.is_object()) throw ConfigError("config section '" + where + "' must be an object");
    for (const auto& [k, v] : j.items())
        if (!known.count(k)) throw ConfigError("unknown config key '" + where + (where.empty() ? "" : ".") + k + "'");
}

template <class V>
void read(const json& j, const char* key, V& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<V>();
    } catch (const json::exception& e) {
        throw ConfigError("bad value for '" + where + "." + key + "': " + e.what());
    }
}

}  // namespace detail

inline json to_json(const BackboneConfig& c) {
    return {{"img_size", c.img_size},     {"patch_size", c.patch_size}, {"dim", c.dim},
            {"depth", c.depth},           {"heads", c.heads},           {"mlp_ratio", c.mlp_ratio},
            {"moea_blocks", c.moea_blocks}, {"n_experts", c.n_experts}, {"router_dim", c.router_dim},
            {"seed", c.seed},             {"train_pos_embed", c.train_pos_embed}, {"ci_eps", c.ci_eps}};
}

inline BackboneConfig backbone_from_json(const json& j) {
    detail::reject_unknown(j, {"img_size", "patch_size", "dim", "depth", "heads", "mlp_ratio", "moea_blocks", "n_experts",
                               "router_dim", "seed", "train_pos_embed", "ci_eps"},
                           "model");
    BackboneConfig c;
    detail::read(j, "img_size", c.img_size, "model");
    detail::read(j, "patch_size", c.patch_size, "model");
    detail::read(j, "dim", c.dim, "model");
    detail::read(j, "depth", c.depth, "model");
    detail::read(j, "heads", c.heads, "model");
    detail::read(j, "mlp_ratio", c.mlp_ratio, "model");
    if (j.contains("moea_blocks")) {
        detail::read(j, "moea_blocks", c.moea_blocks, "model");
    } else {
        // Adapters default to the last two blocks.
        c.moea_blocks.clear();
        for (int b = std::max(0, c.depth - 2); b < c.depth; ++b) c.moea_blocks.push_back(b);
    }
    detail::read(j, "n_experts", c.n_experts, "model");
    detail::read(j, "router_dim", c.router_dim, "model");
    detail::read(j, "seed", c.seed, "model");
    detail::read(j, "train_pos_embed", c.train_pos_embed, "model");
    detail::read(j, "ci_eps", c.ci_eps, "model");
    c.validate();
    return c;
}

inline json to_json(const TrainConfig& c) {
    return {{"lr", c.lr},
            {"batch", c.batch},
            {"steps", c.steps},
            {"optimizer", to_string(c.optimizer)},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"adam_eps", c.adam_eps},
            {"seed", c.seed},
            {"balanced_batches", c.balanced_batches},
            {"eval_every", c.eval_every},
            {"threshold", c.threshold},
            {"log_wall_clock", c.log_wall_clock},
            {"loss_weights",
             {{"img", c.weights.img}, {"ci", c.weights.ci}, {"hf", c.weights.hf}, {"imp", c.weights.imp}, {"ent", c.weights.ent}}}};
}

inline TrainConfig train_from_json(const json& j) {
    detail::reject_unknown(j, {"lr", "batch", "steps", "optimizer", "beta1", "beta2", "adam_eps", "seed", "balanced_batches",
                               "eval_every", "threshold", "log_wall_clock", "loss_weights"},
                           "train");
    TrainConfig c;
    detail::read(j, "lr", c.lr, "train");
    detail::read(j, "batch", c.batch, "train");
    detail::read(j, "steps", c.steps, "train");
    if (j.contains("optimizer")) {
        std::string s;
        detail::read(j, "optimizer", s, "train");
        try {
            c.optimizer = parse_optimizer(s);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("train.optimizer: ") + e.what());
        }
    }
    detail::read(j, "beta1", c.beta1, "train");
    detail::read(j, "beta2", c.beta2, "train");
    detail::read(j, "adam_eps", c.adam_eps, "train");
    detail::read(j, "seed", c.seed, "train");
    detail::read(j, "balanced_batches", c.balanced_batches, "train");
    detail::read(j, "eval_every", c.eval_every, "train");
    detail::read(j, "threshold", c.threshold, "train");
    detail::read(j, "log_wall_clock", c.log_wall_clock, "train");
    if (j.contains("loss_weights")) {
        const auto& w = j.at("loss_weights");
        detail::reject_unknown(w, {"img", "ci", "hf", "imp", "ent"}, "train.loss_weights");
        detail::read(w, "img", c.weights.img, "train.loss_weights");
        detail::read(w, "ci", c.weights.ci, "train.loss_weights");
        detail::read(w, "hf", c.weights.hf, "train.loss_weights");
        detail::read(w, "imp", c.weights.imp, "train.loss_weights");
        detail::read(w, "ent", c.weights.ent, "train.loss_weights");
    }
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return c;
}

inline json to_json(const SyntheticCorpusSpec& c) {
    return {{"n_per_class", c.n_per_class}, {"n_test_per_class", c.n_test_per_class}, {"img_size", c.img_size},
            {"noise_sigma", c.noise_sigma}, {"smooth_kernel", c.smooth_kernel},       {"texture_octaves", c.texture_octaves},
            {"seed", c.seed}};
}

inline SyntheticCorpusSpec corpus_from_json(const json& j) {
    detail::reject_unknown(j, {"n_per_class", "n_test_per_class", "img_size", "noise_sigma", "smooth_kernel", "texture_octaves", "seed"},
                           "corpus");
    SyntheticCorpusSpec c;
    detail::read(j, "n_per_class", c.n_per_class, "corpus");
    detail::read(j, "n_test_per_class", c.n_test_per_class, "corpus");
    detail::read(j, "img_size", c.img_size, "corpus");
    detail::read(j, "noise_sigma", c.noise_sigma, "corpus");
    detail::read(j, "smooth_kernel", c.smooth_kernel, "corpus");
    detail::read(j, "texture_octaves", c.texture_octaves, "corpus");
    detail::read(j, "seed", c.seed, "corpus");
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return c;
}

inline json to_json(const ExperimentConfig& c) {
    return {{"model", to_json(c.model)}, {"train", to_json(c.train)}, {"corpus", to_json(c.corpus)}};
}

inline ExperimentConfig experiment_from_json(const json& j) {
    detail::reject_unknown(j, {"model", "train", "corpus"}, "");
    ExperimentConfig c;
    try {
        c.model = backbone_from_json(j.value("model", json::object()));
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    c.train = train_from_json(j.value("train", json::object()));
    json corpus = j.value("corpus", json::object());
    // The corpus follows the model's input size unless set explicitly.
    if (corpus.is_object() && !corpus.contains("img_size")) corpus["img_size"] = c.model.img_size;
    c.corpus = corpus_from_json(corpus);
    if (c.corpus.img_size != c.model.img_size)
        throw ConfigError("corpus.img_size (" + std::to_string(c.corpus.img_size) + ") differs from model.img_size (" +
                          std::to_string(c.model.img_size) + ")");
    return c;
}

/// Apply "a.b.c=value" to a JSON document. The value is parsed as JSON when
/// possible (numbers, booleans, arrays) and otherwise taken as a string.
inline void apply_override(json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not of the form key=value");
    const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::exception&) {
        value = raw;
    }
    json* node = &doc;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
        if (!node->is_object()) *node = json::object();
        if (dot == std::string::npos) {
            (*node)[part] = value;
            break;
        }
        node = &(*node)[part];
        start = dot + 1;
    }
}

inline json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("malformed config '" + path.string() + "': " + e.what());
    }
}

/// File (if any), then overrides, then validation.
inline ExperimentConfig load_experiment_config(const std::filesystem::path* path, const std::vector<std::string>& overrides) {
    json doc = path ? read_json_file(*path) : json::object();
    for (const auto& o : overrides) apply_override(doc, o);
    return experiment_from_json(doc);
}

}  // namespace mcan
