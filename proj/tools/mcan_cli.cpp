// mcan: command-line front end.
//
// stdout carries JSON only; progress and diagnostics go to stderr.
// Exit status: 0 success, 1 runtime failure, 2 bad arguments or config.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mcan/mcan.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mcan;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

// Argument problems found after parsing (missing files, bad config keys).
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigArgs {
    std::string path;
    std::vector<std::string> overrides;

    ExperimentConfig load() const {
        try {
            const fs::path p(path);
            return load_experiment_config(path.empty() ? nullptr : &p, overrides);
        } catch (const ConfigError& e) {
            throw UsageError(e.what());
        }
    }
};

void add_config_flags(CLI::App* cmd, ConfigArgs& args) {
    cmd->add_option("--config", args.path, "JSON experiment config")->check(CLI::ExistingFile);
    cmd->add_option("--set", args.overrides, "override, e.g. --set train.steps=100 (repeatable, applied after --config)");
}

void emit(const json& j) { std::cout << j.dump() << '\n'; }

bool is_image_file(const fs::path& p) {
    auto ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return char(std::tolower(c)); });
    return ext == ".png" || ext == ".ppm";
}

json cue_json(double img, double hf, double ci) { return {{"img", img}, {"hf", hf}, {"ci", ci}}; }

json eval_json(const EvalResult& r) {
    return {{"accuracy", r.accuracy}, {"n", r.n}, {"per_cue", cue_json(r.cue_accuracy[0], r.cue_accuracy[1], r.cue_accuracy[2])}};
}

json metrics_json(const StepMetrics& m, bool wall_clock) {
    const auto& l = m.loss;
    json j = {{"step", m.step}, {"l_img", l.l_img}, {"l_ci", l.l_ci}, {"l_hf", l.l_hf},
              {"l_imp", l.l_imp}, {"l_ent", l.l_ent}, {"total", l.total}};
    if (wall_clock) j["wall_ms"] = m.wall_ms;
    return j;
}

Split parse_split(const std::string& s) { return s == "train" ? Split::train : Split::test; }

// A folder dataset when --data is given, else the synthetic split from config.
Dataset load_dataset(const std::string& data_dir, const ExperimentConfig& cfg, Split split) {
    if (!data_dir.empty()) return load_folder_dataset(data_dir, cfg.model.img_size);
    if (split == Split::test && cfg.corpus.n_test_per_class == 0)
        throw UsageError("corpus.n_test_per_class is 0; nothing to evaluate (pass --data or --split train)");
    return generate_corpus(cfg.corpus, split);
}

// ---------------------------------------------------------------------------

int run_gen_corpus(const ConfigArgs& ca, const std::string& out_dir, const std::string& split, const std::string& format) {
    const auto cfg = ca.load();
    std::vector<Split> splits;
    if (split == "train" || split == "both") splits.push_back(Split::train);
    if (split == "test" || split == "both") splits.push_back(Split::test);
    json summary = {{"out", out_dir}, {"splits", json::object()}};
    for (Split s : splits) {
        const std::string name = s == Split::train ? "train" : "test";
        const Dataset ds = generate_corpus(cfg.corpus, s);
        std::map<int, int> counter;
        for (const auto& sample : ds) {
            const fs::path dir = fs::path(out_dir) / name / (sample.label == kLabelReal ? "real" : "fake");
            fs::create_directories(dir);
            char file[32];
            std::snprintf(file, sizeof file, "%06d.%s", counter[sample.label]++, format.c_str());
            if (format == "png")
                save_png(sample.image, dir / file);
            else
                save_ppm(sample.image, dir / file);
        }
        summary["splits"][name] = {{"real", counter[kLabelReal]}, {"fake", counter[kLabelFake]}};
        std::cerr << "wrote " << ds.size() << " " << name << " images under " << (fs::path(out_dir) / name).string() << '\n';
    }
    emit(summary);
    return 0;
}

int run_extract_cues(const std::string& in_dir, const std::string& out_dir, double eps, bool viz) {
    if (!fs::is_directory(in_dir)) throw UsageError("input directory '" + in_dir + "' does not exist");
    if (eps < 0) throw UsageError("--eps must be >= 0");
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(in_dir))
        if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
    std::sort(files.begin(), files.end());

    for (const auto& f : files) {
        const CueBundle b = extract_cues(load_image(f), eps);
        const fs::path rel = fs::relative(f, in_dir);
        const fs::path base = fs::path(out_dir) / rel.parent_path() / rel.stem();
        fs::create_directories(base.parent_path());

        TensorFile tf;
        tf.meta = {{"format", "mcan-cues"}, {"source", rel.generic_string()}, {"ci_eps", eps}};
        for (int c = 0; c < kNumCues; ++c) {
            const ImagePlanes& im = cue_image(b, c);
            tf.tensors.push_back({kCueNames[c], {3, im.height, im.width}, im.data});
        }
        write_tensor_file(tf, base.string() + ".cues");
        if (viz) {
            save_png(b.hf, base.string() + ".hf.png");
            save_png(b.ci, base.string() + ".ci.png");
        }
    }
    std::cerr << "extracted cues for " << files.size() << " images\n";
    emit({{"out", out_dir}, {"images", files.size()}, {"ci_eps", eps}, {"viz", viz}});
    return 0;
}

int run_train(const ConfigArgs& ca, const std::string& out_dir, const std::string& data_dir, const std::string& eval_dir) {
    const auto cfg = ca.load();
    const Dataset train_set = load_dataset(data_dir, cfg, Split::train);
    std::optional<Dataset> eval_set;
    if (!eval_dir.empty())
        eval_set = load_folder_dataset(eval_dir, cfg.model.img_size);
    else if (data_dir.empty() && cfg.corpus.n_test_per_class > 0)
        eval_set = generate_corpus(cfg.corpus, Split::test);

    fs::create_directories(out_dir);
    {
        std::ofstream cf(fs::path(out_dir) / "config.json");
        cf << to_json(cfg).dump(2) << '\n';
    }
    std::ofstream metrics(fs::path(out_dir) / "metrics.jsonl");
    std::ofstream evals(fs::path(out_dir) / "eval.jsonl");
    if (!metrics || !evals) throw std::runtime_error("cannot write logs under '" + out_dir + "'");

    Model<float> model(cfg.model);
    const int every = std::max(1, cfg.train.steps / 20);
    TrainCallbacks cb;
    cb.on_step = [&](const StepMetrics& m) {
        metrics << metrics_json(m, cfg.train.log_wall_clock).dump() << '\n';
        if ((m.step + 1) % every == 0 || m.step + 1 == cfg.train.steps)
            std::cerr << "step " << (m.step + 1) << "/" << cfg.train.steps << " loss " << m.loss.total << '\n';
    };
    cb.on_eval = [&](const EvalPoint& e) {
        json j = eval_json(e.result);
        j["step"] = e.step;
        evals << j.dump() << '\n';
        std::cerr << "eval at step " << (e.step + 1) << ": accuracy " << e.result.accuracy << '\n';
    };
    const auto result = train(model, train_set, cfg.train, eval_set ? &*eval_set : nullptr, cb);

    const fs::path ckpt = fs::path(out_dir) / "model.ckpt";
    save_checkpoint(model, ckpt);
    json summary = {{"checkpoint", ckpt.string()}, {"steps", result.steps.size()}, {"train_samples", train_set.size()}};
    if (!result.steps.empty()) summary["final"] = metrics_json(result.steps.back(), false);
    if (eval_set) summary["eval"] = eval_json(evaluate(model, *eval_set, cfg.train.threshold));
    emit(summary);
    return 0;
}

Model<float> load_model_arg(const std::string& path) {
    if (!fs::is_regular_file(path)) throw UsageError("model checkpoint '" + path + "' does not exist");
    return load_checkpoint(path);
}

ExperimentConfig config_for_model(const ConfigArgs& ca, const Model<float>& model) {
    auto cfg = ca.load();
    cfg.model = model.config();
    cfg.corpus.img_size = cfg.model.img_size;
    return cfg;
}

int run_eval(const ConfigArgs& ca, const std::string& model_path, const std::string& data_dir, const std::string& split,
             std::optional<double> threshold) {
    const auto model = load_model_arg(model_path);
    const auto cfg = config_for_model(ca, model);
    const Dataset ds = load_dataset(data_dir, cfg, parse_split(split));
    emit(eval_json(evaluate(model, ds, threshold.value_or(cfg.train.threshold))));
    return 0;
}

int run_infer(const std::string& model_path, const std::string& image_path, double threshold) {
    const auto model = load_model_arg(model_path);
    if (!fs::is_regular_file(image_path)) throw UsageError("image '" + image_path + "' does not exist");
    ImagePlanes img = load_image(image_path);
    const int s = model.config().img_size;
    if (img.height != s || img.width != s) img = resize_bilinear(img, s, s);
    const auto out = forward_multicue(extract_cues(img, model.config().ci_eps), model);
    const Decision d = aggregate_min(out.logits, threshold);
    emit({{"score", d.score},
          {"decision", d.real ? "real" : "fake"},
          {"threshold", threshold},
          {"per_cue", cue_json(d.p_img, d.p_hf, d.p_ci)},
          {"logits", cue_json(out.logits.img, out.logits.hf, out.logits.ci)}});
    return 0;
}

int run_inspect_router(const ConfigArgs& ca, const std::string& model_path, const std::string& image_path,
                       const std::string& data_dir, const std::string& split, int limit) {
    const auto model = load_model_arg(model_path);
    Dataset ds;
    if (!image_path.empty()) {
        if (!fs::is_regular_file(image_path)) throw UsageError("image '" + image_path + "' does not exist");
        ImagePlanes img = load_image(image_path);
        const int s = model.config().img_size;
        if (img.height != s || img.width != s) img = resize_bilinear(img, s, s);
        ds.push_back({std::move(img), kLabelReal});
    } else {
        ds = load_dataset(data_dir, config_for_model(ca, model), parse_split(split));
    }
    if (limit > 0 && std::size_t(limit) < ds.size()) {
        // Keep both classes represented: take from the front of each half.
        Dataset sub;
        for (int label : {kLabelReal, kLabelFake}) {
            int taken = 0;
            for (const auto& s : ds)
                if (s.label == label && taken < (limit + (label == kLabelReal)) / 2) {
                    sub.push_back(s);
                    ++taken;
                }
        }
        ds = std::move(sub);
    }

    const int n_exp = model.config().n_experts;
    struct Acc {
        std::vector<double> mass;
        std::vector<long> hist;
        long tokens = 0;
    };
    std::map<std::pair<int, int>, Acc> acc;
    for (const auto& sample : ds) {
        const auto out = forward_multicue(extract_cues(sample.image, model.config().ci_eps), model);
        for (const auto& r : out.gates) {
            auto& a = acc[{r.layer_index, r.cue}];
            if (a.mass.empty()) {
                a.mass.assign(std::size_t(n_exp), 0.0);
                a.hist.assign(std::size_t(n_exp), 0);
            }
            for (int i = 0; i < n_exp; ++i) a.mass[std::size_t(i)] += r.gates[std::size_t(i)];
            a.hist[std::size_t(std::max_element(r.gates.begin(), r.gates.end()) - r.gates.begin())]++;
            ++a.tokens;
        }
    }
    for (auto& [key, a] : acc) {
        for (double& m : a.mass) m /= double(a.tokens);
        emit({{"layer", key.first}, {"cue", kCueNames[key.second]}, {"samples", ds.size()}, {"tokens", a.tokens},
              {"mean_gate", a.mass}, {"argmax_hist", a.hist}});
    }
    return 0;
}

int run_grad_check(const ConfigArgs& ca, int n_params, double eps, int batch, bool at_init, std::uint64_t seed) {
    auto cfg = ca.load();
    if (n_params < 1) throw UsageError("--n-params must be >= 1");
    if (batch < 1) throw UsageError("--batch must be >= 1");
    if (!(eps > 0)) throw UsageError("--eps must be > 0");
    Model<double> model(cfg.model);
    if (!at_init) randomize_trainable(model, seed);

    SyntheticCorpusSpec spec = cfg.corpus;
    spec.img_size = cfg.model.img_size;
    Dataset data;
    for (int i = 0; i < batch; ++i) {
        const int label = i % 2 == 0 ? kLabelReal : kLabelFake;
        data.push_back(synthesize_sample(spec, Split::train, label, i / 2));
    }
    const auto report = grad_check(model, data, n_params, eps, seed, cfg.train.weights);
    json checked = json::array();
    for (const auto& e : report.checked)
        checked.push_back({{"param", e.param}, {"index", e.index}, {"analytic", e.analytic}, {"numeric", e.numeric},
                           {"rel_error", e.rel_error}});
    std::cerr << "max relative error " << report.max_rel_error << " over " << report.checked.size() << " scalars\n";
    emit({{"max_rel_error", report.max_rel_error},
          {"eps", eps},
          {"n_params", n_params},
          {"frozen_sampled", report.frozen_sampled},
          {"frozen_grads_zero", report.frozen_grads_zero},
          {"checked", checked}});
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-cue real/fake image classifier with mixture-of-experts adapters"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");

    ConfigArgs ca;
    std::string out_dir, data_dir, eval_dir, model_path, image_path, in_dir;
    std::string split = "test", gen_split = "both", format = "png";
    std::optional<double> eval_threshold;
    double threshold = kDefaultThreshold, eps = kDefaultCiEps, fd_eps = kGradCheckEps;
    bool viz = false, at_init = false;
    int limit = 0, n_params = 64, gc_batch = 2;
    std::uint64_t gc_seed = 0;

    auto* gen = app.add_subcommand("gen-corpus", "Write the synthetic corpus as image folders (<out>/<split>/{real,fake}/)");
    add_config_flags(gen, ca);
    gen->add_option("--out", out_dir, "output directory")->required();
    gen->add_option("--split", gen_split, "train, test or both")->check(CLI::IsMember({"train", "test", "both"}));
    gen->add_option("--format", format, "png or ppm")->check(CLI::IsMember({"png", "ppm"}));

    auto* ext = app.add_subcommand("extract-cues", "Compute img/hf/ci cue tensors for every image under a directory");
    ext->add_option("--input", in_dir, "input image directory (searched recursively)")->required();
    ext->add_option("--out", out_dir, "output directory")->required();
    ext->add_option("--eps", eps, "chromaticity ratio stabilizer");
    ext->add_flag("--viz", viz, "also write hf/ci PNG visualizations");

    auto* tr = app.add_subcommand("train", "Train the adapters and heads; writes model.ckpt, metrics.jsonl, eval.jsonl, config.json");
    add_config_flags(tr, ca);
    tr->add_option("--out", out_dir, "output directory")->required();
    tr->add_option("--data", data_dir, "folder dataset with real/ and fake/ (default: synthetic corpus)");
    tr->add_option("--eval-data", eval_dir, "folder dataset used for periodic evaluation");

    auto* ev = app.add_subcommand("eval", "Accuracy of a checkpoint, overall and per cue");
    add_config_flags(ev, ca);
    ev->add_option("--model", model_path, "checkpoint")->required();
    ev->add_option("--data", data_dir, "folder dataset with real/ and fake/ (default: synthetic corpus)");
    ev->add_option("--split", split, "synthetic split")->check(CLI::IsMember({"train", "test"}));
    ev->add_option("--threshold", eval_threshold, "decision threshold on the min-aggregated score");

    auto* inf = app.add_subcommand("infer", "Classify one image");
    inf->add_option("--model", model_path, "checkpoint")->required();
    inf->add_option("--image", image_path, "PNG or PPM image")->required();
    inf->add_option("--threshold", threshold, "decision threshold on the min-aggregated score");

    auto* ir = app.add_subcommand("inspect-router", "Per-layer, per-cue expert gate statistics as JSON lines");
    add_config_flags(ir, ca);
    ir->add_option("--model", model_path, "checkpoint")->required();
    auto* ir_image = ir->add_option("--image", image_path, "inspect a single image");
    ir->add_option("--data", data_dir, "folder dataset with real/ and fake/")->excludes(ir_image);
    ir->add_option("--split", split, "synthetic split")->check(CLI::IsMember({"train", "test"}));
    ir->add_option("--limit", limit, "use at most this many samples (0 = all)")->check(CLI::NonNegativeNumber);

    auto* gc = app.add_subcommand("grad-check", "Compare analytic gradients against central differences");
    add_config_flags(gc, ca);
    gc->add_option("--n-params", n_params, "trainable scalars to probe");
    gc->add_option("--eps", fd_eps, "finite-difference step");
    gc->add_option("--batch", gc_batch, "synthetic samples in the batch");
    gc->add_flag("--at-init", at_init, "check the freshly initialized model instead of a random trainable-parameter point");
    gc->add_option("--seed", gc_seed, "sampling seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return kExitUsage;
    }

    try {
        if (gen->parsed()) return run_gen_corpus(ca, out_dir, gen_split, format);
        if (ext->parsed()) return run_extract_cues(in_dir, out_dir, eps, viz);
        if (tr->parsed()) return run_train(ca, out_dir, data_dir, eval_dir);
        if (ev->parsed()) return run_eval(ca, model_path, data_dir, split, eval_threshold);
        if (inf->parsed()) return run_infer(model_path, image_path, threshold);
        if (ir->parsed()) return run_inspect_router(ca, model_path, image_path, data_dir, split, limit);
        if (gc->parsed()) return run_grad_check(ca, n_params, fd_eps, gc_batch, at_init, gc_seed);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitUsage;
}
