// hvq: command-line driver for the two-stage pipeline.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "hvq/gradsuite.hpp"
#include "hvq/pipeline.hpp"

using namespace hvq;
namespace fs = std::filesystem;

namespace {

struct Common {
    std::string config;
    std::string preset = "desk";
    std::string out;
    std::optional<std::uint64_t> seed;
    std::string checkpoint;
};

void add_common(CLI::App* cmd, Common& c, bool checkpoint_is_resume) {
    cmd->add_option("--config", c.config, "JSON run configuration");
    cmd->add_option("--preset", c.preset, "built-in configuration: desk, overfit, generalization, paper-imagenet")
        ->capture_default_str();
    cmd->add_option("--out", c.out, "run directory (default: output_dir from the config)");
    cmd->add_option("--seed", c.seed, "override the run seed");
    cmd->add_option("--checkpoint", c.checkpoint,
                    checkpoint_is_resume ? "resume from this checkpoint" : "stage-1 checkpoint (default: <out>/codec.ckpt)");
}

RunConfig fresh_config(const Common& c) {
    RunConfig cfg = c.config.empty() ? RunConfig::preset(c.preset) : RunConfig::load(c.config);
    if (c.seed) cfg.seed = *c.seed;
    if (!c.out.empty()) cfg.output_dir = c.out;
    return cfg;
}

fs::path run_dir(const Common& c) {
    if (!c.out.empty()) return c.out;
    return fresh_config(c).output_dir;
}

// Config echo and codec from the stage-1 checkpoint of a run.
std::pair<RunConfig, HierarchicalCodec> stage1_of(const Common& c) {
    const fs::path dir = run_dir(c);
    const fs::path ck = c.checkpoint.empty() ? RunPaths(dir).codec() : fs::path(c.checkpoint);
    if (!fs::exists(ck)) throw ConfigError("no stage-1 checkpoint at " + ck.string() + " (run train-vqvae first)");
    auto loaded = load_codec(ck);
    if (!c.config.empty()) {
        // Stage-2, sampling and data settings may change; the codec may not.
        RunConfig given = RunConfig::load(c.config);
        RunConfig swapped = given;
        swapped.codec = loaded.first.codec;
        if (swapped.to_json() != given.to_json())
            throw ConfigError("codec in " + c.config + " differs from the one in " + ck.string());
        loaded.first = given;
    }
    if (c.seed) loaded.first.seed = *c.seed;
    loaded.first.output_dir = dir.string();
    return loaded;
}

CodeDataset codes_for(const HierarchicalCodec& codec, const fs::path& file,
                      const Dataset& data) {
    if (fs::exists(file)) return read_codes(file);
    CodeDataset codes = extract_codes(codec, data);
    write_codes(file, codes);
    return codes;
}

void print_pair(const char* what, double nats) {
    std::printf("%s %.6f nats/position (%.6f bits)\n", what, nats, nats_to_bits(nats));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Hierarchical VQ-VAE with autoregressive priors"};
    app.require_subcommand(1);

    Common c;

    // ingest
    auto* ingest_cmd = app.add_subcommand("ingest", "convert images to the raw dataset format");
    std::string source, labels_path, out_file;
    bool synthetic = false;
    std::size_t n = 0, size = 32, channels = 1, families = 8;
    std::uint64_t ingest_seed = 0;
    ingest_cmd->add_option("source", source, "directory of PGM/PPM files or a raw file");
    ingest_cmd->add_option("--labels", labels_path, "labels file, one integer per line");
    ingest_cmd->add_option("--out", out_file, "raw dataset file to write")->required();
    ingest_cmd->add_flag("--synthetic", synthetic, "generate the built-in synthetic patterns instead");
    ingest_cmd->add_option("--n", n, "synthetic image count");
    ingest_cmd->add_option("--size", size, "synthetic image side");
    ingest_cmd->add_option("--channels", channels, "synthetic channel count (1 or 3)");
    ingest_cmd->add_option("--families", families, "synthetic pattern families (= classes)");
    ingest_cmd->add_option("--seed", ingest_seed, "synthetic seed");

    auto* s1 = app.add_subcommand("train-vqvae", "stage 1: train the hierarchical codec");
    add_common(s1, c, true);

    auto* ex = app.add_subcommand("extract-codes", "encode the train and validation sets into code files");
    add_common(ex, c, false);

    auto* s2 = app.add_subcommand("train-prior", "stage 2: train the prior of one level");
    add_common(s2, c, true);
    std::string level;
    s2->add_option("--level", level, "top, middle or bottom")->required();

    auto* clf_cmd = app.add_subcommand("train-classifier", "fit the rejection classifier on the training images");
    add_common(clf_cmd, c, false);

    auto* sample_cmd = app.add_subcommand("sample", "ancestral sampling through all priors, then decoding");
    add_common(sample_cmd, c, false);
    std::optional<std::size_t> n_samples;
    std::optional<double> temperature, keep_fraction;
    std::optional<Label> class_label;
    std::string classifier_path, samples_dir;
    sample_cmd->add_option("--n", n_samples, "number of samples");
    sample_cmd->add_option("--temperature", temperature, "softmax temperature");
    sample_cmd->add_option("--keep-fraction", keep_fraction, "fraction kept by classifier rejection");
    sample_cmd->add_option("--class", class_label, "class label for every sample (default: cycle)");
    sample_cmd->add_option("--classifier", classifier_path, "classifier checkpoint for rejection");
    sample_cmd->add_option("--samples-dir", samples_dir, "where to write images (default: <out>/samples)");

    auto* eval_cmd = app.add_subcommand("evaluate", "train/validation NLL and MSE per level");
    add_common(eval_cmd, c, false);

    auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    std::uint64_t gc_seed = 0;
    gc_cmd->add_option("--seed", gc_seed, "seed for the random instances");

    auto* demo = app.add_subcommand("demo-reconstruction-detail",
                                    "reconstructions from each level upward, with the rest zeroed");
    add_common(demo, c, false);
    std::optional<std::size_t> demo_n;
    demo->add_option("--n", demo_n, "number of training images");

    auto* show = app.add_subcommand("show-config", "print the resolved configuration as JSON");
    add_common(show, c, false);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*show) {
            std::cout << fresh_config(c).to_json() << "\n";
        } else if (*ingest_cmd) {
            std::vector<Image> images;
            std::vector<Label> labels;
            if (synthetic) {
                SyntheticSpec spec{n ? n : 8, size, channels, families, ingest_seed};
                images = synthetic_images(spec, &labels);
            } else {
                if (source.empty()) throw ConfigError("ingest needs a source or --synthetic");
                Dataset ds = ingest(source, labels_path);
                for (std::size_t i = 0; i < ds.size(); ++i) images.push_back(to_image(ds.images, i));
                labels = ds.labels;
            }
            write_raw(out_file, images);
            if (!labels.empty()) {
                fs::path lp = out_file;
                lp += ".labels";
                write_labels(lp, labels);
            }
            std::printf("wrote %zu images to %s\n", images.size(), out_file.c_str());
        } else if (*s1) {
            RunConfig cfg = fresh_config(c);
            const fs::path dir = cfg.output_dir;
            std::optional<fs::path> resume;
            if (!c.checkpoint.empty()) resume = c.checkpoint;
            auto r = run_stage1(cfg, dir, resume, &std::cout);
            std::printf("stage 1 done after %zu steps; train reconstruction MSE %.6g\n", r.steps, r.train_mse);
            std::printf("checkpoint %s\n", RunPaths(dir).codec().c_str());
        } else if (*ex) {
            auto [cfg, codec] = stage1_of(c);
            const RunPaths paths(cfg.output_dir);
            DataSplit split = load_data(cfg);
            CodeDataset tr = extract_codes(codec, split.train);
            write_codes(paths.train_codes(), tr);
            std::printf("%zu training code tuples -> %s\n", tr.size(), paths.train_codes().c_str());
            if (split.validation.size() > 0) {
                CodeDataset va = extract_codes(codec, split.validation);
                write_codes(paths.validation_codes(), va);
                std::printf("%zu validation code tuples -> %s\n", va.size(), paths.validation_codes().c_str());
            }
        } else if (*s2) {
            Common base = c;
            base.checkpoint.clear();
            auto [cfg, codec] = stage1_of(base);
            const RunPaths paths(cfg.output_dir);
            DataSplit split = load_data(cfg);
            CodeDataset tr = codes_for(codec, paths.train_codes(), split.train);
            std::optional<CodeDataset> va;
            if (split.validation.size() > 0) va = codes_for(codec, paths.validation_codes(), split.validation);
            std::optional<fs::path> resume;
            if (!c.checkpoint.empty()) resume = c.checkpoint;
            auto r = run_stage2(cfg, level, tr, va ? &*va : nullptr, paths.dir, resume, &std::cout);
            print_pair(("train nll " + r.level).c_str(), r.train_nll);
            if (r.validation_nll) print_pair(("validation nll " + r.level).c_str(), *r.validation_nll);
        } else if (*clf_cmd) {
            auto [cfg, codec] = stage1_of(c);
            DataSplit split = load_data(cfg);
            if (!split.train.labelled()) throw ConfigError("the classifier needs labelled training images");
            ClassifierConfig cc = cfg.classifier;
            cc.seed = cfg.seed;
            auto trained = train_toy_classifier(split.train.images, split.train.labels, cc);
            save_classifier(RunPaths(cfg.output_dir).classifier(), trained.classifier);
            std::printf("classifier train accuracy %.4f -> %s\n", trained.train_accuracy,
                        RunPaths(cfg.output_dir).classifier().c_str());
        } else if (*sample_cmd) {
            auto [cfg, codec] = stage1_of(c);
            const RunPaths paths(cfg.output_dir);
            std::vector<PixelCnnPrior> priors;
            for (const auto& l : cfg.codec.levels) {
                const fs::path p = paths.prior(l.name);
                if (!fs::exists(p)) throw ConfigError("no prior checkpoint for level '" + l.name + "' at " + p.string());
                priors.push_back(load_prior(p).second);
            }
            std::vector<const PixelCnnPrior*> ptrs;
            for (const auto& p : priors) ptrs.push_back(&p);
            std::optional<ToyClassifier> clf;
            if (!classifier_path.empty()) clf = load_classifier(classifier_path);
            GenerateOptions o;
            o.n = n_samples.value_or(cfg.sampling.n);
            o.temperature = temperature.value_or(cfg.sampling.temperature);
            o.keep_fraction = keep_fraction.value_or(cfg.sampling.keep_fraction);
            o.class_label = class_label.value_or(cfg.sampling.class_label);
            o.seed = cfg.seed;
            Generated g = generate(codec, ptrs, cfg.classes, clf ? &*clf : nullptr, o);
            const fs::path dir = samples_dir.empty() ? paths.samples() : fs::path(samples_dir);
            write_generated(dir, g);
            std::printf("sampled %zu, kept %zu -> %s\n", o.n, g.kept.size(), dir.c_str());
        } else if (*eval_cmd) {
            auto [cfg, codec] = stage1_of(c);
            const RunPaths paths(cfg.output_dir);
            DataSplit split = load_data(cfg);
            std::vector<PixelCnnPrior> priors;
            std::vector<std::string> names;
            for (const auto& l : cfg.codec.levels)
                if (fs::exists(paths.prior(l.name))) {
                    priors.push_back(load_prior(paths.prior(l.name)).second);
                    names.push_back(l.name);
                }
            std::map<std::string, const PixelCnnPrior*> by_level;
            for (std::size_t i = 0; i < priors.size(); ++i) by_level[names[i]] = &priors[i];
            EvalReport report = evaluate(codec, by_level, split.train, split.validation);
            bin::write_text(paths.dir / "eval.json", report.to_json());
            bin::write_text(paths.dir / "eval.csv", report.to_csv());
            std::cout << report.to_json();
        } else if (*gc_cmd) {
            bool ok = true;
            for (const auto& e : gradient_suite(gc_seed)) {
                ok &= e.report.passed;
                std::printf("%s %-26s checked %5zu  max rel %.3e  kinks %zu\n", e.report.passed ? "PASS" : "FAIL",
                            e.name.c_str(), e.report.checked, e.report.max_rel_error, e.report.kinks);
            }
            return ok ? 0 : 1;
        } else if (*demo) {
            auto [cfg, codec] = stage1_of(c);
            DataSplit split = load_data(cfg);
            Dataset data = split.train;
            if (demo_n && *demo_n < data.size()) {
                std::vector<std::size_t> rows;
                for (std::size_t i = 0; i < *demo_n; ++i) rows.push_back(i);
                data = data.subset(rows);
            }
            const fs::path dir = RunPaths(cfg.output_dir).dir / "detail";
            auto mse = reconstruction_detail(codec, data, dir);
            for (std::size_t l = 0; l < mse.size(); ++l) {
                double m = 0;
                for (double v : mse[l]) m += v;
                std::printf("levels %s and above: mean MSE %.6g\n", cfg.codec.levels[l].name.c_str(),
                            m / double(mse[l].size()));
            }
            std::printf("images in %s\n", dir.c_str());
        }
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
