#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include "hvq/codec.hpp"
#include "hvq/image_io.hpp"
#include "hvq/prior.hpp"
#include "hvq/rejection.hpp"

namespace hvq {

/// Where images come from: a PGM/PPM directory or raw file, or the built-in
/// synthetic generator.
struct DataSource {
    std::string path;
    std::string labels;
    std::optional<SyntheticSpec> synthetic;

    bool empty() const { return path.empty() && !synthetic; }
    Dataset load() const;
};

struct DataConfig {
    DataSource train;
    DataSource validation;  // empty: split `train` by index hash
    double validation_fraction = 0.1;
};

struct TrainConfig {
    std::size_t batch_size = 32;
    std::size_t steps = 1000;
    AdamConfig adam;
    std::size_t log_interval = 50;
    std::size_t checkpoint_interval = 500;  // 0 = only at the end
};

struct PriorRunConfig {
    PriorConfig model;
    TrainConfig train;
};

struct SamplingConfig {
    std::size_t n = 16;
    double temperature = 1.0;
    double keep_fraction = 1.0;
    Label class_label = -1;  // -1: cycle through the classes
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::string output_dir = "run";
    std::size_t classes = 0;  // 0 = unconditional priors
    DataConfig data;
    CodecConfig codec = CodecConfig::desk();
    TrainConfig stage1;
    std::map<std::string, PriorRunConfig> priors;  // keyed by level name
    ClassifierConfig classifier;
    SamplingConfig sampling;

    /// Fills prior grid, vocabulary, conditioning and class fields from the
    /// codec (fields left at 0) and rejects any that disagree with it.
    void resolve();
    void validate() const;

    const PriorRunConfig& prior(const std::string& level) const;

    std::string to_json() const;
    // Strict: unknown keys and ill-typed values are ConfigErrors.
    static RunConfig from_json(const std::string& text);
    static RunConfig load(const std::filesystem::path& path);

    static RunConfig desk();
    // 8 synthetic images, one per class, trained to memorisation.
    static RunConfig overfit();
    // 64 training and 16 held-out synthetic images.
    static RunConfig generalization();
    static RunConfig paper_imagenet();
    static RunConfig preset(const std::string& name);
};

}  // namespace hvq
