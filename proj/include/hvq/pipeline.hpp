#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "hvq/checkpoint.hpp"
#include "hvq/codec.hpp"
#include "hvq/config.hpp"
#include "hvq/image_io.hpp"
#include "hvq/prior.hpp"
#include "hvq/rejection.hpp"

namespace hvq {

/// Codes of every level for a set of images, one tuple per image.
struct CodeDataset {
    std::vector<CodeGrid> levels;  // bottom -> top, batch == size()
    std::vector<Label> labels;     // empty or one per image

    std::size_t size() const { return levels.empty() ? 0 : levels.front().batch; }
    // Equal lengths, valid grids and grid/vocabulary agreement with the codec.
    void validate(const CodecConfig& codec) const;
    CodeDataset slice(std::size_t begin, std::size_t end) const;

    bool operator==(const CodeDataset&) const = default;
};

/// "HVQD", u32 version, u32 levels, u64 count, u8 labelled; per level the
/// name, u32 H, W, K; then u16 codes per level and i32 labels.
void write_codes(const std::filesystem::path& path, const CodeDataset& codes);
CodeDataset read_codes(const std::filesystem::path& path);

// Rows [begin, end) of a code grid.
CodeGrid slice_grid(const CodeGrid& grid, std::size_t begin, std::size_t end);

struct RunPaths {
    std::filesystem::path dir;

    explicit RunPaths(std::filesystem::path d) : dir(std::move(d)) {}
    std::filesystem::path codec() const { return dir / "codec.ckpt"; }
    std::filesystem::path prior(const std::string& level) const { return dir / ("prior_" + level + ".ckpt"); }
    std::filesystem::path classifier() const { return dir / "classifier.ckpt"; }
    std::filesystem::path train_codes() const { return dir / "codes_train.bin"; }
    std::filesystem::path validation_codes() const { return dir / "codes_val.bin"; }
    std::filesystem::path stage1_metrics() const { return dir / "metrics_stage1.csv"; }
    std::filesystem::path prior_metrics(const std::string& level) const {
        return dir / ("metrics_prior_" + level + ".csv");
    }
    std::filesystem::path samples() const { return dir / "samples"; }
    std::filesystem::path lock() const { return dir / ".lock"; }
};

/// Exclusive ownership of a run directory while training. A second lock on
/// the same directory throws StateError.
class RunLock {
public:
    explicit RunLock(const std::filesystem::path& dir);
    ~RunLock();
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    std::filesystem::path path_;
};

struct DataSplit {
    Dataset train;
    Dataset validation;
};

// True for rows that go to the validation split.
std::vector<bool> validation_rows(std::size_t n, double fraction, std::uint64_t seed);
DataSplit load_data(const RunConfig& config);

class Stage1Trainer {
public:
    Stage1Trainer(const RunConfig& config, Dataset train);
    // Continues exactly where the checkpointed run stopped.
    Stage1Trainer(const Checkpoint& checkpoint, Dataset train);

    TrainStepResult step();
    std::size_t steps_done() const { return step_; }
    Checkpoint checkpoint() const;

    const RunConfig& config() const { return config_; }
    const HierarchicalCodec& codec() const { return codec_; }

private:
    Tensor next_batch();

    RunConfig config_;
    Dataset data_;
    Rng rng_;
    HierarchicalCodec codec_;
    Adam adam_;
    std::size_t step_ = 0;
};

struct Stage1Report {
    std::size_t steps = 0;
    TrainStepResult last;
    double train_mse = 0;  // full-hierarchy reconstruction after training
};

/// Trains the codec to config.stage1.steps in `dir`, writing codec.ckpt
/// periodically and a metrics CSV. With `resume`, starts from that checkpoint.
Stage1Report run_stage1(const RunConfig& config, const std::filesystem::path& dir,
                        const std::optional<std::filesystem::path>& resume = {}, std::ostream* log = nullptr);

/// One inference pass over the data; no parameter or codebook changes.
CodeDataset extract_codes(const HierarchicalCodec& codec, const Dataset& data);

// Mean squared error of decode(codes) against the images, using only the levels in `active`.
double decode_mse(const HierarchicalCodec& codec, const CodeDataset& codes, const Tensor& images,
                  const std::vector<bool>& active = {});
// Per-image version of decode_mse.
std::vector<double> decode_mse_per_image(const HierarchicalCodec& codec, const CodeDataset& codes,
                                         const Tensor& images, const std::vector<bool>& active = {});
// Encode then decode, without going through code indices.
double reconstruction_mse(const HierarchicalCodec& codec, const Tensor& images);

// Levels l and above active, the rest zeroed.
std::vector<bool> levels_from(std::size_t levels, std::size_t lowest);

class Stage2Trainer {
public:
    Stage2Trainer(const RunConfig& config, const std::string& level, CodeDataset train);
    Stage2Trainer(const Checkpoint& checkpoint, CodeDataset train);

    double step();  // training loss in nats per position
    std::size_t steps_done() const { return step_; }
    Checkpoint checkpoint() const;

    const PixelCnnPrior& prior() const { return prior_; }
    const std::string& level() const { return level_; }

private:
    RunConfig config_;
    std::string level_;
    std::size_t index_;
    CodeDataset data_;
    Rng rng_;
    PixelCnnPrior prior_;
    Adam adam_;
    std::size_t step_ = 0;
};

/// Mean NLL in nats per position of one level's codes, teacher forced on the
/// true codes of the level above.
double dataset_nll(const PixelCnnPrior& prior, const CodeDataset& codes, std::size_t level);

struct Stage2Report {
    std::string level;
    std::size_t steps = 0;
    double train_nll = 0;  // nats per position
    std::optional<double> validation_nll;
};

Stage2Report run_stage2(const RunConfig& config, const std::string& level, const CodeDataset& train,
                        const CodeDataset* validation, const std::filesystem::path& dir,
                        const std::optional<std::filesystem::path>& resume = {}, std::ostream* log = nullptr);

struct GenerateOptions {
    std::size_t n = 16;
    double temperature = 1.0;
    double keep_fraction = 1.0;
    Label class_label = -1;  // -1 cycles through the classes
    std::uint64_t seed = 0;
};

struct Generated {
    CodeDataset codes;  // every sample, before rejection
    Tensor images;      // [n, C, H, W]
    std::vector<ScoredSample> scored;  // empty without a classifier
    std::vector<std::size_t> kept;     // sample ids written out, ascending
};

/// Samples the top level, then each lower level conditioned on the one above,
/// decodes, and applies classifier rejection when a classifier is given.
/// `priors` is ordered bottom -> top.
Generated generate(const HierarchicalCodec& codec, const std::vector<const PixelCnnPrior*>& priors,
                   std::size_t classes, const ToyClassifier* classifier, const GenerateOptions& options);

// sample_XXXX.pgm/.ppm for kept samples, scores.csv (with a classifier) and codes.bin.
void write_generated(const std::filesystem::path& dir, const Generated& generated);

struct LevelReport {
    std::string level;
    std::optional<double> train_nll;  // nats per position
    std::optional<double> validation_nll;
    double train_mse = 0;  // reconstruction from this level and those above
    std::optional<double> validation_mse;
};

struct EvalReport {
    std::vector<LevelReport> levels;  // bottom -> top
    double train_mse = 0;             // full hierarchy
    std::optional<double> validation_mse;
    std::size_t train_images = 0;
    std::size_t validation_images = 0;

    std::string to_json() const;
    std::string to_csv() const;
};

/// `priors` maps level names to trained priors; missing levels report no NLL.
EvalReport evaluate(const HierarchicalCodec& codec, const std::map<std::string, const PixelCnnPrior*>& priors,
                    const Dataset& train, const Dataset& validation);

/// Per-image MSE of the partial reconstruction from each level upward, and
/// the images themselves under `dir` (original_XXXX, <level>_XXXX).
/// Returns mse[level][image].
std::vector<std::vector<double>> reconstruction_detail(const HierarchicalCodec& codec, const Dataset& data,
                                                       const std::filesystem::path& dir);

}  // namespace hvq
