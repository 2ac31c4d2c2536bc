#pragma once

#include <iosfwd>
#include <span>
#include <vector>

#include "hvq/nn.hpp"
#include "hvq/prior.hpp"

namespace hvq {

struct ScoredSample {
    std::size_t sample_id = 0;
    Label class_label = 0;
    double score = 0;  // classifier probability of class_label
    Tensor image;
};

struct ClassifierConfig {
    std::size_t channels = 1;
    std::size_t classes = 2;
    std::size_t width = 16;
    std::size_t steps = 500;
    std::size_t batch_size = 32;
    double learning_rate = 3e-3;
    std::uint64_t seed = 0;
};

/// Small convolutional classifier: two strided 3x3 convs, a 1x1 class
/// projection, global average pooling and a softmax.
class ToyClassifier {
public:
    ToyClassifier(ClassifierConfig config, Rng& rng);

    const ClassifierConfig& config() const { return config_; }
    std::size_t classes() const { return config_.classes; }
    ParameterSet& params() { return params_; }
    const ParameterSet& params() const { return params_; }

    Tensor logits(Tape& tape, const Tensor& images) const;       // [N, classes]
    Tensor probabilities(Tape& tape, const Tensor& images) const;  // rows sum to 1

private:
    ClassifierConfig config_;
    ParameterSet params_;
};

struct TrainedClassifier {
    ToyClassifier classifier;
    double train_accuracy = 0;
};

/// Fits a ToyClassifier on images[N,C,H,W] with Adam on minibatches.
TrainedClassifier train_toy_classifier(const Tensor& images, std::span<const Label> labels,
                                       const ClassifierConfig& config);

// Row `i` of a batch as a [1, ...] tensor.
Tensor batch_item(const Tensor& batch, std::size_t i);

/// One score per image, in batch order. Sample ids are 0..N-1 + first_id.
std::vector<ScoredSample> score(const Tensor& images, std::span<const Label> labels, const ToyClassifier& clf,
                                std::size_t first_id = 0);

/// Keeps the ceil(keep_fraction * n) highest scores, ordered by descending
/// score with ties broken by ascending sample_id.
std::vector<ScoredSample> reject_filter(std::vector<ScoredSample> scored, double keep_fraction);

// Keeps every sample with score >= threshold, in the same order as reject_filter.
std::vector<ScoredSample> reject_threshold(std::vector<ScoredSample> scored, double threshold);

std::size_t kept_count(std::size_t n, double keep_fraction);

// CSV with header "sample_id,class_label,score,kept", one row per scored sample in input order.
void write_scores_csv(std::ostream& os, const std::vector<ScoredSample>& scored, const std::vector<ScoredSample>& kept);

}  // namespace hvq
