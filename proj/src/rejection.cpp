#include "hvq/rejection.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <set>

#include "hvq/layers.hpp"
#include "hvq/ops.hpp"

namespace hvq {

ToyClassifier::ToyClassifier(ClassifierConfig config, Rng& rng) : config_(config) {
    if (config_.classes < 2) throw ConfigError("classifier needs at least 2 classes");
    if (config_.channels == 0 || config_.width == 0) throw ConfigError("classifier widths must be positive");
    layers::add_conv(params_, "conv0", config_.channels, config_.width, 3, rng);
    layers::add_conv(params_, "conv1", config_.width, 2 * config_.width, 3, rng);
    layers::add_conv(params_, "head", 2 * config_.width, config_.classes, 1, rng);
}

Tensor ToyClassifier::logits(Tape& tape, const Tensor& images) const {
    if (images.rank() != 4 || images.dim(1) != config_.channels)
        throw DimensionError("classifier: expected [N," + std::to_string(config_.channels) + ",H,W], got " +
                             shape_str(images.shape()));
    Tensor h = ops::relu(tape, layers::conv(tape, params_, "conv0", images, 2, 1));
    h = ops::relu(tape, layers::conv(tape, params_, "conv1", h, 2, 1));
    return ops::global_avg_pool(tape, layers::conv(tape, params_, "head", h));
}

Tensor ToyClassifier::probabilities(Tape& tape, const Tensor& images) const {
    return ops::softmax(tape, logits(tape, images));
}

Tensor batch_item(const Tensor& batch, std::size_t i) {
    if (batch.rank() < 1 || i >= batch.dim(0)) throw IndexError("batch_item: index out of range");
    Shape shape = batch.shape();
    shape[0] = 1;
    const std::size_t n = batch.numel() / batch.dim(0);
    auto src = batch.data().subspan(i * n, n);
    return Tensor::from(std::move(shape), std::vector<real>(src.begin(), src.end()));
}

namespace {

Tensor gather_batch(const Tensor& batch, std::span<const std::size_t> rows) {
    Shape shape = batch.shape();
    shape[0] = rows.size();
    const std::size_t n = batch.numel() / batch.dim(0);
    std::vector<real> data;
    data.reserve(rows.size() * n);
    for (std::size_t r : rows) {
        auto src = batch.data().subspan(r * n, n);
        data.insert(data.end(), src.begin(), src.end());
    }
    return Tensor::from(std::move(shape), std::move(data));
}

}  // namespace

TrainedClassifier train_toy_classifier(const Tensor& images, std::span<const Label> labels,
                                       const ClassifierConfig& config) {
    if (images.rank() != 4 || images.dim(0) != labels.size())
        throw DimensionError("train_toy_classifier: one label per image is required");
    std::set<Label> distinct(labels.begin(), labels.end());
    if (distinct.size() < 2) throw ConfigError("train_toy_classifier: dataset must contain at least 2 classes");
    for (Label l : labels)
        if (l < 0 || std::size_t(l) >= config.classes)
            throw IndexError("train_toy_classifier: label " + std::to_string(l) + " out of range");

    Rng rng(config.seed);
    TrainedClassifier out{ToyClassifier(config, rng), 0.0};
    Adam adam({config.learning_rate});
    const std::size_t n = images.dim(0), bs = std::min(config.batch_size, n);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = n;
    for (std::size_t step = 0; step < config.steps; ++step) {
        std::vector<std::size_t> rows;
        std::vector<Label> batch_labels;
        for (std::size_t j = 0; j < bs; ++j) {
            if (cursor == n) {
                std::shuffle(order.begin(), order.end(), rng.engine());
                cursor = 0;
            }
            rows.push_back(order[cursor]);
            batch_labels.push_back(labels[order[cursor++]]);
        }
        Tape tape;
        Tensor loss = ops::softmax_cross_entropy(tape, out.classifier.logits(tape, gather_batch(images, rows)),
                                                 batch_labels);
        out.classifier.params().zero_grad();
        tape.backward(loss);
        adam.step(out.classifier.params());
    }

    Tape eval(Tape::Mode::inference);
    Tensor probs = out.classifier.probabilities(eval, images);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < n; ++i) {
        auto row = probs.data().subspan(i * config.classes, config.classes);
        const auto best = std::size_t(std::max_element(row.begin(), row.end()) - row.begin());
        if (Label(best) == labels[i]) ++correct;
    }
    out.train_accuracy = double(correct) / double(n);
    return out;
}

std::vector<ScoredSample> score(const Tensor& images, std::span<const Label> labels, const ToyClassifier& clf,
                                std::size_t first_id) {
    std::vector<ScoredSample> out;
    if (labels.empty()) return out;
    if (images.rank() != 4 || images.dim(0) != labels.size())
        throw DimensionError("score: one label per image is required");
    for (Label l : labels)
        if (l < 0 || std::size_t(l) >= clf.classes())
            throw IndexError("score: label " + std::to_string(l) + " out of range");
    Tape tape(Tape::Mode::inference);
    Tensor probs = clf.probabilities(tape, images);
    for (std::size_t i = 0; i < labels.size(); ++i)
        out.push_back({first_id + i, labels[i], double(probs[i * clf.classes() + std::size_t(labels[i])]),
                       batch_item(images, i)});
    return out;
}

std::size_t kept_count(std::size_t n, double keep_fraction) {
    if (!(keep_fraction > 0) || keep_fraction > 1) throw ContractError("keep_fraction must lie in (0,1]");
    // Absorb representation error so that e.g. 0.3 * 10 keeps 3, not 4.
    const double raw = keep_fraction * double(n);
    const auto k = std::size_t(std::ceil(raw - 1e-9 * std::max(1.0, raw)));
    return std::clamp<std::size_t>(k, 1, n);
}

namespace {

void sort_by_score(std::vector<ScoredSample>& v) {
    std::sort(v.begin(), v.end(), [](const ScoredSample& a, const ScoredSample& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.sample_id < b.sample_id;
    });
}

}  // namespace

std::vector<ScoredSample> reject_filter(std::vector<ScoredSample> scored, double keep_fraction) {
    if (scored.empty()) throw ContractError("reject_filter: no samples");
    const std::size_t k = kept_count(scored.size(), keep_fraction);
    for (const auto& s : scored)
        if (!std::isfinite(s.score)) throw NumericError("reject_filter: non-finite score");
    sort_by_score(scored);
    scored.resize(k);
    return scored;
}

std::vector<ScoredSample> reject_threshold(std::vector<ScoredSample> scored, double threshold) {
    if (scored.empty()) throw ContractError("reject_threshold: no samples");
    std::erase_if(scored, [threshold](const ScoredSample& s) { return !(s.score >= threshold); });
    sort_by_score(scored);
    return scored;
}

void write_scores_csv(std::ostream& os, const std::vector<ScoredSample>& scored,
                      const std::vector<ScoredSample>& kept) {
    std::set<std::size_t> kept_ids;
    for (const auto& s : kept) kept_ids.insert(s.sample_id);
    os << "sample_id,class_label,score,kept\n";
    os << std::setprecision(17);
    for (const auto& s : scored)
        os << s.sample_id << ',' << s.class_label << ',' << s.score << ',' << (kept_ids.count(s.sample_id) ? 1 : 0)
           << '\n';
}

}  // namespace hvq
