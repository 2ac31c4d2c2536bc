#include "hvq/prior.hpp"

#include <cmath>

#include "hvq/layers.hpp"
#include "hvq/ops.hpp"

namespace hvq {

namespace {

std::string block(std::size_t i) { return "block" + std::to_string(i); }
std::string attn(std::size_t i) { return "attn" + std::to_string(i); }

}  // namespace

void PriorConfig::validate() const {
    if (height == 0 || width == 0) throw ConfigError("prior '" + level + "': grid must be non-empty");
    if (vocabulary < 2) throw ConfigError("prior '" + level + "': vocabulary must be >= 2");
    if (hidden_units == 0 || residual_units == 0 || layers == 0)
        throw ConfigError("prior '" + level + "': widths and layer count must be positive");
    if (filter_size % 2 == 0) throw ConfigError("prior '" + level + "': filter size must be odd");
    if (attention_layers > layers) throw ConfigError("prior '" + level + "': more attention layers than layers");
    if (attention_layers > 0) {
        if (attention_period == 0) throw ConfigError("prior '" + level + "': attention period must be positive");
        if (attention_heads == 0 || hidden_units % attention_heads != 0)
            throw ConfigError("prior '" + level + "': attention heads must divide hidden units");
        if (attention_layers * attention_period > layers)
            throw ConfigError("prior '" + level + "': attention period too long for the layer count");
    }
    if (dropout < 0 || dropout >= 1 || attention_dropout < 0 || attention_dropout >= 1)
        throw ConfigError("prior '" + level + "': dropout rates must lie in [0,1)");
    if (conditioned()) {
        if (condition_height == 0 || condition_width == 0 || height % condition_height != 0 ||
            width % condition_width != 0 || height / condition_height != width / condition_width)
            throw ConfigError("prior '" + level + "': condition grid must evenly divide the target grid");
        const std::size_t factor = height / condition_height;
        if (factor > 1) layers::stride2_stages(factor);
    } else if (conditioning_residual_blocks > 0) {
        throw ConfigError("prior '" + level + "': conditioning blocks given without a condition vocabulary");
    }
}

PriorConfig PriorConfig::desk_top() { return PriorConfig{}; }

PriorConfig PriorConfig::desk_bottom() {
    PriorConfig c;
    c.level = "bottom";
    c.height = c.width = 8;
    c.attention_layers = 0;
    c.attention_period = 0;
    c.output_stack_layers = 0;
    c.conditioning_residual_blocks = 2;
    c.condition_vocabulary = 64;
    c.condition_height = c.condition_width = 4;
    return c;
}

PriorConfig PriorConfig::paper_imagenet_top() {
    PriorConfig c;
    c.level = "top";
    c.height = c.width = 32;
    c.vocabulary = 512;
    c.hidden_units = 512;
    c.residual_units = 2048;
    c.layers = 20;
    c.attention_period = 5;
    c.attention_layers = 4;
    c.attention_heads = 8;
    c.filter_size = 5;
    c.dropout = 0.1;
    c.attention_dropout = 0.1;
    c.output_stack_layers = 20;
    c.classes = 1000;
    return c;
}

PriorConfig PriorConfig::paper_imagenet_bottom() {
    PriorConfig c = paper_imagenet_top();
    c.level = "bottom";
    c.height = c.width = 64;
    c.residual_units = 1024;
    c.attention_layers = 0;
    c.attention_period = 0;
    c.output_stack_layers = 0;
    c.conditioning_residual_blocks = 20;
    c.condition_vocabulary = 512;
    c.condition_height = c.condition_width = 32;
    return c;
}

std::vector<real> raster_mask(std::size_t k, MaskType type) {
    if (k % 2 == 0) throw ConfigError("masked convolution needs an odd filter size, got " + std::to_string(k));
    std::vector<real> mask(k * k, real(0));
    const std::size_t centre = (k / 2) * k + k / 2;
    for (std::size_t i = 0; i < k * k; ++i)
        if (i < centre || (i == centre && type == MaskType::B)) mask[i] = real(1);
    return mask;
}

Tensor masked_conv2d(Tape& tape, const Tensor& x, const Tensor& kernel, MaskType type) {
    if (kernel.rank() != 4 || kernel.dim(2) != kernel.dim(3))
        throw DimensionError("masked_conv2d: kernel must be [O,C,k,k]");
    const std::size_t k = kernel.dim(2);
    const auto taps = raster_mask(k, type);
    std::vector<real> full(kernel.numel());
    for (std::size_t i = 0; i < full.size(); ++i) full[i] = taps[i % (k * k)];
    Tensor mask = Tensor::from(kernel.shape(), std::move(full));
    return ops::conv2d(tape, x, ops::mul(tape, kernel, mask), 1, int(k / 2));
}

AttentionResult causal_self_attention(Tape& tape, const Tensor& x, const AttentionWeights& w, std::size_t heads,
                                      double logit_dropout, Rng* rng) {
    if (x.rank() != 3) throw DimensionError("causal_self_attention: expected [B,T,C], got " + shape_str(x.shape()));
    const std::size_t channels = x.dim(2);
    if (heads == 0 || channels % heads != 0)
        throw ConfigError("causal_self_attention: " + std::to_string(channels) + " channels not divisible by " +
                          std::to_string(heads) + " heads");
    const std::size_t d = channels / heads;
    Tensor q = ops::split_heads(tape, ops::linear(tape, x, w.query), heads);
    Tensor k = ops::split_heads(tape, ops::linear(tape, x, w.key), heads);
    Tensor v = ops::split_heads(tape, ops::linear(tape, x, w.value), heads);
    Tensor logits = ops::scale(tape, ops::bmm(tape, q, k, true), real(1.0 / std::sqrt(double(d))));
    if (rng && logit_dropout > 0) logits = ops::dropout(tape, logits, real(logit_dropout), *rng);
    AttentionResult out;
    out.weights = ops::causal_softmax(tape, logits);
    Tensor mixed = ops::merge_heads(tape, ops::bmm(tape, out.weights, v), heads);
    out.output = ops::linear(tape, mixed, w.output);
    return out;
}

PixelCnnPrior::PixelCnnPrior(PriorConfig config, Rng& rng) : config_(std::move(config)) {
    config_.validate();
    const auto& c = config_;
    const std::size_t hid = c.hidden_units, k = c.filter_size;

    params_.add_normal("embed", {c.vocabulary, hid}, 1.0, rng);
    params_.add_he("input.w", {hid, hid, k, k}, hid * (k * k / 2), rng);
    params_.add("input.b", {hid});
    for (std::size_t i = 0; i < c.layers; ++i) {
        params_.add_he(block(i) + ".w", {2 * hid, hid, k, k}, hid * (k * k / 2 + 1), rng);
        params_.add(block(i) + ".b", {2 * hid});
        if (c.conditioned()) layers::add_conv(params_, block(i) + ".cond", hid, 2 * hid, 1, rng);
        if (c.classes > 0) params_.add_normal(block(i) + ".class", {c.classes, 2 * hid}, 0.1, rng);
    }
    for (std::size_t j = 0; j < c.attention_layers; ++j) {
        params_.add_normal(attn(j) + ".pos", {c.height * c.width, hid}, 0.1, rng);
        for (const char* m : {".q", ".k", ".v", ".o"}) params_.add_he(attn(j) + m, {hid, hid}, hid, rng);
    }
    for (std::size_t i = 0; i < c.output_stack_layers; ++i) {
        const std::string name = "out" + std::to_string(i);
        layers::add_conv(params_, name + ".conv_a", hid, c.residual_units, 1, rng);
        layers::add_conv(params_, name + ".conv_b", c.residual_units, hid, 1, rng);
    }
    // Zero-initialised output layer: an untrained prior is uniform.
    params_.add("logits.w", {c.vocabulary, hid, 1, 1});
    params_.add("logits.b", {c.vocabulary});

    if (c.conditioned()) {
        params_.add_normal("cond.embed", {c.condition_vocabulary, hid}, 1.0, rng);
        const std::size_t factor = c.height / c.condition_height;
        if (factor > 1) {
            const std::size_t stages = layers::stride2_stages(factor);
            for (std::size_t i = 0; i < stages; ++i)
                layers::add_conv_transpose(params_, "cond.up" + std::to_string(i), hid, hid, 4, 2, rng);
        }
        layers::add_residual_stack(params_, "cond.res", hid, c.residual_units, c.conditioning_residual_blocks, 3, rng);
    }
}

bool PixelCnnPrior::attention_after(std::size_t i) const {
    const auto& c = config_;
    if (c.attention_layers == 0) return false;
    return (i + 1) % c.attention_period == 0 && (i + 1) / c.attention_period <= c.attention_layers;
}

Tensor PixelCnnPrior::conditioning_stack(Tape& tape, const CodeGrid& above) const {
    const auto& c = config_;
    if (!c.conditioned()) throw ContractError("prior '" + c.level + "' is not conditioned on a higher level");
    if (above.height != c.condition_height || above.width != c.condition_width ||
        above.vocabulary != c.condition_vocabulary)
        throw DimensionError("conditioning_stack: expected " + std::to_string(c.condition_height) + "x" +
                             std::to_string(c.condition_width) + " codes over " +
                             std::to_string(c.condition_vocabulary) + " symbols");
    Tensor h = ops::embedding(tape, params_.get("cond.embed"), above.indices, above.batch, above.height, above.width);
    const std::size_t factor = c.height / c.condition_height;
    if (factor > 1) {
        const std::size_t stages = layers::stride2_stages(factor);
        for (std::size_t i = 0; i < stages; ++i) {
            h = layers::conv_transpose(tape, params_, "cond.up" + std::to_string(i), h, 2, 1);
            if (i + 1 < stages) h = ops::relu(tape, h);
        }
    }
    return layers::residual_stack(tape, params_, "cond.res", h, c.conditioning_residual_blocks);
}

Tensor PixelCnnPrior::gated_residual_block(Tape& tape, std::size_t i, const Tensor& x, const Tensor* condition,
                                           std::span<const Label> labels) const {
    const std::size_t hid = config_.hidden_units;
    if (x.rank() != 4 || x.dim(1) != hid) throw DimensionError("gated_residual_block: input width mismatch");
    Tensor ab = ops::add_channel_bias(tape, masked_conv2d(tape, x, params_.get(block(i) + ".w"), MaskType::B),
                                      params_.get(block(i) + ".b"));
    if (condition) ab = ops::add(tape, ab, layers::conv(tape, params_, block(i) + ".cond", *condition));
    if (config_.classes > 0)
        ab = ops::add_batch_channel(tape, ab, ops::embedding_rows(tape, params_.get(block(i) + ".class"), labels));
    Tensor gate = ops::mul(tape, ops::tanh(tape, ops::slice_channels(tape, ab, 0, hid)),
                           ops::sigmoid(tape, ops::slice_channels(tape, ab, hid, hid)));
    return ops::add(tape, x, gate);
}

void PixelCnnPrior::check_batch(const PriorBatch& batch) const {
    const auto& c = config_;
    if (!batch.codes) throw ContractError("prior batch has no codes");
    const CodeGrid& g = *batch.codes;
    if (g.height != c.height || g.width != c.width)
        throw DimensionError("prior '" + c.level + "': grid " + std::to_string(g.height) + "x" +
                             std::to_string(g.width) + " does not match " + std::to_string(c.height) + "x" +
                             std::to_string(c.width));
    if (g.vocabulary != c.vocabulary) throw ConfigError("prior '" + c.level + "': vocabulary mismatch");
    g.validate();
    if (c.classes > 0) {
        if (batch.labels.size() != g.batch) throw ContractError("prior: one class label per grid is required");
        for (Label l : batch.labels)
            if (l < 0 || std::size_t(l) >= c.classes)
                throw IndexError("prior: class label " + std::to_string(l) + " out of range");
    }
    if (c.conditioned()) {
        if (!batch.condition) throw ContractError("prior '" + c.level + "' requires codes of the level above");
        if (batch.condition->batch != g.batch) throw DimensionError("prior: condition batch size mismatch");
        batch.condition->validate();
    }
}

Tensor PixelCnnPrior::forward(Tape& tape, const PriorBatch& batch, RunMode mode) const {
    check_batch(batch);
    Tensor features;
    if (config_.conditioned()) features = conditioning_stack(tape, *batch.condition);
    return forward(tape, *batch.codes, batch.labels, config_.conditioned() ? &features : nullptr, mode);
}

Tensor PixelCnnPrior::forward(Tape& tape, const CodeGrid& codes, std::span<const Label> labels,
                              const Tensor* condition_features, RunMode mode) const {
    const auto& c = config_;
    if (mode.train && !mode.rng) throw ContractError("prior: training mode requires an RNG");
    const double drop = mode.train ? c.dropout : 0.0;
    const double attn_drop = mode.train ? c.attention_dropout : 0.0;

    Tensor x = ops::embedding(tape, params_.get("embed"), codes.indices, codes.batch, c.height, c.width);
    Tensor h = ops::add_channel_bias(tape, masked_conv2d(tape, x, params_.get("input.w"), MaskType::A),
                                     params_.get("input.b"));
    std::size_t attention_index = 0;
    for (std::size_t i = 0; i < c.layers; ++i) {
        h = gated_residual_block(tape, i, h, condition_features, labels);
        if (drop > 0) h = ops::dropout(tape, h, real(drop), *mode.rng);
        if (attention_after(i)) {
            const std::string name = attn(attention_index++);
            Tensor seq = ops::add_broadcast_batch(tape, ops::nchw_to_nlc(tape, h), params_.get(name + ".pos"));
            AttentionWeights w{params_.get(name + ".q"), params_.get(name + ".k"), params_.get(name + ".v"),
                               params_.get(name + ".o")};
            AttentionResult a = causal_self_attention(tape, seq, w, c.attention_heads, attn_drop,
                                                      attn_drop > 0 ? mode.rng : nullptr);
            h = ops::add(tape, h, ops::nlc_to_nchw(tape, a.output, c.height, c.width));
        }
    }
    h = ops::relu(tape, h);
    for (std::size_t i = 0; i < c.output_stack_layers; ++i) {
        const std::string name = "out" + std::to_string(i);
        Tensor r = layers::conv(tape, params_, name + ".conv_a", h);
        r = layers::conv(tape, params_, name + ".conv_b", ops::relu(tape, r));
        h = ops::relu(tape, ops::add(tape, h, r));
    }
    return ops::add_channel_bias(tape, ops::conv2d(tape, h, params_.get("logits.w"), 1, 0), params_.get("logits.b"));
}

Tensor PixelCnnPrior::nll(Tape& tape, const PriorBatch& batch, RunMode mode) const {
    Tensor logits = forward(tape, batch, mode);
    const std::size_t rows = batch.codes->batch * batch.codes->positions();
    Tensor flat = ops::reshape(tape, ops::nchw_to_nlc(tape, logits), {rows, config_.vocabulary});
    return ops::softmax_cross_entropy(tape, flat, batch.codes->indices);
}

double PixelCnnPrior::train_step(const PriorBatch& batch, Adam& optimizer, Rng& rng) {
    Tape tape;
    Tensor loss = nll(tape, batch, RunMode::training(rng));
    params_.zero_grad();
    tape.backward(loss);
    optimizer.step(params_);
    return loss.item();
}

CodeGrid ancestral_sample(const PixelCnnPrior& prior, std::size_t n, std::span<const Label> labels,
                          const CodeGrid* condition, double temperature, Rng& rng) {
    const auto& c = prior.config();
    if (!(temperature > 0)) throw ConfigError("ancestral_sample: temperature must be positive");
    if (n == 0) throw ContractError("ancestral_sample: n must be positive");
    CodeGrid grid{n, c.height, c.width, c.vocabulary, std::vector<Code>(n * c.height * c.width, 0), c.level};
    PriorBatch batch{&grid, labels, condition};
    prior.check_batch(batch);

    Tape cond_tape(Tape::Mode::inference);
    Tensor features;
    if (c.conditioned()) features = prior.conditioning_stack(cond_tape, *condition);

    const std::size_t positions = c.height * c.width, k = c.vocabulary;
    std::vector<double> probs(k);
    for (std::size_t p = 0; p < positions; ++p) {
        Tape tape(Tape::Mode::inference);
        Tensor logits = prior.forward(tape, grid, labels, c.conditioned() ? &features : nullptr, RunMode::eval());
        auto l = logits.data();
        for (std::size_t b = 0; b < n; ++b) {
            double mx = -INFINITY;
            for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, double(l[(b * k + j) * positions + p]) / temperature);
            double z = 0;
            for (std::size_t j = 0; j < k; ++j)
                z += (probs[j] = std::exp(double(l[(b * k + j) * positions + p]) / temperature - mx));
            const double u = rng.uniform() * z;
            double acc = 0;
            Code choice = Code(k - 1);
            for (std::size_t j = 0; j < k; ++j) {
                acc += probs[j];
                if (u < acc) {
                    choice = Code(j);
                    break;
                }
            }
            grid.indices[b * positions + p] = choice;
        }
    }
    return grid;
}

}  // namespace hvq
