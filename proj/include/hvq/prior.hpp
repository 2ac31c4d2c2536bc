#pragma once

#include <span>
#include <string>
#include <vector>

#include "hvq/nn.hpp"
#include "hvq/vq.hpp"

namespace hvq {

using Label = std::int32_t;

struct PriorConfig {
    std::string level = "top";
    std::size_t height = 4;
    std::size_t width = 4;
    std::size_t vocabulary = 64;
    std::size_t hidden_units = 64;
    std::size_t residual_units = 32;
    std::size_t layers = 6;
    std::size_t attention_period = 3;  // attention after every n-th gated block
    std::size_t attention_layers = 2;
    std::size_t attention_heads = 4;
    std::size_t filter_size = 5;
    double dropout = 0.1;
    double attention_dropout = 0.1;
    std::size_t output_stack_layers = 2;
    // Conditioning on the level above; condition_vocabulary == 0 disables it.
    std::size_t conditioning_residual_blocks = 0;
    std::size_t condition_vocabulary = 0;
    std::size_t condition_height = 0;
    std::size_t condition_width = 0;
    std::size_t classes = 0;  // 0 = unconditional

    bool conditioned() const { return condition_vocabulary > 0; }
    void validate() const;

    static PriorConfig desk_top();
    static PriorConfig desk_bottom();
    static PriorConfig paper_imagenet_top();
    static PriorConfig paper_imagenet_bottom();
};

/// Raster order p(h, w) = h * W + w over a code grid.
struct AutoregressiveOrder {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t position(std::size_t h, std::size_t w) const { return h * width + w; }
    std::size_t size() const { return height * width; }
};

enum class MaskType { A, B };

/// k x k raster mask: taps after the centre are zero; type A also zeroes the centre.
std::vector<real> raster_mask(std::size_t k, MaskType type);

// Convolution with the kernel multiplied by the raster mask (same padding, stride 1).
Tensor masked_conv2d(Tape& tape, const Tensor& x, const Tensor& kernel, MaskType type);

struct AttentionWeights {
    Tensor query, key, value, output;  // each [C, C]
};

struct AttentionResult {
    Tensor output;   // [B, T, C]
    Tensor weights;  // [B*heads, T, T] attention probabilities
};

/// Multi-head self-attention over x[B,T,C] where position i attends to
/// positions j <= i. Logit dropout is applied only when `rng` is given.
AttentionResult causal_self_attention(Tape& tape, const Tensor& x, const AttentionWeights& w, std::size_t heads,
                                      double logit_dropout = 0, Rng* rng = nullptr);

/// Execution mode: training enables dropout and requires an RNG.
struct RunMode {
    bool train = false;
    Rng* rng = nullptr;
    static RunMode eval() { return {}; }
    static RunMode training(Rng& rng) { return {true, &rng}; }
};

struct PriorBatch {
    const CodeGrid* codes = nullptr;
    std::span<const Label> labels;        // one per grid when classes > 0
    const CodeGrid* condition = nullptr;  // codes of the level above
};

/// Gated masked-convolution prior with interleaved causal attention over one
/// code grid, optionally conditioned on a class label and the level above.
class PixelCnnPrior {
public:
    PixelCnnPrior(PriorConfig config, Rng& rng);

    const PriorConfig& config() const { return config_; }
    ParameterSet& params() { return params_; }
    const ParameterSet& params() const { return params_; }

    // Unmasked features [B, hidden, H, W] from the level above.
    Tensor conditioning_stack(Tape& tape, const CodeGrid& above) const;

    // x + tanh(a + cond_a) * sigmoid(b + cond_b) where [a, b] = masked_conv_B(x).
    Tensor gated_residual_block(Tape& tape, std::size_t index, const Tensor& x, const Tensor* condition,
                                std::span<const Label> labels) const;

    // Teacher-forced logits [B, K, H, W].
    Tensor forward(Tape& tape, const PriorBatch& batch, RunMode mode = RunMode::eval()) const;
    Tensor forward(Tape& tape, const CodeGrid& codes, std::span<const Label> labels, const Tensor* condition_features,
                   RunMode mode) const;

    // Mean negative log-likelihood in nats per position.
    Tensor nll(Tape& tape, const PriorBatch& batch, RunMode mode = RunMode::eval()) const;

    double train_step(const PriorBatch& batch, Adam& optimizer, Rng& rng);

    // Throws on grid, vocabulary, label or condition mismatches.
    void check_batch(const PriorBatch& batch) const;

private:
    bool attention_after(std::size_t block) const;

    PriorConfig config_;
    ParameterSet params_;
};

constexpr double kLn2 = 0.69314718055994530942;
inline double nats_to_bits(double nats) { return nats / kLn2; }

/// Samples `n` grids in raster order; each position draws from
/// softmax(logits / temperature) given the codes sampled so far. Performs
/// exactly H*W forward evaluations on the whole batch.
CodeGrid ancestral_sample(const PixelCnnPrior& prior, std::size_t n, std::span<const Label> labels,
                          const CodeGrid* condition, double temperature, Rng& rng);

}  // namespace hvq
