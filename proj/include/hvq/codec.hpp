#pragma once

#include <optional>
#include <string>
#include <vector>

#include "hvq/nn.hpp"
#include "hvq/vq.hpp"

namespace hvq {

enum class CodebookUpdate { ema, loss };

struct LevelConfig {
    std::string name;
    // Bottom level: factor relative to the image. Higher levels: factor
    // relative to the level below.
    std::size_t downsample = 2;
    CodebookConfig codebook;
};

struct CodecConfig {
    std::size_t image_size = 32;
    std::size_t channels = 1;
    std::size_t hidden_units = 32;
    std::size_t residual_units = 16;
    std::size_t residual_layers = 2;
    std::size_t encoder_filter_size = 3;
    std::size_t upsampling_filter_size = 4;
    double beta = 0.25;
    CodebookUpdate codebook_update = CodebookUpdate::ema;
    std::vector<LevelConfig> levels;  // ordered bottom -> top

    void validate() const;
    std::size_t grid_size(std::size_t level) const;
    std::size_t level_index(const std::string& name) const;

    // 32x32 -> 8x8 bottom, 4x4 top; K=64, D=16.
    static CodecConfig desk();
    // Three-level desk variant: 32x32 -> 8x8, 4x4, 2x2.
    static CodecConfig desk_three_level();
    // 256x256 -> 64x64, 32x32 with the published ImageNet hyperparameters.
    static CodecConfig paper_imagenet();
    // 1024x1024 -> 128x128, 64x64, 32x32.
    static CodecConfig paper_ffhq();
};

/// Quantized latents of a batch, one entry per level (bottom -> top).
struct LatentHierarchy {
    std::vector<CodeGrid> codes;
    std::vector<Tensor> quantized;      // decoder inputs e_level [B,D,h,w]
    std::vector<Tensor> pre_quantized;  // encoder outputs z_level [B,D,h,w]
};

// How gradients treat the quantization step during encode.
enum class QuantizerGradient {
    straight_through,  // decoder inputs pass gradients onto the encoder outputs
    blocked,           // decoder inputs are constants
};

struct TrainStepResult {
    double loss = 0;
    double mse = 0;
    std::vector<double> perplexity;  // per level
};

/// Multi-level VQ-VAE: per-level encoders, one codebook per level and a
/// feed-forward decoder over all levels.
///
/// Every level's trunk depends on the pixels. Codes are computed top-down:
/// each lower level's encoder sees its trunk features concatenated with the
/// upsampled quantized codes of the level above.
class HierarchicalCodec {
public:
    HierarchicalCodec(CodecConfig config, Rng& rng);

    const CodecConfig& config() const { return config_; }
    std::size_t levels() const { return config_.levels.size(); }

    ParameterSet& params() { return params_; }
    const ParameterSet& params() const { return params_; }
    std::vector<Codebook>& codebooks() { return codebooks_; }
    const std::vector<Codebook>& codebooks() const { return codebooks_; }

    LatentHierarchy encode(Tape& tape, const Tensor& x,
                           QuantizerGradient mode = QuantizerGradient::straight_through) const;

    // `active` selects which levels contribute; absent levels feed zeros.
    Tensor decode(Tape& tape, const LatentHierarchy& latents, const std::vector<bool>& active = {}) const;

    // Looks up prototypes for the given codes and decodes them.
    Tensor decode_codes(Tape& tape, const std::vector<CodeGrid>& codes, const std::vector<bool>& active = {}) const;

    TrainStepResult train_step(const Tensor& batch, Adam& optimizer);

private:
    Tensor trunk(Tape& tape, std::size_t level, const Tensor& input) const;

    CodecConfig config_;
    ParameterSet params_;
    std::vector<Codebook> codebooks_;
};

/// mse(x, x_hat) + sum over levels of commitment_loss(z, e_q, beta).
Tensor vqvae_loss(Tape& tape, const Tensor& x, const Tensor& x_hat, const std::vector<Tensor>& z,
                  const std::vector<Tensor>& e_q, double beta);

}  // namespace hvq
