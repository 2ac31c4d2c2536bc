#include "hvq/codec.hpp"

#include <cmath>
#include <set>

#include "hvq/layers.hpp"
#include "hvq/ops.hpp"

namespace hvq {

namespace {

int resample_padding(std::size_t k) { return int((k - 2) / 2); }

std::string enc(const LevelConfig& level) { return "enc." + level.name; }
std::string dec(const LevelConfig& level) { return "dec." + level.name; }

}  // namespace

void CodecConfig::validate() const {
    if (levels.size() < 2 || levels.size() > 3) throw ConfigError("codec needs 2 or 3 hierarchy levels");
    if (channels == 0 || hidden_units < 2 || residual_units == 0) throw ConfigError("codec widths must be positive");
    if (hidden_units % 2 != 0) throw ConfigError("hidden_units must be even");
    if (encoder_filter_size % 2 == 0) throw ConfigError("encoder_filter_size must be odd");
    if (upsampling_filter_size < 2 || upsampling_filter_size % 2 != 0)
        throw ConfigError("upsampling_filter_size must be even and >= 2");
    if (beta < 0) throw ConfigError("beta must be >= 0");
    std::set<std::string> names;
    std::size_t size = image_size;
    for (const auto& level : levels) {
        if (level.name.empty() || !names.insert(level.name).second)
            throw ConfigError("level names must be unique and non-empty");
        layers::stride2_stages(level.downsample);
        if (size % level.downsample != 0)
            throw ConfigError("level '" + level.name + "': grid " + std::to_string(size) +
                              " is not divisible by downsample factor " + std::to_string(level.downsample));
        size /= level.downsample;
        if (level.codebook.size == 0 || level.codebook.dim == 0)
            throw ConfigError("level '" + level.name + "': codebook size and dimension must be positive");
        if (level.codebook.decay < 0 || level.codebook.decay > 1)
            throw ConfigError("level '" + level.name + "': decay must lie in [0,1]");
        if (level.codebook.epsilon <= 0) throw ConfigError("level '" + level.name + "': epsilon must be positive");
    }
    for (std::size_t i = 1; i < levels.size(); ++i)
        if (levels[i].codebook.dim != levels[0].codebook.dim)
            throw ConfigError("all levels must share the code dimension");
}

std::size_t CodecConfig::grid_size(std::size_t level) const {
    std::size_t size = image_size;
    for (std::size_t i = 0; i <= level; ++i) size /= levels.at(i).downsample;
    return size;
}

std::size_t CodecConfig::level_index(const std::string& name) const {
    for (std::size_t i = 0; i < levels.size(); ++i)
        if (levels[i].name == name) return i;
    throw ConfigError("unknown level '" + name + "'");
}

CodecConfig CodecConfig::desk() {
    CodecConfig c;
    c.levels = {{"bottom", 4, {64, 16, 0.99, 1e-5}}, {"top", 2, {64, 16, 0.99, 1e-5}}};
    return c;
}

CodecConfig CodecConfig::desk_three_level() {
    CodecConfig c = desk();
    c.levels = {{"bottom", 4, {64, 16, 0.99, 1e-5}},
                {"middle", 2, {64, 16, 0.99, 1e-5}},
                {"top", 2, {64, 16, 0.99, 1e-5}}};
    return c;
}

CodecConfig CodecConfig::paper_imagenet() {
    CodecConfig c;
    c.image_size = 256;
    c.channels = 3;
    c.hidden_units = 128;
    c.residual_units = 64;
    c.residual_layers = 2;
    c.levels = {{"bottom", 4, {512, 64, 0.99, 1e-5}}, {"top", 2, {512, 64, 0.99, 1e-5}}};
    return c;
}

CodecConfig CodecConfig::paper_ffhq() {
    CodecConfig c = paper_imagenet();
    c.image_size = 1024;
    c.levels = {{"bottom", 8, {512, 64, 0.99, 1e-5}},
                {"middle", 2, {512, 64, 0.99, 1e-5}},
                {"top", 2, {512, 64, 0.99, 1e-5}}};
    return c;
}

HierarchicalCodec::HierarchicalCodec(CodecConfig config, Rng& rng) : config_(std::move(config)) {
    config_.validate();
    const auto& c = config_;
    const std::size_t hid = c.hidden_units, half = hid / 2, up_k = c.upsampling_filter_size;
    const std::size_t d = c.levels[0].codebook.dim, nlev = c.levels.size();

    for (std::size_t l = 0; l < nlev; ++l) {
        const auto& level = c.levels[l];
        const std::string p = enc(level);
        const std::size_t stages = layers::stride2_stages(level.downsample);
        for (std::size_t i = 0; i < stages; ++i) {
            const std::size_t in = (l == 0) ? (i == 0 ? c.channels : half) : hid;
            const std::size_t out = (l == 0 && i + 1 < stages) ? half : hid;
            layers::add_conv(params_, p + ".down" + std::to_string(i), in, out, up_k, rng);
        }
        layers::add_conv(params_, p + ".conv", hid, hid, c.encoder_filter_size, rng);
        layers::add_residual_stack(params_, p + ".res", hid, c.residual_units, c.residual_layers,
                                   c.encoder_filter_size, rng);
        const bool top = l + 1 == nlev;
        layers::add_conv(params_, p + ".pre_q", top ? hid : hid + d, d, 1, rng);
        if (!top) {
            const std::size_t up = layers::stride2_stages(c.levels[l + 1].downsample);
            for (std::size_t i = 0; i < up; ++i)
                layers::add_conv_transpose(params_, p + ".cond_up" + std::to_string(i), d, d, up_k, 2, rng);
        }
    }

    std::size_t factor = 1;
    for (std::size_t l = 1; l < nlev; ++l) {
        factor *= c.levels[l].downsample;
        const std::size_t up = layers::stride2_stages(factor);
        for (std::size_t i = 0; i < up; ++i)
            layers::add_conv_transpose(params_, dec(c.levels[l]) + ".up" + std::to_string(i), d, d, up_k, 2, rng);
    }
    layers::add_conv(params_, "dec.conv", nlev * d, hid, c.encoder_filter_size, rng);
    layers::add_residual_stack(params_, "dec.res", hid, c.residual_units, c.residual_layers, c.encoder_filter_size,
                               rng);
    const std::size_t out_stages = layers::stride2_stages(c.levels[0].downsample);
    for (std::size_t i = 0; i < out_stages; ++i) {
        const std::size_t in = i == 0 ? hid : half;
        const std::size_t out = i + 1 == out_stages ? c.channels : half;
        layers::add_conv_transpose(params_, "dec.out" + std::to_string(i), in, out, up_k, 2, rng);
    }

    for (const auto& level : c.levels) {
        codebooks_.push_back(Codebook::gaussian(level.codebook, rng));
        codebooks_.back().set_trainable(c.codebook_update == CodebookUpdate::loss);
    }
}

Tensor HierarchicalCodec::trunk(Tape& tape, std::size_t l, const Tensor& input) const {
    const auto& level = config_.levels[l];
    const std::string p = enc(level);
    const int pad = resample_padding(config_.upsampling_filter_size);
    Tensor h = input;
    const std::size_t stages = layers::stride2_stages(level.downsample);
    for (std::size_t i = 0; i < stages; ++i)
        h = ops::relu(tape, layers::conv(tape, params_, p + ".down" + std::to_string(i), h, 2, pad));
    h = layers::conv(tape, params_, p + ".conv", h);
    h = layers::residual_stack(tape, params_, p + ".res", h, config_.residual_layers);
    return ops::relu(tape, h);
}

LatentHierarchy HierarchicalCodec::encode(Tape& tape, const Tensor& x, QuantizerGradient mode) const {
    const auto& c = config_;
    if (x.rank() != 4 || x.dim(1) != c.channels || x.dim(2) != c.image_size || x.dim(3) != c.image_size)
        throw DimensionError("encode: expected [B," + std::to_string(c.channels) + "," +
                             std::to_string(c.image_size) + "," + std::to_string(c.image_size) + "], got " +
                             shape_str(x.shape()));
    const std::size_t nlev = c.levels.size();
    const int pad = resample_padding(c.upsampling_filter_size);

    std::vector<Tensor> features(nlev);
    features[0] = trunk(tape, 0, x);
    for (std::size_t l = 1; l < nlev; ++l) features[l] = trunk(tape, l, features[l - 1]);

    LatentHierarchy out;
    out.codes.resize(nlev);
    out.quantized.resize(nlev);
    out.pre_quantized.resize(nlev);
    for (std::size_t step = 0; step < nlev; ++step) {
        const std::size_t l = nlev - 1 - step;
        const std::string p = enc(c.levels[l]);
        Tensor input = features[l];
        if (l + 1 < nlev) {
            Tensor up = out.quantized[l + 1];
            const std::size_t stages = layers::stride2_stages(c.levels[l + 1].downsample);
            for (std::size_t i = 0; i < stages; ++i) {
                up = layers::conv_transpose(tape, params_, p + ".cond_up" + std::to_string(i), up, 2, pad);
                if (i + 1 < stages) up = ops::relu(tape, up);
            }
            const Tensor parts[] = {input, up};
            input = ops::concat_channels(tape, parts);
        }
        Tensor z = layers::conv(tape, params_, p + ".pre_q", input);
        Quantized q = quantize(z, codebooks_[l]);
        q.codes.source = c.levels[l].name;
        out.pre_quantized[l] = z;
        out.quantized[l] = mode == QuantizerGradient::straight_through ? straight_through(tape, z, q.vectors)
                                                                        : q.vectors;
        out.codes[l] = std::move(q.codes);
    }
    return out;
}

Tensor HierarchicalCodec::decode(Tape& tape, const LatentHierarchy& latents, const std::vector<bool>& active) const {
    const auto& c = config_;
    const std::size_t nlev = c.levels.size();
    if (latents.quantized.size() != nlev)
        throw ContractError("decode: hierarchy has " + std::to_string(latents.quantized.size()) + " levels, expected " +
                            std::to_string(nlev));
    if (!active.empty() && active.size() != nlev) throw ContractError("decode: active mask has wrong length");
    const int pad = resample_padding(c.upsampling_filter_size);
    const std::size_t d = c.levels[0].codebook.dim;

    std::vector<Tensor> parts;
    std::size_t factor = 1;
    for (std::size_t l = 0; l < nlev; ++l) {
        const Tensor& e = latents.quantized[l];
        if (!e.defined()) throw ContractError("decode: level '" + c.levels[l].name + "' is missing");
        const std::size_t g = c.grid_size(l);
        if (e.rank() != 4 || e.dim(1) != d || e.dim(2) != g || e.dim(3) != g)
            throw DimensionError("decode: level '" + c.levels[l].name + "' has shape " + shape_str(e.shape()));
        if (l > 0) factor *= c.levels[l].downsample;
        const bool on = active.empty() || active[l];
        const std::size_t bottom = c.grid_size(0);
        if (!on) {
            parts.push_back(Tensor::zeros({e.dim(0), d, bottom, bottom}));
            continue;
        }
        Tensor h = e;
        if (l > 0) {
            const std::size_t stages = layers::stride2_stages(factor);
            for (std::size_t i = 0; i < stages; ++i) {
                h = layers::conv_transpose(tape, params_, dec(c.levels[l]) + ".up" + std::to_string(i), h, 2, pad);
                if (i + 1 < stages) h = ops::relu(tape, h);
            }
        }
        parts.push_back(h);
    }
    Tensor h = layers::conv(tape, params_, "dec.conv", ops::concat_channels(tape, parts));
    h = layers::residual_stack(tape, params_, "dec.res", h, c.residual_layers);
    h = ops::relu(tape, h);
    const std::size_t stages = layers::stride2_stages(c.levels[0].downsample);
    for (std::size_t i = 0; i < stages; ++i) {
        h = layers::conv_transpose(tape, params_, "dec.out" + std::to_string(i), h, 2, pad);
        if (i + 1 < stages) h = ops::relu(tape, h);
    }
    return h;
}

Tensor HierarchicalCodec::decode_codes(Tape& tape, const std::vector<CodeGrid>& codes,
                                       const std::vector<bool>& active) const {
    if (codes.size() != levels())
        throw ContractError("decode_codes: got " + std::to_string(codes.size()) + " levels, expected " +
                            std::to_string(levels()));
    LatentHierarchy h;
    h.codes = codes;
    for (std::size_t l = 0; l < codes.size(); ++l) {
        const CodeGrid& g = codes[l];
        const std::size_t size = config_.grid_size(l);
        if (g.height != size || g.width != size)
            throw DimensionError("decode_codes: level '" + config_.levels[l].name + "' grid is " +
                                 std::to_string(g.height) + "x" + std::to_string(g.width) + ", expected " +
                                 std::to_string(size));
        if (g.vocabulary != codebooks_[l].size())
            throw ConfigError("decode_codes: level '" + config_.levels[l].name + "' vocabulary mismatch");
        g.validate();
        Tape lookup_tape(Tape::Mode::inference);
        h.quantized.push_back(lookup(lookup_tape, codebooks_[l], g));
    }
    return decode(tape, h, active);
}

TrainStepResult HierarchicalCodec::train_step(const Tensor& batch, Adam& optimizer) {
    Tape tape;
    LatentHierarchy latents = encode(tape, batch);
    Tensor x_hat = decode(tape, latents);

    std::vector<Tensor> e_q;
    for (const auto& grid_tensor : latents.quantized) e_q.push_back(grid_tensor.detached());
    Tensor loss = vqvae_loss(tape, batch, x_hat, latents.pre_quantized, e_q, config_.beta);
    if (config_.codebook_update == CodebookUpdate::loss)
        for (std::size_t l = 0; l < levels(); ++l)
            loss = ops::add(tape, loss,
                            codebook_loss(tape, latents.pre_quantized[l], lookup(tape, codebooks_[l], latents.codes[l])));

    TrainStepResult result;
    result.loss = loss.item();
    if (!std::isfinite(result.loss)) throw NumericError("train_step: non-finite loss");
    {
        Tape probe(Tape::Mode::inference);
        result.mse = ops::mse(probe, batch, x_hat).item();
    }

    params_.zero_grad();
    for (auto& cb : codebooks_) cb.prototypes().zero_grad();
    tape.backward(loss);
    optimizer.step(params_);
    if (config_.codebook_update == CodebookUpdate::loss) {
        for (std::size_t l = 0; l < levels(); ++l)
            optimizer.update("codebook." + config_.levels[l].name, codebooks_[l].prototypes());
    } else {
        for (std::size_t l = 0; l < levels(); ++l)
            ema_update(codebooks_[l], latents.pre_quantized[l], latents.codes[l]);
    }
    for (std::size_t l = 0; l < levels(); ++l)
        result.perplexity.push_back(codebook_usage(latents.codes[l], codebooks_[l].size()).perplexity);
    return result;
}

Tensor vqvae_loss(Tape& tape, const Tensor& x, const Tensor& x_hat, const std::vector<Tensor>& z,
                  const std::vector<Tensor>& e_q, double beta) {
    if (z.size() != e_q.size()) throw ContractError("vqvae_loss: level count mismatch");
    Tensor loss = ops::mse(tape, x, x_hat);
    for (std::size_t l = 0; l < z.size(); ++l) loss = ops::add(tape, loss, commitment_loss(tape, z[l], e_q[l], beta));
    return loss;
}

}  // namespace hvq
