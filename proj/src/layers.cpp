#include "hvq/layers.hpp"

namespace hvq::layers {

void add_conv(ParameterSet& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t k, Rng& rng) {
    ps.add_he(name + ".w", {out, in, k, k}, in * k * k, rng);
    ps.add(name + ".b", {out});
}

Tensor conv(Tape& tape, const ParameterSet& ps, const std::string& name, const Tensor& x, int stride, int padding) {
    const Tensor& w = ps.get(name + ".w");
    if (padding < 0) padding = int(w.dim(2) / 2);
    return ops::add_channel_bias(tape, ops::conv2d(tape, x, w, stride, padding), ps.get(name + ".b"));
}

void add_conv_transpose(ParameterSet& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t k,
                        std::size_t stride, Rng& rng) {
    const std::size_t fan_in = std::max<std::size_t>(1, in * k * k / (stride * stride));
    ps.add_he(name + ".w", {in, out, k, k}, fan_in, rng);
    ps.add(name + ".b", {out});
}

Tensor conv_transpose(Tape& tape, const ParameterSet& ps, const std::string& name, const Tensor& x, int stride,
                      int padding) {
    return ops::add_channel_bias(tape, ops::conv_transpose2d(tape, x, ps.get(name + ".w"), stride, padding),
                                 ps.get(name + ".b"));
}

void add_linear(ParameterSet& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
    ps.add_he(name + ".w", {in, out}, in, rng);
    ps.add(name + ".b", {out});
}

Tensor linear(Tape& tape, const ParameterSet& ps, const std::string& name, const Tensor& x) {
    const Tensor& b = ps.get(name + ".b");
    return ops::linear(tape, x, ps.get(name + ".w"), &b);
}

void add_residual_stack(ParameterSet& ps, const std::string& prefix, std::size_t hidden, std::size_t residual,
                        std::size_t layers, std::size_t k, Rng& rng) {
    for (std::size_t i = 0; i < layers; ++i) {
        const std::string name = prefix + "." + std::to_string(i);
        add_conv(ps, name + ".conv_a", hidden, residual, k, rng);
        // Zero-initialised so every block starts as the identity.
        ps.add(name + ".conv_b.w", {hidden, residual, 1, 1});
        ps.add(name + ".conv_b.b", {hidden});
    }
}

Tensor residual_stack(Tape& tape, const ParameterSet& ps, const std::string& prefix, const Tensor& x,
                      std::size_t layers) {
    Tensor h = x;
    for (std::size_t i = 0; i < layers; ++i) {
        const std::string name = prefix + "." + std::to_string(i);
        Tensor r = conv(tape, ps, name + ".conv_a", ops::relu(tape, h));
        r = conv(tape, ps, name + ".conv_b", ops::relu(tape, r));
        h = ops::add(tape, h, r);
    }
    return h;
}

std::size_t stride2_stages(std::size_t factor) {
    if (factor < 2 || (factor & (factor - 1)) != 0)
        throw ConfigError("resampling factor must be a power of two >= 2, got " + std::to_string(factor));
    std::size_t n = 0;
    while (factor > 1) {
        factor >>= 1;
        ++n;
    }
    return n;
}

}  // namespace hvq::layers
