#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hvq/rng.hpp"
#include "hvq/tensor.hpp"

namespace hvq {

using Code = std::int32_t;

/// Integer code grids for a batch, laid out [batch, height, width].
struct CodeGrid {
    std::size_t batch = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t vocabulary = 0;  // K of the source codebook
    std::vector<Code> indices;
    std::string source;  // level name of the codebook that produced it

    std::size_t positions() const { return height * width; }
    Code at(std::size_t b, std::size_t h, std::size_t w) const { return indices[(b * height + h) * width + w]; }
    Code& at(std::size_t b, std::size_t h, std::size_t w) { return indices[(b * height + h) * width + w]; }

    // Single grid `b` as a batch of one.
    CodeGrid item(std::size_t b) const;
    static CodeGrid stack(const std::vector<CodeGrid>& grids);

    // Throws IndexError / DimensionError when the invariants do not hold.
    void validate() const;

    bool operator==(const CodeGrid& other) const = default;
};

struct CodebookConfig {
    std::size_t size = 64;  // K
    std::size_t dim = 16;   // D
    double decay = 0.99;    // gamma
    double epsilon = 1e-5;
};

/// K prototypes of dimension D with exponential-moving-average statistics.
///
/// Prototypes are refreshed from the statistics as e_i = m_i / N~_i where
/// N~_i = (N_i + eps) / (sum N + K eps) * sum N smooths the counts of codes
/// that have seen little or no data.
class Codebook {
public:
    Codebook() = default;
    Codebook(CodebookConfig config, std::vector<real> prototypes, std::vector<real> counts,
             std::vector<real> sums);

    // N(0,1) prototypes; accumulators start at N_i = 1, m_i = e_i.
    static Codebook gaussian(const CodebookConfig& config, Rng& rng);

    // Copies are deep: a copy never shares prototype storage with its source.
    Codebook(const Codebook& other);
    Codebook& operator=(const Codebook& other);
    Codebook(Codebook&&) = default;
    Codebook& operator=(Codebook&&) = default;

    const CodebookConfig& config() const { return config_; }
    std::size_t size() const { return config_.size; }
    std::size_t dim() const { return config_.dim; }

    // [K, D] prototype matrix. Does not require grad unless the codebook is
    // trained by gradient (see set_trainable).
    const Tensor& prototypes() const { return prototypes_; }
    Tensor& prototypes() { return prototypes_; }
    const std::vector<real>& counts() const { return counts_; }
    const std::vector<real>& sums() const { return sums_; }

    void set_trainable(bool trainable) { prototypes_.set_requires_grad(trainable); }

    std::span<const real> prototype(std::size_t i) const {
        return prototypes_.data().subspan(i * config_.dim, config_.dim);
    }

    bool operator==(const Codebook& other) const;

private:
    friend void ema_update(Codebook&, const Tensor&, const CodeGrid&);

    CodebookConfig config_;
    Tensor prototypes_;
    std::vector<real> counts_;  // N_i
    std::vector<real> sums_;    // m_i, [K, D]
};

struct Quantized {
    CodeGrid codes;
    Tensor vectors;  // [B, D, H, W] selected prototypes, no grad
};

/// Nearest-prototype assignment under squared Euclidean distance; ties
/// resolve to the lowest index.
Quantized quantize(const Tensor& z, const Codebook& codebook);

// Index of the nearest prototype to a single D-vector.
Code nearest_prototype(std::span<const real> vec, const Codebook& codebook);

/// Forward value is exactly e_q; the backward pass copies the incoming
/// gradient unchanged onto z.
Tensor straight_through(Tape& tape, const Tensor& z, const Tensor& e_q);

/// beta * mean(||sg(e_q) - z||^2). Gradient reaches z only.
Tensor commitment_loss(Tape& tape, const Tensor& z, const Tensor& e_q, double beta);

/// mean(||sg(z) - e_q||^2). Gradient reaches e_q only.
Tensor codebook_loss(Tape& tape, const Tensor& z, const Tensor& e_q);

// Prototype lookup that is differentiable w.r.t. the codebook, for gradient-trained codebooks.
Tensor lookup(Tape& tape, const Codebook& codebook, const CodeGrid& codes);

/// One EMA step using the batch z[B,D,H,W] and its assignments:
/// N_i <- gamma N_i + (1 - gamma) n_i, m_i <- gamma m_i + (1 - gamma) sum_j z_ij,
/// then e_i <- m_i / N~_i. gamma == 1 leaves the codebook bit-identical.
void ema_update(Codebook& codebook, const Tensor& z, const CodeGrid& codes);

struct CodebookUsage {
    std::vector<std::size_t> histogram;
    double perplexity = 0;  // exp(entropy) of the empirical code distribution
};

CodebookUsage codebook_usage(const CodeGrid& codes, std::size_t vocabulary);

}  // namespace hvq
