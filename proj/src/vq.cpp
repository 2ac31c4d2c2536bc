#include "hvq/vq.hpp"

#include <algorithm>
#include <cmath>

#include "hvq/ops.hpp"

namespace hvq {

CodeGrid CodeGrid::item(std::size_t b) const {
    if (b >= batch) throw IndexError("CodeGrid::item: batch index out of range");
    CodeGrid out{1, height, width, vocabulary, {}, source};
    out.indices.assign(indices.begin() + long(b * positions()), indices.begin() + long((b + 1) * positions()));
    return out;
}

CodeGrid CodeGrid::stack(const std::vector<CodeGrid>& grids) {
    if (grids.empty()) throw ContractError("CodeGrid::stack: no grids");
    CodeGrid out = grids.front();
    out.batch = 0;
    out.indices.clear();
    for (const auto& g : grids) {
        if (g.height != out.height || g.width != out.width || g.vocabulary != out.vocabulary)
            throw DimensionError("CodeGrid::stack: grids differ in shape or vocabulary");
        out.batch += g.batch;
        out.indices.insert(out.indices.end(), g.indices.begin(), g.indices.end());
    }
    return out;
}

void CodeGrid::validate() const {
    if (indices.size() != batch * height * width)
        throw DimensionError("code grid holds " + std::to_string(indices.size()) + " indices, expected " +
                             std::to_string(batch * height * width));
    for (Code c : indices)
        if (c < 0 || std::size_t(c) >= vocabulary)
            throw IndexError("code " + std::to_string(c) + " outside vocabulary " + std::to_string(vocabulary));
}

Codebook::Codebook(CodebookConfig config, std::vector<real> prototypes, std::vector<real> counts,
                   std::vector<real> sums)
    : config_(config), counts_(std::move(counts)), sums_(std::move(sums)) {
    if (config_.size == 0 || config_.dim == 0) throw ConfigError("codebook size and dimension must be positive");
    if (config_.decay < 0 || config_.decay > 1) throw ConfigError("codebook decay must lie in [0,1]");
    if (config_.epsilon <= 0) throw ConfigError("codebook epsilon must be positive");
    const std::size_t n = config_.size * config_.dim;
    if (prototypes.size() != n || sums_.size() != n || counts_.size() != config_.size)
        throw DimensionError("codebook buffers do not match K x D");
    prototypes_ = Tensor::from({config_.size, config_.dim}, std::move(prototypes));
}

Codebook Codebook::gaussian(const CodebookConfig& config, Rng& rng) {
    std::vector<real> e(config.size * config.dim);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& v : e) v = real(dist(rng.engine()));
    std::vector<real> sums = e;
    return Codebook(config, std::move(e), std::vector<real>(config.size, real(1)), std::move(sums));
}

Codebook::Codebook(const Codebook& other)
    : config_(other.config_),
      prototypes_(other.prototypes_.defined() ? other.prototypes_.clone() : Tensor()),
      counts_(other.counts_),
      sums_(other.sums_) {}

Codebook& Codebook::operator=(const Codebook& other) {
    if (this != &other) *this = Codebook(other);
    return *this;
}

bool Codebook::operator==(const Codebook& other) const {
    return config_.size == other.config_.size && config_.dim == other.config_.dim &&
           config_.decay == other.config_.decay && config_.epsilon == other.config_.epsilon &&
           std::equal(prototypes_.data().begin(), prototypes_.data().end(), other.prototypes_.data().begin(),
                      other.prototypes_.data().end()) &&
           counts_ == other.counts_ && sums_ == other.sums_;
}

Code nearest_prototype(std::span<const real> vec, const Codebook& codebook) {
    const std::size_t d = codebook.dim();
    auto e = codebook.prototypes().data();
    Code best = 0;
    real best_dist = 0;
    for (std::size_t k = 0; k < codebook.size(); ++k) {
        real dist = 0;
        const real* row = e.data() + k * d;
        for (std::size_t j = 0; j < d; ++j) {
            const real diff = vec[j] - row[j];
            dist += diff * diff;
        }
        if (k == 0 || dist < best_dist) {
            best_dist = dist;
            best = Code(k);
        }
    }
    return best;
}

Quantized quantize(const Tensor& z, const Codebook& codebook) {
    if (z.rank() != 4) throw DimensionError("quantize: expected [B,D,H,W], got " + shape_str(z.shape()));
    const std::size_t batch = z.dim(0), d = z.dim(1), h = z.dim(2), w = z.dim(3), inner = h * w;
    if (d != codebook.dim())
        throw DimensionError("quantize: input has " + std::to_string(d) + " channels, codebook dimension is " +
                             std::to_string(codebook.dim()));
    Quantized out;
    out.codes = CodeGrid{batch, h, w, codebook.size(), std::vector<Code>(batch * inner), {}};
    out.vectors = Tensor::zeros({batch, d, h, w});
    auto q = out.vectors.mutable_data();
    auto zd = z.data();
    std::vector<real> vec(d);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t p = 0; p < inner; ++p) {
            for (std::size_t c = 0; c < d; ++c) vec[c] = zd[(b * d + c) * inner + p];
            const Code k = nearest_prototype(vec, codebook);
            out.codes.indices[b * inner + p] = k;
            auto proto = codebook.prototype(std::size_t(k));
            for (std::size_t c = 0; c < d; ++c) q[(b * d + c) * inner + p] = proto[c];
        }
    return out;
}

Tensor straight_through(Tape& tape, const Tensor& z, const Tensor& e_q) {
    if (z.shape() != e_q.shape())
        throw DimensionError("straight_through: " + shape_str(z.shape()) + " vs " + shape_str(e_q.shape()));
    Tensor out = e_q.detached();
    if (tape.tracks({&z})) {
        tape.record(out, [z, on = out.node()] {
            if (on->grad.empty() || !z.requires_grad()) return;
            auto& gz = z.node()->ensure_grad();
            for (std::size_t i = 0; i < gz.size(); ++i) gz[i] += on->grad[i];
        });
    }
    return out;
}

Tensor commitment_loss(Tape& tape, const Tensor& z, const Tensor& e_q, double beta) {
    if (beta < 0) throw ContractError("commitment_loss: beta must be >= 0");
    if (z.shape() != e_q.shape())
        throw DimensionError("commitment_loss: " + shape_str(z.shape()) + " vs " + shape_str(e_q.shape()));
    return ops::scale(tape, ops::mse(tape, ops::stop_gradient(tape, e_q), z), real(beta));
}

Tensor codebook_loss(Tape& tape, const Tensor& z, const Tensor& e_q) {
    if (z.shape() != e_q.shape())
        throw DimensionError("codebook_loss: " + shape_str(z.shape()) + " vs " + shape_str(e_q.shape()));
    return ops::mse(tape, ops::stop_gradient(tape, z), e_q);
}

Tensor lookup(Tape& tape, const Codebook& codebook, const CodeGrid& codes) {
    return ops::embedding(tape, codebook.prototypes(), codes.indices, codes.batch, codes.height, codes.width);
}

void ema_update(Codebook& cb, const Tensor& z, const CodeGrid& codes) {
    if (z.rank() != 4 || z.dim(1) != cb.dim() || z.dim(0) != codes.batch || z.dim(2) != codes.height ||
        z.dim(3) != codes.width)
        throw DimensionError("ema_update: batch " + shape_str(z.shape()) + " does not match codes");
    const double gamma = cb.config_.decay;
    if (gamma == 1.0) return;

    const std::size_t k_size = cb.size(), d = cb.dim(), inner = codes.positions();
    std::vector<double> n(k_size, 0.0), s(k_size * d, 0.0);
    auto zd = z.data();
    for (std::size_t b = 0; b < codes.batch; ++b)
        for (std::size_t p = 0; p < inner; ++p) {
            const Code k = codes.indices[b * inner + p];
            if (k < 0 || std::size_t(k) >= k_size) throw IndexError("ema_update: code out of range");
            n[std::size_t(k)] += 1;
            for (std::size_t c = 0; c < d; ++c) s[std::size_t(k) * d + c] += zd[(b * d + c) * inner + p];
        }

    double total = 0;
    for (std::size_t i = 0; i < k_size; ++i) {
        cb.counts_[i] = real(cb.counts_[i] * gamma + n[i] * (1 - gamma));
        total += cb.counts_[i];
        for (std::size_t c = 0; c < d; ++c)
            cb.sums_[i * d + c] = real(cb.sums_[i * d + c] * gamma + s[i * d + c] * (1 - gamma));
    }
    if (total <= 0) return;

    const double eps = cb.config_.epsilon;
    auto e = cb.prototypes_.mutable_data();
    for (std::size_t i = 0; i < k_size; ++i) {
        const double smoothed = (cb.counts_[i] + eps) / (total + double(k_size) * eps) * total;
        for (std::size_t c = 0; c < d; ++c) e[i * d + c] = real(cb.sums_[i * d + c] / smoothed);
    }
}

CodebookUsage codebook_usage(const CodeGrid& codes, std::size_t vocabulary) {
    CodebookUsage usage;
    usage.histogram.assign(vocabulary, 0);
    for (Code c : codes.indices) {
        if (c < 0 || std::size_t(c) >= vocabulary) throw IndexError("codebook_usage: code out of range");
        ++usage.histogram[std::size_t(c)];
    }
    const double total = double(codes.indices.size());
    double entropy = 0;
    if (total > 0)
        for (std::size_t count : usage.histogram)
            if (count) {
                const double p = double(count) / total;
                entropy -= p * std::log(p);
            }
    usage.perplexity = std::exp(entropy);
    return usage;
}

}  // namespace hvq
