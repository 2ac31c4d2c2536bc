#pragma once

#include <map>
#include <string>
#include <vector>

#include "hvq/rng.hpp"
#include "hvq/tensor.hpp"

namespace hvq {

/// Named trainable tensors of one network, in insertion order.
class ParameterSet {
public:
    // Adds a zero tensor that requires grad. Names must be unique.
    Tensor& add(const std::string& name, Shape shape);
    // He-style Gaussian init, std = sqrt(2 / fan_in).
    Tensor& add_he(const std::string& name, Shape shape, std::size_t fan_in, Rng& rng);
    Tensor& add_normal(const std::string& name, Shape shape, double stddev, Rng& rng);

    const Tensor& get(const std::string& name) const;
    Tensor& get(const std::string& name);
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    std::size_t size() const { return names_.size(); }
    const std::vector<std::string>& names() const { return names_; }
    std::vector<Tensor>& tensors() { return tensors_; }
    const std::vector<Tensor>& tensors() const { return tensors_; }
    std::size_t numel() const;

    void zero_grad();
    // Copies values (not grads) from another set with identical names and shapes.
    void assign(const ParameterSet& other);

private:
    std::vector<std::string> names_;
    std::vector<Tensor> tensors_;
    std::map<std::string, std::size_t> index_;
};

struct AdamConfig {
    double learning_rate = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Adam with bias-corrected moments, one moment pair per parameter name.
class Adam {
public:
    explicit Adam(AdamConfig config = {}) : config_(config) {}

    // Advances the step counter once, then updates every parameter with a grad.
    void step(ParameterSet& params);
    // Updates extra tensors (e.g. gradient-trained codebooks) at the current
    // step count. Call after step(ParameterSet&).
    void update(const std::string& name, Tensor& param);

    const AdamConfig& config() const { return config_; }
    std::uint64_t steps() const { return steps_; }

    // Moment buffers, keyed "<name>.m" / "<name>.v", for checkpointing.
    std::map<std::string, std::vector<real>>& moments() { return moments_; }
    const std::map<std::string, std::vector<real>>& moments() const { return moments_; }
    void set_steps(std::uint64_t steps) { steps_ = steps; }

private:
    AdamConfig config_;
    std::uint64_t steps_ = 0;
    std::map<std::string, std::vector<real>> moments_;
};

}  // namespace hvq
