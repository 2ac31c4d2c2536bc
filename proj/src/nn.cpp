#include "hvq/nn.hpp"

#include <cmath>

namespace hvq {

Tensor& ParameterSet::add(const std::string& name, Shape shape) {
    if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
    index_[name] = tensors_.size();
    names_.push_back(name);
    tensors_.push_back(Tensor::zeros(std::move(shape), true));
    return tensors_.back();
}

Tensor& ParameterSet::add_he(const std::string& name, Shape shape, std::size_t fan_in, Rng& rng) {
    return add_normal(name, std::move(shape), std::sqrt(2.0 / double(fan_in)), rng);
}

Tensor& ParameterSet::add_normal(const std::string& name, Shape shape, double stddev, Rng& rng) {
    Tensor& t = add(name, std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.mutable_data()) v = real(dist(rng.engine()));
    return t;
}

const Tensor& ParameterSet::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return tensors_[it->second];
}

Tensor& ParameterSet::get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return tensors_[it->second];
}

std::size_t ParameterSet::numel() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.numel();
    return n;
}

void ParameterSet::zero_grad() {
    for (auto& t : tensors_) t.zero_grad();
}

void ParameterSet::assign(const ParameterSet& other) {
    if (other.names_ != names_) throw ContractError("parameter sets have different layouts");
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
        if (tensors_[i].shape() != other.tensors_[i].shape())
            throw DimensionError("parameter " + names_[i] + " shape mismatch");
        auto src = other.tensors_[i].data();
        std::copy(src.begin(), src.end(), tensors_[i].mutable_data().begin());
    }
}

void Adam::step(ParameterSet& params) {
    ++steps_;
    for (std::size_t i = 0; i < params.size(); ++i) update(params.names()[i], params.tensors()[i]);
}

void Adam::update(const std::string& name, Tensor& p) {
    if (!p.has_grad()) return;
    if (steps_ == 0) throw StateError("Adam::update before the first step");
    const double c1 = 1.0 - std::pow(config_.beta1, double(steps_));
    const double c2 = 1.0 - std::pow(config_.beta2, double(steps_));
    auto& m = moments_[name + ".m"];
    auto& v = moments_[name + ".v"];
    if (m.empty()) {
        m.assign(p.numel(), real(0));
        v.assign(p.numel(), real(0));
    }
    auto g = p.grad();
    auto w = p.mutable_data();
    for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = real(config_.beta1 * m[j] + (1 - config_.beta1) * g[j]);
        v[j] = real(config_.beta2 * v[j] + (1 - config_.beta2) * g[j] * g[j]);
        const double mhat = m[j] / c1, vhat = v[j] / c2;
        w[j] -= real(config_.learning_rate * mhat / (std::sqrt(vhat) + config_.epsilon));
    }
}

}  // namespace hvq
