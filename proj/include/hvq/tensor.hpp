#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "hvq/error.hpp"

namespace hvq {

#ifdef HVQ_SINGLE_PRECISION
using real = float;
#else
using real = double;
#endif

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorNode {
    Shape shape;
    std::vector<real> data;
    std::vector<real> grad;
    bool requires_grad = false;
    std::uint64_t tape_id = 0;  // 0 = leaf (not produced by a tape)

    std::vector<real>& ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), real(0));
        return grad;
    }
};

/// Dense row-major array handle. Copies share storage; use clone() for a deep copy.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, real value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<real> values, bool requires_grad = false);
    static Tensor scalar(real value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<const real> data() const { return node_->data; }
    // Only leaves (parameters, inputs) should be mutated in place.
    std::span<real> mutable_data() { return node_->data; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const real> grad() const { return node_->grad; }
    std::span<real> mutable_grad() { return node_->ensure_grad(); }
    void zero_grad();

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool value) { node_->requires_grad = value; }

    real item() const;
    real operator[](std::size_t i) const { return node_->data[i]; }

    Tensor clone() const;
    Tensor detached() const;  // deep copy without grad tracking

    const std::shared_ptr<TensorNode>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<TensorNode> node_;
};

/// Single-use record of differentiable ops executed during one forward pass.
///
/// Ops append a backward closure when any input requires grad and the tape
/// is recording. backward() replays the closures in exact reverse order and
/// consumes the tape. An inference tape never records.
class Tape {
public:
    enum class Mode { record, inference };

    explicit Tape(Mode mode = Mode::record);
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return mode_ == Mode::record; }
    bool consumed() const { return consumed_; }
    std::uint64_t id() const { return id_; }
    std::size_t size() const { return ops_.size(); }

    // Returns whether the output of an op with these inputs must be tracked.
    bool tracks(std::initializer_list<const Tensor*> inputs) const;
    bool tracks(std::span<const Tensor> inputs) const;

    // Registers `out` as produced on this tape with the given backward closure.
    void record(Tensor& out, std::function<void()> backward_fn);

    void backward(const Tensor& loss);

private:
    std::uint64_t id_;
    Mode mode_;
    bool consumed_ = false;
    std::vector<std::function<void()>> ops_;
};

}  // namespace hvq
