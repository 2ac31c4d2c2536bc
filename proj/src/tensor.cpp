#include "hvq/tensor.hpp"

#include <atomic>
#include <sstream>

namespace hvq {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), real(0), requires_grad);
}

Tensor Tensor::full(Shape shape, real value, bool requires_grad) {
    for (auto e : shape)
        if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    auto node = std::make_shared<TensorNode>();
    node->data.assign(shape_numel(shape), value);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<real> values, bool requires_grad) {
    for (auto e : shape)
        if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    if (shape_numel(shape) != values.size())
        throw DimensionError("shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                             " values");
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(real value, bool requires_grad) { return from({1}, {value}, requires_grad); }

void Tensor::zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), real(0));
}

real Tensor::item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
}

Tensor Tensor::clone() const {
    auto node = std::make_shared<TensorNode>(*node_);
    node->tape_id = 0;
    return Tensor(std::move(node));
}

Tensor Tensor::detached() const {
    auto node = std::make_shared<TensorNode>();
    node->shape = node_->shape;
    node->data = node_->data;
    return Tensor(std::move(node));
}

namespace {
std::atomic<std::uint64_t> next_tape_id{1};
}

Tape::Tape(Mode mode) : id_(next_tape_id.fetch_add(1)), mode_(mode) {}

bool Tape::tracks(std::initializer_list<const Tensor*> inputs) const {
    if (!recording()) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

bool Tape::tracks(std::span<const Tensor> inputs) const {
    if (!recording()) return false;
    for (const Tensor& t : inputs)
        if (t.requires_grad()) return true;
    return false;
}

void Tape::record(Tensor& out, std::function<void()> backward_fn) {
    if (consumed_) throw StateError("cannot record onto a consumed tape");
    out.node()->requires_grad = true;
    out.node()->tape_id = id_;
    ops_.push_back(std::move(backward_fn));
}

void Tape::backward(const Tensor& loss) {
    if (consumed_) throw StateError("backward called on a consumed tape");
    if (loss.numel() != 1) throw ContractError("backward requires a scalar loss, got " + shape_str(loss.shape()));
    if (loss.node()->tape_id != id_) {
        // A loss that never touched a tracked tensor is constant: every gradient is zero.
        if (loss.node()->tape_id == 0 && !loss.requires_grad()) {
            consumed_ = true;
            ops_.clear();
            return;
        }
        throw ContractError("loss was not produced on this tape");
    }
    consumed_ = true;
    loss.node()->ensure_grad()[0] += real(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    ops_.clear();
}

}  // namespace hvq
