#include "hvq/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

namespace hvq::ops {

namespace {

using NodePtr = std::shared_ptr<TensorNode>;
using MatR = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

Tensor make_out(Shape shape) {
    auto node = std::make_shared<TensorNode>();
    node->data.assign(shape_numel(shape), real(0));
    node->shape = std::move(shape);
    return Tensor(std::move(node));
}

void check_finite(const Tensor& t, const char* op) {
    for (real v : t.data())
        if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite output");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (t.rank() != rank)
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                             shape_str(t.shape()));
}

// Returns the upstream gradient of `out`, or nullptr if nothing reached it.
const std::vector<real>* upstream(const NodePtr& out) { return out->grad.empty() ? nullptr : &out->grad; }

// Gradient sink for an input, or nullptr if the input is not tracked.
std::vector<real>* sink(const Tensor& t) { return t.requires_grad() ? &t.node()->ensure_grad() : nullptr; }

template <typename Fwd, typename Bwd>
Tensor unary(Tape& tape, const Tensor& a, const char* name, Fwd fwd, Bwd bwd) {
    Tensor out = make_out(a.shape());
    auto& o = out.node()->data;
    auto x = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = fwd(x[i]);
    check_finite(out, name);
    if (tape.tracks({&a})) {
        tape.record(out, [a, on = out.node(), bwd] {
            auto* g = upstream(on);
            auto* ga = sink(a);
            if (!g || !ga) return;
            auto x = a.data();
            for (std::size_t i = 0; i < g->size(); ++i) (*ga)[i] += (*g)[i] * bwd(x[i], on->data[i]);
        });
    }
    return out;
}

struct ConvGeom {
    std::size_t channels, height, width;  // input image
    std::size_t k;
    int stride, padding;
    std::size_t out_h, out_w;
};

// col[(c*k + ki)*k + kj, oh*out_w + ow] = img[c, oh*s - p + ki, ow*s - p + kj]
void im2col(const real* img, const ConvGeom& g, real* col) {
    const std::size_t hw = g.out_h * g.out_w;
    for (std::size_t c = 0; c < g.channels; ++c)
        for (std::size_t ki = 0; ki < g.k; ++ki)
            for (std::size_t kj = 0; kj < g.k; ++kj) {
                real* row = col + ((c * g.k + ki) * g.k + kj) * hw;
                for (std::size_t oh = 0; oh < g.out_h; ++oh) {
                    const long ih = long(oh) * g.stride - g.padding + long(ki);
                    real* dst = row + oh * g.out_w;
                    if (ih < 0 || ih >= long(g.height)) {
                        std::fill(dst, dst + g.out_w, real(0));
                        continue;
                    }
                    const real* src = img + (c * g.height + std::size_t(ih)) * g.width;
                    for (std::size_t ow = 0; ow < g.out_w; ++ow) {
                        const long iw = long(ow) * g.stride - g.padding + long(kj);
                        dst[ow] = (iw < 0 || iw >= long(g.width)) ? real(0) : src[iw];
                    }
                }
            }
}

// Adjoint of im2col: scatter-add col back into img.
void col2im(const real* col, const ConvGeom& g, real* img) {
    const std::size_t hw = g.out_h * g.out_w;
    for (std::size_t c = 0; c < g.channels; ++c)
        for (std::size_t ki = 0; ki < g.k; ++ki)
            for (std::size_t kj = 0; kj < g.k; ++kj) {
                const real* row = col + ((c * g.k + ki) * g.k + kj) * hw;
                for (std::size_t oh = 0; oh < g.out_h; ++oh) {
                    const long ih = long(oh) * g.stride - g.padding + long(ki);
                    if (ih < 0 || ih >= long(g.height)) continue;
                    real* dst = img + (c * g.height + std::size_t(ih)) * g.width;
                    const real* src = row + oh * g.out_w;
                    for (std::size_t ow = 0; ow < g.out_w; ++ow) {
                        const long iw = long(ow) * g.stride - g.padding + long(kj);
                        if (iw >= 0 && iw < long(g.width)) dst[iw] += src[ow];
                    }
                }
            }
}

void check_conv_args(const Tensor& x, const Tensor& kernel, int stride, int padding, const char* op) {
    require_rank(x, 4, op);
    require_rank(kernel, 4, op);
    if (kernel.dim(2) != kernel.dim(3)) throw DimensionError(std::string(op) + ": kernel must be square");
    if (stride < 1) throw ContractError(std::string(op) + ": stride must be >= 1");
    if (padding < 0) throw ContractError(std::string(op) + ": padding must be >= 0");
}

}  // namespace

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = make_out(a.shape());
    auto& o = out.node()->data;
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] + b[i];
    check_finite(out, "add");
    if (tape.tracks({&a, &b})) {
        tape.record(out, [a, b, on = out.node()] {
            auto* g = upstream(on);
            if (!g) return;
            if (auto* ga = sink(a))
                for (std::size_t i = 0; i < g->size(); ++i) (*ga)[i] += (*g)[i];
            if (auto* gb = sink(b))
                for (std::size_t i = 0; i < g->size(); ++i) (*gb)[i] += (*g)[i];
        });
    }
    return out;
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out = make_out(a.shape());
    auto& o = out.node()->data;
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] - b[i];
    check_finite(out, "sub");
    if (tape.tracks({&a, &b})) {
        tape.record(out, [a, b, on = out.node()] {
            auto* g = upstream(on);
            if (!g) return;
            if (auto* ga = sink(a))
                for (std::size_t i = 0; i < g->size(); ++i) (*ga)[i] += (*g)[i];
            if (auto* gb = sink(b))
                for (std::size_t i = 0; i < g->size(); ++i) (*gb)[i] -= (*g)[i];
        });
    }
    return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out = make_out(a.shape());
    auto& o = out.node()->data;
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * b[i];
    check_finite(out, "mul");
    if (tape.tracks({&a, &b})) {
        tape.record(out, [a, b, on = out.node()] {
            auto* g = upstream(on);
            if (!g) return;
            if (auto* ga = sink(a))
                for (std::size_t i = 0; i < g->size(); ++i) (*ga)[i] += (*g)[i] * b[i];
            if (auto* gb = sink(b))
                for (std::size_t i = 0; i < g->size(); ++i) (*gb)[i] += (*g)[i] * a[i];
        });
    }
    return out;
}

Tensor scale(Tape& tape, const Tensor& a, real factor) {
    return unary(
        tape, a, "scale", [factor](real x) { return factor * x; }, [factor](real, real) { return factor; });
}

Tensor square(Tape& tape, const Tensor& a) {
    return unary(
        tape, a, "square", [](real x) { return x * x; }, [](real x, real) { return 2 * x; });
}

Tensor relu(Tape& tape, const Tensor& a) {
    return unary(
        tape, a, "relu", [](real x) { return x < 0 ? real(0) : x; },
        [](real x, real) { return x > 0 ? real(1) : real(0); });
}

Tensor tanh(Tape& tape, const Tensor& a) {
    return unary(
        tape, a, "tanh", [](real x) { return std::tanh(x); }, [](real, real y) { return 1 - y * y; });
}

Tensor sigmoid(Tape& tape, const Tensor& a) {
    return unary(
        tape, a, "sigmoid", [](real x) { return 1 / (1 + std::exp(-x)); },
        [](real, real y) { return y * (1 - y); });
}

Tensor stop_gradient(Tape&, const Tensor& a) { return a.detached(); }

Tensor sum(Tape& tape, const Tensor& a) {
    real acc = 0;
    for (real v : a.data()) acc += v;
    Tensor out = make_out({1});
    out.node()->data[0] = acc;
    check_finite(out, "sum");
    if (tape.tracks({&a})) {
        tape.record(out, [a, on = out.node()] {
            auto* g = upstream(on);
            auto* ga = sink(a);
            if (!g || !ga) return;
            for (auto& v : *ga) v += (*g)[0];
        });
    }
    return out;
}

Tensor mean(Tape& tape, const Tensor& a) { return scale(tape, sum(tape, a), real(1) / real(a.numel())); }

Tensor mse(Tape& tape, const Tensor& a, const Tensor& b) { return mean(tape, square(tape, sub(tape, a, b))); }

Tensor reshape(Tape& tape, const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    Tensor out = make_out(std::move(shape));
    out.node()->data = a.node()->data;
    if (tape.tracks({&a})) {
        tape.record(out, [a, on = out.node()] {
            auto* g = upstream(on);
            auto* ga = sink(a);
            if (!g || !ga) return;
            for (std::size_t i = 0; i < g->size(); ++i) (*ga)[i] += (*g)[i];
        });
    }
    return out;
}

Tensor add_channel_bias(Tape& tape, const Tensor& x, const Tensor& bias) {
    if (x.rank() < 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1))
        throw DimensionError("add_channel_bias: " + shape_str(x.shape()) + " + " + shape_str(bias.shape()));
    const std::size_t batch = x.dim(0), channels = x.dim(1), inner = x.numel() / (batch * channels);
    Tensor out = make_out(x.shape());
    auto& o = out.node()->data;
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t base = (b * channels + c) * inner;
            for (std::size_t i = 0; i < inner; ++i) o[base + i] = x[base + i] + bias[c];
        }
    check_finite(out, "add_channel_bias");
    if (tape.tracks({&x, &bias})) {
        tape.record(out, [x, bias, on = out.node(), batch, channels, inner] {
            auto* g = upstream(on);
            if (!g) return;
            if (auto* gx = sink(x))
                for (std::size_t i = 0; i < g->size(); ++i) (*gx)[i] += (*g)[i];
            if (auto* gb = sink(bias))
                for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t c = 0; c < channels; ++c) {
                        const std::size_t base = (b * channels + c) * inner;
                        real acc = 0;
                        for (std::size_t i = 0; i < inner; ++i) acc += (*g)[base + i];
                        (*gb)[c] += acc;
                    }
        });
    }
    return out;
}

Tensor add_batch_channel(Tape& tape, const Tensor& x, const Tensor& v) {
    if (x.rank() != 4 || v.rank() != 2 || v.dim(0) != x.dim(0) || v.dim(1) != x.dim(1))
        throw DimensionError("add_batch_channel: " + shape_str(x.shape()) + " + " + shape_str(v.shape()));
    const std::size_t rows = x.dim(0) * x.dim(1), inner = x.dim(2) * x.dim(3);
    Tensor out = make_out(x.shape());
    auto& o = out.node()->data;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < inner; ++i) o[r * inner + i] = x[r * inner + i] + v[r];
    check_finite(out, "add_batch_channel");
    if (tape.tracks({&x, &v})) {
        tape.record(out, [x, v, on = out.node(), rows, inner] {
            auto* g = upstream(on);
            if (!g) return;
            if (auto* gx = sink(x))
                for (std::size_t i = 0; i < g->size(); ++i) (*gx)[i] += (*g)[i];
            if (auto* gv = sink(v))
                for (std::size_t r = 0; r < rows; ++r) {
                    real acc = 0;
                    for (std::size_t i = 0; i < inner; ++i) acc += (*g)[r * inner + i];
                    (*gv)[r] += acc;
                }
        });
    }
    return out;
}

Tensor add_broadcast_batch(Tape& tape, const Tensor& x, const Tensor& y) {
    if (x.rank() != y.rank() + 1 || !std::equal(y.shape().begin(), y.shape().end(), x.shape().begin() + 1))
        throw DimensionError("add_broadcast_batch: " + shape_str(x.shape()) + " + " + shape_str(y.shape()));
    const std::size_t batch = x.dim(0), inner = y.numel();
    Tensor out = make_out(x.shape());
    auto& o = out.node()->data;
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < inner; ++i) o[b * inner + i] = x[b * inner + i] + y[i];
    check_finite(out, "add_broadcast_batch");
    if (tape.tracks({&x, &y})) {
        tape.record(out, [x, y, on = out.node(), batch, inner] {
            auto* g = upstream(on);
            if (!g) return;
            if (auto* gx = sink(x))
                for (std::size_t i = 0; i < g->size(); ++i) (*gx)[i] += (*g)[i];
            if (auto* gy = sink(y))
                for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t i = 0; i < inner; ++i) (*gy)[i] += (*g)[b * inner + i];
        });
    }
    return out;
}

Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& kernel, int stride, int padding) {
    check_conv_args(x, kernel, stride, padding, "conv2d");
    if (kernel.dim(1) != x.dim(1))
        throw DimensionError("conv2d: input has " + std::to_string(x.dim(1)) + " channels, kernel expects " +
                             std::to_string(kernel.dim(1)));
    const std::size_t k = kernel.dim(2);
    const long padded_h = long(x.dim(2)) + 2 * padding, padded_w = long(x.dim(3)) + 2 * padding;
    if (long(k) > padded_h || long(k) > padded_w) throw DimensionError("conv2d: kernel larger than padded input");
    ConvGeom g{x.dim(1), x.dim(2), x.dim(3), k, stride, padding, std::size_t((padded_h - long(k)) / stride + 1),
               std::size_t((padded_w - long(k)) / stride + 1)};
    const std::size_t batch = x.dim(0), out_c = kernel.dim(0), rows = g.channels * k * k, hw = g.out_h * g.out_w;

    Tensor out = make_out({batch, out_c, g.out_h, g.out_w});
    std::vector<real> col(rows * hw);
    CMapR w(kernel.data().data(), long(out_c), long(rows));
    for (std::size_t b = 0; b < batch; ++b) {
        im2col(x.data().data() + b * g.channels * g.height * g.width, g, col.data());
        MapR o(out.node()->data.data() + b * out_c * hw, long(out_c), long(hw));
        o.noalias() = w * CMapR(col.data(), long(rows), long(hw));
    }
    check_finite(out, "conv2d");

    if (tape.tracks({&x, &kernel})) {
        tape.record(out, [x, kernel, on = out.node(), g, batch, out_c, rows, hw] {
            auto* gout = upstream(on);
            if (!gout) return;
            auto* gx = sink(x);
            auto* gk = sink(kernel);
            std::vector<real> col(rows * hw);
            CMapR w(kernel.data().data(), long(out_c), long(rows));
            const std::size_t in_size = g.channels * g.height * g.width;
            for (std::size_t b = 0; b < batch; ++b) {
                CMapR go(gout->data() + b * out_c * hw, long(out_c), long(hw));
                if (gk) {
                    im2col(x.data().data() + b * in_size, g, col.data());
                    MapR(gk->data(), long(out_c), long(rows)).noalias() +=
                        go * CMapR(col.data(), long(rows), long(hw)).transpose();
                }
                if (gx) {
                    MapR(col.data(), long(rows), long(hw)).noalias() = w.transpose() * go;
                    col2im(col.data(), g, gx->data() + b * in_size);
                }
            }
        });
    }
    return out;
}

Tensor conv_transpose2d(Tape& tape, const Tensor& x, const Tensor& kernel, int stride, int padding) {
    check_conv_args(x, kernel, stride, padding, "conv_transpose2d");
    if (kernel.dim(0) != x.dim(1))
        throw DimensionError("conv_transpose2d: input has " + std::to_string(x.dim(1)) +
                             " channels, kernel expects " + std::to_string(kernel.dim(0)));
    const std::size_t k = kernel.dim(2);
    const long oh = (long(x.dim(2)) - 1) * stride - 2 * padding + long(k);
    const long ow = (long(x.dim(3)) - 1) * stride - 2 * padding + long(k);
    if (oh < 1 || ow < 1) throw DimensionError("conv_transpose2d: empty output");
    const std::size_t batch = x.dim(0), in_c = x.dim(1), out_c = kernel.dim(1);
    // Geometry of the forward conv this op is the adjoint of: image = output, conv output = input.
    ConvGeom g{out_c, std::size_t(oh), std::size_t(ow), k, stride, padding, x.dim(2), x.dim(3)};
    const std::size_t rows = out_c * k * k, hw = g.out_h * g.out_w, out_size = out_c * g.height * g.width;

    Tensor out = make_out({batch, out_c, g.height, g.width});
    std::vector<real> col(rows * hw);
    CMapR w(kernel.data().data(), long(in_c), long(rows));
    for (std::size_t b = 0; b < batch; ++b) {
        MapR(col.data(), long(rows), long(hw)).noalias() =
            w.transpose() * CMapR(x.data().data() + b * in_c * hw, long(in_c), long(hw));
        col2im(col.data(), g, out.node()->data.data() + b * out_size);
    }
    check_finite(out, "conv_transpose2d");

    if (tape.tracks({&x, &kernel})) {
        tape.record(out, [x, kernel, on = out.node(), g, batch, in_c, rows, hw, out_size] {
            auto* gout = upstream(on);
            if (!gout) return;
            auto* gx = sink(x);
            auto* gk = sink(kernel);
            std::vector<real> col(rows * hw);
            CMapR w(kernel.data().data(), long(in_c), long(rows));
            for (std::size_t b = 0; b < batch; ++b) {
                im2col(gout->data() + b * out_size, g, col.data());
                CMapR c(col.data(), long(rows), long(hw));
                if (gx) MapR(gx->data() + b * in_c * hw, long(in_c), long(hw)).noalias() += w * c;
                if (gk)
                    MapR(gk->data(), long(in_c), long(rows)).noalias() +=
                        CMapR(x.data().data() + b * in_c * hw, long(in_c), long(hw)) * c.transpose();
            }
        });
    }
    return out;
}

Tensor concat_channels(Tape& tape, std::span<const Tensor> parts) {
    if (parts.empty()) throw ContractError("concat_channels: no inputs");
    const Tensor& first = parts.front();
    require_rank(first, 4, "concat_channels");
    std::size_t channels = 0;
    for (const Tensor& p : parts) {
        require_rank(p, 4, "concat_channels");
        if (p.dim(0) != first.dim(0) || p.dim(2) != first.dim(2) || p.dim(3) != first.dim(3))
            throw DimensionError("concat_channels: " + shape_str(p.shape()) + " vs " + shape_str(first.shape()));
        channels += p.dim(1);
    }
    const std::size_t batch = first.dim(0), inner = first.dim(2) * first.dim(3);
    Tensor out = make_out({batch, channels, first.dim(2), first.dim(3)});
    auto& o = out.node()->data;
    std::size_t offset = 0;
    for (const Tensor& p : parts) {
        const std::size_t pc = p.dim(1);
        for (std::size_t b = 0; b < batch; ++b)
            std::copy_n(p.data().data() + b * pc * inner, pc * inner, o.data() + (b * channels + offset) * inner);
        offset += pc;
    }
    if (tape.tracks(parts)) {
        std::vector<Tensor> inputs(parts.begin(), parts.end());
        tape.record(out, [inputs, on = out.node(), batch, channels, inner] {
            auto* g = upstream(on);
            if (!g) return;
            std::size_t offset = 0;
            for (const Tensor& p : inputs) {
                const std::size_t pc = p.dim(1);
                if (auto* gp = sink(p))
                    for (std::size_t b = 0; b < batch; ++b)
                        for (std::size_t i = 0; i < pc * inner; ++i)
                            (*gp)[b * pc * inner + i] += (*g)[(b * channels + offset) * inner + i];
                offset += pc;
            }
        });
    }
    return out;
}

Tensor slice_channels(Tape& tape, const Tensor& x, std::size_t start, std::size_t count) {
    require_rank(x, 4, "slice_channels");
    if (count == 0 || start + count > x.dim(1)) throw DimensionError("slice_channels: range out of bounds");
    const std::size_t batch = x.dim(0), channels = x.dim(1), inner = x.dim(2) * x.dim(3);
    Tensor out = make_out({batch, count, x.dim(2), x.dim(3)});
    auto& o = out.node()->data;
    for (std::size_t b = 0; b < batch; ++b)
        std::copy_n(x.data().data() + (b * channels + start) * inner, count * inner, o.data() + b * count * inner);
    if (tape.tracks({&x})) {
        tape.record(out, [x, on = out.node(), batch, channels, inner, start, count] {
            auto* g = upstream(on);
            auto* gx = sink(x);
            if (!g || !gx) return;
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t i = 0; i < count * inner; ++i)
                    (*gx)[(b * channels + start) * inner + i] += (*g)[b * count * inner + i];
        });
    }
    return out;
}

Tensor embedding(Tape& tape, const Tensor& table, std::span<const Index> indices, std::size_t batch,
                 std::size_t height, std::size_t width) {
    require_rank(table, 2, "embedding");
    const std::size_t inner = height * width;
    if (indices.size() != batch * inner) throw DimensionError("embedding: index count does not match grid");
    const std::size_t vocab = table.dim(0), channels = table.dim(1);
    for (Index i : indices)
        if (i < 0 || std::size_t(i) >= vocab) throw IndexError("embedding: index " + std::to_string(i) + " out of range");
    Tensor out = make_out({batch, channels, height, width});
    auto& o = out.node()->data;
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t p = 0; p < inner; ++p) {
            const real* row = table.data().data() + std::size_t(indices[b * inner + p]) * channels;
            for (std::size_t c = 0; c < channels; ++c) o[(b * channels + c) * inner + p] = row[c];
        }
    if (tape.tracks({&table})) {
        std::vector<Index> idx(indices.begin(), indices.end());
        tape.record(out, [table, idx = std::move(idx), on = out.node(), batch, channels, inner] {
            auto* g = upstream(on);
            auto* gt = sink(table);
            if (!g || !gt) return;
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t p = 0; p < inner; ++p) {
                    real* row = gt->data() + std::size_t(idx[b * inner + p]) * channels;
                    for (std::size_t c = 0; c < channels; ++c) row[c] += (*g)[(b * channels + c) * inner + p];
                }
        });
    }
    return out;
}

Tensor embedding_rows(Tape& tape, const Tensor& table, std::span<const Index> indices) {
    require_rank(table, 2, "embedding_rows");
    const std::size_t vocab = table.dim(0), channels = table.dim(1);
    if (indices.empty()) throw DimensionError("embedding_rows: no indices");
    for (Index i : indices)
        if (i < 0 || std::size_t(i) >= vocab)
            throw IndexError("embedding_rows: index " + std::to_string(i) + " out of range");
    Tensor out = make_out({indices.size(), channels});
    auto& o = out.node()->data;
    for (std::size_t n = 0; n < indices.size(); ++n)
        std::copy_n(table.data().data() + std::size_t(indices[n]) * channels, channels, o.data() + n * channels);
    if (tape.tracks({&table})) {
        std::vector<Index> idx(indices.begin(), indices.end());
        tape.record(out, [table, idx = std::move(idx), on = out.node(), channels] {
            auto* g = upstream(on);
            auto* gt = sink(table);
            if (!g || !gt) return;
            for (std::size_t n = 0; n < idx.size(); ++n)
                for (std::size_t c = 0; c < channels; ++c)
                    (*gt)[std::size_t(idx[n]) * channels + c] += (*g)[n * channels + c];
        });
    }
    return out;
}

Tensor nchw_to_nlc(Tape& tape, const Tensor& x) {
    require_rank(x, 4, "nchw_to_nlc");
    const std::size_t batch = x.dim(0), channels = x.dim(1), inner = x.dim(2) * x.dim(3);
    Tensor out = make_out({batch, inner, channels});
    auto& o = out.node()->data;
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t p = 0; p < inner; ++p)
                o[(b * inner + p) * channels + c] = x[(b * channels + c) * inner + p];
    if (tape.tracks({&x})) {
        tape.record(out, [x, on = out.node(), batch, channels, inner] {
            auto* g = upstream(on);
            auto* gx = sink(x);
            if (!g || !gx) return;
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t c = 0; c < channels; ++c)
                    for (std::size_t p = 0; p < inner; ++p)
                        (*gx)[(b * channels + c) * inner + p] += (*g)[(b * inner + p) * channels + c];
        });
    }
    return out;
}

Tensor nlc_to_nchw(Tape& tape, const Tensor& x, std::size_t height, std::size_t width) {
    require_rank(x, 3, "nlc_to_nchw");
    const std::size_t batch = x.dim(0), inner = x.dim(1), channels = x.dim(2);
    if (inner != height * width) throw DimensionError("nlc_to_nchw: sequence length does not match grid");
    Tensor out = make_out({batch, channels, height, width});
    auto& o = out.node()->data;
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t p = 0; p < inner; ++p)
                o[(b * channels + c) * inner + p] = x[(b * inner + p) * channels + c];
    if (tape.tracks({&x})) {
        tape.record(out, [x, on = out.node(), batch, channels, inner] {
            auto* g = upstream(on);
            auto* gx = sink(x);
            if (!g || !gx) return;
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t c = 0; c < channels; ++c)
                    for (std::size_t p = 0; p < inner; ++p)
                        (*gx)[(b * inner + p) * channels + c] += (*g)[(b * channels + c) * inner + p];
        });
    }
    return out;
}

Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor* bias) {
    require_rank(w, 2, "linear");
    const std::size_t cin = w.dim(0), cout = w.dim(1);
    if (x.rank() < 1 || x.shape().back() != cin)
        throw DimensionError("linear: " + shape_str(x.shape()) + " @ " + shape_str(w.shape()));
    if (bias && (bias->rank() != 1 || bias->dim(0) != cout)) throw DimensionError("linear: bias shape");
    const std::size_t rows = x.numel() / cin;
    Shape shape = x.shape();
    shape.back() = cout;
    Tensor out = make_out(shape);
    MapR o(out.node()->data.data(), long(rows), long(cout));
    o.noalias() = CMapR(x.data().data(), long(rows), long(cin)) * CMapR(w.data().data(), long(cin), long(cout));
    if (bias)
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cout; ++c) o(long(r), long(c)) += (*bias)[c];
    check_finite(out, "linear");
    const bool tracked = bias ? tape.tracks({&x, &w, bias}) : tape.tracks({&x, &w});
    if (tracked) {
        Tensor b = bias ? *bias : Tensor();
        tape.record(out, [x, w, b, on = out.node(), rows, cin, cout] {
            auto* g = upstream(on);
            if (!g) return;
            CMapR go(g->data(), long(rows), long(cout));
            if (auto* gx = sink(x))
                MapR(gx->data(), long(rows), long(cin)).noalias() +=
                    go * CMapR(w.data().data(), long(cin), long(cout)).transpose();
            if (auto* gw = sink(w))
                MapR(gw->data(), long(cin), long(cout)).noalias() +=
                    CMapR(x.data().data(), long(rows), long(cin)).transpose() * go;
            if (b.defined())
                if (auto* gb = sink(b))
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < cout; ++c) (*gb)[c] += go(long(r), long(c));
        });
    }
    return out;
}

Tensor split_heads(Tape& tape, const Tensor& x, std::size_t heads) {
    require_rank(x, 3, "split_heads");
    const std::size_t batch = x.dim(0), len = x.dim(1), channels = x.dim(2);
    if (heads == 0 || channels % heads != 0) throw ConfigError("split_heads: channels not divisible by heads");
    const std::size_t d = channels / heads;
    Tensor out = make_out({batch * heads, len, d});
    auto& o = out.node()->data;
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t t = 0; t < len; ++t)
                for (std::size_t j = 0; j < d; ++j)
                    o[((b * heads + h) * len + t) * d + j] = x[(b * len + t) * channels + h * d + j];
    if (tape.tracks({&x})) {
        tape.record(out, [x, on = out.node(), batch, heads, len, channels, d] {
            auto* g = upstream(on);
            auto* gx = sink(x);
            if (!g || !gx) return;
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t h = 0; h < heads; ++h)
                    for (std::size_t t = 0; t < len; ++t)
                        for (std::size_t j = 0; j < d; ++j)
                            (*gx)[(b * len + t) * channels + h * d + j] += (*g)[((b * heads + h) * len + t) * d + j];
        });
    }
    return out;
}

Tensor merge_heads(Tape& tape, const Tensor& x, std::size_t heads) {
    require_rank(x, 3, "merge_heads");
    if (heads == 0 || x.dim(0) % heads != 0) throw ConfigError("merge_heads: batch not divisible by heads");
    const std::size_t batch = x.dim(0) / heads, len = x.dim(1), d = x.dim(2), channels = heads * d;
    Tensor out = make_out({batch, len, channels});
    auto& o = out.node()->data;
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t t = 0; t < len; ++t)
                for (std::size_t j = 0; j < d; ++j)
                    o[(b * len + t) * channels + h * d + j] = x[((b * heads + h) * len + t) * d + j];
    if (tape.tracks({&x})) {
        tape.record(out, [x, on = out.node(), batch, heads, len, channels, d] {
            auto* g = upstream(on);
            auto* gx = sink(x);
            if (!g || !gx) return;
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t h = 0; h < heads; ++h)
                    for (std::size_t t = 0; t < len; ++t)
                        for (std::size_t j = 0; j < d; ++j)
                            (*gx)[((b * heads + h) * len + t) * d + j] += (*g)[(b * len + t) * channels + h * d + j];
        });
    }
    return out;
}

Tensor bmm(Tape& tape, const Tensor& a, const Tensor& b, bool transpose_b) {
    require_rank(a, 3, "bmm");
    require_rank(b, 3, "bmm");
    const std::size_t groups = a.dim(0), m = a.dim(1), k = a.dim(2);
    const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
    const std::size_t bk = transpose_b ? b.dim(2) : b.dim(1);
    if (b.dim(0) != groups || bk != k)
        throw DimensionError("bmm: " + shape_str(a.shape()) + " @ " + shape_str(b.shape()));
    Tensor out = make_out({groups, m, n});
    for (std::size_t gi = 0; gi < groups; ++gi) {
        CMapR am(a.data().data() + gi * m * k, long(m), long(k));
        MapR om(out.node()->data.data() + gi * m * n, long(m), long(n));
        if (transpose_b)
            om.noalias() = am * CMapR(b.data().data() + gi * n * k, long(n), long(k)).transpose();
        else
            om.noalias() = am * CMapR(b.data().data() + gi * k * n, long(k), long(n));
    }
    check_finite(out, "bmm");
    if (tape.tracks({&a, &b})) {
        tape.record(out, [a, b, on = out.node(), groups, m, k, n, transpose_b] {
            auto* g = upstream(on);
            if (!g) return;
            auto* ga = sink(a);
            auto* gb = sink(b);
            for (std::size_t gi = 0; gi < groups; ++gi) {
                CMapR go(g->data() + gi * m * n, long(m), long(n));
                CMapR am(a.data().data() + gi * m * k, long(m), long(k));
                if (transpose_b) {
                    CMapR bm(b.data().data() + gi * n * k, long(n), long(k));
                    if (ga) MapR(ga->data() + gi * m * k, long(m), long(k)).noalias() += go * bm;
                    if (gb) MapR(gb->data() + gi * n * k, long(n), long(k)).noalias() += go.transpose() * am;
                } else {
                    CMapR bm(b.data().data() + gi * k * n, long(k), long(n));
                    if (ga) MapR(ga->data() + gi * m * k, long(m), long(k)).noalias() += go * bm.transpose();
                    if (gb) MapR(gb->data() + gi * k * n, long(k), long(n)).noalias() += am.transpose() * go;
                }
            }
        });
    }
    return out;
}

namespace {

// Shared row-softmax; `causal` restricts row i of each [T,T] block to columns <= i.
Tensor row_softmax(Tape& tape, const Tensor& x, bool causal, const char* name) {
    if (x.rank() < 1) throw DimensionError(std::string(name) + ": scalar input");
    const std::size_t cols = x.shape().back(), rows = x.numel() / cols;
    if (causal && (x.rank() != 3 || x.dim(1) != x.dim(2)))
        throw DimensionError(std::string(name) + ": expected [G,T,T], got " + shape_str(x.shape()));
    const std::size_t len = causal ? x.dim(1) : 0;
    Tensor out = make_out(x.shape());
    auto& o = out.node()->data;
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t active = causal ? (r % len) + 1 : cols;
        const real* in = x.data().data() + r * cols;
        real* dst = o.data() + r * cols;
        real mx = in[0];
        for (std::size_t j = 1; j < active; ++j) mx = std::max(mx, in[j]);
        real z = 0;
        for (std::size_t j = 0; j < active; ++j) z += (dst[j] = std::exp(in[j] - mx));
        for (std::size_t j = 0; j < active; ++j) dst[j] /= z;
    }
    check_finite(out, name);
    if (tape.tracks({&x})) {
        tape.record(out, [x, on = out.node(), rows, cols, len, causal] {
            auto* g = upstream(on);
            auto* gx = sink(x);
            if (!g || !gx) return;
            for (std::size_t r = 0; r < rows; ++r) {
                const std::size_t active = causal ? (r % len) + 1 : cols;
                const real* p = on->data.data() + r * cols;
                const real* gr = g->data() + r * cols;
                real dot = 0;
                for (std::size_t j = 0; j < active; ++j) dot += p[j] * gr[j];
                for (std::size_t j = 0; j < active; ++j) (*gx)[r * cols + j] += p[j] * (gr[j] - dot);
            }
        });
    }
    return out;
}

}  // namespace

Tensor causal_softmax(Tape& tape, const Tensor& x) { return row_softmax(tape, x, true, "causal_softmax"); }

Tensor softmax(Tape& tape, const Tensor& x) { return row_softmax(tape, x, false, "softmax"); }

Tensor dropout(Tape& tape, const Tensor& x, real p, Rng& rng) {
    if (p < 0 || p >= 1) throw ConfigError("dropout: rate must be in [0,1)");
    if (p == 0) return x;
    std::vector<real> mask(x.numel());
    const real keep = 1 / (1 - p);
    for (auto& m : mask) m = rng.uniform() < p ? real(0) : keep;
    Tensor out = make_out(x.shape());
    auto& o = out.node()->data;
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * mask[i];
    if (tape.tracks({&x})) {
        tape.record(out, [x, mask = std::move(mask), on = out.node()] {
            auto* g = upstream(on);
            auto* gx = sink(x);
            if (!g || !gx) return;
            for (std::size_t i = 0; i < g->size(); ++i) (*gx)[i] += (*g)[i] * mask[i];
        });
    }
    return out;
}

Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, std::span<const Index> targets) {
    require_rank(logits, 2, "softmax_cross_entropy");
    const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
    if (targets.size() != rows) throw DimensionError("softmax_cross_entropy: target count does not match rows");
    for (Index t : targets)
        if (t < 0 || std::size_t(t) >= vocab)
            throw IndexError("softmax_cross_entropy: target " + std::to_string(t) + " out of range");
    std::vector<real> probs(logits.numel());
    real loss = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        const real* in = logits.data().data() + r * vocab;
        real* p = probs.data() + r * vocab;
        const real mx = *std::max_element(in, in + vocab);
        real z = 0;
        for (std::size_t j = 0; j < vocab; ++j) z += (p[j] = std::exp(in[j] - mx));
        for (std::size_t j = 0; j < vocab; ++j) p[j] /= z;
        loss += std::log(z) - (in[targets[r]] - mx);
    }
    Tensor out = make_out({1});
    out.node()->data[0] = loss / real(rows);
    check_finite(out, "softmax_cross_entropy");
    if (tape.tracks({&logits})) {
        std::vector<Index> tgt(targets.begin(), targets.end());
        tape.record(out, [logits, probs = std::move(probs), tgt = std::move(tgt), on = out.node(), rows, vocab] {
            auto* g = upstream(on);
            auto* gl = sink(logits);
            if (!g || !gl) return;
            const real s = (*g)[0] / real(rows);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < vocab; ++j) {
                    const real onehot = std::size_t(tgt[r]) == j ? real(1) : real(0);
                    (*gl)[r * vocab + j] += s * (probs[r * vocab + j] - onehot);
                }
        });
    }
    return out;
}

Tensor global_avg_pool(Tape& tape, const Tensor& x) {
    require_rank(x, 4, "global_avg_pool");
    const std::size_t rows = x.dim(0) * x.dim(1), inner = x.dim(2) * x.dim(3);
    Tensor out = make_out({x.dim(0), x.dim(1)});
    auto& o = out.node()->data;
    for (std::size_t r = 0; r < rows; ++r) {
        real acc = 0;
        for (std::size_t i = 0; i < inner; ++i) acc += x[r * inner + i];
        o[r] = acc / real(inner);
    }
    if (tape.tracks({&x})) {
        tape.record(out, [x, on = out.node(), rows, inner] {
            auto* g = upstream(on);
            auto* gx = sink(x);
            if (!g || !gx) return;
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t i = 0; i < inner; ++i) (*gx)[r * inner + i] += (*g)[r] / real(inner);
        });
    }
    return out;
}

}  // namespace hvq::ops
