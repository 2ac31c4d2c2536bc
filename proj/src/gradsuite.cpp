#include "hvq/gradsuite.hpp"

#include <algorithm>
#include <functional>

#include "hvq/codec.hpp"
#include "hvq/ops.hpp"
#include "hvq/prior.hpp"
#include "hvq/vq.hpp"

namespace hvq {

namespace {

// Fills tensors that are still all zero (biases, zero-initialised layers) so
// every path carries signal and no relu sits exactly on its kink.
void wake(ParameterSet& ps, Rng& rng) {
    for (auto& t : ps.tensors())
        if (std::all_of(t.data().begin(), t.data().end(), [](real v) { return v == 0; }))
            for (auto& v : t.mutable_data()) v = real(rng.normal(0.0, 0.3));
}

}  // namespace

std::vector<GradSuiteEntry> gradient_suite(std::uint64_t seed, const GradCheckOptions& options) {
    Rng rng(seed);
    std::vector<GradSuiteEntry> out;
    auto rt = [&](Shape s, double sd = 1.0) {
        std::vector<real> v(shape_numel(s));
        for (auto& x : v) x = real(rng.normal(0.0, sd));
        return Tensor::from(std::move(s), std::move(v), true);
    };
    auto check = [&](const std::string& name, const std::function<Tensor(Tape&)>& f, std::vector<Tensor> in,
                     GradCheckOptions opt) { out.push_back({name, grad_check(f, std::move(in), opt)}); };
    const GradCheckOptions full = options;

    using namespace ops;
    Tensor a = rt({2, 3, 4, 4}), b = rt({2, 3, 4, 4});
    Tensor bias = rt({3}), bc = rt({2, 3}), per = rt({3, 4, 4});
    check("add/mul", [&](Tape& t) { return sum(t, mul(t, add(t, a, b), b)); }, {a, b}, full);
    check("sub/square", [&](Tape& t) { return sum(t, square(t, sub(t, a, b))); }, {a, b}, full);
    check("scale/mean", [&](Tape& t) { return mean(t, square(t, scale(t, a, real(-1.7)))); }, {a}, full);
    check("tanh/sigmoid", [&](Tape& t) { return sum(t, mul(t, ops::tanh(t, a), sigmoid(t, b))); }, {a, b}, full);
    check("relu", [&](Tape& t) { return sum(t, square(t, relu(t, a))); }, {a}, full);
    check("mse", [&](Tape& t) { return mse(t, a, b); }, {a, b}, full);
    check("channel bias", [&](Tape& t) { return sum(t, square(t, add_channel_bias(t, a, bias))); }, {a, bias}, full);
    check("batch-channel add", [&](Tape& t) { return sum(t, square(t, add_batch_channel(t, a, bc))); }, {a, bc},
          full);
    check("broadcast add", [&](Tape& t) { return sum(t, square(t, add_broadcast_batch(t, a, per))); }, {a, per},
          full);
    check("concat/slice",
          [&](Tape& t) {
              const Tensor parts[] = {a, b};
              return sum(t, square(t, slice_channels(t, concat_channels(t, parts), 2, 3)));
          },
          {a, b}, full);
    check("layout nchw/nlc",
          [&](Tape& t) { return sum(t, mul(t, nlc_to_nchw(t, square(t, nchw_to_nlc(t, a)), 4, 4), b)); }, {a, b},
          full);
    check("reshape/global pool",
          [&](Tape& t) { return sum(t, square(t, global_avg_pool(t, reshape(t, a, {2, 3, 2, 8})))); }, {a}, full);

    Tensor w = rt({5, 3, 3, 3}), wt = rt({3, 2, 4, 4});
    check("conv2d", [&](Tape& t) { return sum(t, square(t, conv2d(t, a, w, 1, 1))); }, {a, w}, full);
    check("conv2d stride 2", [&](Tape& t) { return sum(t, square(t, conv2d(t, a, w, 2, 1))); }, {a, w}, full);
    check("conv_transpose2d", [&](Tape& t) { return sum(t, square(t, conv_transpose2d(t, a, wt, 2, 1))); }, {a, wt},
          full);
    check("conv -> relu -> sum", [&](Tape& t) { return sum(t, relu(t, conv2d(t, a, w, 1, 1))); }, {a, w}, full);

    Tensor table = rt({6, 3});
    const Index idx[] = {0, 5, 5, 2, 1, 0, 3, 3};
    check("embedding", [&](Tape& t) { return sum(t, square(t, embedding(t, table, idx, 2, 2, 2))); }, {table}, full);
    check("embedding rows", [&](Tape& t) { return sum(t, square(t, embedding_rows(t, table, idx))); }, {table}, full);

    Tensor seq = rt({2, 5, 4}), lw = rt({4, 6}), lb = rt({6});
    check("linear", [&](Tape& t) { return sum(t, square(t, linear(t, seq, lw, &lb))); }, {seq, lw, lb}, full);
    check("heads/bmm/causal softmax",
          [&](Tape& t) {
              Tensor h = split_heads(t, seq, 2);
              Tensor att = causal_softmax(t, bmm(t, h, h, true));
              Tensor o = merge_heads(t, bmm(t, att, h), 2);
              return sum(t, mul(t, o, o));
          },
          {seq}, full);
    check("softmax", [&](Tape& t) { return sum(t, square(t, softmax(t, lw))); }, {lw}, full);
    const Index targets[] = {1, 0, 3, 3};
    check("softmax cross entropy", [&](Tape& t) { return softmax_cross_entropy(t, lw, targets); }, {lw}, full);

    // Quantizer pieces. The prototype tensor is a fixed input here.
    CodebookConfig cbc{4, 3, 0.99, 1e-5};
    Codebook cb = Codebook::gaussian(cbc, rng);
    Tensor z = rt({2, 3, 2, 2});
    Tensor eq;
    {
        Quantized q = quantize(z, cb);
        eq = q.vectors;
    }
    check("commitment loss", [&](Tape& t) { return commitment_loss(t, z, eq, 0.25); }, {z}, full);
    Tensor eq_leaf = eq.detached();
    eq_leaf.set_requires_grad(true);
    check("codebook loss", [&](Tape& t) { return codebook_loss(t, z, eq_leaf); }, {eq_leaf}, full);
    {
        Codebook trainable = cb;
        trainable.set_trainable(true);
        const CodeGrid codes = quantize(z, cb).codes;
        check("codebook lookup", [&](Tape& t) { return sum(t, square(t, lookup(t, trainable, codes))); },
              {trainable.prototypes()}, full);
    }

    Tensor mk = rt({3, 3, 5, 5});
    check("masked conv type A",
          [&](Tape& t) { return sum(t, square(t, masked_conv2d(t, a, mk, MaskType::A))); }, {a, mk}, full);
    check("masked conv type B",
          [&](Tape& t) { return sum(t, square(t, masked_conv2d(t, a, mk, MaskType::B))); }, {a, mk}, full);

    AttentionWeights aw{rt({4, 4}, 0.5), rt({4, 4}, 0.5), rt({4, 4}, 0.5), rt({4, 4}, 0.5)};
    check("causal self-attention",
          [&](Tape& t) { return sum(t, square(t, causal_self_attention(t, seq, aw, 2).output)); },
          {seq, aw.query, aw.key, aw.value, aw.output}, full);

    // Composed codec forward: decoder under straight-through, encoder through
    // the commitment path with the decoder inputs held constant.
    const GradCheckOptions sub = options;
    {
        CodecConfig c;
        c.image_size = 8;
        c.hidden_units = 4;
        c.residual_units = 2;
        c.residual_layers = 1;
        c.levels = {{"bottom", 2, {4, 2, 0.99, 1e-5}}, {"top", 2, {4, 2, 0.99, 1e-5}}};
        HierarchicalCodec codec(c, rng);
        wake(codec.params(), rng);
        Tensor x = rt({2, 1, 8, 8}, 0.3);
        x.set_requires_grad(false);
        std::vector<Tensor> dec, enc;
        for (std::size_t i = 0; i < codec.params().size(); ++i)
            (codec.params().names()[i].rfind("dec.", 0) == 0 ? dec : enc).push_back(codec.params().tensors()[i]);
        auto loss = [&](Tape& t, QuantizerGradient mode) {
            LatentHierarchy h = codec.encode(t, x, mode);
            std::vector<Tensor> e;
            for (const auto& q : h.quantized) e.push_back(q.detached());
            return vqvae_loss(t, x, codec.decode(t, h), h.pre_quantized, e, 0.25);
        };
        check("codec decoder", [&](Tape& t) { return loss(t, QuantizerGradient::straight_through); }, dec, sub);
        check("codec encoder", [&](Tape& t) { return loss(t, QuantizerGradient::blocked); }, enc, sub);
    }

    // Composed prior forward: attention top prior and a class- and
    // level-conditioned bottom prior.
    {
        PriorConfig p;
        p.height = p.width = 4;
        p.vocabulary = 5;
        p.hidden_units = 8;
        p.residual_units = 4;
        p.layers = 4;
        p.attention_period = 2;
        p.attention_layers = 2;
        p.attention_heads = 2;
        p.filter_size = 3;
        p.output_stack_layers = 1;
        PixelCnnPrior top(p, rng);
        wake(top.params(), rng);
        CodeGrid g{2, 4, 4, 5, {}, "top"};
        for (int i = 0; i < 32; ++i) g.indices.push_back(Code(rng.uniform_int(5)));
        check("prior with attention", [&](Tape& t) { return top.nll(t, PriorBatch{&g, {}, nullptr}); },
              top.params().tensors(), sub);

        PriorConfig q = p;
        q.level = "bottom";
        q.attention_period = q.attention_layers = 0;
        q.output_stack_layers = 0;
        q.conditioning_residual_blocks = 1;
        q.condition_vocabulary = 3;
        q.condition_height = q.condition_width = 2;
        q.classes = 2;
        PixelCnnPrior bottom(q, rng);
        wake(bottom.params(), rng);
        CodeGrid above{2, 2, 2, 3, {}, "top"};
        for (int i = 0; i < 8; ++i) above.indices.push_back(Code(rng.uniform_int(3)));
        const Label labels[] = {1, 0};
        check("conditioned prior", [&](Tape& t) { return bottom.nll(t, PriorBatch{&g, labels, &above}); },
              bottom.params().tensors(), sub);
    }
    return out;
}

}  // namespace hvq
