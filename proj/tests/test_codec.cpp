#include <doctest.h>

#include <cmath>

#include "hvq/codec.hpp"
#include "hvq/gradcheck.hpp"
#include "hvq/ops.hpp"
#include "oracles.hpp"

using namespace hvq;

namespace {

CodecConfig tiny() {
    CodecConfig c;
    c.image_size = 8;
    c.hidden_units = 4;
    c.residual_units = 2;
    c.residual_layers = 1;
    c.levels = {{"bottom", 2, {4, 2, 0.99, 1e-5}}, {"top", 2, {4, 2, 0.99, 1e-5}}};
    return c;
}

bool starts_with(const std::string& s, const std::string& p) { return s.rfind(p, 0) == 0; }

double max_abs_grad(const ParameterSet& ps, const std::string& prefix) {
    double m = 0;
    for (const auto& name : ps.names())
        if (starts_with(name, prefix)) {
            const Tensor& t = ps.get(name);
            if (!t.has_grad()) continue;
            for (real g : t.grad()) m = std::max(m, std::abs(double(g)));
        }
    return m;
}

}  // namespace

TEST_CASE("desk hierarchy shapes") {
    Rng rng(1);
    HierarchicalCodec codec(CodecConfig::desk(), rng);
    Tensor x = oracle::random_tensor({2, 1, 32, 32}, rng, 0.3);
    Tape tape(Tape::Mode::inference);
    LatentHierarchy h = codec.encode(tape, x);
    REQUIRE(h.codes.size() == 2);
    CHECK(h.codes[0].height == 8);
    CHECK(h.codes[0].width == 8);
    CHECK(h.codes[1].height == 4);
    CHECK(h.codes[1].source == "top");
    CHECK(h.quantized[0].shape() == Shape{2, 16, 8, 8});
    CHECK(codec.decode(tape, h).shape() == x.shape());
    CHECK_NOTHROW(h.codes[0].validate());
}

TEST_CASE("three-level hierarchy round-trips shape") {
    Rng rng(2);
    HierarchicalCodec codec(CodecConfig::desk_three_level(), rng);
    Tensor x = oracle::random_tensor({1, 1, 32, 32}, rng, 0.3);
    Tape tape(Tape::Mode::inference);
    LatentHierarchy h = codec.encode(tape, x);
    CHECK(h.codes[1].height == 4);
    CHECK(h.codes[2].height == 2);
    CHECK(codec.decode(tape, h).shape() == x.shape());
    CHECK(codec.decode(tape, h, {false, false, true}).shape() == x.shape());
}

TEST_CASE("paper configurations validate") {
    CodecConfig p = CodecConfig::paper_imagenet();
    CHECK_NOTHROW(p.validate());
    CHECK(p.grid_size(0) == 64);
    CHECK(p.grid_size(1) == 32);
    CHECK(p.beta == 0.25);
    CHECK(p.hidden_units == 128);
    CHECK(p.residual_units == 64);
    CHECK(p.residual_layers == 2);
    CodecConfig f = CodecConfig::paper_ffhq();
    CHECK_NOTHROW(f.validate());
    CHECK(f.grid_size(0) == 128);
    CHECK(f.grid_size(2) == 32);
}

TEST_CASE("invalid configurations are rejected") {
    CodecConfig c = tiny();
    c.levels.pop_back();
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny();
    c.levels[0].downsample = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny();
    c.image_size = 6;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny();
    c.levels[1].codebook.dim = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("zero weights and an origin prototype map zero input to code 0") {
    Rng rng(3);
    HierarchicalCodec codec(tiny(), rng);
    for (auto& t : codec.params().tensors()) std::fill(t.mutable_data().begin(), t.mutable_data().end(), real(0));
    for (auto& cb : codec.codebooks()) {
        auto e = cb.prototypes().mutable_data();
        std::fill(e.begin(), e.begin() + long(cb.dim()), real(0));
    }
    Tape tape(Tape::Mode::inference);
    LatentHierarchy h = codec.encode(tape, Tensor::zeros({2, 1, 8, 8}));
    for (const auto& g : h.codes)
        for (Code c : g.indices) CHECK(c == 0);
}

TEST_CASE("encode rejects the wrong image size") {
    Rng rng(4);
    HierarchicalCodec codec(tiny(), rng);
    Tape tape;
    CHECK_THROWS_AS(codec.encode(tape, Tensor::zeros({1, 1, 16, 16})), DimensionError);
    CHECK_THROWS_AS(codec.encode(tape, Tensor::zeros({1, 2, 8, 8})), DimensionError);
}

TEST_CASE("decode requires every level") {
    Rng rng(5);
    HierarchicalCodec codec(tiny(), rng);
    Tape tape;
    LatentHierarchy h = codec.encode(tape, Tensor::zeros({1, 1, 8, 8}));
    h.quantized.pop_back();
    CHECK_THROWS_AS(codec.decode(tape, h), ContractError);
    h = codec.encode(tape, Tensor::zeros({1, 1, 8, 8}));
    h.quantized[1] = Tensor();
    CHECK_THROWS_AS(codec.decode(tape, h), ContractError);
}

TEST_CASE("vqvae loss") {
    Tape tape;
    Tensor x = Tensor::from({1}, {1});
    Tensor xh = Tensor::from({1}, {0});
    std::vector<Tensor> z{Tensor::from({2}, {1, 0})}, e{Tensor::from({2}, {0, 0})};
    CHECK(vqvae_loss(tape, x, xh, z, e, 0.25).item() == doctest::Approx(1.125).epsilon(1e-15));
    CHECK(vqvae_loss(tape, x, x, e, e, 0.25).item() == 0.0);
}

TEST_CASE("gradient isolation") {
    Rng rng(6);
    HierarchicalCodec codec(tiny(), rng);
    Tensor x = oracle::random_tensor({2, 1, 8, 8}, rng, 0.3);

    SUBCASE("commitment terms never reach the decoder or the codebooks") {
        codec.params().zero_grad();
        Tape tape;
        LatentHierarchy h = codec.encode(tape, x);
        Tensor loss = commitment_loss(tape, h.pre_quantized[0], h.quantized[0].detached(), 0.25);
        loss = ops::add(tape, loss, commitment_loss(tape, h.pre_quantized[1], h.quantized[1].detached(), 0.25));
        tape.backward(loss);
        CHECK(max_abs_grad(codec.params(), "dec.") == 0.0);
        CHECK(max_abs_grad(codec.params(), "enc.") > 0.0);
        for (const auto& cb : codec.codebooks()) CHECK(!cb.prototypes().has_grad());
    }
    SUBCASE("reconstruction reaches the encoder only through straight-through") {
        codec.params().zero_grad();
        Tape tape;
        LatentHierarchy h = codec.encode(tape, x, QuantizerGradient::blocked);
        tape.backward(ops::mse(tape, x, codec.decode(tape, h)));
        CHECK(max_abs_grad(codec.params(), "enc.") == 0.0);
        CHECK(max_abs_grad(codec.params(), "dec.") > 0.0);

        codec.params().zero_grad();
        Tape t2;
        LatentHierarchy h2 = codec.encode(t2, x);
        t2.backward(ops::mse(t2, x, codec.decode(t2, h2)));
        CHECK(max_abs_grad(codec.params(), "enc.") > 0.0);
    }
}

TEST_CASE("bottom codes depend on the top level, never the reverse") {
    Rng rng(7);
    HierarchicalCodec codec(tiny(), rng);
    Tensor x = oracle::random_tensor({2, 1, 8, 8}, rng, 0.3);
    Tape tape(Tape::Mode::inference);
    LatentHierarchy base = codec.encode(tape, x);

    HierarchicalCodec top_changed = codec;
    for (auto& v : top_changed.codebooks()[1].prototypes().mutable_data()) v += real(0.5);
    LatentHierarchy a = top_changed.encode(tape, x);
    CHECK(a.pre_quantized[1].data()[0] == base.pre_quantized[1].data()[0]);
    double diff = 0;
    for (std::size_t i = 0; i < a.pre_quantized[0].numel(); ++i)
        diff = std::max(diff, std::abs(double(a.pre_quantized[0][i] - base.pre_quantized[0][i])));
    CHECK(diff > 1e-6);

    HierarchicalCodec bottom_changed = codec;
    for (auto& v : bottom_changed.codebooks()[0].prototypes().mutable_data()) v += real(0.5);
    LatentHierarchy b = bottom_changed.encode(tape, x);
    CHECK(b.codes[1] == base.codes[1]);
    for (std::size_t i = 0; i < b.pre_quantized[1].numel(); ++i) CHECK(b.pre_quantized[1][i] == base.pre_quantized[1][i]);
}

TEST_CASE("decay one keeps prototypes fixed through training") {
    CodecConfig c = tiny();
    for (auto& l : c.levels) l.codebook.decay = 1.0;
    Rng rng(8);
    HierarchicalCodec codec(c, rng);
    const auto before = codec.codebooks();
    Adam adam;
    Tensor x = oracle::random_tensor({4, 1, 8, 8}, rng, 0.3);
    for (int i = 0; i < 5; ++i) codec.train_step(x, adam);
    CHECK(codec.codebooks() == before);
}

TEST_CASE("training is deterministic under a fixed seed") {
    auto run = [] {
        Rng rng(9);
        HierarchicalCodec codec(tiny(), rng);
        Adam adam;
        Tensor x = oracle::random_tensor({4, 1, 8, 8}, rng, 0.3);
        std::vector<double> losses;
        for (int i = 0; i < 10; ++i) losses.push_back(codec.train_step(x, adam).loss);
        return losses;
    };
    const auto a = run();
    CHECK(a == run());
    CHECK(a.back() < a.front());
}

TEST_CASE("codebook-loss mode trains prototypes by gradient") {
    CodecConfig c = tiny();
    c.codebook_update = CodebookUpdate::loss;
    Rng rng(10);
    HierarchicalCodec codec(c, rng);
    const auto before = codec.codebooks();
    Adam adam;
    Tensor x = oracle::random_tensor({4, 1, 8, 8}, rng, 0.3);
    auto r = codec.train_step(x, adam);
    CHECK(std::isfinite(r.loss));
    CHECK(r.perplexity.size() == 2);
    CHECK(!(codec.codebooks()[0] == before[0]));
    CHECK(codec.codebooks()[0].counts() == before[0].counts());
}

TEST_CASE("codec gradients match finite differences") {
    Rng rng(11);
    HierarchicalCodec codec(tiny(), rng);
    Tensor x = oracle::random_tensor({2, 1, 8, 8}, rng, 0.3);
    GradCheckOptions opt;
    opt.max_elements_per_tensor = 6;
    std::vector<Tensor> dec_params, enc_params;
    for (const auto& name : codec.params().names())
        (starts_with(name, "dec.") ? dec_params : enc_params).push_back(codec.params().get(name));

    auto loss = [&](Tape& t, QuantizerGradient mode) {
        LatentHierarchy h = codec.encode(t, x, mode);
        std::vector<Tensor> e;
        for (const auto& q : h.quantized) e.push_back(q.detached());
        return vqvae_loss(t, x, codec.decode(t, h), h.pre_quantized, e, 0.25);
    };
    auto dec_report = grad_check([&](Tape& t) { return loss(t, QuantizerGradient::straight_through); }, dec_params, opt);
    INFO("decoder worst " << dec_report.worst << " rel " << dec_report.max_rel_error);
    CHECK(dec_report.passed);
    auto enc_report = grad_check([&](Tape& t) { return loss(t, QuantizerGradient::blocked); }, enc_params, opt);
    INFO("encoder worst " << enc_report.worst << " rel " << enc_report.max_rel_error);
    CHECK(enc_report.passed);
}

TEST_CASE("decode_codes matches decoding the encoder's quantized tensors") {
    Rng rng(12);
    HierarchicalCodec codec(tiny(), rng);
    Tensor x = oracle::random_tensor({2, 1, 8, 8}, rng, 0.3);
    Tape tape(Tape::Mode::inference);
    LatentHierarchy h = codec.encode(tape, x);
    Tensor a = codec.decode(tape, h);
    Tensor b = codec.decode_codes(tape, h.codes);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
    auto bad = h.codes;
    bad[0].vocabulary = 5;
    CHECK_THROWS_AS(codec.decode_codes(tape, bad), ConfigError);
}
