#include <doctest.h>

#include <cmath>
#include <limits>

#include "hvq/gradcheck.hpp"
#include "hvq/ops.hpp"
#include "oracles.hpp"

using namespace hvq;

TEST_CASE("conv2d scales a ones image by a 1x1 kernel") {
    Tape tape;
    Tensor x = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor w = Tensor::from({1, 1, 1, 1}, {2.0});
    Tensor y = ops::conv2d(tape, x, w, 1, 0);
    CHECK(y.shape() == Shape{1, 1, 3, 3});
    for (real v : y.data()) CHECK(v == 2.0);
}

TEST_CASE("conv2d matches the direct six-loop oracle") {
    Rng rng(11);
    Tensor x = oracle::random_tensor({2, 3, 8, 8}, rng);
    Tensor w = oracle::random_tensor({4, 3, 3, 3}, rng);
    Tape tape;
    Tensor y = ops::conv2d(tape, x, w, 2, 1);
    CHECK(y.shape() == Shape{2, 4, 4, 4});
    auto expected = oracle::conv2d(x, w, 2, 1);
    double worst = 0;
    for (std::size_t i = 0; i < expected.size(); ++i) worst = std::max(worst, std::abs(expected[i] - y[i]));
    CHECK(worst < 1e-12);
}

TEST_CASE("conv2d output extent follows floor((H + 2p - k) / s) + 1") {
    Rng rng(3);
    Tape tape;
    for (int stride : {1, 2, 3})
        for (int pad : {0, 1, 2}) {
            Tensor x = oracle::random_tensor({1, 2, 7, 9}, rng);
            Tensor w = oracle::random_tensor({3, 2, 3, 3}, rng);
            Tensor y = ops::conv2d(tape, x, w, stride, pad);
            CHECK(y.dim(2) == std::size_t((7 + 2 * pad - 3) / stride + 1));
            CHECK(y.dim(3) == std::size_t((9 + 2 * pad - 3) / stride + 1));
        }
}

TEST_CASE("conv2d rejects channel mismatches and oversize kernels") {
    Tape tape;
    CHECK_THROWS_AS(ops::conv2d(tape, Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 3, 3, 3}), 1, 0),
                    DimensionError);
    CHECK_THROWS_AS(ops::conv2d(tape, Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 5, 5}), 1, 0),
                    DimensionError);
    CHECK_THROWS_AS(ops::conv2d(tape, Tensor::zeros({1, 1, 4, 4}), Tensor::zeros({1, 1, 3, 3}), 0, 0),
                    ContractError);
}

TEST_CASE("conv_transpose2d with a unit kernel spreads inputs onto even positions") {
    Tape tape;
    Tensor x = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor w = Tensor::from({1, 1, 1, 1}, {1.0});
    Tensor y = ops::conv_transpose2d(tape, x, w, 2, 0);
    REQUIRE(y.shape() == Shape{1, 1, 3, 3});
    const std::vector<real> expected{1, 0, 2, 0, 0, 0, 3, 0, 4};
    for (std::size_t i = 0; i < 9; ++i) CHECK(y[i] == expected[i]);
}

TEST_CASE("conv_transpose2d is the adjoint of conv2d") {
    Rng rng(5);
    struct Case {
        Shape x;
        Shape w;
        int stride, pad;
    };
    for (const Case& c : {Case{{2, 3, 8, 8}, {4, 3, 4, 4}, 2, 1}, Case{{1, 2, 5, 5}, {3, 2, 3, 3}, 1, 1},
                          Case{{2, 1, 9, 9}, {2, 1, 3, 3}, 3, 0}, Case{{1, 4, 6, 6}, {2, 4, 5, 5}, 1, 2}}) {
        Tensor x = oracle::random_tensor(c.x, rng);
        Tensor w = oracle::random_tensor(c.w, rng);
        Tape tape;
        Tensor cx = ops::conv2d(tape, x, w, c.stride, c.pad);
        Tensor y = oracle::random_tensor(cx.shape(), rng);
        Tensor ty = ops::conv_transpose2d(tape, y, w, c.stride, c.pad);
        REQUIRE(ty.shape() == x.shape());
        CHECK(std::abs(oracle::dot(cx, y) - oracle::dot(x, ty)) < 1e-10);
    }
}

TEST_CASE("conv_transpose2d output extent is (H - 1) s - 2p + k") {
    Tape tape;
    Tensor y = ops::conv_transpose2d(tape, Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({2, 3, 4, 4}), 2, 1);
    CHECK(y.shape() == Shape{1, 3, 8, 8});
}

TEST_CASE("softmax cross entropy") {
    Tape tape;
    SUBCASE("uniform logits give ln K") {
        Tensor logits = Tensor::zeros({1, 8});
        const ops::Index t[] = {3};
        CHECK(ops::softmax_cross_entropy(tape, logits, t).item() == doctest::Approx(std::log(8.0)).epsilon(1e-15));
    }
    SUBCASE("confident logits match the scalar oracle") {
        Tensor logits = Tensor::from({1, 3}, {10, 0, 0});
        const ops::Index t[] = {0};
        const double expected = oracle::cross_entropy({10, 0, 0}, 0);
        CHECK(std::abs(ops::softmax_cross_entropy(tape, logits, t).item() - expected) < 1e-15);
        CHECK(expected == doctest::Approx(9.08e-5).epsilon(1e-3));
    }
    SUBCASE("loss vanishes as the logit gap grows") {
        double prev = 1e9;
        for (double gap : {1.0, 10.0, 30.0, 700.0}) {
            Tensor logits = Tensor::from({1, 2}, {gap, 0});
            const ops::Index t[] = {0};
            const double l = ops::softmax_cross_entropy(tape, logits, t).item();
            CHECK(l < prev);
            prev = l;
        }
        CHECK(prev < 1e-300);
    }
    SUBCASE("out of range target") {
        const ops::Index t[] = {3};
        CHECK_THROWS_AS(ops::softmax_cross_entropy(tape, Tensor::zeros({1, 3}), t), IndexError);
    }
    SUBCASE("gradient is (softmax - onehot) / B") {
        Rng rng(2);
        Tensor logits = oracle::random_tensor({4, 5}, rng, 1.0, true);
        const ops::Index t[] = {0, 4, 2, 2};
        Tape tp;
        Tensor loss = ops::softmax_cross_entropy(tp, logits, t);
        tp.backward(loss);
        for (std::size_t r = 0; r < 4; ++r) {
            double z = 0;
            for (std::size_t j = 0; j < 5; ++j) z += std::exp(double(logits[r * 5 + j]));
            for (std::size_t j = 0; j < 5; ++j) {
                const double p = std::exp(double(logits[r * 5 + j])) / z;
                const double expected = (p - (std::size_t(t[r]) == j ? 1.0 : 0.0)) / 4.0;
                CHECK(std::abs(logits.grad()[r * 5 + j] - expected) < 1e-15);
            }
        }
    }
}

TEST_CASE("stop_gradient blocks exactly its argument") {
    SUBCASE("sg(x) * x at x = 3") {
        Tensor x = Tensor::scalar(3.0, true);
        Tape tape;
        Tensor y = ops::mul(tape, ops::stop_gradient(tape, x), x);
        CHECK(y.item() == 9.0);
        tape.backward(y);
        CHECK(x.grad()[0] == 3.0);
    }
    SUBCASE("sg(x) alone has zero gradient") {
        Tensor x = Tensor::from({3}, {1, 2, 3}, true);
        Tape tape;
        Tensor y = ops::sum(tape, ops::stop_gradient(tape, x));
        tape.backward(y);
        CHECK(!x.has_grad());
    }
}

TEST_CASE("backward") {
    SUBCASE("sum gives ones") {
        Tensor x = Tensor::from({4}, {1, -2, 3, 0.5}, true);
        Tape tape;
        tape.backward(ops::sum(tape, x));
        for (real g : x.grad()) CHECK(g == 1.0);
    }
    SUBCASE("conv -> relu -> sum matches finite differences") {
        Rng rng(9);
        Tensor x = oracle::random_tensor({2, 2, 6, 6}, rng, 1.0, true);
        Tensor w = oracle::random_tensor({3, 2, 3, 3}, rng, 1.0, true);
        auto f = [&](Tape& t) { return ops::sum(t, ops::relu(t, ops::conv2d(t, x, w, 1, 1))); };
        auto report = grad_check(f, {x, w});
        CHECK(report.passed);
        CHECK(report.max_rel_error < 1e-4);
    }
    SUBCASE("separate tapes do not interfere") {
        Tensor a = Tensor::from({2}, {1, 2}, true);
        Tensor b = Tensor::from({2}, {3, 4}, true);
        Tape t1, t2;
        Tensor la = ops::sum(t1, ops::square(t1, a));
        Tensor lb = ops::sum(t2, ops::scale(t2, b, 5));
        t1.backward(la);
        CHECK(a.grad()[0] == 2.0);
        CHECK(a.grad()[1] == 4.0);
        CHECK(!b.has_grad());
        t2.backward(lb);
        CHECK(b.grad()[0] == 5.0);
        CHECK(a.grad()[0] == 2.0);
    }
    SUBCASE("contract and state errors") {
        Tensor x = Tensor::from({2}, {1, 2}, true);
        Tape tape;
        Tensor y = ops::square(tape, x);
        CHECK_THROWS_AS(tape.backward(y), ContractError);
        Tensor l = ops::sum(tape, y);
        Tape other;
        CHECK_THROWS_AS(other.backward(l), ContractError);
        tape.backward(l);
        CHECK(tape.consumed());
        CHECK_THROWS_AS(tape.backward(l), StateError);
        CHECK_THROWS_AS(ops::square(tape, x), StateError);
    }
    SUBCASE("backward visits ops in reverse order") {
        Tensor x = Tensor::scalar(2.0, true);
        Tape tape;
        std::vector<int> order;
        Tensor a = ops::scale(tape, x, 1);
        tape.record(a, [&order] { order.push_back(1); });
        Tensor b = ops::scale(tape, a, 1);
        tape.record(b, [&order] { order.push_back(2); });
        tape.backward(b);
        CHECK(order == std::vector<int>{2, 1});
    }
}

TEST_CASE("non-finite outputs raise NumericError") {
    Tape tape;
    Tensor big = Tensor::scalar(1e200);
    CHECK_THROWS_AS(ops::mul(tape, big, big), NumericError);
    Tensor nan = Tensor::scalar(std::numeric_limits<double>::quiet_NaN());
    CHECK_THROWS_AS(ops::relu(tape, nan), NumericError);
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(4);
    Tape tape;
    Tensor p = ops::softmax(tape, oracle::random_tensor({6, 11}, rng, 5.0));
    for (std::size_t r = 0; r < 6; ++r) {
        double s = 0;
        for (std::size_t j = 0; j < 11; ++j) s += p[r * 11 + j];
        CHECK(std::abs(s - 1.0) < 1e-12);
    }
    Tensor c = ops::causal_softmax(tape, oracle::random_tensor({2, 5, 5}, rng, 5.0));
    for (std::size_t g = 0; g < 2; ++g)
        for (std::size_t i = 0; i < 5; ++i) {
            double s = 0;
            for (std::size_t j = 0; j < 5; ++j) {
                const real v = c[(g * 5 + i) * 5 + j];
                if (j > i) CHECK(v == 0.0);
                s += v;
            }
            CHECK(std::abs(s - 1.0) < 1e-12);
        }
}

TEST_CASE("every differentiable op passes grad_check") {
    Rng rng(21);
    GradCheckOptions opt;
    auto rt = [&](Shape s) { return oracle::random_tensor(std::move(s), rng, 1.0, true); };

    auto check = [&](const char* name, const std::function<Tensor(Tape&)>& f, std::vector<Tensor> in) {
        auto r = grad_check(f, std::move(in), opt);
        INFO(name << " max rel " << r.max_rel_error << " at " << r.worst);
        CHECK(r.passed);
    };

    Tensor a = rt({2, 3, 4, 4}), b = rt({2, 3, 4, 4});
    Tensor bias = rt({3}), bc = rt({2, 3}), per = rt({3, 4, 4});
    check("add", [&](Tape& t) { return ops::sum(t, ops::mul(t, ops::add(t, a, b), b)); }, {a, b});
    check("sub", [&](Tape& t) { return ops::sum(t, ops::square(t, ops::sub(t, a, b))); }, {a, b});
    check("tanh/sigmoid", [&](Tape& t) { return ops::sum(t, ops::mul(t, ops::tanh(t, a), ops::sigmoid(t, b))); },
          {a, b});
    check("mse", [&](Tape& t) { return ops::mse(t, a, b); }, {a, b});
    check("bias", [&](Tape& t) { return ops::sum(t, ops::square(t, ops::add_channel_bias(t, a, bias))); },
          {a, bias});
    check("batch channel", [&](Tape& t) { return ops::sum(t, ops::square(t, ops::add_batch_channel(t, a, bc))); },
          {a, bc});
    check("broadcast", [&](Tape& t) { return ops::sum(t, ops::square(t, ops::add_broadcast_batch(t, a, per))); },
          {a, per});
    check("concat/slice",
          [&](Tape& t) {
              const Tensor parts[] = {a, b};
              Tensor c = ops::concat_channels(t, parts);
              return ops::sum(t, ops::square(t, ops::slice_channels(t, c, 2, 3)));
          },
          {a, b});
    check("nlc", [&](Tape& t) {
        Tensor s = ops::nchw_to_nlc(t, a);
        return ops::sum(t, ops::mul(t, ops::nlc_to_nchw(t, ops::square(t, s), 4, 4), b));
    }, {a, b});
    check("reshape/pool", [&](Tape& t) {
        return ops::sum(t, ops::square(t, ops::global_avg_pool(t, ops::reshape(t, a, {2, 3, 2, 8}))));
    }, {a});

    Tensor w = rt({5, 3, 3, 3}), wt = rt({3, 2, 4, 4});
    check("conv2d strided", [&](Tape& t) { return ops::sum(t, ops::square(t, ops::conv2d(t, a, w, 2, 1))); }, {a, w});
    check("conv_transpose2d",
          [&](Tape& t) { return ops::sum(t, ops::square(t, ops::conv_transpose2d(t, a, wt, 2, 1))); }, {a, wt});

    Tensor table = rt({6, 3});
    const ops::Index idx[] = {0, 5, 5, 2, 1, 0, 3, 3};
    check("embedding", [&](Tape& t) { return ops::sum(t, ops::square(t, ops::embedding(t, table, idx, 2, 2, 2))); },
          {table});
    check("embedding_rows", [&](Tape& t) { return ops::sum(t, ops::square(t, ops::embedding_rows(t, table, idx))); },
          {table});

    Tensor seq = rt({2, 5, 4}), lw = rt({4, 6}), lb = rt({6});
    check("linear", [&](Tape& t) { return ops::sum(t, ops::square(t, ops::linear(t, seq, lw, &lb))); }, {seq, lw, lb});
    check("heads/bmm/causal softmax",
          [&](Tape& t) {
              Tensor h = ops::split_heads(t, seq, 2);
              Tensor att = ops::causal_softmax(t, ops::bmm(t, h, h, true));
              Tensor o = ops::merge_heads(t, ops::bmm(t, att, h), 2);
              return ops::sum(t, ops::mul(t, o, o));
          },
          {seq});
    check("softmax", [&](Tape& t) { return ops::sum(t, ops::square(t, ops::softmax(t, lw))); }, {lw});
    const ops::Index targets[] = {1, 0, 3, 3};
    check("cross entropy", [&](Tape& t) { return ops::softmax_cross_entropy(t, lw, targets); }, {lw});
    Tensor relu_in = rt({3, 7});
    check("relu", [&](Tape& t) { return ops::sum(t, ops::square(t, ops::relu(t, relu_in))); }, {relu_in});
}

TEST_CASE("grad_check on a quadratic and on a blocked path") {
    Rng rng(8);
    Tensor x = oracle::random_tensor({10}, rng, 1.0, true);
    auto quad = [](Tape& t, const Tensor& v) { return ops::sum(t, ops::square(t, v)); };
    GradCheckOptions opt;
    opt.tolerance = 1e-9;
    auto r = grad_check(quad, x, opt);
    CHECK(r.passed);
    CHECK(r.max_rel_error < 1e-9);

    // The stop-gradient path is not a true gradient: analytic 0 vs numeric 2x.
    auto blocked = [](Tape& t, const Tensor& v) { return ops::sum(t, ops::square(t, ops::stop_gradient(t, v))); };
    auto rb = grad_check(blocked, x);
    CHECK_FALSE(rb.passed);
    CHECK(rb.mismatches == x.numel());
}

TEST_CASE("grad_check separates relu kinks from real mismatches") {
    Tensor x = Tensor::from({3}, {real(-1), real(0), real(2)}, true);
    auto f = [](Tape& t, const Tensor& v) { return ops::sum(t, ops::relu(t, v)); };
    auto r = grad_check(f, x);
    CHECK(r.passed);
    CHECK(r.kinks == 1);
    GradCheckOptions strict;
    strict.skip_kinks = false;
    auto s = grad_check(f, x, strict);
    CHECK_FALSE(s.passed);
    CHECK(s.mismatches == 1);

    // A wrong gradient is not excused as a kink.
    auto blocked = [](Tape& t, const Tensor& v) { return ops::sum(t, ops::relu(t, ops::stop_gradient(t, v))); };
    CHECK(grad_check(blocked, x).mismatches == 1);
}

TEST_CASE("dropout is identity at rate zero and scales survivors") {
    Rng rng(1);
    Tape tape;
    Tensor x = Tensor::full({1000}, 1.0, true);
    CHECK(ops::dropout(tape, x, 0, rng).node() == x.node());
    Tensor y = ops::dropout(tape, x, 0.5, rng);
    std::size_t zeros = 0;
    for (real v : y.data()) {
        CHECK((v == 0.0 || v == 2.0));
        zeros += v == 0.0;
    }
    CHECK(zeros > 400);
    CHECK(zeros < 600);
    CHECK_THROWS_AS(ops::dropout(tape, x, 1.0, rng), ConfigError);
}

TEST_CASE("identical inputs give bit-identical values and gradients") {
    auto run = [] {
        Rng rng(77);
        Tensor x = oracle::random_tensor({2, 3, 6, 6}, rng, 1.0, true);
        Tensor w = oracle::random_tensor({4, 3, 3, 3}, rng, 1.0, true);
        Tape tape;
        Tensor l = ops::sum(tape, ops::tanh(tape, ops::conv2d(tape, x, w, 1, 1)));
        tape.backward(l);
        std::vector<real> out{l.item()};
        out.insert(out.end(), w.grad().begin(), w.grad().end());
        out.insert(out.end(), x.grad().begin(), x.grad().end());
        return out;
    };
    CHECK(run() == run());
}
