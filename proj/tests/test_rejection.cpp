#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <sstream>

#include "hvq/ops.hpp"
#include "hvq/rejection.hpp"
#include "oracles.hpp"

using namespace hvq;

namespace {

// Class 0: bright left half. Class 1: bright right half. Plus noise.
std::pair<Tensor, std::vector<Label>> halves(std::size_t n, Rng& rng) {
    std::vector<real> data;
    std::vector<Label> labels;
    for (std::size_t i = 0; i < n; ++i) {
        const Label l = Label(i % 2);
        for (std::size_t h = 0; h < 8; ++h)
            for (std::size_t w = 0; w < 8; ++w) {
                const bool lit = (w < 4) == (l == 0);
                data.push_back(real((lit ? 0.4 : -0.4) + rng.normal(0.0, 0.1)));
            }
        labels.push_back(l);
    }
    return {Tensor::from({n, 1, 8, 8}, std::move(data)), labels};
}

std::vector<ScoredSample> scored(const std::vector<double>& scores) {
    std::vector<ScoredSample> out;
    for (std::size_t i = 0; i < scores.size(); ++i) out.push_back({i, 0, scores[i], Tensor()});
    return out;
}

}  // namespace

TEST_CASE("toy classifier learns a separable set") {
    Rng rng(1);
    auto [images, labels] = halves(64, rng);
    ClassifierConfig cfg;
    cfg.steps = 500;
    cfg.seed = 3;
    TrainedClassifier t = train_toy_classifier(images, labels, cfg);
    CHECK(t.train_accuracy > 0.95);

    TrainedClassifier again = train_toy_classifier(images, labels, cfg);
    CHECK(again.train_accuracy == t.train_accuracy);
    Tape tape(Tape::Mode::inference);
    Tensor p = t.classifier.probabilities(tape, images);
    Tensor q = again.classifier.probabilities(tape, images);
    for (std::size_t i = 0; i < p.numel(); ++i) CHECK(p[i] == q[i]);
    for (std::size_t r = 0; r < 64; ++r) CHECK(std::abs(p[2 * r] + p[2 * r + 1] - 1.0) < 1e-12);
}

TEST_CASE("a single-class dataset is rejected") {
    Rng rng(2);
    auto [images, labels] = halves(4, rng);
    std::fill(labels.begin(), labels.end(), 0);
    CHECK_THROWS_AS(train_toy_classifier(images, labels, {}), ConfigError);
}

TEST_CASE("scoring") {
    Rng rng(3);
    ClassifierConfig cfg;
    cfg.classes = 4;
    ToyClassifier clf(cfg, rng);
    auto [images, labels] = halves(6, rng);

    SUBCASE("a uniform classifier scores 1/classes") {
        ToyClassifier flat(cfg, rng);
        for (auto& t : flat.params().tensors()) std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0);
        for (const auto& s : score(images, labels, flat)) CHECK(s.score == doctest::Approx(0.25).epsilon(1e-15));
    }
    SUBCASE("batch scores equal single-sample scores bitwise") {
        auto batch = score(images, labels, clf, 10);
        REQUIRE(batch.size() == 6);
        for (std::size_t i = 0; i < 6; ++i) {
            const Label one[] = {labels[i]};
            auto single = score(batch_item(images, i), one, clf);
            CHECK(batch[i].score == single[0].score);
            CHECK(batch[i].sample_id == 10 + i);
            CHECK(batch[i].class_label == labels[i]);
        }
    }
    SUBCASE("empty and invalid inputs") {
        CHECK(score(Tensor(), {}, clf).empty());
        const Label bad[] = {0, 4, 0, 0, 0, 0};
        CHECK_THROWS_AS(score(images, bad, clf), IndexError);
    }
}

TEST_CASE("top-fraction filter") {
    SUBCASE("keep everything") {
        auto kept = reject_filter(scored({0.3, 0.9, 0.1}), 1.0);
        CHECK(kept.size() == 3);
        CHECK(kept[0].score == 0.9);
    }
    SUBCASE("keep a third") {
        auto kept = reject_filter(scored({0.9, 0.1, 0.5}), 1.0 / 3.0);
        REQUIRE(kept.size() == 1);
        CHECK(kept[0].sample_id == 0);
    }
    SUBCASE("ties go to the lower sample id") {
        auto kept = reject_filter(scored({0.5, 0.7, 0.5, 0.5}), 0.5);
        REQUIRE(kept.size() == 2);
        CHECK(kept[0].sample_id == 1);
        CHECK(kept[1].sample_id == 0);
    }
    SUBCASE("kept counts round up") {
        CHECK(kept_count(10, 0.3) == 3);
        CHECK(kept_count(10, 0.31) == 4);
        CHECK(kept_count(3, 0.01) == 1);
        CHECK(kept_count(7, 1.0) == 7);
    }
    SUBCASE("contract errors") {
        CHECK_THROWS_AS(reject_filter({}, 0.5), ContractError);
        CHECK_THROWS_AS(reject_filter(scored({0.1}), 0.0), ContractError);
        CHECK_THROWS_AS(reject_filter(scored({0.1}), 1.5), ContractError);
    }
    SUBCASE("random score sets") {
        Rng rng(4);
        for (int trial = 0; trial < 50; ++trial) {
            std::vector<double> s(1 + rng.uniform_int(40));
            for (auto& v : s) v = std::round(rng.uniform() * 20) / 20;  // induce ties
            const double mean_all = std::accumulate(s.begin(), s.end(), 0.0) / double(s.size());
            double prev_min = -1;
            for (double f : {1.0, 0.8, 0.5, 0.3, 0.1, 0.01}) {
                auto kept = reject_filter(scored(s), f);
                CHECK(kept.size() == kept_count(s.size(), f));
                double sum = 0, min_kept = 2;
                for (const auto& k : kept) {
                    sum += k.score;
                    min_kept = std::min(min_kept, k.score);
                }
                CHECK(sum / double(kept.size()) >= mean_all - 1e-12);
                CHECK(min_kept >= prev_min);
                prev_min = min_kept;
                std::vector<bool> in(s.size(), false);
                for (const auto& k : kept) in[k.sample_id] = true;
                for (std::size_t i = 0; i < s.size(); ++i)
                    if (!in[i]) CHECK(s[i] <= min_kept);
                CHECK(std::is_sorted(kept.begin(), kept.end(),
                                     [](const auto& a, const auto& b) { return a.score > b.score; }));
                auto again = reject_filter(scored(s), f);
                for (std::size_t i = 0; i < kept.size(); ++i) CHECK(again[i].sample_id == kept[i].sample_id);
            }
        }
    }
}

TEST_CASE("threshold filter and CSV export") {
    auto s = scored({0.2, 0.8, 0.5});
    auto kept = reject_threshold(s, 0.5);
    REQUIRE(kept.size() == 2);
    CHECK(kept[0].sample_id == 1);
    std::ostringstream os;
    write_scores_csv(os, s, kept);
    CHECK(os.str() == "sample_id,class_label,score,kept\n0,0,0.20000000000000001,0\n1,0,0.80000000000000004,1\n"
                      "2,0,0.5,1\n");
}
