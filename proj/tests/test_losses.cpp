// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <map>

#include "craft/error.hpp"
#include "craft/losses.hpp"
#include "craft/model.hpp"
#include "craft/synth.hpp"
#include "craft/util.hpp"

using namespace craft;

TEST_CASE("augment_caption template") {
    CHECK(augment_caption("leaf", "rust blight") ==
          "An image of a leaf, specifically a rust blight");
    CHECK(augment_caption("x", "y") == "An image of a x, specifically a y");
    CHECK_THROWS_AS(augment_caption("", "y"), ArgumentError);
    CHECK_THROWS_AS(augment_caption("x", ""), ArgumentError);

    // Label recoverable by suffix parse.
    std::string caption = augment_caption("leaf", "oak");
    const std::string marker = ", specifically a ";
    auto pos = caption.find(marker);
    REQUIRE(pos != std::string::npos);
    CHECK(caption.substr(pos + marker.size()) == "oak");
}

TEST_CASE("qa_to_declarative: paper example, grammar coverage, identity, fallback") {
    auto d = qa_to_declarative("What color is the car?", "Red");
    CHECK(d.text == "The car is red");
    CHECK_FALSE(d.fallback);

    // Identity on already-declarative grammar outputs.
    auto cap = augment_caption("leaf", "oak");
    auto id1 = qa_to_declarative(cap, "");
    CHECK(id1.text == cap);
    CHECK_FALSE(id1.fallback);
    auto id2 = qa_to_declarative("This leaf is a oak", "oak");
    CHECK(id2.text == "This leaf is a oak");
    CHECK_FALSE(id2.fallback);

    // Every sentence of the synthetic grammar maps without fallback.
    for (const auto& cls : grammar_classes()) {
        for (const auto& color : grammar_colors()) {
            auto v = qa_to_declarative("what color is the " + cls, color);
            CHECK_FALSE(v.fallback);
            CHECK(v.text == "The " + cls + " is " + color);
        }
    }
    DatasetSpec spec;
    spec.seed = 3;
    spec.train_size = 40;
    spec.test_size = 20;
    for (TaskKind task : {TaskKind::McqClassification, TaskKind::AttributeVqa}) {
        spec.task = task;
        Dataset ds = generate_dataset(spec);
        for (const auto& s : ds.train) {
            auto v = qa_to_declarative(s.prompt, s.target);
            CHECK_FALSE(v.fallback);
        }
    }

    auto fb = qa_to_declarative("how many moons does mars have", "two");
    CHECK(fb.fallback);
    CHECK(fb.text == "Q: how many moons does mars have A: two");
}

TEST_CASE("encode_text: mean pooling of frozen embeddings") {
    Vocabulary vocab = grammar_vocabulary();
    LmConfig cfg;
    cfg.vocab = vocab.size();
    cfg.width = 8;
    cfg.heads = 2;
    cfg.blocks = 1;
    cfg.context = 16;
    SurrogateLM lm(cfg, 5);
    const auto& table = lm.token_embedding().value;

    auto row = [&](int32_t id) {
        return std::vector<double>(table.begin() + id * 8, table.begin() + (id + 1) * 8);
    };

    // Single token -> that token's embedding.
    int32_t oak = vocab.id_of("oak");
    CHECK(encode_text("oak", lm, vocab) == row(oak));

    // Bag-of-words symmetry.
    CHECK(encode_text("oak red leaf", lm, vocab) == encode_text("leaf oak red", lm, vocab));

    // Two-token average, hand computed.
    int32_t red = vocab.id_of("red");
    auto two = encode_text("oak red", lm, vocab);
    for (size_t j = 0; j < 8; ++j) {
        CHECK(two[j] == doctest::Approx((row(oak)[j] + row(red)[j]) / 2.0).epsilon(1e-15));
    }

    // Unknown tokens hit the UNK row.
    CHECK(encode_text("zeppelin", lm, vocab) == row(Vocabulary::kUnk));
}

namespace {

ContrastiveBatch make_batch(Tape& tape, const std::vector<std::vector<double>>& vs,
                            const std::vector<std::vector<double>>& ts,
                            const std::vector<std::string>& labels, Parameter& log_tau) {
    ContrastiveBatch b;
    for (const auto& v : vs) b.image_embeds.push_back(tape.input({v.size()}, v));
    b.text_embeds = ts;
    b.labels = labels;
    b.temperature = craft::exp(tape.param(log_tau));
    return b;
}

}  // namespace

TEST_CASE("sigmoid_contrastive: batch of one with s=0 gives ln 2") {
    Parameter log_tau("log_tau", {});
    log_tau.value = {std::log(10.0)};
    Tape tape;
    // Orthogonal vectors: cosine 0, so s = tau * 0 = 0.
    auto b = make_batch(tape, {{1.0, 0.0}}, {{0.0, 1.0}}, {"a"}, log_tau);
    Tensor loss = sigmoid_contrastive(tape, b);
    CHECK(loss.scalar() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("sigmoid_contrastive: equal labels strip all negative terms") {
    Parameter log_tau("log_tau", {});
    log_tau.value = {0.0};  // tau = 1
    Tape tape;
    auto b = make_batch(tape, {{1.0, 0.0}, {0.6, 0.8}}, {{1.0, 0.0}, {0.0, 1.0}}, {"a", "a"},
                        log_tau);
    Tensor loss = sigmoid_contrastive(tape, b);
    // Only the diagonal terms survive: mean of -log sigmoid(s_ii).
    double s11 = 1.0, s22 = 0.8;
    double expect = 0.5 * (-std::log(1.0 / (1.0 + std::exp(-s11))) -
                           std::log(1.0 / (1.0 + std::exp(-s22))));
    CHECK(loss.scalar() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("sigmoid_contrastive: two anchors, hand-set cosines, full enumeration") {
    Parameter log_tau("log_tau", {});
    log_tau.value = {0.0};  // tau = 1
    Tape tape;
    // cos(v1,t1)=1, cos(v1,t2)=0, cos(v2,t1)=1, cos(v2,t2)=0.
    auto b = make_batch(tape, {{1.0, 0.0}, {1.0, 0.0}}, {{1.0, 0.0}, {0.0, 1.0}}, {"a", "b"},
                        log_tau);
    Tensor loss = sigmoid_contrastive(tape, b);

    auto sigma = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
    // Anchor 1: positive s11=1, negative j=2 with s12=0.
    double l1 = -std::log(sigma(1.0)) - std::log(1.0 - sigma(0.0));
    // Anchor 2: positive s22=0, negative j=1 with s21=1.
    double l2 = -std::log(sigma(0.0)) - std::log(1.0 - sigma(1.0));
    CHECK(loss.scalar() == doctest::Approx(0.5 * (l1 + l2)).epsilon(1e-12));

    // Gradients reach the image embeddings and tau.
    tape.backward(loss);
    CHECK_FALSE(log_tau.grad.empty());
    CHECK(log_tau.grad[0] != 0.0);
    CHECK_FALSE(b.image_embeds[0].grad().empty());
}

TEST_CASE("sigmoid_contrastive: zero-norm embedding is a numeric error") {
    Parameter log_tau("log_tau", {});
    log_tau.value = {0.0};
    Tape tape;
    auto b = make_batch(tape, {{0.0, 0.0}}, {{1.0, 0.0}}, {"a"}, log_tau);
    CHECK_THROWS_AS(sigmoid_contrastive(tape, b), NumericError);
}

TEST_CASE("sigmoid_contrastive: permutation equivariance in batch order") {
    Parameter log_tau("log_tau", {});
    log_tau.value = {std::log(3.0)};
    Rng rng(7);
    std::vector<std::vector<double>> vs, ts;
    std::vector<std::string> labels = {"a", "b", "c", "a", "b"};
    for (int i = 0; i < 5; ++i) {
        std::vector<double> v(4), t(4);
        for (auto& x : v) x = rng.normal();
        for (auto& x : t) x = rng.normal();
        vs.push_back(v);
        ts.push_back(t);
    }
    Tape t1;
    double base = sigmoid_contrastive(t1, make_batch(t1, vs, ts, labels, log_tau)).scalar();

    std::vector<size_t> perm = {3, 0, 4, 2, 1};
    std::vector<std::vector<double>> vs2, ts2;
    std::vector<std::string> labels2;
    for (size_t i : perm) {
        vs2.push_back(vs[i]);
        ts2.push_back(ts[i]);
        labels2.push_back(labels[i]);
    }
    Tape t2;
    double shuffled = sigmoid_contrastive(t2, make_batch(t2, vs2, ts2, labels2, log_tau)).scalar();
    CHECK(shuffled == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("cosine is invariant to positive rescaling within 1e-9") {
    Rng rng(11);
    for (int t = 0; t < 50; ++t) {
        std::vector<double> u(6), v(6);
        for (auto& x : u) x = rng.normal();
        for (auto& x : v) x = rng.normal();
        double alpha = std::exp(rng.uniform(-3.0, 3.0));
        Tape tape;
        Tensor ut = tape.constant({6}, u);
        Tensor vt = tape.constant({6}, v);
        std::vector<double> us(6);
        for (size_t i = 0; i < 6; ++i) us[i] = alpha * u[i];
        Tensor ust = tape.constant({6}, us);
        CHECK(std::abs(cosine(ut, vt).scalar() - cosine(ust, vt).scalar()) < 1e-9);
    }
}

TEST_CASE("caption sampling is uniform (chi-squared over 1000 draws)") {
    DatasetSpec spec;
    spec.seed = 13;
    spec.train_size = 10;
    spec.test_size = 10;
    Dataset ds = generate_dataset(spec);
    TextSet set = caption_set(ds.train[0]);
    REQUIRE(set.texts.size() == 2);
    // The set always contains the ground-truth declarative.
    CHECK(set.texts[0] == qa_to_declarative(ds.train[0].prompt, ds.train[0].target).text);

    Rng rng(17);
    std::map<std::string, size_t> counts;
    const size_t n = 1000;
    for (size_t i = 0; i < n; ++i) counts[sample_caption(set, rng)]++;
    double expected = double(n) / 2.0;
    double chi2 = 0.0;
    for (const auto& [s, c] : counts) {
        double d = double(c) - expected;
        chi2 += d * d / expected;
    }
    CHECK(chi2 < 6.635);  // df=1, p=0.01
}

TEST_CASE("composite loss: weights, paper value, gradient linearity") {
    Parameter x("x", {});
    x.value = {2.0};

    // (0,0) -> sal alone.
    {
        Tape tape;
        Tensor xt = tape.param(x);
        Tensor sal = mul(xt, xt);
        Tensor con = scale(xt, 3.0);
        Tensor commit = scale(xt, 5.0);
        Tensor total = composite_loss(sal, con, commit, {0.0, 0.0});
        CHECK(total.scalar() == sal.scalar());
    }

    // Unit losses with (0.1, 0.1) -> 1.2.
    {
        Tape tape;
        Tensor one = tape.constant({}, {1.0});
        Tensor total = composite_loss(one, one, one, {0.1, 0.1});
        CHECK(total.scalar() == doctest::Approx(1.2).epsilon(1e-12));
    }

    // Gradient is the weighted sum of component gradients.
    {
        auto grad_with = [&](LossWeights w) {
            x.zero_grad();
            Tape tape;
            Tensor xt = tape.param(x);
            Tensor total = composite_loss(mul(xt, xt), scale(xt, 3.0), scale(xt, 5.0), w);
            tape.backward(total);
            return x.grad[0];
        };
        // d/dx = 2x + 3*lcon + 5*lcommit at x=2.
        CHECK(grad_with({0.0, 0.0}) == doctest::Approx(4.0));
        CHECK(grad_with({0.5, 0.25}) == doctest::Approx(4.0 + 1.5 + 1.25));
    }

    // Invalid weights.
    Tape tape;
    Tensor one = tape.constant({}, {1.0});
    CHECK_THROWS_AS(composite_loss(one, one, one, {-1.0, 0.0}), ArgumentError);
}
