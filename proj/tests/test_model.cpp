#include <doctest.h>

#include "fixture.hpp"
#include "helpers.hpp"
#include "spkdef/error.hpp"
#include "spkdef/transforms.hpp"

using namespace spkdef;

TEST_CASE("losses: closed forms and label checks") {
    std::vector<double> z{0, 0};
    CHECK(cross_entropy_value(z, 0) == doctest::Approx(std::log(2.0)));
    CHECK(margin_value(z, 0) == 0.0);
    CHECK(margin_value(std::vector<double>{10, 0}, 0) == 10.0);
    CHECK(margin_value(std::vector<double>{0, 10}, 0) == -10.0);
    CHECK_THROWS_AS(cross_entropy_value(z, 2), ContractError);
    CHECK_THROWS_AS(margin_value(z, 5), ContractError);
    grad::Graph g;
    CHECK(cross_entropy_loss(g.constant(grad::Tensor::vector(z)), 0).value().item() == doctest::Approx(std::log(2.0)));
    CHECK(margin_loss(g.constant(grad::Tensor::vector({0, 10})), 0).value().item() == -10.0);
    CHECK_THROWS_AS(margin_loss(g.constant(grad::Tensor::vector(z)), 3), ContractError);
    auto sm = softmax(std::vector<double>{1000, -1000, 3});
    double s = 0.0;
    for (double v : sm) s += v;
    CHECK(std::abs(s - 1.0) <= 1e-9);
}

TEST_CASE("forward shapes and transforms") {
    const auto& d = fixture::small_desk();
    const auto& m = d.model;
    Waveform w = d.corpus.test[0].audio;
    auto logits = forward_logits(m, w);
    CHECK(logits.size() == m.n_speakers());
    CHECK(embedding(m, w).size() == 64);
    for (double v : logits) CHECK(std::isfinite(v));
    auto sm = softmax(logits);
    double s = 0.0;
    for (double v : sm) s += v;
    CHECK(std::abs(s - 1.0) <= 1e-9);

    auto qt = TransformSpec::defaults(TransformKind::QT);
    qt.params["q"] = 1;
    CHECK(forward_logits(m, w, {qt}) == logits);

    auto at = TransformSpec::defaults(TransformKind::AT);
    CHECK(forward_logits(m, w, {at}, 3) == forward_logits(m, w, {at}, 3));
    CHECK(forward_logits(m, w, {at}, 3) != forward_logits(m, w, {at}, 4));
    // Very short inputs still give logits.
    CHECK(forward_logits(m, Waveform(std::vector<double>(400, 0.01))).size() == m.n_speakers());
    CHECK_THROWS_AS(forward_logits(m, Waveform(std::vector<double>(400, 0.01), 8000)), ParameterError);
}

TEST_CASE("model loss gradients match finite differences") {
    const auto& d = fixture::small_desk();
    const auto& m = d.model;
    const auto& voice = d.corpus.test[1];
    // With respect to the first conv weights.
    const auto& w1 = m.param("w1");
    auto f_param = [&](grad::Graph& g, grad::Var w) {
        BoundModel bm = bind(m, g, false);
        bm.params[0] = w;
        grad::Var x = g.constant(grad::Tensor::vector(voice.audio.samples()));
        return cross_entropy_loss(pipeline_forward(bm, x, {}, 0).logits, voice.label);
    };
    auto rp = grad::grad_check(f_param, w1, 1e-4, 20, 2);
    CHECK(rp.max_rel_error <= 1e-4);
    // End to end from the waveform.
    std::vector<double> short_wave(voice.audio.samples().begin(), voice.audio.samples().begin() + 2400);
    auto f_wave = [&](grad::Graph& g, grad::Var x) {
        BoundModel bm = bind(m, g, false);
        return cross_entropy_loss(pipeline_forward(bm, x, {}, 0).logits, voice.label);
    };
    auto rw = grad::grad_check(f_wave, grad::Tensor::vector(short_wave), 1e-4, 20, 3);
    CHECK(rw.max_rel_error <= 1e-3);
    LossGrad lg = waveform_loss_grad(m, voice.audio.samples(), voice.label, LossKind::CrossEntropy, {}, 0);
    CHECK(lg.grad.size() == voice.audio.size());
    CHECK(lg.loss == doctest::Approx(cross_entropy_value(forward_logits(m, voice.audio), voice.label)));
}

TEST_CASE("training separates two speakers and is deterministic") {
    Corpus c = synthesize_corpus(2, 40, 0.5, 3);
    ModelConfig mc;
    mc.n_speakers = 2;
    TrainConfig tc;
    tc.epochs = 30;
    tc.seed = 5;
    SpeakerModel a(mc, 2);
    TrainReport r = train(a, c.train, tc);
    REQUIRE(r.epoch_accuracy.size() == 30);
    CHECK(r.epoch_accuracy.back() >= 0.95);
    CHECK(accuracy(a, c.train) >= 0.95);

    tc.epochs = 2;
    SpeakerModel b1(mc, 2), b2(mc, 2);
    train(b1, c.train, tc);
    train(b2, c.train, tc);
    CHECK(b1 == b2);

    SpeakerModel z(mc, 2);
    tc.learning_rate = 0.0;
    SpeakerModel before = z;
    train(z, c.train, tc);
    CHECK(z.params() == before.params());
}

TEST_CASE("adversarial training contracts") {
    Corpus c = synthesize_corpus(2, 10, 0.3, 4);
    ModelConfig mc;
    mc.n_speakers = 2;
    TrainConfig tc;
    tc.epochs = 3;
    tc.seed = 1;
    SpeakerModel std_m(mc, 3);
    TrainReport rs = train(std_m, c.train, tc);

    TrainConfig ta = tc;
    ta.adversarial = AdversarialConfig{};
    ta.adversarial->epsilon = 1e-9;
    ta.adversarial->steps = 2;
    SpeakerModel adv_m(mc, 3);
    TrainReport ra = adv_train(adv_m, c.train, ta);
    CHECK(ra.epoch_loss.back() == doctest::Approx(rs.epoch_loss.back()).epsilon(0.01));

    AdversarialConfig adv;
    adv.epsilon = 0.01;
    adv.steps = 5;
    const auto& x = c.train[0].audio.samples();
    std::size_t iterates = 0;
    pgd_inner(std_m, x, c.train[0].label, adv, 9, [&](std::span<const double> xi) {
        ++iterates;
        for (std::size_t i = 0; i < x.size(); ++i) {
            REQUIRE(std::abs(xi[i] - x[i]) <= adv.epsilon + 1e-15);
            REQUIRE(std::abs(xi[i]) <= 1.0);
        }
    });
    CHECK(iterates == 6);

    SpeakerModel r1(mc, 3), r2(mc, 3);
    ta.adversarial->epsilon = 0.005;
    ta.epochs = 1;
    adv_train(r1, c.train, ta);
    adv_train(r2, c.train, ta);
    CHECK(r1 == r2);
    TrainConfig missing = tc;
    CHECK_THROWS_AS(adv_train(r1, c.train, missing), ParameterError);
}

TEST_CASE("checkpoint round trip") {
    const auto& m = fixture::small_desk().model;
    auto dir = testutil::temp_dir("model");
    m.save(dir / "m.ckpt");
    SpeakerModel back = SpeakerModel::load(dir / "m.ckpt");
    CHECK(back == m);
    CHECK(forward_logits(back, fixture::small_desk().corpus.test[0].audio) ==
          forward_logits(m, fixture::small_desk().corpus.test[0].audio));
}

TEST_CASE("enrollment and cosine scoring") {
    const auto& d = fixture::small_desk();
    const auto& m = d.model;
    std::vector<std::vector<Waveform>> per(m.n_speakers());
    for (const auto& v : d.corpus.enroll) per[v.label].push_back(v.audio);
    Enrollment e = enroll(m, per);
    REQUIRE(e.embeddings.size() == m.n_speakers());
    // A voice equal to a single enrolled voice.
    for (std::size_t s = 0; s < per.size(); ++s) {
        std::vector<std::vector<Waveform>> single(m.n_speakers());
        for (std::size_t t = 0; t < per.size(); ++t) single[t] = {per[t][0]};
        Enrollment es = enroll(m, single);
        CHECK(csi_classify(m, es, per[s][0]) == s);
    }
    Enrollment one = enroll(m, {{per[0][0]}});
    for (const auto& v : d.corpus.test) CHECK(csi_classify(m, one, v.audio) == 0);
    auto emb = embedding(m, d.corpus.test[0].audio);
    auto scaled = emb;
    for (auto& v : scaled) v *= 3.7;
    CHECK(cosine_similarity(emb, scaled) == doctest::Approx(1.0));
    CHECK(csi_classify_embedding(e, emb) == csi_classify_embedding(e, scaled));
    std::vector<double> zero(emb.size(), 0.0);
    CHECK_THROWS_AS(csi_classify_embedding(e, zero), ScoringError);
    CHECK_THROWS_AS(enroll(m, {{}}), ParameterError);
    std::size_t correct = 0;
    for (const auto& v : d.corpus.test) correct += csi_classify(m, e, v.audio) == v.label ? 1 : 0;
    CHECK(correct * 2 >= d.corpus.test.size());
}

TEST_CASE("accuracy is correct / total") {
    const auto& d = fixture::small_desk();
    std::size_t correct = 0;
    for (const auto& v : d.corpus.test) correct += classify(d.model, v.audio) == v.label ? 1 : 0;
    CHECK(accuracy(d.model, d.corpus.test) ==
          doctest::Approx(static_cast<double>(correct) / static_cast<double>(d.corpus.test.size())));
    CHECK(accuracy(d.model, d.corpus.test) >= 0.9);
}
