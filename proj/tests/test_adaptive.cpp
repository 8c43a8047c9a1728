#include <doctest.h>

#include "fixture.hpp"
#include "helpers.hpp"
#include "oracles.hpp"
#include "spkdef/adaptive.hpp"
#include "spkdef/error.hpp"
#include "spkdef/feco.hpp"

using namespace spkdef;

namespace {

TransformSpec with(TransformKind k, std::map<std::string, double> p = {}) {
    TransformSpec t = TransformSpec::defaults(k);
    for (const auto& [key, v] : p) t.params[key] = v;
    return t;
}

double total_variance(const std::vector<std::vector<double>>& samples) {
    const std::size_t n = samples.size(), d = samples[0].size();
    double v = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        double mu = 0.0, sq = 0.0;
        for (const auto& s : samples) mu += s[i];
        mu /= static_cast<double>(n);
        for (const auto& s : samples) sq += (s[i] - mu) * (s[i] - mu);
        v += sq / static_cast<double>(n - 1);
    }
    return v;
}

}  // namespace

TEST_CASE("BPDA: exact forward, identity backward") {
    auto x = testutil::random_wave(500, 1, 0.4);
    const TransformSpec qt = with(TransformKind::QT, {{"q", 256}});
    grad::Graph g;
    grad::Var in = g.leaf(grad::Tensor::vector(x.samples()));
    grad::Var y = bpda_forward_backward(in, qt);
    CHECK(y.value().data == quantize(x, 256).samples());

    auto v = testutil::random_vec(500, 2);
    grad::Var loss = grad::sum(grad::mul(y, g.constant(grad::Tensor::vector(v))));
    g.backward(loss);
    CHECK(g.grad(in) == v);

    grad::Graph g2;
    grad::Var in2 = g2.leaf(grad::Tensor::vector(x.samples()));
    const TransformSpec codec = TransformSpec::defaults(TransformKind::CodecCBR);
    grad::Var y2 = bpda_forward_backward(bpda_forward_backward(in2, qt), codec);
    Waveform expect = apply_waveform_transform(quantize(x, 256), codec, 0);
    CHECK(y2.value().data == expect.samples());
    g2.backward(grad::sum(grad::mul(y2, g2.constant(grad::Tensor::vector(v)))));
    CHECK(g2.grad(in2) == v);

    grad::Graph g3;
    CHECK_THROWS_AS(bpda_forward_backward(g3.leaf(grad::Tensor::vector(x.samples())), with(TransformKind::AT)),
                    ContractError);
}

TEST_CASE("DefendedModelView policies") {
    const auto& d = fixture::small_desk();
    CHECK_THROWS_AS(DefendedModelView(d.model, {with(TransformKind::QT)}, 1, {GradPolicy::Exact}), ContractError);
    CHECK_THROWS_AS(DefendedModelView(d.model, {with(TransformKind::FeCo)}, 1, {GradPolicy::Exact}), ContractError);
    DefendedModelView ms(d.model, {with(TransformKind::MS)});
    const auto& v = d.corpus.test[0];
    LossGrad lg = ms.loss_grad(v.audio.samples(), v.label, LossKind::CrossEntropy, 0);
    CHECK(lg.grad.size() == v.audio.size());
    CHECK(ms.logits(v.audio.samples(), 0) == forward_logits(d.model, v.audio, {with(TransformKind::MS)}));
    CHECK(lg.loss == doctest::Approx(cross_entropy_value(ms.logits(v.audio.samples(), 0), v.label)));
}

TEST_CASE("EOT: deterministic chains, single draws, variance reduction") {
    const auto& d = fixture::small_desk();
    const auto& v = d.corpus.test[3];
    const std::vector<TransformSpec> ds{with(TransformKind::DS)};
    LossGrad plain = waveform_loss_grad(d.model, v.audio.samples(), v.label, LossKind::CrossEntropy, ds, 0);
    for (std::size_t r : {1, 4}) {
        LossGrad e = eot_loss(d.model, ds, v.audio.samples(), v.label, r, 9);
        CHECK(e.loss == doctest::Approx(plain.loss).epsilon(1e-12));
        for (std::size_t i = 0; i < e.grad.size(); i += 97) CHECK(e.grad[i] == doctest::Approx(plain.grad[i]).epsilon(1e-9));
    }

    const std::vector<TransformSpec> at{with(TransformKind::AT, {{"snr", 20}})};
    LossGrad one = eot_loss(d.model, at, v.audio.samples(), v.label, 1, 42);
    LossGrad draw = waveform_loss_grad(d.model, v.audio.samples(), v.label, LossKind::CrossEntropy, at, 42);
    CHECK(one.loss == draw.loss);
    CHECK(one.grad == draw.grad);

    // Generic form: mean over draws in order.
    LossGrad avg = eot_loss([](std::uint64_t s) { return LossGrad{static_cast<double>(s % 7), {1.0}, {}}; }, 3, 5);
    const double expect = (5 % 7 + derive_seed(5, 1) % 7 + derive_seed(5, 2) % 7) / 3.0;
    CHECK(avg.loss == doctest::Approx(expect));

    std::vector<std::vector<double>> g1, g16;
    for (std::uint64_t s = 0; s < 100; ++s) {
        g1.push_back(eot_loss(d.model, at, v.audio.samples(), v.label, 1, 1000 + s).grad);
        g16.push_back(eot_loss(d.model, at, v.audio.samples(), v.label, 16, 5000 + s).grad);
    }
    const double v1 = total_variance(g1), v16 = total_variance(g16);
    MESSAGE("EOT gradient variance R=1: " << v1 << "  R=16: " << v16);
    CHECK(v16 <= 1.5 * v1 / 8.0);
    CHECK(v16 >= 0.5 * v1 / 32.0);
}

TEST_CASE("adaptive black-box queries") {
    const auto& d = fixture::small_desk();
    const auto& v = d.corpus.test[5];
    auto counter = std::make_shared<std::size_t>(0);
    ScoreFn id = adaptive_blackbox(d.model, {}, 3, counter);
    CHECK(id(v.audio.samples()) == forward_logits(d.model, v.audio));
    CHECK(*counter == 1);
    ScoreFn at = adaptive_blackbox(d.model, {with(TransformKind::AT)}, 3, counter);
    auto a = at(v.audio.samples()), b = at(v.audio.samples());
    CHECK(a != b);
    CHECK(*counter == 3);

    ScoreFn raw = [&](std::span<const double> s) {
        return forward_logits(d.model, Waveform(std::vector<double>(s.begin(), s.end())));
    };
    ScoreFn composed = adaptive_blackbox(raw, {with(TransformKind::AS)}, 1);
    CHECK(composed(v.audio.samples()) == forward_logits(d.model, v.audio, {with(TransformKind::AS)}));
    CHECK(adaptive_blackbox(raw, {}, 1)(v.audio.samples()) == raw(v.audio.samples()));
    CHECK_THROWS_AS(adaptive_blackbox(raw, {with(TransformKind::FeCo)}, 1), ContractError);

    // NES through the chain queries the composed function only.
    AttackConfig cfg;
    cfg.kind = AttackKind::NES;
    cfg.steps = 2;
    cfg.nes_m = 4;
    auto c2 = std::make_shared<std::size_t>(0);
    AttackResult r = nes_attack(adaptive_blackbox(d.model, {with(TransformKind::MS)}, 1, c2), v.audio, v.label, cfg);
    CHECK(*c2 == r.queries + 1);
}

TEST_CASE("Replicate attack") {
    const auto& d = fixture::small_desk();
    AttackConfig cfg;
    cfg.kind = AttackKind::PGD;
    cfg.epsilon = 0.01;
    cfg.steps = 10;
    for (double method : {0.0, 1.0}) {
        const TransformSpec feco = with(TransformKind::FeCo, {{"cl_r", 0.5}, {"cl_m", method}});
        std::size_t wins_f = 0, wins_w = 0;
        for (std::size_t i = 0; i < 4; ++i) {
            const auto& v = d.corpus.test[i * 3];
            cfg.seed = i;
            ReplicateResult f = replicate_attack(d.model, {feco}, v.audio, v.label, cfg, ReplicateMode::F);
            ReplicateResult w = replicate_attack(d.model, {feco}, v.audio, v.label, cfg, ReplicateMode::W, 1, 16);
            wins_f += f.attack.success ? 1 : 0;
            wins_w += w.attack.success ? 1 : 0;
            for (std::uint64_t s = 0; s < 3; ++s) {
                FeatureMatrix back = feco_compress(f.replicated, 0.5, static_cast<ClusterMethod>(method), s);
                CHECK(oracle::same_multiset(back, f.adversarial_features, 1e-6));
            }
            CHECK(f.order_match_rate >= 0.0);
            CHECK(f.order_match_rate <= 1.0);
            const double ratio = static_cast<double>(w.reconstructed.size()) / static_cast<double>(v.audio.size());
            CHECK(ratio == doctest::Approx(2.0).epsilon(0.1));
            CHECK(w.base.distortion.linf <= cfg.epsilon + kPcmStep);
        }
        CHECK(wins_f >= wins_w);
    }
    const auto& v = d.corpus.test[0];
    CHECK_THROWS_AS(replicate_attack(d.model, {with(TransformKind::MS)}, v.audio, v.label, cfg, ReplicateMode::F),
                    ContractError);
    cfg.kind = AttackKind::NES;
    CHECK_THROWS_AS(replicate_attack(d.model, {with(TransformKind::FeCo)}, v.audio, v.label, cfg, ReplicateMode::F),
                    ContractError);
}

TEST_CASE("adaptive iterates stay in the ball") {
    const auto& d = fixture::small_desk();
    const auto& v = d.corpus.test[2];
    DefendedModelView view(d.model, {with(TransformKind::QT), with(TransformKind::AT)}, 3);
    AttackConfig cfg;
    cfg.epsilon = 0.003;
    cfg.steps = 5;
    pgd(view, v.audio, v.label, cfg, [&](std::span<const double> xi) {
        for (std::size_t i = 0; i < xi.size(); ++i) REQUIRE(std::abs(xi[i] - v.audio[i]) <= cfg.epsilon + 1e-15);
    });
}
