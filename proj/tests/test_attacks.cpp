#include <doctest.h>

#include <cmath>
#include <numeric>

#include "fixture.hpp"
#include "helpers.hpp"
#include "spkdef/attacks.hpp"
#include "spkdef/error.hpp"

using namespace spkdef;

namespace {


// Two-class linear toy: logits = [0, w.x + b], true label 0.
FunctionModel linear_toy(std::vector<double> w, double b) {
    auto score = [w, b](std::span<const double> x) {
        double s = b;
        for (std::size_t i = 0; i < x.size(); ++i) s += w[i] * x[i];
        return s;
    };
    return FunctionModel(
        [w, score](std::span<const double> x, std::size_t y, LossKind kind, std::uint64_t) {
            const double s = score(x);
            std::vector<double> logits{0.0, s};
            LossGrad lg;
            lg.logits = logits;
            lg.grad.resize(x.size());
            const double sg = y == 0 ? 1.0 : -1.0;
            if (kind == LossKind::CrossEntropy) {
                lg.loss = cross_entropy_value(logits, y);
                const double p1 = 1.0 / (1.0 + std::exp(-s));
                const double d = y == 0 ? p1 : p1 - 1.0;
                for (std::size_t i = 0; i < x.size(); ++i) lg.grad[i] = d * w[i];
            } else {
                lg.loss = margin_value(logits, y);
                for (std::size_t i = 0; i < x.size(); ++i) lg.grad[i] = -sg * w[i];
            }
            return lg;
        },
        [score](std::span<const double> x, std::uint64_t) { return std::vector<double>{0.0, score(x)}; });
}

double mean_ce(const std::vector<AttackResult>& rs) {
    double s = 0.0;
    for (const auto& r : rs) s += r.final_loss_ce;
    return s / static_cast<double>(rs.size());
}

}  // namespace

TEST_CASE("attack kinds and config checks") {
    for (auto k : {AttackKind::FGSM, AttackKind::PGD, AttackKind::CWInf, AttackKind::CW2, AttackKind::NES,
                   AttackKind::PSO, AttackKind::SSA})
        CHECK(attack_kind_from_string(to_string(k)) == k);
    CHECK_THROWS_AS(attack_kind_from_string("BIM"), ParameterError);
    AttackConfig c;
    c.kind = AttackKind::NES;
    c.nes_m = 7;
    CHECK_THROWS_AS(c.validate(), ParameterError);
    c.nes_m = 8;
    CHECK_NOTHROW(c.validate());
    CHECK(c.step_size() == doctest::Approx(c.epsilon / 5));
    c.kind = AttackKind::CW2;
    CHECK_FALSE(c.budgeted());
    c.kind = AttackKind::SSA;
    CHECK_FALSE(c.budgeted());
    c.kind = AttackKind::PGD;
    CHECK(c.budgeted());
}

TEST_CASE("FGSM: one signed step of size epsilon") {
    // L(x) = 2x, so the step is +epsilon.
    FunctionModel toy(
        [](std::span<const double> x, std::size_t, LossKind, std::uint64_t) {
            return LossGrad{2.0 * x[0], {2.0}, {0.0, 2.0 * x[0]}};
        },
        [](std::span<const double> x, std::uint64_t) { return std::vector<double>{0.0, 2.0 * x[0]}; });
    AttackConfig cfg;
    cfg.kind = AttackKind::FGSM;
    cfg.epsilon = 0.1;
    AttackResult r = fgsm(toy, Waveform(std::vector<double>{0.0}), 0, cfg);
    CHECK(r.max_iterate_linf == doctest::Approx(0.1));
    CHECK(std::abs(r.adversarial[0] - 0.1) <= kPcmStep);
    CHECK(r.success);
    CHECK(r.queries == 1);

    FunctionModel flat(
        [](std::span<const double> x, std::size_t, LossKind, std::uint64_t) {
            return LossGrad{0.0, std::vector<double>(x.size(), 0.0), {1.0, 0.0}};
        },
        [](std::span<const double>, std::uint64_t) { return std::vector<double>{1.0, 0.0}; });
    auto x = testutil::random_pcm_wave(200, 3, 0.3);
    AttackResult z = fgsm(flat, x, 0, cfg);
    CHECK(z.adversarial.samples() == x.samples());
    CHECK_FALSE(z.success);

    FunctionModel lin = linear_toy(testutil::random_vec(200, 5), -50.0);
    AttackResult l = fgsm(lin, x, 0, cfg);
    for (std::size_t i = 0; i < x.size(); ++i)
        CHECK(std::abs(std::abs(l.adversarial[i] - x[i]) - 0.1) <= kPcmStep);
}

TEST_CASE("PGD: linear loss drives every coordinate to the ball corner") {
    std::vector<double> w(64);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = (i % 2 == 0 ? 1.0 : -1.0) * (1.0 + 0.1 * static_cast<double>(i));
    FunctionModel lin = linear_toy(w, -20.0);
    auto x = testutil::random_pcm_wave(64, 9, 0.2);
    AttackConfig cfg;
    cfg.epsilon = 0.01;
    cfg.steps = 20;
    std::size_t calls = 0;
    AttackResult r = pgd(lin, x, 0, cfg, [&](std::span<const double> xi) {
        ++calls;
        for (std::size_t i = 0; i < x.size(); ++i) REQUIRE(std::abs(xi[i] - x[i]) <= cfg.epsilon + 1e-15);
    });
    CHECK(calls == cfg.steps + 1);
    CHECK(r.queries == cfg.steps);
    for (std::size_t i = 0; i < x.size(); ++i)
        CHECK(std::abs(r.adversarial[i] - (x[i] + cfg.epsilon * (w[i] > 0 ? 1 : -1))) <= kPcmStep);
    CHECK(r.max_iterate_linf <= cfg.epsilon + 1e-15);

    // Box constraint near full scale.
    Waveform loud(std::vector<double>(64, 0.999));
    AttackResult rb = pgd(lin, loud, 0, cfg);
    for (double v : rb.adversarial.samples()) CHECK(std::abs(v) <= 1.0);
}

TEST_CASE("CW-inf: no movement once the clamped margin is reached") {
    std::vector<double> w(32, 1.0);
    // Already misclassified by a wide margin.
    FunctionModel lin = linear_toy(w, 100.0);
    auto x = testutil::random_pcm_wave(32, 2, 0.1);
    AttackConfig cfg;
    cfg.kind = AttackKind::CWInf;
    cfg.epsilon = 0.01;
    cfg.kappa = 5.0;
    std::vector<std::vector<double>> its;
    cw_inf(lin, x, 0, cfg, [&](std::span<const double> xi) { its.emplace_back(xi.begin(), xi.end()); });
    REQUIRE(its.size() == cfg.steps + 1);
    for (const auto& it : its) CHECK(it == its.front());

    // Correctly classified: descends until past the margin, then stops moving.
    FunctionModel near = linear_toy(w, -0.2);
    Waveform zero(std::vector<double>(32, 0.0));
    cfg.epsilon = 0.02;
    cfg.kappa = 0.1;
    cfg.steps = 30;
    its.clear();
    AttackResult r = cw_inf(near, zero, 0, cfg, [&](std::span<const double> xi) { its.emplace_back(xi.begin(), xi.end()); });
    CHECK(r.success);
    CHECK(r.final_loss_margin <= -cfg.kappa + 32 * kPcmStep);
    CHECK(its.back() == its[its.size() - 2]);
}

TEST_CASE("CW2: already misclassified input needs no perturbation") {
    std::vector<double> w(32, 1.0);
    FunctionModel lin = linear_toy(w, 3.0);
    auto x = testutil::random_pcm_wave(32, 4, 0.05);
    AttackConfig cfg;
    cfg.kind = AttackKind::CW2;
    cfg.kappa = 0.0;
    cfg.max_iters = 100;
    cfg.binary_search_steps = 3;
    AttackResult r = cw_l2(lin, x, 0, cfg);
    CHECK(r.objective_met);
    CHECK(r.distortion.l2 <= 1e-6);

    // Correctly classified: success reaches the margin target.
    FunctionModel hard = linear_toy(w, -0.3);
    for (double kappa : {0.0, 0.2}) {
        cfg.kappa = kappa;
        cfg.c_init = 1.0;
        cfg.max_iters = 300;
        cfg.binary_search_steps = 6;
        AttackResult h = cw_l2(hard, x, 0, cfg);
        REQUIRE(h.objective_met);
        CHECK(h.objective_margin <= -kappa + 1e-6);
        // Minimal L2 for a linear boundary: |margin gap| / ||w||.
        const double s0 = std::accumulate(x.samples().begin(), x.samples().end(), -0.3);
        const double l2_min = (kappa - s0) / std::sqrt(32.0);
        CHECK(h.distortion.l2 >= l2_min - 1e-3);
        CHECK(h.distortion.l2 <= 1.5 * l2_min + 1e-3);
    }
}

TEST_CASE("NES: gradient estimate aligns with the true gradient") {
    const std::size_t d = 10;
    auto w = testutil::random_vec(d, 11);
    auto loss = [&](std::span<const double> v) { return std::inner_product(w.begin(), w.end(), v.begin(), 0.0); };
    auto x0 = testutil::random_vec(d, 12);
    double mean_cos = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) mean_cos += cosine_similarity(nes_gradient_estimate(loss, x0, 100, 1e-3, seed), w) / 10.0;
    CHECK(mean_cos >= 0.8);

    // Smooth nonlinear loss.
    auto nl = [&](std::span<const double> v) {
        double s = 0.0;
        for (std::size_t i = 0; i < d; ++i) s += w[i] * std::sin(v[i]) + 0.5 * v[i] * v[i];
        return s;
    };
    std::vector<double> truth(d);
    for (std::size_t i = 0; i < d; ++i) truth[i] = w[i] * std::cos(x0[i]) + x0[i];
    double nl_cos = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) nl_cos += cosine_similarity(nes_gradient_estimate(nl, x0, 100, 1e-3, seed), truth) / 10.0;
    CHECK(nl_cos >= 0.8);
    CHECK_THROWS_AS(nes_gradient_estimate(loss, x0, 5, 1e-3, 0), ParameterError);
}

TEST_CASE("NES attack: query bookkeeping and early stop") {
    std::vector<double> w(16, 1.0);
    auto x = testutil::random_pcm_wave(16, 5, 0.05);
    std::size_t calls = 0;
    ScoreFn robust = [&](std::span<const double> v) {
        ++calls;
        double s = -1000.0;
        for (double t : v) s += t;
        return std::vector<double>{0.0, s};
    };
    AttackConfig cfg;
    cfg.kind = AttackKind::NES;
    cfg.epsilon = 0.01;
    cfg.steps = 7;
    cfg.nes_m = 10;
    AttackResult r = nes_attack(robust, x, 0, cfg);
    CHECK(r.queries == 1 + cfg.steps * (cfg.nes_m + 1));
    CHECK(r.iterations == cfg.steps);
    CHECK(calls == r.queries + 1);  // plus the final evaluation
    CHECK(r.max_iterate_linf <= cfg.epsilon + 1e-15);

    ScoreFn easy = [&](std::span<const double> v) {
        double s = -0.02;
        for (double t : v) s += t;
        return std::vector<double>{0.0, s};
    };
    Waveform zero(std::vector<double>(16, 0.0));
    cfg.steps = 50;
    AttackResult e = nes_attack(easy, zero, 0, cfg);
    CHECK(e.success);
    CHECK(e.iterations < cfg.steps);
    CHECK(e.queries == 1 + e.iterations * (cfg.nes_m + 1));

    ScoreFn already = [](std::span<const double>) { return std::vector<double>{0.0, 1.0}; };
    AttackResult a = nes_attack(already, zero, 0, cfg);
    CHECK(a.queries == 1);
    CHECK(a.iterations == 0);
}

TEST_CASE("PSO: minimizes a shifted quadratic inside the box") {
    const std::size_t d = 5;
    std::vector<double> c{0.3, -0.2, 0.1, 0.45, -0.4};
    auto f = [&](std::span<const double> v) {
        double s = 0.0;
        for (std::size_t i = 0; i < d; ++i) s += (v[i] - c[i]) * (v[i] - c[i]);
        return s;
    };
    PsoParams p;
    p.epoch_max = 10;
    p.iter_max = 30;
    std::vector<double> lo(d, -0.5), hi(d, 0.5);
    PsoResult r = pso_minimize(f, lo, hi, p, 3, {}, [&](const std::vector<std::vector<double>>& pos) {
        for (const auto& q : pos)
            for (std::size_t i = 0; i < d; ++i) REQUIRE((q[i] >= lo[i] && q[i] <= hi[i]));
    });
    for (std::size_t i = 0; i < d; ++i) CHECK(std::abs(r.best[i] - c[i]) <= 1e-2);
    for (std::size_t i = 1; i < r.gbest_history.size(); ++i) CHECK(r.gbest_history[i] <= r.gbest_history[i - 1]);
    CHECK(r.gbest_history.size() == p.epoch_max + r.iterations);

    // Stop rule ends the run early.
    PsoResult s = pso_minimize(f, lo, hi, p, 3, [](double best) { return best < 0.05; });
    CHECK(s.best_value < 0.05);
    CHECK(s.iterations < p.epoch_max * p.iter_max);

    // Optimum outside the box lands on the boundary.
    std::vector<double> far(d, 2.0);
    auto g = [&](std::span<const double> v) {
        double t = 0.0;
        for (std::size_t i = 0; i < d; ++i) t += (v[i] - far[i]) * (v[i] - far[i]);
        return t;
    };
    PsoResult b = pso_minimize(g, lo, hi, p, 4);
    for (double v : b.best) CHECK(v == doctest::Approx(0.5).epsilon(1e-3));
}

TEST_CASE("PSO attack stays in the ball") {
    auto x = testutil::random_pcm_wave(24, 6, 0.2);
    ScoreFn q = [](std::span<const double> v) {
        double s = -100.0;
        for (double t : v) s += t;
        return std::vector<double>{0.0, s};
    };
    AttackConfig cfg;
    cfg.kind = AttackKind::PSO;
    cfg.epsilon = 0.005;
    cfg.pso.epoch_max = 2;
    cfg.pso.iter_max = 10;
    cfg.pso.n_particles = 8;
    AttackResult r = pso_attack(q, x, 0, cfg);
    CHECK(r.distortion.linf <= cfg.epsilon + kPcmStep);
    CHECK(r.max_iterate_linf <= cfg.epsilon + 1e-15);
    CHECK(r.queries > 0);
}

TEST_CASE("SSA: reconstruction, rank, attack") {
    auto x = testutil::random_vec(300, 8);
    SsaAnalysis a = ssa_analyze(x, 32);
    REQUIRE(a.eigenvalues.size() == 32);
    for (std::size_t i = 1; i < 32; ++i) CHECK(a.eigenvalues[i] <= a.eigenvalues[i - 1]);
    CHECK(ssa_components_for_factor(a, 0.0, 100.0) == 32);
    auto rec = ssa_reconstruct(a, ssa_components_for_factor(a, 0.0, 100.0));
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(rec[i] - x[i]) <= 1e-6);
    CHECK(ssa_components_for_factor(a, 100.0, 100.0) == 1);

    std::vector<double> sinus(400), constant(400, 0.3);
    for (std::size_t t = 0; t < sinus.size(); ++t) sinus[t] = std::sin(0.2 * static_cast<double>(t) + 0.4);
    CHECK(ssa_numerical_rank(ssa_analyze(sinus, 40)) == 2);
    CHECK(ssa_numerical_rank(ssa_analyze(constant, 40)) == 1);
    auto sr = ssa_reconstruct(ssa_analyze(sinus, 40), 2);
    for (std::size_t t = 0; t < sinus.size(); ++t) CHECK(std::abs(sr[t] - sinus[t]) <= 1e-8);

    // Decision flips once the energy fraction drops below 99%.
    auto id = testutil::random_pcm_wave(400, 10, 0.3);
    const double e_total = std::inner_product(id.samples().begin(), id.samples().end(), id.samples().begin(), 0.0);
    DecisionFn decide = [&](std::span<const double> v) -> std::size_t {
        const double e = std::inner_product(v.begin(), v.end(), v.begin(), 0.0);
        return e < 0.9 * e_total ? 1 : 0;
    };
    AttackConfig cfg;
    cfg.kind = AttackKind::SSA;
    cfg.ssa.window = 32;
    AttackResult r = ssa_attack(decide, id, 0, cfg);
    CHECK(r.success);
    CHECK(std::isnan(r.final_loss_ce));
    CHECK(r.queries <= cfg.ssa.max_iters);
    DecisionFn never = [](std::span<const double>) -> std::size_t { return 0; };
    AttackResult n = ssa_attack(never, id, 0, cfg);
    CHECK_FALSE(n.success);
    CHECK(n.queries == 1);
}

TEST_CASE("speaker model: determinism and strength ordering") {
    const auto& d = fixture::small_desk();
    SpeakerWhiteBox wb(d.model);
    AttackConfig base;
    base.epsilon = 0.004;
    base.seed = 17;
    std::vector<AttackResult> f, p10, p100, cw;
    for (std::size_t i = 0; i < 6; ++i) {
        const auto& v = d.corpus.test[i * 2];
        AttackConfig c = base;
        c.kind = AttackKind::FGSM;
        f.push_back(fgsm(wb, v.audio, v.label, c));
        c.kind = AttackKind::PGD;
        c.steps = 10;
        p10.push_back(pgd(wb, v.audio, v.label, c));
        c.steps = 100;
        p100.push_back(pgd(wb, v.audio, v.label, c));
        c.kind = AttackKind::CWInf;
        c.steps = 10;
        cw.push_back(cw_inf(wb, v.audio, v.label, c));
    }
    CHECK(mean_ce(p100) >= mean_ce(p10));
    CHECK(mean_ce(p10) >= mean_ce(f));
    auto wins = [](const std::vector<AttackResult>& rs) {
        return std::count_if(rs.begin(), rs.end(), [](const AttackResult& r) { return r.success; });
    };
    CHECK(wins(cw) >= wins(f));
    for (const auto& r : p100) CHECK(r.distortion.linf <= base.epsilon + kPcmStep);

    const auto& v = d.corpus.test[0];
    AttackConfig c = base;
    AttackResult a = pgd(wb, v.audio, v.label, c), b = pgd(wb, v.audio, v.label, c);
    CHECK(a.adversarial.samples() == b.adversarial.samples());
    c.seed = 18;
    AttackResult o = pgd(wb, v.audio, v.label, c);
    CHECK(o.adversarial.samples() != a.adversarial.samples());
}
