#include "spkdef/attacks.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <random>

#include "spkdef/error.hpp"
#include "spkdef/transforms.hpp"

namespace spkdef {

namespace {

struct KindName {
    AttackKind kind;
    const char* name;
};

constexpr KindName kAttackNames[] = {
    {AttackKind::FGSM, "FGSM"}, {AttackKind::PGD, "PGD"}, {AttackKind::CWInf, "CWInf"}, {AttackKind::CW2, "CW2"},
    {AttackKind::NES, "NES"},   {AttackKind::PSO, "PSO"}, {AttackKind::SSA, "SSA"},
};

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

double linf(std::span<const double> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// Projection onto the eps-ball around x intersected with [-1, 1].
struct BallProjector {
    std::span<const double> x;
    double eps;
    double operator()(std::size_t i, double v) const {
        return std::clamp(std::clamp(v, x[i] - eps, x[i] + eps), -1.0, 1.0);
    }
};

constexpr std::uint64_t kEvalSalt = 0xe7a1;

AttackResult finalize(std::vector<double> adv, const Waveform& x, std::size_t y,
                      const std::function<std::vector<double>(std::span<const double>)>& scores) {
    AttackResult r;
    r.adversarial = pcm16_roundtrip(Waveform(std::move(adv), x.sample_rate()));
    r.distortion = distortion(x, r.adversarial);
    if (scores) {
        auto logits = scores(r.adversarial.samples());
        r.success = argmax(logits) != y;
        r.final_loss_ce = cross_entropy_value(logits, y);
        r.final_loss_margin = margin_value(logits, y);
    }
    return r;
}

AttackResult finalize_whitebox(std::vector<double> adv, const Waveform& x, std::size_t y, const WhiteBoxModel& model,
                               const AttackConfig& cfg) {
    return finalize(std::move(adv), x, y, [&](std::span<const double> v) {
        return model.logits(v, derive_seed(cfg.seed, kEvalSalt));
    });
}

}  // namespace

const char* to_string(AttackKind k) {
    for (const auto& kn : kAttackNames)
        if (kn.kind == k) return kn.name;
    return "?";
}

AttackKind attack_kind_from_string(const std::string& s) {
    for (const auto& kn : kAttackNames)
        if (s == kn.name) return kn.kind;
    throw ParameterError("unknown attack kind '" + s + "'");
}

void AttackConfig::validate() const {
    if (budgeted()) {
        if (!(epsilon > 0.0)) throw ParameterError(std::string(to_string(kind)) + ": epsilon must be positive");
        if (step_size() > epsilon) throw ParameterError(std::string(to_string(kind)) + ": alpha must not exceed epsilon");
    }
    if (kappa < 0.0) throw ParameterError("attack: kappa must be non-negative");
    if (kind == AttackKind::CW2 && !(c_init > 0.0)) throw ParameterError("CW2: c_init must be positive");
    if (kind == AttackKind::NES) {
        if (nes_m == 0 || nes_m % 2 != 0) throw ParameterError("NES: samples per draw m must be even and positive");
        if (!(nes_sigma > 0.0)) throw ParameterError("NES: sigma must be positive");
    }
    if (kind == AttackKind::PSO && (pso.n_particles == 0 || pso.iter_max == 0 || pso.epoch_max == 0)) {
        throw ParameterError("PSO: particle, iteration and epoch counts must be positive");
    }
    if (kind == AttackKind::SSA && (!(ssa.max_factor > 0.0) || ssa.window < 2 || ssa.max_iters == 0)) {
        throw ParameterError("SSA: need max_factor > 0, window >= 2, max_iters >= 1");
    }
}

LossGrad SpeakerWhiteBox::loss_grad(std::span<const double> x, std::size_t label, LossKind kind,
                                    std::uint64_t seed) const {
    return waveform_loss_grad(m_, x, label, kind, {}, seed);
}

std::vector<double> SpeakerWhiteBox::logits(std::span<const double> x, std::uint64_t) const {
    return forward_logits(m_, Waveform(std::vector<double>(x.begin(), x.end())));
}

// ---- white-box -----------------------------------------------------------------

AttackResult fgsm(const WhiteBoxModel& model, const Waveform& x, std::size_t y, const AttackConfig& cfg) {
    cfg.validate();
    const auto& xs = x.samples();
    LossGrad lg = model.loss_grad(xs, y, LossKind::CrossEntropy, derive_seed(cfg.seed, 1));
    std::vector<double> adv(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) adv[i] = std::clamp(xs[i] + cfg.epsilon * sign(lg.grad[i]), -1.0, 1.0);
    const double mi = linf(adv, xs);
    AttackResult r = finalize_whitebox(std::move(adv), x, y, model, cfg);
    r.queries = 1;
    r.iterations = 1;
    r.max_iterate_linf = mi;
    return r;
}

namespace {

// Shared PGD loop. `direction` returns the signed ascent direction for one
// coordinate given the loss/gradient, or signals a stop.
AttackResult pgd_loop(const WhiteBoxModel& model, const Waveform& x, std::size_t y, const AttackConfig& cfg,
                      LossKind kind, bool descend, double clamp_below,
                      const std::function<void(std::span<const double>)>& on_iterate) {
    cfg.validate();
    const auto& xs = x.samples();
    BallProjector proj{xs, cfg.epsilon};
    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<double> u(-cfg.epsilon, cfg.epsilon);
    std::vector<double> xi(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) xi[i] = proj(i, xs[i] + u(rng));
    double mi = linf(xi, xs);
    if (on_iterate) on_iterate(xi);
    const double alpha = cfg.step_size();
    std::size_t queries = 0;
    for (std::size_t s = 0; s < cfg.steps; ++s) {
        LossGrad lg = model.loss_grad(xi, y, kind, derive_seed(cfg.seed, s + 1));
        ++queries;
        // Loss clamped at -kappa: the gradient vanishes once the clamp is active.
        if (descend && lg.loss <= clamp_below) {
            if (on_iterate) on_iterate(xi);
            continue;
        }
        const double dir = descend ? -1.0 : 1.0;
        for (std::size_t i = 0; i < xi.size(); ++i) xi[i] = proj(i, xi[i] + dir * alpha * sign(lg.grad[i]));
        mi = std::max(mi, linf(xi, xs));
        if (on_iterate) on_iterate(xi);
    }
    AttackResult r = finalize_whitebox(std::move(xi), x, y, model, cfg);
    r.queries = queries;
    r.iterations = cfg.steps;
    r.max_iterate_linf = mi;
    return r;
}

}  // namespace

AttackResult pgd(const WhiteBoxModel& model, const Waveform& x, std::size_t y, const AttackConfig& cfg,
                 const std::function<void(std::span<const double>)>& on_iterate) {
    return pgd_loop(model, x, y, cfg, LossKind::CrossEntropy, false, 0.0, on_iterate);
}

AttackResult cw_inf(const WhiteBoxModel& model, const Waveform& x, std::size_t y, const AttackConfig& cfg,
                    const std::function<void(std::span<const double>)>& on_iterate) {
    return pgd_loop(model, x, y, cfg, LossKind::Margin, true, -cfg.kappa, on_iterate);
}

AttackResult cw_l2(const WhiteBoxModel& model, const Waveform& x, std::size_t y, const AttackConfig& cfg) {
    cfg.validate();
    const auto& xs = x.samples();
    const std::size_t n = xs.size();
    constexpr double kBox = 1.0 - 1e-7;
    std::vector<double> w0(n);
    for (std::size_t i = 0; i < n; ++i) w0[i] = std::atanh(std::clamp(xs[i], -kBox, kBox));

    double c = cfg.c_init, lo = 0.0, hi = std::numeric_limits<double>::infinity();
    bool found = false;
    double best_l2 = std::numeric_limits<double>::infinity(), best_margin = 0.0;
    std::vector<double> best_adv;
    double fail_obj = std::numeric_limits<double>::infinity();
    std::vector<double> fail_adv = std::vector<double>(xs.begin(), xs.end());
    double fail_margin = 0.0;
    std::size_t queries = 0, iterations = 0;

    const double b1 = 0.9, b2 = 0.999, aeps = 1e-8;
    std::vector<double> w(n), m1(n), m2(n), xa(n), gx(n);
    for (std::size_t round = 0; round < cfg.binary_search_steps; ++round) {
        w = w0;
        std::fill(m1.begin(), m1.end(), 0.0);
        std::fill(m2.begin(), m2.end(), 0.0);
        bool round_success = false;
        double prev_obj = std::numeric_limits<double>::infinity();
        const std::size_t check_every = std::max<std::size_t>(1, cfg.max_iters / 10);
        for (std::size_t it = 0; it <= cfg.max_iters; ++it) {
            for (std::size_t i = 0; i < n; ++i) xa[i] = std::tanh(w[i]);
            LossGrad lg = model.loss_grad(xa, y, LossKind::Margin, derive_seed(cfg.seed, (round << 32) + it + 1));
            ++queries;
            double l2sq = 0.0;
            for (std::size_t i = 0; i < n; ++i) l2sq += (xa[i] - xs[i]) * (xa[i] - xs[i]);
            const double margin = lg.loss;
            const double hinge = std::max(margin + cfg.kappa, 0.0);
            const double obj = l2sq + c * hinge;
            if (margin <= -cfg.kappa) {
                round_success = true;
                if (std::sqrt(l2sq) < best_l2) {
                    best_l2 = std::sqrt(l2sq);
                    best_adv = xa;
                    best_margin = margin;
                    found = true;
                }
            } else if (!found && obj < fail_obj) {
                fail_obj = obj;
                fail_adv = xa;
                fail_margin = margin;
            }
            if (it == cfg.max_iters) break;
            if (it % check_every == 0) {
                if (obj > prev_obj * 0.9999) break;
                prev_obj = obj;
            }
            ++iterations;
            // d obj / d xa, then through tanh.
            for (std::size_t i = 0; i < n; ++i) {
                gx[i] = 2.0 * (xa[i] - xs[i]) + (hinge > 0.0 ? c * lg.grad[i] : 0.0);
                const double gw = gx[i] * (1.0 - xa[i] * xa[i]);
                m1[i] = b1 * m1[i] + (1.0 - b1) * gw;
                m2[i] = b2 * m2[i] + (1.0 - b2) * gw * gw;
            }
            const double step_t = static_cast<double>(it + 1);
            const double c1 = 1.0 - std::pow(b1, step_t), c2 = 1.0 - std::pow(b2, step_t);
            for (std::size_t i = 0; i < n; ++i)
                w[i] -= cfg.cw_learning_rate * (m1[i] / c1) / (std::sqrt(m2[i] / c2) + aeps);
        }
        if (round_success) {
            hi = std::min(hi, c);
            c = lo > 0.0 ? std::sqrt(lo * hi) : c / 2.0;
        } else {
            lo = std::max(lo, c);
            c = std::isfinite(hi) ? std::sqrt(lo * hi) : c * 2.0;
        }
    }
    AttackResult r = finalize_whitebox(found ? best_adv : fail_adv, x, y, model, cfg);
    r.queries = queries;
    r.iterations = iterations;
    r.objective_met = found;
    r.objective_margin = found ? best_margin : fail_margin;
    r.max_iterate_linf = r.distortion.linf;
    return r;
}

// ---- NES -----------------------------------------------------------------------

std::vector<double> nes_gradient_estimate(const std::function<double(std::span<const double>)>& loss,
                                          std::span<const double> x, std::size_t m, double sigma, std::uint64_t seed) {
    if (m == 0 || m % 2 != 0) throw ParameterError("NES: samples per draw m must be even and positive");
    const std::size_t n = x.size();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> g(n, 0.0), u(n), plus(n), minus(n);
    for (std::size_t k = 0; k < m / 2; ++k) {
        for (std::size_t i = 0; i < n; ++i) {
            u[i] = normal(rng);
            plus[i] = x[i] + sigma * u[i];
            minus[i] = x[i] - sigma * u[i];
        }
        const double diff = loss(plus) - loss(minus);
        for (std::size_t i = 0; i < n; ++i) g[i] += diff * u[i];
    }
    const double scale = 1.0 / (sigma * static_cast<double>(m));
    for (double& v : g) v *= scale;
    return g;
}

AttackResult nes_attack(const ScoreFn& query, const Waveform& x, std::size_t y, const AttackConfig& cfg) {
    cfg.validate();
    const auto& xs = x.samples();
    BallProjector proj{xs, cfg.epsilon};
    std::size_t queries = 0;
    auto margin_at = [&](std::span<const double> v) {
        ++queries;
        return margin_value(query(v), y);
    };
    auto loss = [&](std::span<const double> v) { return std::max(margin_at(v), -cfg.kappa); };
    std::vector<double> xi(xs.begin(), xs.end());
    double margin = margin_at(xi);
    double mi = 0.0;
    std::size_t it = 0;
    const double alpha = cfg.step_size();
    for (; it < cfg.steps && margin > -cfg.kappa; ++it) {
        auto g = nes_gradient_estimate(loss, xi, cfg.nes_m, cfg.nes_sigma, derive_seed(cfg.seed, it + 1));
        for (std::size_t i = 0; i < xi.size(); ++i) xi[i] = proj(i, xi[i] - alpha * sign(g[i]));
        mi = std::max(mi, linf(xi, xs));
        margin = margin_at(xi);
    }
    const std::size_t attack_queries = queries;
    AttackResult r = finalize(std::move(xi), x, y, query);
    r.queries = attack_queries;
    r.iterations = it;
    r.max_iterate_linf = mi;
    return r;
}

// ---- PSO -----------------------------------------------------------------------

PsoResult pso_minimize(const std::function<double(std::span<const double>)>& f, const std::vector<double>& lo,
                       const std::vector<double>& hi, const PsoParams& params, std::uint64_t seed,
                       const std::function<bool(double)>& stop,
                       const std::function<void(const std::vector<std::vector<double>>&)>& on_positions) {
    const std::size_t dim = lo.size();
    if (hi.size() != dim || dim == 0) throw ShapeError("pso_minimize: box bounds disagree");
    if (params.n_particles == 0 || params.iter_max == 0 || params.epoch_max == 0)
        throw ParameterError("pso_minimize: counts must be positive");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const std::size_t np = params.n_particles;
    std::vector<std::vector<double>> pos(np, std::vector<double>(dim)), vel = pos, pbest = pos;
    std::vector<double> pbest_val(np);
    PsoResult res;
    res.best_value = std::numeric_limits<double>::infinity();
    auto eval = [&](std::span<const double> p) {
        ++res.evaluations;
        return f(p);
    };
    auto clampi = [&](std::size_t i, double v) { return std::clamp(v, lo[i], hi[i]); };

    bool stopped = false;
    for (std::size_t epoch = 0; epoch < params.epoch_max && !stopped; ++epoch) {
        for (std::size_t p = 0; p < np; ++p) {
            for (std::size_t i = 0; i < dim; ++i) {
                const double range = hi[i] - lo[i];
                if (epoch == 0) {
                    pos[p][i] = lo[i] + range * unit(rng);
                } else {
                    pos[p][i] = clampi(i, res.best[i] + 0.5 * range * (unit(rng) - 0.5));
                }
                vel[p][i] = 0.1 * range * (2.0 * unit(rng) - 1.0);
            }
            pbest[p] = pos[p];
            pbest_val[p] = eval(pos[p]);
            if (pbest_val[p] < res.best_value) {
                res.best_value = pbest_val[p];
                res.best = pos[p];
            }
        }
        if (on_positions) on_positions(pos);
        res.gbest_history.push_back(res.best_value);
        if (stop && stop(res.best_value)) break;
        for (std::size_t it = 0; it < params.iter_max; ++it) {
            const double w = params.iter_max > 1 ? params.w_start - (params.w_start - params.w_end) *
                                                                       static_cast<double>(it) /
                                                                       static_cast<double>(params.iter_max - 1)
                                                 : params.w_start;
            for (std::size_t p = 0; p < np; ++p) {
                for (std::size_t i = 0; i < dim; ++i) {
                    const double range = hi[i] - lo[i];
                    double v = w * vel[p][i] + params.c1 * unit(rng) * (pbest[p][i] - pos[p][i]) +
                               params.c2 * unit(rng) * (res.best[i] - pos[p][i]);
                    vel[p][i] = std::clamp(v, -range, range);
                    pos[p][i] = clampi(i, pos[p][i] + vel[p][i]);
                }
                const double val = eval(pos[p]);
                if (val < pbest_val[p]) {
                    pbest_val[p] = val;
                    pbest[p] = pos[p];
                }
                if (val < res.best_value) {
                    res.best_value = val;
                    res.best = pos[p];
                }
            }
            ++res.iterations;
            if (on_positions) on_positions(pos);
            res.gbest_history.push_back(res.best_value);
            if (stop && stop(res.best_value)) {
                stopped = true;
                break;
            }
        }
    }
    return res;
}

AttackResult pso_attack(const ScoreFn& query, const Waveform& x, std::size_t y, const AttackConfig& cfg) {
    cfg.validate();
    const auto& xs = x.samples();
    const std::size_t n = xs.size();
    std::vector<double> lo(n), hi(n), cand(n);
    for (std::size_t i = 0; i < n; ++i) {
        lo[i] = std::max(-cfg.epsilon, -1.0 - xs[i]);
        hi[i] = std::min(cfg.epsilon, 1.0 - xs[i]);
    }
    std::size_t queries = 0;
    auto fitness = [&](std::span<const double> p) {
        for (std::size_t i = 0; i < n; ++i) cand[i] = xs[i] + p[i];
        ++queries;
        return margin_value(query(cand), y);
    };
    double mi = 0.0;
    PsoResult pr = pso_minimize(
        fitness, lo, hi, cfg.pso, cfg.seed, [&](double best) { return best < -cfg.kappa; },
        [&](const std::vector<std::vector<double>>& pos) {
            for (const auto& p : pos)
                for (double v : p) mi = std::max(mi, std::abs(v));
        });
    std::vector<double> adv(n);
    for (std::size_t i = 0; i < n; ++i) adv[i] = xs[i] + pr.best[i];
    const std::size_t attack_queries = queries;
    AttackResult r = finalize(std::move(adv), x, y, query);
    r.queries = attack_queries;
    r.iterations = pr.iterations;
    r.max_iterate_linf = mi;
    return r;
}

// ---- SSA -----------------------------------------------------------------------

SsaAnalysis ssa_analyze(std::span<const double> x, std::size_t window) {
    if (x.size() < 2) throw ShapeError("ssa: series too short");
    SsaAnalysis a;
    a.window = std::min(window, x.size());
    a.signal.assign(x.begin(), x.end());
    const auto L = static_cast<Eigen::Index>(a.window);
    const auto K = static_cast<Eigen::Index>(x.size() - a.window + 1);
    Eigen::Map<const Eigen::VectorXd> sig(a.signal.data(), static_cast<Eigen::Index>(x.size()));
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(L, L);
    for (Eigen::Index i = 0; i < L; ++i)
        for (Eigen::Index j = i; j < L; ++j) {
            double s = sig.segment(i, K).dot(sig.segment(j, K));
            cov(i, j) = s;
            cov(j, i) = s;
        }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    a.eigenvalues.resize(a.window);
    a.eigenvectors.resize(a.window * a.window);
    for (Eigen::Index j = 0; j < L; ++j) {
        const Eigen::Index src = L - 1 - j;  // Eigen sorts ascending
        a.eigenvalues[static_cast<std::size_t>(j)] = std::max(0.0, es.eigenvalues()(src));
        for (Eigen::Index i = 0; i < L; ++i)
            a.eigenvectors[static_cast<std::size_t>(i * L + j)] = es.eigenvectors()(i, src);
    }
    return a;
}

std::vector<double> ssa_reconstruct(const SsaAnalysis& a, std::size_t r) {
    const std::size_t n = a.signal.size(), L = a.window;
    r = std::min(r, L);
    const std::size_t K = n - L + 1;
    Eigen::MatrixXd U(static_cast<Eigen::Index>(L), static_cast<Eigen::Index>(r));
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < r; ++j) U(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = a.eigenvectors[i * L + j];
    Eigen::MatrixXd X(static_cast<Eigen::Index>(L), static_cast<Eigen::Index>(K));
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t i = 0; i < L; ++i) X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = a.signal[i + k];
    Eigen::MatrixXd Y = U * (U.transpose() * X);
    std::vector<double> out(n, 0.0), count(n, 0.0);
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t i = 0; i < L; ++i) {
            out[i + k] += Y(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
            count[i + k] += 1.0;
        }
    for (std::size_t t = 0; t < n; ++t) out[t] /= count[t];
    return out;
}

std::size_t ssa_components_for_factor(const SsaAnalysis& a, double factor, double max_factor) {
    const double target = std::clamp(1.0 - factor / max_factor, 0.0, 1.0);
    double total = 0.0;
    for (double v : a.eigenvalues) total += v;
    if (total <= 0.0) return 1;
    double acc = 0.0;
    for (std::size_t r = 1; r <= a.eigenvalues.size(); ++r) {
        acc += a.eigenvalues[r - 1];
        if (acc >= target * total) return r;
    }
    return a.eigenvalues.size();
}

std::size_t ssa_numerical_rank(const SsaAnalysis& a, double rel_tol) {
    if (a.eigenvalues.empty() || a.eigenvalues[0] <= 0.0) return 0;
    std::size_t r = 0;
    for (double v : a.eigenvalues)
        if (v > rel_tol * a.eigenvalues[0]) ++r;
    return r;
}

AttackResult ssa_attack(const DecisionFn& decide, const Waveform& x, std::size_t y, const AttackConfig& cfg) {
    cfg.validate();
    SsaAnalysis a = ssa_analyze(x.samples(), cfg.ssa.window);
    std::map<std::size_t, std::pair<std::vector<double>, bool>> cache;
    std::size_t queries = 0;
    auto probe = [&](double factor) -> const std::pair<std::vector<double>, bool>& {
        std::size_t r = ssa_components_for_factor(a, factor, cfg.ssa.max_factor);
        auto it = cache.find(r);
        if (it != cache.end()) return it->second;
        auto rec = pcm16_roundtrip(Waveform(ssa_reconstruct(a, r), x.sample_rate())).samples();
        ++queries;
        bool flipped = decide(rec) != y;
        return cache.emplace(r, std::make_pair(std::move(rec), flipped)).first->second;
    };
    double lo = 0.0, hi = cfg.ssa.max_factor;
    std::size_t probes = 1;
    std::vector<double> adv = probe(hi).first;
    if (probe(hi).second) {
        while (probes < cfg.ssa.max_iters) {
            // Stop once lo and hi select adjacent component counts.
            const std::size_t r_lo = ssa_components_for_factor(a, lo, cfg.ssa.max_factor);
            const std::size_t r_hi = ssa_components_for_factor(a, hi, cfg.ssa.max_factor);
            if (r_lo <= r_hi + 1) break;
            const double mid = 0.5 * (lo + hi);
            ++probes;
            if (probe(mid).second) hi = mid;
            else lo = mid;
        }
        adv = probe(hi).first;
    }
    AttackResult r;
    r.adversarial = Waveform(std::move(adv), x.sample_rate());
    r.distortion = distortion(x, r.adversarial);
    r.success = decide(r.adversarial.samples()) != y;
    r.queries = queries;
    r.iterations = probes;
    r.final_loss_ce = std::numeric_limits<double>::quiet_NaN();
    r.final_loss_margin = std::numeric_limits<double>::quiet_NaN();
    r.max_iterate_linf = r.distortion.linf;
    return r;
}

}  // namespace spkdef
