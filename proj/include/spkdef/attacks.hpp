#pragma once

// Untargeted evasion attacks. White-box attacks see a WhiteBoxModel (loss and
// input gradient); black-box attacks only receive a score or decision
// function, so they cannot reach gradient machinery.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "spkdef/audio.hpp"
#include "spkdef/model.hpp"

namespace spkdef {

enum class AttackKind { FGSM, PGD, CWInf, CW2, NES, PSO, SSA };

const char* to_string(AttackKind k);
AttackKind attack_kind_from_string(const std::string& s);

struct PsoParams {
    std::size_t epoch_max = 300;
    std::size_t iter_max = 30;
    std::size_t n_particles = 25;
    double w_start = 0.9;
    double w_end = 0.4;
    double c1 = 2.0;
    double c2 = 2.0;
};

struct SsaParams {
    double max_factor = 100.0;
    std::size_t max_iters = 30;
    std::size_t window = 64;
};

struct AttackConfig {
    AttackKind kind = AttackKind::PGD;
    double epsilon = 0.002;
    double alpha = 0.0;  // 0 selects epsilon / 5
    std::size_t steps = 10;
    double kappa = 0.0;
    // CW2
    double c_init = 1e-3;
    std::size_t binary_search_steps = 9;
    std::size_t max_iters = 1000;
    double cw_learning_rate = 5e-3;
    // NES
    std::size_t nes_m = 50;
    double nes_sigma = 1e-3;
    PsoParams pso;
    SsaParams ssa;
    std::uint64_t seed = 0;

    double step_size() const { return alpha > 0.0 ? alpha : epsilon / 5.0; }
    bool budgeted() const { return kind != AttackKind::CW2 && kind != AttackKind::SSA; }
    void validate() const;
};

struct AttackResult {
    Waveform adversarial{std::vector<double>{0.0}};  // after the 16-bit PCM round trip
    bool success = false;                             // misclassified after the round trip
    DistortionReport distortion;
    std::size_t queries = 0;  // model evaluations (gradient calls for white-box attacks)
    std::size_t iterations = 0;
    double final_loss_ce = 0.0;
    double final_loss_margin = 0.0;
    // Largest L-inf distance of any iterate before the PCM round trip.
    double max_iterate_linf = 0.0;
    // CW2: whether some round met margin <= -kappa, and that margin.
    bool objective_met = false;
    double objective_margin = 0.0;
};

class WhiteBoxModel {
public:
    virtual ~WhiteBoxModel() = default;
    virtual LossGrad loss_grad(std::span<const double> x, std::size_t label, LossKind kind,
                               std::uint64_t seed) const = 0;
    virtual std::vector<double> logits(std::span<const double> x, std::uint64_t seed) const = 0;
};

// Wraps plain callables; handy for toy objectives.
class FunctionModel final : public WhiteBoxModel {
public:
    using LossGradFn = std::function<LossGrad(std::span<const double>, std::size_t, LossKind, std::uint64_t)>;
    using LogitsFn = std::function<std::vector<double>(std::span<const double>, std::uint64_t)>;
    FunctionModel(LossGradFn lg, LogitsFn lo) : lg_(std::move(lg)), lo_(std::move(lo)) {}
    LossGrad loss_grad(std::span<const double> x, std::size_t label, LossKind kind, std::uint64_t seed) const override {
        return lg_(x, label, kind, seed);
    }
    std::vector<double> logits(std::span<const double> x, std::uint64_t seed) const override { return lo_(x, seed); }

private:
    LossGradFn lg_;
    LogitsFn lo_;
};

// The undefended speaker model as a white-box target.
class SpeakerWhiteBox final : public WhiteBoxModel {
public:
    explicit SpeakerWhiteBox(const SpeakerModel& m) : m_(m) {}
    LossGrad loss_grad(std::span<const double> x, std::size_t label, LossKind kind, std::uint64_t seed) const override;
    std::vector<double> logits(std::span<const double> x, std::uint64_t seed) const override;

private:
    const SpeakerModel& m_;
};

using ScoreFn = std::function<std::vector<double>(std::span<const double>)>;
using DecisionFn = std::function<std::size_t(std::span<const double>)>;

AttackResult fgsm(const WhiteBoxModel& model, const Waveform& x, std::size_t y, const AttackConfig& cfg);
AttackResult pgd(const WhiteBoxModel& model, const Waveform& x, std::size_t y, const AttackConfig& cfg,
                 const std::function<void(std::span<const double>)>& on_iterate = {});
AttackResult cw_inf(const WhiteBoxModel& model, const Waveform& x, std::size_t y, const AttackConfig& cfg,
                    const std::function<void(std::span<const double>)>& on_iterate = {});
AttackResult cw_l2(const WhiteBoxModel& model, const Waveform& x, std::size_t y, const AttackConfig& cfg);

// Antithetic NES estimate of the gradient of `loss` at x with m samples
// (m even): (1 / (sigma m)) sum_{i=1}^{m/2} [L(x + sigma u_i) - L(x - sigma u_i)] u_i.
std::vector<double> nes_gradient_estimate(const std::function<double(std::span<const double>)>& loss,
                                          std::span<const double> x, std::size_t m, double sigma, std::uint64_t seed);

// Loss max(margin, -kappa) minimized with signed NES steps in the ball. One
// query checks the start point and one more follows every update, so a run
// of s iterations uses 1 + s * (m + 1) queries.
AttackResult nes_attack(const ScoreFn& query, const Waveform& x, std::size_t y, const AttackConfig& cfg);

struct PsoResult {
    std::vector<double> best;
    double best_value = 0.0;
    std::vector<double> gbest_history;  // after each epoch's initialization and every iteration
    std::size_t evaluations = 0;
    std::size_t iterations = 0;
};

// Particle swarm minimization over the box [lo, hi]. Inertia decays linearly
// from w_start to w_end within each epoch; every later epoch restarts the
// swarm around the global best. `stop` is consulted after every iteration.
PsoResult pso_minimize(const std::function<double(std::span<const double>)>& f, const std::vector<double>& lo,
                       const std::vector<double>& hi, const PsoParams& params, std::uint64_t seed,
                       const std::function<bool(double)>& stop = {},
                       const std::function<void(const std::vector<std::vector<double>>&)>& on_positions = {});

// Particles are perturbations in the ball, fitness is the margin loss.
AttackResult pso_attack(const ScoreFn& query, const Waveform& x, std::size_t y, const AttackConfig& cfg);

// Singular spectrum analysis of a series with an L-sample window.
struct SsaAnalysis {
    std::size_t window = 0;
    std::vector<double> signal;
    std::vector<double> eigenvalues;   // descending
    std::vector<double> eigenvectors;  // window x window, column j pairs with eigenvalue j
};

SsaAnalysis ssa_analyze(std::span<const double> x, std::size_t window = 64);
// Hankel reconstruction from the r leading components with diagonal averaging.
std::vector<double> ssa_reconstruct(const SsaAnalysis& a, std::size_t r);
// Smallest r >= 1 whose retained energy fraction is at least 1 - factor / max_factor.
std::size_t ssa_components_for_factor(const SsaAnalysis& a, double factor, double max_factor);
std::size_t ssa_numerical_rank(const SsaAnalysis& a, double rel_tol = 1e-10);

AttackResult ssa_attack(const DecisionFn& decide, const Waveform& x, std::size_t y, const AttackConfig& cfg);

}  // namespace spkdef
