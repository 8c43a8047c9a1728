#pragma once

// Adaptive attacks against deployed input transformations: white-box views
// through the transform chain (BPDA for non-differentiable steps, EOT for
// randomized ones), query-through-transform black-box functions, and the
// Replicate construction that survives feature compression.

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "spkdef/attacks.hpp"
#include "spkdef/dsp.hpp"
#include "spkdef/features.hpp"
#include "spkdef/grad.hpp"
#include "spkdef/model.hpp"
#include "spkdef/transforms.hpp"

namespace spkdef {

// The defended model seen by a white-box attacker. Policies default to
// natural_policy(); losses average eot_r draws when the chain is randomized.
class DefendedModelView final : public WhiteBoxModel {
public:
    DefendedModelView(const SpeakerModel& m, std::vector<TransformSpec> chain, std::size_t eot_r = 1,
                      std::vector<GradPolicy> policies = {});

    LossGrad loss_grad(std::span<const double> x, std::size_t label, LossKind kind, std::uint64_t seed) const override;
    std::vector<double> logits(std::span<const double> x, std::uint64_t seed) const override;

    const std::vector<TransformSpec>& chain() const { return chain_; }
    const std::vector<GradPolicy>& policies() const { return policies_; }
    std::size_t eot_r() const { return eot_r_; }

private:
    const SpeakerModel& m_;
    std::vector<TransformSpec> chain_;
    std::size_t eot_r_;
    std::vector<GradPolicy> policies_;
};

// Exact forward through a deterministic transform, identity backward.
grad::Var bpda_forward_backward(grad::Var x, const TransformSpec& t, int sample_rate = kSampleRate);

// Mean of r per-draw losses and gradients. Draw i uses seed for i = 0 and
// derive_seed(seed, i) otherwise; the reduction runs in draw order.
LossGrad eot_loss(const std::function<LossGrad(std::uint64_t draw_seed)>& draw, std::size_t r, std::uint64_t seed);
LossGrad eot_loss(const SpeakerModel& m, const std::vector<TransformSpec>& chain, std::span<const double> x,
                  std::size_t label, std::size_t r, std::uint64_t seed, LossKind kind = LossKind::CrossEntropy);

// Score function of model ∘ chain. Each call draws fresh transform
// randomness from (seed, call index) and bumps *counter when given.
ScoreFn adaptive_blackbox(const SpeakerModel& m, std::vector<TransformSpec> chain, std::uint64_t seed,
                          std::shared_ptr<std::size_t> counter = nullptr);
// Composes an arbitrary score function with a waveform-level chain.
ScoreFn adaptive_blackbox(ScoreFn inner, std::vector<TransformSpec> chain, std::uint64_t seed,
                          std::shared_ptr<std::size_t> counter = nullptr);

enum class ReplicateMode { F, W };

const char* to_string(ReplicateMode m);

struct ReplicateResult {
    AttackResult attack;            // success and losses refer to the defended evaluation
    AttackResult base;              // the attack on the FeCo-free pipeline
    FeatureMatrix adversarial_features;  // log-mel of the base adversarial voice
    FeatureMatrix replicated;            // M'
    Waveform reconstructed{std::vector<double>{0.0}};  // mode W only
    double order_match_rate = 0.0;  // fraction of FeCo(M') rows equal to M rows in position
};

// White-box attack on the chain without its FeCo, then k-fold replication of
// the adversarial log-mel so that compressing it again restores the attack.
// Mode F evaluates the defended network on M' at the feature interface, mode
// W reconstructs a waveform with Griffin-Lim and submits it to the full chain.
ReplicateResult replicate_attack(const SpeakerModel& m, const std::vector<TransformSpec>& chain, const Waveform& x,
                                 std::size_t y, const AttackConfig& cfg, ReplicateMode mode,
                                 std::size_t eot_r = 1, std::size_t gl_iterations = 32);

// Logits of the defended network fed a log-mel matrix directly: FeCo of the
// chain applied at its stage (delta and cmvn computed from the matrix; the
// final stage is treated as cmvn since no waveform energy is available).
std::vector<double> defended_feature_logits(const SpeakerModel& m, const TransformSpec& feco, const FeatureMatrix& logmel,
                                            std::uint64_t seed);

}  // namespace spkdef
