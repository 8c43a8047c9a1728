#include "spkdef/adaptive.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

#include "spkdef/error.hpp"
#include "spkdef/feco.hpp"

namespace spkdef {

namespace {

std::optional<std::size_t> feco_index(const std::vector<TransformSpec>& chain) {
    std::optional<std::size_t> idx;
    for (std::size_t i = 0; i < chain.size(); ++i) {
        if (!is_feature_level(chain[i])) continue;
        if (idx) throw ContractError("adaptive: at most one FeCo per chain");
        idx = i;
    }
    return idx;
}

}  // namespace

DefendedModelView::DefendedModelView(const SpeakerModel& m, std::vector<TransformSpec> chain, std::size_t eot_r,
                                     std::vector<GradPolicy> policies)
    : m_(m), chain_(std::move(chain)), eot_r_(eot_r), policies_(std::move(policies)) {
    if (eot_r_ == 0) throw ParameterError("DefendedModelView: eot_r must be at least 1");
    if (policies_.empty()) {
        for (const auto& t : chain_) policies_.push_back(natural_policy(t));
    }
    if (policies_.size() != chain_.size()) throw ShapeError("DefendedModelView: one policy per transform");
    for (std::size_t i = 0; i < chain_.size(); ++i) {
        const auto& t = chain_[i];
        if (is_feature_level(t)) {
            if (policies_[i] != GradPolicy::FrozenAssignment)
                throw ContractError("DefendedModelView: FeCo requires the FrozenAssignment policy");
        } else if (!t.differentiable() && policies_[i] != GradPolicy::BpdaIdentity) {
            throw ContractError(std::string("DefendedModelView: ") + to_string(t.kind) + " needs BPDA");
        }
    }
}

LossGrad DefendedModelView::loss_grad(std::span<const double> x, std::size_t label, LossKind kind,
                                      std::uint64_t seed) const {
    return waveform_loss_grad(m_, x, label, kind, chain_, seed, eot_r_, policies_);
}

std::vector<double> DefendedModelView::logits(std::span<const double> x, std::uint64_t seed) const {
    return forward_logits(m_, Waveform(std::vector<double>(x.begin(), x.end())), chain_, seed);
}

grad::Var bpda_forward_backward(grad::Var x, const TransformSpec& t, int sample_rate) {
    if (t.randomized()) throw ContractError("bpda: transform must be deterministic");
    return waveform_transform_layer(x, t, 0, GradPolicy::BpdaIdentity, sample_rate);
}

LossGrad eot_loss(const std::function<LossGrad(std::uint64_t)>& draw, std::size_t r, std::uint64_t seed) {
    if (r == 0) throw ParameterError("eot: R must be at least 1");
    LossGrad out;
    for (std::size_t i = 0; i < r; ++i) {
        LossGrad d = draw(i == 0 ? seed : derive_seed(seed, i));
        if (i == 0) {
            out = std::move(d);
            continue;
        }
        if (d.grad.size() != out.grad.size()) throw ShapeError("eot: gradient size changed between draws");
        out.loss += d.loss;
        for (std::size_t j = 0; j < d.grad.size(); ++j) out.grad[j] += d.grad[j];
    }
    const double inv = 1.0 / static_cast<double>(r);
    out.loss *= inv;
    for (double& g : out.grad) g *= inv;
    return out;
}

LossGrad eot_loss(const SpeakerModel& m, const std::vector<TransformSpec>& chain, std::span<const double> x,
                  std::size_t label, std::size_t r, std::uint64_t seed, LossKind kind) {
    return eot_loss([&](std::uint64_t s) { return waveform_loss_grad(m, x, label, kind, chain, s, 1); }, r, seed);
}

ScoreFn adaptive_blackbox(const SpeakerModel& m, std::vector<TransformSpec> chain, std::uint64_t seed,
                          std::shared_ptr<std::size_t> counter) {
    auto calls = std::make_shared<std::size_t>(0);
    return [&m, chain = std::move(chain), seed, counter, calls](std::span<const double> x) {
        const std::uint64_t s = derive_seed(seed, ++*calls);
        if (counter) ++*counter;
        return forward_logits(m, Waveform(std::vector<double>(x.begin(), x.end())), chain, s);
    };
}

ScoreFn adaptive_blackbox(ScoreFn inner, std::vector<TransformSpec> chain, std::uint64_t seed,
                          std::shared_ptr<std::size_t> counter) {
    if (feco_index(chain)) throw ContractError("adaptive_blackbox: a feature-level transform needs the model overload");
    auto calls = std::make_shared<std::size_t>(0);
    return [inner = std::move(inner), chain = std::move(chain), seed, counter, calls](std::span<const double> x) {
        const std::uint64_t s = derive_seed(seed, ++*calls);
        if (counter) ++*counter;
        if (chain.empty()) return inner(x);
        Waveform w = apply_waveform_chain(Waveform(std::vector<double>(x.begin(), x.end())), chain, s);
        return inner(w.samples());
    };
}

const char* to_string(ReplicateMode m) { return m == ReplicateMode::F ? "F" : "W"; }

std::vector<double> defended_feature_logits(const SpeakerModel& m, const TransformSpec& feco,
                                            const FeatureMatrix& logmel, std::uint64_t seed) {
    if (!is_feature_level(feco)) throw ContractError("defended_feature_logits: transform is not FeCo");
    const auto stage = static_cast<FeatureStage>(static_cast<int>(feco.param("stage")));
    const auto method = static_cast<ClusterMethod>(static_cast<int>(feco.param("cl_m")));
    grad::Graph g;
    grad::Var orig = g.constant(logmel.to_tensor());
    grad::Var at = orig;
    if (stage != FeatureStage::Original) {
        at = delta_features(orig);
        if (stage != FeatureStage::Delta) at = cmvn_features(at);
    }
    FeatureMatrix staged = FeatureMatrix::from_tensor(at.value(), stage, FeatureConfig{});
    FecoPlan plan = feco_plan(staged, feco.param("cl_r"), method, seed);
    FeatureMatrix compressed = apply_feco_plan(logmel, plan);
    return forward_logits_features(m, compressed);
}

ReplicateResult replicate_attack(const SpeakerModel& m, const std::vector<TransformSpec>& chain, const Waveform& x,
                                 std::size_t y, const AttackConfig& cfg, ReplicateMode mode, std::size_t eot_r,
                                 std::size_t gl_iterations) {
    auto idx = feco_index(chain);
    if (!idx) throw ContractError("replicate_attack: the defended chain has no FeCo");
    const TransformSpec& feco = chain[*idx];
    const double cl_r = feco.param("cl_r");
    const auto method = static_cast<ClusterMethod>(static_cast<int>(feco.param("cl_m")));

    std::vector<TransformSpec> rest;
    for (std::size_t i = 0; i < chain.size(); ++i)
        if (i != *idx) rest.push_back(chain[i]);
    DefendedModelView view(m, rest, chain_randomized(rest) ? eot_r : 1);

    ReplicateResult out;
    switch (cfg.kind) {
        case AttackKind::FGSM: out.base = fgsm(view, x, y, cfg); break;
        case AttackKind::PGD: out.base = pgd(view, x, y, cfg); break;
        case AttackKind::CWInf: out.base = cw_inf(view, x, y, cfg); break;
        case AttackKind::CW2: out.base = cw_l2(view, x, y, cfg); break;
        default: throw ContractError("replicate_attack: needs a white-box attack");
    }

    // The content entering FeCo: the adversarial voice after the waveform stages.
    const std::uint64_t chain_seed = derive_seed(cfg.seed, 0x5e91);
    Waveform staged = apply_waveform_chain(out.base.adversarial, rest, chain_seed);
    out.adversarial_features = extract_features(staged, FeatureStage::Original);
    const std::uint64_t rep_seed = derive_seed(cfg.seed, 0x2e71);
    out.replicated = replicate_features(out.adversarial_features, cl_r, method, rep_seed);

    // Diagnostic: positional agreement of FeCo(M') with M.
    {
        FeatureMatrix back = feco_compress(out.replicated, cl_r, method, rep_seed);
        std::size_t match = 0;
        const auto& M = out.adversarial_features;
        if (back.rows == M.rows) {
            for (std::size_t r = 0; r < M.rows; ++r) {
                bool eq = true;
                for (std::size_t c = 0; c < M.cols && eq; ++c) eq = std::abs(back.at(r, c) - M.at(r, c)) <= 1e-6;
                match += eq ? 1 : 0;
            }
        }
        out.order_match_rate = M.rows ? static_cast<double>(match) / static_cast<double>(M.rows) : 0.0;
    }

    const std::uint64_t eval_seed = derive_seed(cfg.seed, 0xe7a1);
    std::vector<double> logits;
    out.attack = out.base;
    if (mode == ReplicateMode::F) {
        logits = defended_feature_logits(m, feco, out.replicated, derive_seed(eval_seed, *idx + 1));
    } else {
        out.reconstructed = pcm16_roundtrip(griffin_lim_reconstruct(out.replicated, gl_iterations, rep_seed));
        logits = forward_logits(m, out.reconstructed, chain, eval_seed);
        out.attack.adversarial = out.reconstructed;
    }
    out.attack.success = argmax(logits) != y;
    out.attack.final_loss_ce = cross_entropy_value(logits, y);
    out.attack.final_loss_margin = margin_value(logits, y);
    return out;
}

}  // namespace spkdef
