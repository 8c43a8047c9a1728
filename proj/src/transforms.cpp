#include "spkdef/transforms.hpp"

#include "spkdef/codec.hpp"
#include "spkdef/error.hpp"

namespace spkdef {

const char* to_string(GradPolicy p) {
    switch (p) {
        case GradPolicy::Exact: return "Exact";
        case GradPolicy::BpdaIdentity: return "BPDA-Identity";
        case GradPolicy::FrozenAssignment: return "FrozenAssignment";
    }
    return "?";
}

GradPolicy natural_policy(const TransformSpec& t) {
    if (t.kind == TransformKind::FeCo) return GradPolicy::FrozenAssignment;
    return t.differentiable() ? GradPolicy::Exact : GradPolicy::BpdaIdentity;
}

bool is_feature_level(const TransformSpec& t) { return t.kind == TransformKind::FeCo; }

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t z = seed ^ (salt * 0x9e3779b97f4a7c15ULL);
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

Waveform apply_waveform_transform(const Waveform& w, const TransformSpec& t, std::uint64_t seed) {
    t.validate();
    switch (t.kind) {
        case TransformKind::QT: return quantize(w, static_cast<int>(t.param("q")));
        case TransformKind::AT: return add_turbulence(w, t.param("snr"), seed);
        case TransformKind::AS: return avg_smooth(w, static_cast<int>(t.param("k")));
        case TransformKind::MS: return median_smooth(w, static_cast<int>(t.param("k")));
        case TransformKind::DS: return down_up_sample(w, t.param("tau"));
        case TransformKind::LPF: return fir_lowpass(w, t.param("f_p"), t.param("f_s"));
        case TransformKind::BPF: return fir_bandpass(w, t.param("f_pl"), t.param("f_pu"), t.param("f_sl"), t.param("f_su"));
        case TransformKind::CodecCBR:
        case TransformKind::CodecVBR: return toy_codec_roundtrip(w, CodecConfig::from_spec(t));
        case TransformKind::ExternalCodec: return external_codec_roundtrip(w, t.command);
        case TransformKind::FeCo: break;
    }
    throw ContractError("FeCo is a feature-level transformation and has no waveform form");
}

Waveform apply_waveform_chain(const Waveform& w, const std::vector<TransformSpec>& chain, std::uint64_t seed) {
    Waveform out = w;
    for (std::size_t i = 0; i < chain.size(); ++i) {
        if (is_feature_level(chain[i])) continue;
        out = apply_waveform_transform(out, chain[i], derive_seed(seed, i + 1));
    }
    return out;
}

grad::Var waveform_transform_layer(grad::Var x, const TransformSpec& t, std::uint64_t seed, GradPolicy policy,
                                   int sample_rate) {
    t.validate();
    if (is_feature_level(t)) throw ContractError("FeCo is a feature-level transformation and has no waveform layer");
    if (policy == GradPolicy::FrozenAssignment) throw ContractError("FrozenAssignment applies to FeCo only");
    if (policy == GradPolicy::Exact && !t.differentiable()) {
        throw ContractError(std::string(to_string(t.kind)) + " is not differentiable; use BPDA");
    }
    if (policy == GradPolicy::BpdaIdentity) {
        return grad::bpda(x, [&](const grad::Tensor& v) {
            Waveform out = apply_waveform_transform(Waveform(v.data, sample_rate), t, seed);
            return grad::Tensor(v.shape, std::vector<double>(out.samples().begin(), out.samples().end()));
        });
    }
    const std::size_t n = x.numel();
    switch (t.kind) {
        case TransformKind::AT: {
            // The noise is sigma(x) z with z fixed by the seed and sigma^2
            // proportional to the mean power P, so d sigma / d x_i = sigma x_i / (n P).
            auto noise = turbulence_noise(Waveform(x.value().data, sample_rate), t.param("snr"), seed);
            const double power = mean_power(x.value().data);
            grad::Tensor y = x.value();
            for (std::size_t i = 0; i < n; ++i) y.data[i] += noise[i];
            return x.graph->record(std::move(y), {x},
                                   [ix = x.id, noise = std::move(noise), power](grad::Graph& g, std::size_t self) {
                const auto& go = g.node_grad(self);
                const std::vector<double>& xv = g.node_value(ix).data;
                auto& gi = g.grad_buffer(ix);
                double gn = 0.0;
                for (std::size_t j = 0; j < go.size(); ++j) gn += go[j] * noise[j];
                const double c = power > 0.0 ? gn / (static_cast<double>(go.size()) * power) : 0.0;
                for (std::size_t j = 0; j < go.size(); ++j) gi[j] += go[j] + c * xv[j];
            });
        }
        case TransformKind::AS: return grad::linear_map(avg_smooth_operator(n, static_cast<int>(t.param("k"))), x);
        case TransformKind::MS: return grad::median_select(x, static_cast<std::size_t>(t.param("k")));
        case TransformKind::DS: return grad::linear_map(down_up_operator(n, t.param("tau"), sample_rate), x);
        case TransformKind::LPF:
            return grad::linear_map(lowpass_operator(n, t.param("f_p"), t.param("f_s"), sample_rate), x);
        case TransformKind::BPF:
            return grad::linear_map(
                bandpass_operator(n, t.param("f_pl"), t.param("f_pu"), t.param("f_sl"), t.param("f_su"), sample_rate),
                x);
        default: break;
    }
    throw ContractError(std::string("no exact layer for ") + to_string(t.kind));
}

bool chain_randomized(const std::vector<TransformSpec>& chain) {
    for (const auto& t : chain)
        if (t.randomized()) return true;
    return false;
}

}  // namespace spkdef
