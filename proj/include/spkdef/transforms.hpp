#pragma once

// Application of TransformSpecs to waveforms, both as plain functions and as
// layers on a grad::Graph. FeCo acts on features and is handled by the model
// pipeline; the waveform-level entry points reject it.

#include <cstdint>
#include <vector>

#include "spkdef/audio.hpp"
#include "spkdef/dsp.hpp"
#include "spkdef/grad.hpp"

namespace spkdef {

enum class GradPolicy { Exact, BpdaIdentity, FrozenAssignment };

const char* to_string(GradPolicy p);

// Exact for differentiable waveform transforms, identity BPDA for
// non-differentiable ones, frozen cluster assignments for FeCo.
GradPolicy natural_policy(const TransformSpec& t);

bool is_feature_level(const TransformSpec& t);

// SplitMix64 finalizer over seed ^ salt; used for every derived sub-seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt);

Waveform apply_waveform_transform(const Waveform& w, const TransformSpec& t, std::uint64_t seed);

// Waveform-level transforms of a chain applied in order, transform i seeded
// with derive_seed(seed, i + 1). FeCo entries are skipped.
Waveform apply_waveform_chain(const Waveform& w, const std::vector<TransformSpec>& chain, std::uint64_t seed);

// The transform as a graph layer over a rank-1 waveform node. Exact is only
// valid for differentiable transforms.
grad::Var waveform_transform_layer(grad::Var x, const TransformSpec& t, std::uint64_t seed, GradPolicy policy,
                                   int sample_rate = kSampleRate);

bool chain_randomized(const std::vector<TransformSpec>& chain);

}  // namespace spkdef
