#pragma once

// Synthetic speaker corpus: each speaker is a harmonic source at its own f0
// shaped by three formant resonances; each voice adds its own vibrato,
// jitter, amplitude envelope and noise.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "spkdef/audio.hpp"
#include "spkdef/model.hpp"

namespace spkdef {

enum class Split { Train, Enroll, Test };

const char* to_string(Split s);
Split split_from_string(const std::string& s);

struct SpeakerProfile {
    std::size_t id = 0;
    double f0 = 150.0;
    std::vector<double> formants;   // Hz
    std::vector<double> bandwidths; // Hz
    double noise_level = 0.003;     // noise RMS relative to full scale

    bool operator==(const SpeakerProfile&) const = default;
};

struct VoiceEntry {
    std::size_t speaker_id = 0;
    std::string wav_path;  // relative to the manifest directory
    Split split = Split::Train;

    bool operator==(const VoiceEntry&) const = default;
};

struct DatasetManifest {
    std::vector<SpeakerProfile> speakers;
    std::vector<VoiceEntry> voices;
    std::uint64_t seed = 0;
    double duration_s = 1.0;
    int sample_rate = kSampleRate;

    bool operator==(const DatasetManifest&) const = default;
};

std::vector<SpeakerProfile> make_speakers(std::size_t n_speakers, std::uint64_t seed);

Waveform synthesize_voice(const SpeakerProfile& sp, std::size_t voice_index, double duration_s, std::uint64_t seed);

// Split of the i-th of n voices of a speaker: the first 60% train, then 10%
// (at least one) enroll, the rest test.
Split split_for(std::size_t voice_index, std::size_t voices_per_speaker);

// Writes <out_dir>/wav/spkSS_VVV.wav (zero-padded indices) and <out_dir>/manifest.json.
DatasetManifest gen_synthetic_dataset(std::size_t n_speakers, std::size_t voices_per_speaker, double duration_s,
                                      std::uint64_t seed, const std::filesystem::path& out_dir);

// In-memory corpus with the same content and splits.
struct Corpus {
    std::vector<LabeledVoice> train, enroll, test;
    std::size_t n_speakers = 0;
};

Corpus synthesize_corpus(std::size_t n_speakers, std::size_t voices_per_speaker, double duration_s,
                         std::uint64_t seed);

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);
DatasetManifest load_manifest(const std::filesystem::path& path);

// Reads every WAV listed in the manifest.
Corpus load_corpus(const std::filesystem::path& manifest_path);

}  // namespace spkdef
