#include "spkdef/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include <json.hpp>

#include "spkdef/error.hpp"
#include "spkdef/transforms.hpp"

namespace spkdef {

const char* to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Enroll: return "enroll";
        case Split::Test: return "test";
    }
    return "?";
}

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "enroll") return Split::Enroll;
    if (s == "test") return Split::Test;
    throw ConfigError("unknown split '" + s + "'");
}

std::vector<SpeakerProfile> make_speakers(std::size_t n_speakers, std::uint64_t seed) {
    if (n_speakers < 2) throw ParameterError("dataset: need at least 2 speakers");
    std::mt19937_64 rng(derive_seed(seed, 0x5eedu));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<SpeakerProfile> out;
    // f0 values are spread over 100-250 Hz with a random slot order so that
    // neighbouring ids do not have neighbouring pitch.
    std::vector<std::size_t> slot(n_speakers);
    for (std::size_t i = 0; i < n_speakers; ++i) slot[i] = i;
    std::shuffle(slot.begin(), slot.end(), rng);
    for (std::size_t s = 0; s < n_speakers; ++s) {
        SpeakerProfile sp;
        sp.id = s;
        sp.f0 = 100.0 + 150.0 * (static_cast<double>(slot[s]) + 0.2 + 0.6 * u(rng)) / static_cast<double>(n_speakers);
        sp.formants = {300.0 + 600.0 * u(rng), 900.0 + 1500.0 * u(rng), 2500.0 + 1300.0 * u(rng)};
        sp.bandwidths = {60.0 + 60.0 * u(rng), 90.0 + 80.0 * u(rng), 120.0 + 100.0 * u(rng)};
        sp.noise_level = 0.002 + 0.002 * u(rng);
        out.push_back(std::move(sp));
    }
    return out;
}

Waveform synthesize_voice(const SpeakerProfile& sp, std::size_t voice_index, double duration_s, std::uint64_t seed) {
    if (!(duration_s > 0.0)) throw ParameterError("synthesize_voice: duration must be positive");
    const auto n = static_cast<std::size_t>(std::llround(duration_s * kSampleRate));
    std::mt19937_64 rng(derive_seed(derive_seed(seed, sp.id + 1), voice_index + 1));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);

    const double f0 = sp.f0 * (1.0 + 0.04 * (u(rng) - 0.5));
    const double vib_rate = 4.0 + 3.0 * u(rng), vib_depth = 0.01 + 0.02 * u(rng), vib_phase = 2 * std::numbers::pi * u(rng);
    const double env_rate = 2.0 + 3.0 * u(rng), env_phase = 2 * std::numbers::pi * u(rng);
    const double formant_shift = 1.0 + 0.04 * (u(rng) - 0.5);
    const double target_rms = 0.1 * (0.8 + 0.4 * u(rng));

    auto envelope = [&](double f) {
        double a = 0.0;
        for (std::size_t i = 0; i < sp.formants.size(); ++i) {
            double x = (f - sp.formants[i] * formant_shift) / sp.bandwidths[i];
            a += 1.0 / (1.0 + x * x);
        }
        return a + 0.02;
    };

    std::vector<double> x(n, 0.0);
    std::vector<double> phase(64, 0.0);
    for (double& p : phase) p = 2 * std::numbers::pi * u(rng);
    double jitter = 0.0, theta = 0.0;
    const double dt = 1.0 / kSampleRate;
    for (std::size_t t = 0; t < n; ++t) {
        const double time = static_cast<double>(t) * dt;
        jitter = 0.999 * jitter + 0.0005 * normal(rng);
        const double f = f0 * (1.0 + vib_depth * std::sin(2 * std::numbers::pi * vib_rate * time + vib_phase) + jitter);
        theta += 2 * std::numbers::pi * f * dt;
        double s = 0.0;
        for (std::size_t h = 1; h <= phase.size(); ++h) {
            const double fh = f * static_cast<double>(h);
            if (fh >= 7000.0) break;
            s += envelope(fh) / std::sqrt(static_cast<double>(h)) * std::sin(static_cast<double>(h) * theta + phase[h - 1]);
        }
        const double env = 0.6 + 0.4 * std::sin(2 * std::numbers::pi * env_rate * time + env_phase);
        x[t] = env * s;
    }
    double p = 0.0;
    for (double v : x) p += v * v;
    const double gain = target_rms / std::sqrt(p / static_cast<double>(n) + 1e-20);
    for (double& v : x) v = std::clamp(v * gain + sp.noise_level * normal(rng), -1.0, 1.0);
    // Voices live on the 16-bit grid like any recording read from disk.
    return pcm16_roundtrip(Waveform(std::move(x), kSampleRate));
}

Split split_for(std::size_t voice_index, std::size_t voices_per_speaker) {
    if (voices_per_speaker < 3) throw ParameterError("dataset: need at least 3 voices per speaker");
    const auto n_train = static_cast<std::size_t>(std::ceil(0.6 * static_cast<double>(voices_per_speaker)));
    const std::size_t n_enroll = std::max<std::size_t>(1, voices_per_speaker / 10);
    if (voice_index < n_train) return Split::Train;
    if (voice_index < n_train + n_enroll) return Split::Enroll;
    return Split::Test;
}

namespace {

std::string voice_name(std::size_t s, std::size_t v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "wav/spk%02zu_%03zu.wav", s, v);
    return buf;
}

void add_voice(Corpus& c, Split split, Waveform w, std::size_t label) {
    LabeledVoice lv{std::move(w), label};
    switch (split) {
        case Split::Train: c.train.push_back(std::move(lv)); break;
        case Split::Enroll: c.enroll.push_back(std::move(lv)); break;
        case Split::Test: c.test.push_back(std::move(lv)); break;
    }
}

}  // namespace

DatasetManifest gen_synthetic_dataset(std::size_t n_speakers, std::size_t voices_per_speaker, double duration_s,
                                      std::uint64_t seed, const std::filesystem::path& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir / "wav", ec);
    if (ec) throw IoError("cannot create dataset directory " + out_dir.string() + ": " + ec.message());
    DatasetManifest m;
    m.seed = seed;
    m.duration_s = duration_s;
    m.speakers = make_speakers(n_speakers, seed);
    for (const auto& sp : m.speakers)
        for (std::size_t v = 0; v < voices_per_speaker; ++v) {
            VoiceEntry e{sp.id, voice_name(sp.id, v), split_for(v, voices_per_speaker)};
            write_wav(synthesize_voice(sp, v, duration_s, seed), out_dir / e.wav_path);
            m.voices.push_back(std::move(e));
        }
    save_manifest(m, out_dir / "manifest.json");
    return m;
}

Corpus synthesize_corpus(std::size_t n_speakers, std::size_t voices_per_speaker, double duration_s,
                         std::uint64_t seed) {
    Corpus c;
    c.n_speakers = n_speakers;
    for (const auto& sp : make_speakers(n_speakers, seed))
        for (std::size_t v = 0; v < voices_per_speaker; ++v)
            add_voice(c, split_for(v, voices_per_speaker), synthesize_voice(sp, v, duration_s, seed), sp.id);
    return c;
}

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
    nlohmann::json j;
    j["seed"] = m.seed;
    j["duration_s"] = m.duration_s;
    j["sample_rate"] = m.sample_rate;
    j["speakers"] = nlohmann::json::array();
    for (const auto& s : m.speakers)
        j["speakers"].push_back({{"id", s.id}, {"f0", s.f0}, {"formants", s.formants}, {"bandwidths", s.bandwidths},
                                 {"noise_level", s.noise_level}});
    j["voices"] = nlohmann::json::array();
    for (const auto& v : m.voices)
        j["voices"].push_back({{"speaker_id", v.speaker_id}, {"wav_path", v.wav_path}, {"split", to_string(v.split)}});
    std::ofstream out(path);
    if (!out) throw IoError("cannot write manifest " + path.string());
    out << j.dump(2) << "\n";
    if (!out) throw IoError("failed writing manifest " + path.string());
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open dataset manifest " + path.string());
    nlohmann::json j;
    try {
        in >> j;
        DatasetManifest m;
        m.seed = j.at("seed").get<std::uint64_t>();
        m.duration_s = j.at("duration_s").get<double>();
        m.sample_rate = j.at("sample_rate").get<int>();
        for (const auto& s : j.at("speakers")) {
            SpeakerProfile sp;
            sp.id = s.at("id").get<std::size_t>();
            sp.f0 = s.at("f0").get<double>();
            sp.formants = s.at("formants").get<std::vector<double>>();
            sp.bandwidths = s.at("bandwidths").get<std::vector<double>>();
            sp.noise_level = s.at("noise_level").get<double>();
            m.speakers.push_back(std::move(sp));
        }
        for (const auto& v : j.at("voices"))
            m.voices.push_back({v.at("speaker_id").get<std::size_t>(), v.at("wav_path").get<std::string>(),
                                split_from_string(v.at("split").get<std::string>())});
        for (std::size_t i = 0; i < m.speakers.size(); ++i)
            if (m.speakers[i].id != i) throw ConfigError("manifest: speaker ids must be dense 0..n-1");
        for (const auto& v : m.voices)
            if (v.speaker_id >= m.speakers.size()) throw ConfigError("manifest: voice references unknown speaker");
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("malformed manifest " + path.string() + ": " + e.what());
    }
}

Corpus load_corpus(const std::filesystem::path& manifest_path) {
    DatasetManifest m = load_manifest(manifest_path);
    Corpus c;
    c.n_speakers = m.speakers.size();
    const auto dir = manifest_path.parent_path();
    for (const auto& v : m.voices) add_voice(c, v.split, read_wav(dir / v.wav_path), v.speaker_id);
    return c;
}

}  // namespace spkdef
