#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <vector>

namespace spkdef {

inline constexpr int kSampleRate = 16000;
// One 16-bit PCM quantization step in normalized amplitude.
inline constexpr double kPcmStep = 1.0 / 32768.0;

// Mono audio with amplitudes nominally in [-1, 1].
class Waveform {
public:
    Waveform(std::vector<double> samples, int sample_rate = kSampleRate);

    const std::vector<double>& samples() const { return samples_; }
    std::vector<double>& samples() { return samples_; }
    int sample_rate() const { return sample_rate_; }
    std::size_t size() const { return samples_.size(); }
    double duration_s() const { return static_cast<double>(samples_.size()) / sample_rate_; }

    double operator[](std::size_t i) const { return samples_[i]; }

    // Clamps every sample into [-1, 1].
    void clip_samples();

    bool operator==(const Waveform&) const = default;

private:
    std::vector<double> samples_;
    int sample_rate_;
};

struct DistortionReport {
    double snr_db = std::numeric_limits<double>::infinity();
    double l2 = 0.0;
    double linf = 0.0;
};

enum class Norm { L2, LInf };

// 16-bit PCM WAV. Samples are read as int16 / 32768.
Waveform read_wav(const std::filesystem::path& path);

// Clips to [-1, 1], scales by 32768, rounds half away from zero and saturates
// to the int16 range. read_wav(write_wav(w)) is within one quantization step.
void write_wav(const Waveform& w, const std::filesystem::path& path);

// The int16 value write_wav stores for a normalized sample.
std::int16_t to_pcm16(double sample);

// In-memory equivalent of write_wav followed by read_wav.
Waveform pcm16_roundtrip(const Waveform& w);

double mean_power(std::span<const double> x);

// 10*log10(P_ref / P_delta) with delta = deg - ref. +inf when delta is zero.
double snr_db(const Waveform& ref, const Waveform& deg);

double lp_distance(const Waveform& a, const Waveform& b, Norm p);
double lp_distance(std::span<const double> a, std::span<const double> b, Norm p);

DistortionReport distortion(const Waveform& ref, const Waveform& deg);

// Rejects waveforms whose rate differs from the canonical one.
void require_rate(const Waveform& w, int sample_rate = kSampleRate);

}  // namespace spkdef
