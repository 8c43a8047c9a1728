#include "spkdef/audio.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <string>

#include "spkdef/error.hpp"

namespace spkdef {

Waveform::Waveform(std::vector<double> samples, int sample_rate)
    : samples_(std::move(samples)), sample_rate_(sample_rate) {
    if (sample_rate_ <= 0) {
        throw ParameterError("waveform sample_rate must be positive");
    }
    if (samples_.empty()) {
        throw ShapeError("waveform must contain at least one sample");
    }
}

void Waveform::clip_samples() {
    for (double& s : samples_) s = std::clamp(s, -1.0, 1.0);
}

namespace {

std::uint32_t read_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint16_t read_u16(const unsigned char* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xFF));
    out.push_back(static_cast<char>((v >> 8) & 0xFF));
}

}  // namespace

Waveform read_wav(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open WAV file: " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
        std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
        throw FormatError(path.string() + ": missing RIFF/WAVE header");
    }

    bool have_fmt = false;
    std::uint32_t sample_rate = 0;
    const unsigned char* data = nullptr;
    std::uint32_t data_size = 0;

    std::size_t pos = 12;
    while (pos + 8 <= bytes.size()) {
        const unsigned char* chunk = bytes.data() + pos;
        std::uint32_t size = read_u32(chunk + 4);
        std::size_t body = pos + 8;
        if (body + size > bytes.size()) {
            // Tolerate a truncated final data chunk, reject anything else.
            if (std::memcmp(chunk, "data", 4) != 0) {
                throw FormatError(path.string() + ": chunk size exceeds file length");
            }
            size = static_cast<std::uint32_t>(bytes.size() - body);
        }
        if (std::memcmp(chunk, "fmt ", 4) == 0) {
            if (size < 16) throw FormatError(path.string() + ": fmt chunk too short");
            const unsigned char* f = bytes.data() + body;
            std::uint16_t audio_format = read_u16(f);
            std::uint16_t channels = read_u16(f + 2);
            sample_rate = read_u32(f + 4);
            std::uint16_t bits = read_u16(f + 14);
            if (audio_format != 1) {
                throw FormatError(path.string() + ": audio_format=" + std::to_string(audio_format) +
                                  " (only PCM=1 supported)");
            }
            if (channels != 1) {
                throw FormatError(path.string() + ": num_channels=" + std::to_string(channels) +
                                  " (only mono supported)");
            }
            if (bits != 16) {
                throw FormatError(path.string() + ": bits_per_sample=" + std::to_string(bits) +
                                  " (only 16 supported)");
            }
            if (sample_rate == 0) throw FormatError(path.string() + ": sample_rate=0");
            have_fmt = true;
        } else if (std::memcmp(chunk, "data", 4) == 0) {
            data = bytes.data() + body;
            data_size = size;
        }
        pos = body + size + (size & 1u);
    }

    if (!have_fmt) throw FormatError(path.string() + ": missing fmt chunk");
    if (data == nullptr) throw FormatError(path.string() + ": missing data chunk");
    std::size_t n = data_size / 2;
    if (n == 0) throw FormatError(path.string() + ": data chunk is empty");

    std::vector<double> samples(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto v = static_cast<std::int16_t>(read_u16(data + 2 * i));
        samples[i] = static_cast<double>(v) / 32768.0;
    }
    return Waveform(std::move(samples), static_cast<int>(sample_rate));
}

std::int16_t to_pcm16(double sample) {
    double scaled = std::round(std::clamp(sample, -1.0, 1.0) * 32768.0);
    return static_cast<std::int16_t>(std::clamp(scaled, -32768.0, 32767.0));
}

void write_wav(const Waveform& w, const std::filesystem::path& path) {
    const auto n = static_cast<std::uint32_t>(w.size());
    const std::uint32_t data_bytes = n * 2;
    std::string out;
    out.reserve(44 + data_bytes);
    out += "RIFF";
    put_u32(out, 36 + data_bytes);
    out += "WAVE";
    out += "fmt ";
    put_u32(out, 16);
    put_u16(out, 1);  // PCM
    put_u16(out, 1);  // mono
    put_u32(out, static_cast<std::uint32_t>(w.sample_rate()));
    put_u32(out, static_cast<std::uint32_t>(w.sample_rate()) * 2);
    put_u16(out, 2);
    put_u16(out, 16);
    out += "data";
    put_u32(out, data_bytes);
    for (double s : w.samples()) put_u16(out, static_cast<std::uint16_t>(to_pcm16(s)));

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write WAV file: " + path.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("write failed: " + path.string());
}

Waveform pcm16_roundtrip(const Waveform& w) {
    std::vector<double> out(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) out[i] = to_pcm16(w[i]) / 32768.0;
    return Waveform(std::move(out), w.sample_rate());
}

double mean_power(std::span<const double> x) {
    if (x.empty()) return 0.0;
    double acc = 0.0;
    for (double v : x) acc += v * v;
    return acc / static_cast<double>(x.size());
}

namespace {

void require_same_shape(const Waveform& a, const Waveform& b, const char* op) {
    if (a.size() != b.size()) {
        throw ShapeError(std::string(op) + ": length mismatch " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
    }
    if (a.sample_rate() != b.sample_rate()) {
        throw ShapeError(std::string(op) + ": sample rate mismatch");
    }
}

}  // namespace

double snr_db(const Waveform& ref, const Waveform& deg) {
    require_same_shape(ref, deg, "snr_db");
    double p_delta = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
        double d = deg[i] - ref[i];
        p_delta += d * d;
    }
    p_delta /= static_cast<double>(ref.size());
    if (p_delta == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(mean_power(ref.samples()) / p_delta);
}

double lp_distance(std::span<const double> a, std::span<const double> b, Norm p) {
    if (a.size() != b.size()) {
        throw ShapeError("lp_distance: length mismatch " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = std::abs(a[i] - b[i]);
        if (p == Norm::L2) {
            acc += d * d;
        } else {
            acc = std::max(acc, d);
        }
    }
    return p == Norm::L2 ? std::sqrt(acc) : acc;
}

double lp_distance(const Waveform& a, const Waveform& b, Norm p) {
    return lp_distance(std::span<const double>(a.samples()), std::span<const double>(b.samples()), p);
}

DistortionReport distortion(const Waveform& ref, const Waveform& deg) {
    DistortionReport r;
    r.snr_db = snr_db(ref, deg);
    r.l2 = lp_distance(ref, deg, Norm::L2);
    r.linf = lp_distance(ref, deg, Norm::LInf);
    return r;
}

void require_rate(const Waveform& w, int sample_rate) {
    if (w.sample_rate() != sample_rate) {
        throw ParameterError("sample rate " + std::to_string(w.sample_rate()) + " Hz, expected " +
                             std::to_string(sample_rate) + " Hz");
    }
}

}  // namespace spkdef
