#include "spkdef/codec.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <sys/wait.h>
#include <unistd.h>

#include "spkdef/error.hpp"
#include "spkdef/fft.hpp"

namespace spkdef {

void CodecConfig::validate() const {
    if (frame_len < 4 || (frame_len & (frame_len - 1)) != 0) {
        throw ParameterError("codec: frame_len must be a power of two >= 4");
    }
    if (num_bands < 1 || (frame_len / 2) % num_bands != 0) {
        throw ParameterError("codec: num_bands must divide frame_len / 2");
    }
    if (max_bits_per_band < 1 || max_bits_per_band > 30) throw ParameterError("codec: max_bits_per_band out of range");
    if (mode == BitRateMode::CBR && bitrate_bits_per_frame < 1) throw ParameterError("codec: bitrate must be positive");
    if (mode == BitRateMode::VBR && !(quality > 0.0 && quality <= 1.0)) {
        throw ParameterError("codec: quality must lie in (0, 1]");
    }
}

CodecConfig CodecConfig::from_spec(const TransformSpec& spec) {
    CodecConfig c;
    auto get = [&](const char* key, double fallback) {
        auto it = spec.params.find(key);
        return it == spec.params.end() ? fallback : it->second;
    };
    if (spec.kind == TransformKind::CodecCBR) {
        c.mode = BitRateMode::CBR;
        c.bitrate_bits_per_frame = static_cast<int>(get("bitrate", c.bitrate_bits_per_frame));
    } else if (spec.kind == TransformKind::CodecVBR) {
        c.mode = BitRateMode::VBR;
        c.quality = get("quality", c.quality);
    } else {
        throw ParameterError("CodecConfig::from_spec: not a toy codec transformation");
    }
    c.frame_len = static_cast<int>(get("frame_len", c.frame_len));
    c.num_bands = static_cast<int>(get("num_bands", c.num_bands));
    c.max_bits_per_band = static_cast<int>(get("max_bits_per_band", c.max_bits_per_band));
    c.validate();
    return c;
}

namespace {

struct Band {
    std::size_t begin, end;  // bin range
};

std::vector<Band> make_bands(std::size_t n, std::size_t num_bands) {
    const std::size_t width = (n / 2) / num_bands;
    std::vector<Band> bands(num_bands);
    for (std::size_t b = 0; b < num_bands; ++b) bands[b] = {b * width, (b + 1) * width};
    bands.back().end = n / 2 + 1;  // Nyquist bin rides with the top band
    return bands;
}

// Quantization noise estimate for a band with peak magnitude `peak` and
// `width` coefficients at b bits: width * (peak / (2^b - 1))^2 / 12.
double band_noise(double peak, std::size_t width, int bits) {
    const double levels = std::ldexp(1.0, bits) - 1.0;
    const double step = peak / levels;
    return static_cast<double>(width) * step * step / 12.0;
}

std::vector<int> allocate_cbr(const CodecConfig& cfg) {
    const int nb = cfg.num_bands;
    std::vector<int> bits(static_cast<std::size_t>(nb), cfg.bitrate_bits_per_frame / nb);
    for (int i = 0; i < cfg.bitrate_bits_per_frame % nb; ++i) bits[static_cast<std::size_t>(i)] += 1;
    for (int& b : bits) b = std::clamp(b, 1, cfg.max_bits_per_band);
    return bits;
}

std::vector<int> allocate_vbr(const CodecConfig& cfg, const std::vector<double>& peaks,
                              const std::vector<double>& energies, const std::vector<Band>& bands) {
    const auto nb = static_cast<std::size_t>(cfg.num_bands);
    // Spectral flatness over band energies: geometric / arithmetic mean.
    double log_sum = 0.0, sum = 0.0;
    for (double e : energies) {
        log_sum += std::log(e + 1e-20);
        sum += e;
    }
    const double flatness = sum > 0.0 ? std::exp(log_sum / nb) / (sum / nb) : 1.0;
    const double max_budget = static_cast<double>(nb) * cfg.max_bits_per_band;
    const auto budget = static_cast<int>(std::lround(cfg.quality * max_budget * (0.5 + 0.5 * (1.0 - std::min(flatness, 1.0)))));

    std::vector<int> bits(nb, 1);
    int remaining = budget - static_cast<int>(nb);
    while (remaining > 0) {
        std::size_t best = nb;
        double best_gain = 0.0;
        for (std::size_t b = 0; b < nb; ++b) {
            if (bits[b] >= cfg.max_bits_per_band) continue;
            const std::size_t width = bands[b].end - bands[b].begin;
            const double gain = band_noise(peaks[b], width, bits[b]) - band_noise(peaks[b], width, bits[b] + 1);
            if (best == nb || gain > best_gain) {
                best = b;
                best_gain = gain;
            }
        }
        if (best == nb) break;
        ++bits[best];
        --remaining;
    }
    return bits;
}

}  // namespace

CodecOutput toy_codec_encode_decode(const Waveform& w, const CodecConfig& cfg) {
    cfg.validate();
    const auto n = static_cast<std::size_t>(cfg.frame_len);
    const auto bands = make_bands(n, static_cast<std::size_t>(cfg.num_bands));
    const std::size_t frames = (w.size() + n - 1) / n;
    std::vector<double> out(frames * n, 0.0);
    const std::vector<int> cbr_bits = cfg.mode == BitRateMode::CBR ? allocate_cbr(cfg) : std::vector<int>{};
    double total_bits = 0.0;

    std::vector<double> frame(n);
    for (std::size_t f = 0; f < frames; ++f) {
        std::fill(frame.begin(), frame.end(), 0.0);
        const std::size_t begin = f * n;
        const std::size_t count = std::min(n, w.size() - begin);
        std::copy_n(w.samples().begin() + static_cast<std::ptrdiff_t>(begin), count, frame.begin());
        auto spec = fft::rfft(frame, n);

        std::vector<double> peaks(bands.size(), 0.0), energies(bands.size(), 0.0);
        for (std::size_t b = 0; b < bands.size(); ++b) {
            for (std::size_t k = bands[b].begin; k < bands[b].end; ++k) {
                const double mag = std::abs(spec[k]);
                peaks[b] = std::max(peaks[b], mag);
                energies[b] += mag * mag;
            }
        }
        const std::vector<int> bits = cfg.mode == BitRateMode::CBR ? cbr_bits : allocate_vbr(cfg, peaks, energies, bands);
        for (int b : bits) total_bits += b;

        for (std::size_t b = 0; b < bands.size(); ++b) {
            const double levels = std::ldexp(1.0, bits[b]) - 1.0;
            for (std::size_t k = bands[b].begin; k < bands[b].end; ++k) {
                const double mag = std::abs(spec[k]);
                double qmag = 0.0;
                if (peaks[b] > 0.0) qmag = std::round(mag / peaks[b] * levels) / levels * peaks[b];
                spec[k] = mag > 0.0 ? spec[k] * (qmag / mag) : fft::Complex{qmag, 0.0};
            }
        }
        auto rec = fft::irfft(spec, n);
        std::copy(rec.begin(), rec.end(), out.begin() + static_cast<std::ptrdiff_t>(begin));
    }
    out.resize(w.size());
    return CodecOutput{Waveform(std::move(out), w.sample_rate()), total_bits / static_cast<double>(frames)};
}

Waveform toy_codec_roundtrip(const Waveform& w, const CodecConfig& cfg) {
    return toy_codec_encode_decode(w, cfg).audio;
}

namespace {

std::string replace_all(std::string s, const std::string& from, const std::string& to) {
    for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
        s.replace(pos, from.size(), to);
    }
    return s;
}

std::string quote(const std::filesystem::path& p) { return "'" + replace_all(p.string(), "'", "'\\''") + "'"; }

struct TempFiles {
    std::vector<std::filesystem::path> paths;
    ~TempFiles() {
        std::error_code ec;
        for (const auto& p : paths) std::filesystem::remove(p, ec);
    }
};

std::string unique_stem() {
    static std::atomic<std::uint64_t> counter{0};
    static const std::uint64_t salt = std::random_device{}();
    std::ostringstream s;
    s << "spkdef_codec_" << ::getpid() << "_" << std::hex << salt << "_" << counter.fetch_add(1);
    return s.str();
}

}  // namespace

Waveform external_codec_roundtrip(const Waveform& w, const std::string& command_template) {
    if (command_template.find("{in}") == std::string::npos || command_template.find("{out}") == std::string::npos) {
        throw ParameterError("external codec command template needs {in} and {out} placeholders");
    }
    const auto dir = std::filesystem::temp_directory_path();
    const std::string stem = unique_stem();
    TempFiles temps;
    const auto in_path = dir / (stem + "_in.wav");
    const auto out_path = dir / (stem + "_out.wav");
    const auto err_path = dir / (stem + "_err.txt");
    temps.paths = {in_path, out_path, err_path};

    write_wav(w, in_path);
    std::string cmd = replace_all(replace_all(command_template, "{in}", quote(in_path)), "{out}", quote(out_path));
    cmd = "( " + cmd + " ) > /dev/null 2> " + quote(err_path);
    const int status = std::system(cmd.c_str());

    auto diagnostics = [&] {
        std::ifstream err(err_path);
        std::string text((std::istreambuf_iterator<char>(err)), std::istreambuf_iterator<char>());
        if (text.size() > 2000) text.resize(2000);
        return text;
    };
    if (status != 0) {
        const int code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
        throw AdapterError("external codec failed (exit " + std::to_string(code) + "): " + command_template +
                           "\n" + diagnostics());
    }
    if (!std::filesystem::exists(out_path)) {
        throw AdapterError("external codec produced no output file: " + command_template + "\n" + diagnostics());
    }
    Waveform decoded = [&] {
        try {
            return read_wav(out_path);
        } catch (const Error& e) {
            throw AdapterError(std::string("external codec output unreadable: ") + e.what());
        }
    }();
    if (decoded.sample_rate() != w.sample_rate()) {
        throw AdapterError("external codec changed the sample rate to " + std::to_string(decoded.sample_rate()));
    }
    std::vector<double> samples = decoded.samples();
    samples.resize(w.size(), 0.0);
    return Waveform(std::move(samples), w.sample_rate());
}

}  // namespace spkdef
