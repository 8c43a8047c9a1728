#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "spkdef/audio.hpp"
#include "spkdef/grad.hpp"

namespace spkdef {

enum class TransformKind { QT, AT, AS, MS, DS, LPF, BPF, CodecCBR, CodecVBR, ExternalCodec, FeCo };

const char* to_string(TransformKind kind);
TransformKind transform_kind_from_string(const std::string& name);

// A named input transformation and its tunable parameters.
//
// Parameter names: q (QT); snr (AT); k (AS, MS); tau (DS); f_p, f_s (LPF);
// f_pl, f_pu, f_sl, f_su (BPF); bitrate, quality, frame_len, num_bands,
// max_bits_per_band (codecs); cl_r, cl_m, stage (FeCo). cl_m and stage are
// stored as codes, see ClusterMethod and FeatureStage.
struct TransformSpec {
    TransformKind kind = TransformKind::QT;
    std::string name;
    std::map<std::string, double> params;
    std::string command;  // ExternalCodec command template with {in} / {out}

    // Parameters filled with the tuned defaults for `kind`.
    static TransformSpec defaults(TransformKind kind);

    double param(const std::string& key) const;
    bool differentiable() const;
    bool randomized() const;

    // Throws ParameterError when a parameter violates its range.
    void validate() const;

    bool operator==(const TransformSpec&) const = default;
};

// ---- time domain -------------------------------------------------------------

// Rounds each sample, on the int16 grid, to the nearest multiple of q (ties away
// from zero) and saturates to the int16 range.
Waveform quantize(const Waveform& w, int q);

// White Gaussian noise whose mean power is P(w) / 10^(snr/10).
std::vector<double> turbulence_noise(const Waveform& w, double snr_db, std::uint64_t seed);
Waveform add_turbulence(const Waveform& w, double snr_db, std::uint64_t seed);

Waveform avg_smooth(const Waveform& w, int k);
Waveform median_smooth(const Waveform& w, int k);

// ---- frequency domain --------------------------------------------------------

Waveform down_up_sample(const Waveform& w, double tau);
Waveform fir_lowpass(const Waveform& w, double f_p, double f_s);
Waveform fir_bandpass(const Waveform& w, double f_pl, double f_pu, double f_sl, double f_su);

// Hamming-windowed sinc lowpass with unit DC gain.
std::vector<double> lowpass_taps(double cutoff_hz, int sample_rate, std::size_t num_taps);

// Odd tap count meeting the Hamming transition-width rule 3.3 * fs / width.
std::size_t hamming_tap_count(double transition_hz, int sample_rate);

// Zero-phase FIR applied with edge-replicate padding; output length = input length.
class FirOperator final : public grad::LinearOperator {
public:
    FirOperator(std::vector<double> taps, std::size_t length);
    std::size_t input_size() const override { return n_; }
    std::size_t output_size() const override { return n_; }
    void apply(std::span<const double> x, std::span<double> y) const override;
    void apply_adjoint_add(std::span<const double> g_out, std::span<double> g_in) const override;
    const std::vector<double>& taps() const { return taps_; }

private:
    std::vector<double> taps_;
    std::size_t n_;
};

// Linear interpolation from n_in samples onto n_out samples with both end
// points aligned.
class LinearResampler final : public grad::LinearOperator {
public:
    LinearResampler(std::size_t n_in, std::size_t n_out);
    std::size_t input_size() const override { return n_in_; }
    std::size_t output_size() const override { return n_out_; }
    void apply(std::span<const double> x, std::span<double> y) const override;
    void apply_adjoint_add(std::span<const double> g_out, std::span<double> g_in) const override;

private:
    std::size_t n_in_, n_out_;
    std::vector<std::size_t> lo_;
    std::vector<double> frac_;
};

// Length-preserving linear operator forms of the differentiable deterministic
// transforms. The plain waveform functions above are implemented with them.
std::shared_ptr<const grad::LinearOperator> avg_smooth_operator(std::size_t length, int k);
std::shared_ptr<const grad::LinearOperator> down_up_operator(std::size_t length, double tau, int sample_rate);
std::shared_ptr<const grad::LinearOperator> lowpass_operator(std::size_t length, double f_p, double f_s,
                                                             int sample_rate);
std::shared_ptr<const grad::LinearOperator> bandpass_operator(std::size_t length, double f_pl, double f_pu,
                                                              double f_sl, double f_su, int sample_rate);

}  // namespace spkdef
