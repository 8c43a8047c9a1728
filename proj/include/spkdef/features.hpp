#pragma once

// Acoustic front end: framing -> power spectrum -> log mel filterbank
// (Original) -> +first/second time derivatives (Delta) -> per-utterance
// mean/variance normalization (Cmvn) -> energy VAD frame selection (Final).
// Every stage is built on grad::Graph so gradients flow back to the waveform;
// the VAD keep-mask is computed from values and is constant in the backward
// pass.

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "spkdef/audio.hpp"
#include "spkdef/grad.hpp"

namespace spkdef {

enum class FeatureStage { Original = 0, Delta = 1, Cmvn = 2, Final = 3 };

const char* to_string(FeatureStage stage);
FeatureStage feature_stage_from_string(const std::string& name);

struct FeatureConfig {
    std::size_t frame_len = 400;  // 25 ms at 16 kHz
    std::size_t hop_len = 160;    // 10 ms
    std::size_t fft_size = 512;
    std::size_t num_mels = 32;
    double preemphasis = 0.97;
    double log_floor = 1e-10;
};

// N frames x d features, row-major.
struct FeatureMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;
    FeatureStage stage = FeatureStage::Original;
    std::size_t frame_len = 400;
    std::size_t hop_len = 160;
    int sample_rate = kSampleRate;

    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    grad::Tensor to_tensor() const { return grad::Tensor({rows, cols}, data); }
    static FeatureMatrix from_tensor(const grad::Tensor& t, FeatureStage stage, const FeatureConfig& cfg,
                                     int sample_rate = kSampleRate);
};

std::size_t frame_count(std::size_t length, std::size_t frame_len, std::size_t hop_len);

std::vector<double> hamming_window(std::size_t n);

// Slices a signal of `length` samples into frames, pre-emphasizes each frame
// (y[0] = x[0], y[t] = x[t] - a x[t-1]) and applies a Hamming window.
// Output is [N x frame_len] row-major.
class FramingOperator final : public grad::LinearOperator {
public:
    FramingOperator(std::size_t length, std::size_t frame_len, std::size_t hop_len, double preemphasis);
    std::size_t input_size() const override { return length_; }
    std::size_t output_size() const override { return frames_ * frame_len_; }
    std::size_t frames() const { return frames_; }
    void apply(std::span<const double> x, std::span<double> y) const override;
    void apply_adjoint_add(std::span<const double> g_out, std::span<double> g_in) const override;

private:
    std::size_t length_, frame_len_, hop_len_, frames_;
    double preemphasis_;
    std::vector<double> window_;
};

// Multiplies every row of an [N x in] matrix by a fixed sparse [out x in]
// matrix, giving [N x out].
class RowSparseOperator final : public grad::LinearOperator {
public:
    RowSparseOperator(const grad::Tensor& matrix, std::size_t rows);
    std::size_t input_size() const override { return rows_ * in_; }
    std::size_t output_size() const override { return rows_ * out_; }
    void apply(std::span<const double> x, std::span<double> y) const override;
    void apply_adjoint_add(std::span<const double> g_out, std::span<double> g_in) const override;

private:
    struct Entry {
        std::size_t out, in;
        double w;
    };
    std::size_t rows_, in_, out_;
    std::vector<Entry> entries_;
};

// Regression time-derivative with window 2 and edge replication, applied to
// every column of an [N x d] matrix.
class DeltaOperator final : public grad::LinearOperator {
public:
    DeltaOperator(std::size_t rows, std::size_t cols);
    std::size_t input_size() const override { return rows_ * cols_; }
    std::size_t output_size() const override { return rows_ * cols_; }
    void apply(std::span<const double> x, std::span<double> y) const override;
    void apply_adjoint_add(std::span<const double> g_out, std::span<double> g_in) const override;

private:
    std::size_t rows_, cols_;
};

// Frame list (each frame pre-emphasized and windowed).
std::vector<std::vector<double>> frame_signal(const Waveform& w, std::size_t frame_len, std::size_t hop_len,
                                              double preemphasis = 0.97);

// |DFT|^2 bins 0..fft_size/2 of a frame zero-padded to fft_size.
std::vector<double> power_spectrum(std::span<const double> frame, std::size_t fft_size);
// Same quantity from the explicit cosine/sine sums, O(n^2).
std::vector<double> power_spectrum_reference(std::span<const double> frame, std::size_t fft_size);

double hz_to_mel(double hz);
double mel_to_hz(double mel);

// [num_mels x (fft_size/2 + 1)] unnormalized triangular filters, centers
// equally spaced on the mel scale between 0 Hz and Nyquist.
grad::Tensor mel_filterbank_matrix(std::size_t num_mels, std::size_t fft_size, int sample_rate);

struct FeatureGraph {
    grad::Var original;           // [N x num_mels] log mel
    grad::Var stage;              // the requested stage
    std::vector<std::size_t> kept;  // frame indices surviving VAD (all frames below Final)
};

FeatureGraph build_features(grad::Graph& g, grad::Var waveform, FeatureStage stage, const FeatureConfig& cfg = {});

// Time derivatives and normalization on an existing log-mel node.
grad::Var delta_features(grad::Var original);
grad::Var cmvn_features(grad::Var delta);

// Frames whose log energy is at least mean - 0.5 * std; never empty.
std::vector<std::size_t> vad_keep_frames(std::span<const double> framed, std::size_t frames, std::size_t frame_len,
                                         double log_floor);

FeatureMatrix extract_features(const Waveform& w, FeatureStage stage, const FeatureConfig& cfg = {});

// Orthonormal DCT-II and its inverse.
std::vector<double> dct_ortho(std::span<const double> v);
std::vector<double> idct_ortho(std::span<const double> c);

FeatureMatrix mfcc(const Waveform& w, std::size_t num_ceps = 13, const FeatureConfig& cfg = {});

}  // namespace spkdef
