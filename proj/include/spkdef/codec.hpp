#pragma once

#include <string>

#include "spkdef/audio.hpp"
#include "spkdef/dsp.hpp"

namespace spkdef {

enum class BitRateMode { CBR, VBR };

// Built-in frame-based subband codec. Each non-overlapping frame is
// transformed with a DFT, its magnitudes are grouped into bands and uniformly
// quantized with b_i bits per coefficient, and the frame is resynthesized with
// the original phases. A frame's bit cost is sum_i b_i.
struct CodecConfig {
    BitRateMode mode = BitRateMode::CBR;
    int bitrate_bits_per_frame = 64;  // CBR
    double quality = 0.25;            // VBR, in (0, 1]
    int frame_len = 512;
    int num_bands = 16;
    int max_bits_per_band = 16;

    void validate() const;
    static CodecConfig from_spec(const TransformSpec& spec);
};

struct CodecOutput {
    Waveform audio;
    double mean_bits_per_frame = 0.0;
};

// CBR spreads bitrate_bits_per_frame evenly over the bands (1-bit floor).
// VBR gives each frame quality * num_bands * max_bits_per_band bits, scaled
// down toward one half for spectrally flat frames, and hands bits one at a
// time to the band whose estimated quantization noise drops the most. The
// allocation therefore follows log band energy.
CodecOutput toy_codec_encode_decode(const Waveform& w, const CodecConfig& cfg);
Waveform toy_codec_roundtrip(const Waveform& w, const CodecConfig& cfg);

// Runs an external encoder/decoder. `command_template` is a shell command in
// which every "{in}" is replaced by the input WAV path and every "{out}" by the
// path the command must write its decoded WAV to. The result is padded with
// zeros or truncated to the input length.
Waveform external_codec_roundtrip(const Waveform& w, const std::string& command_template);

}  // namespace spkdef
