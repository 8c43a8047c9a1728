#include "spkdef/features.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "spkdef/error.hpp"
#include "spkdef/fft.hpp"

namespace spkdef {

const char* to_string(FeatureStage stage) {
    switch (stage) {
        case FeatureStage::Original: return "Original";
        case FeatureStage::Delta: return "Delta";
        case FeatureStage::Cmvn: return "Cmvn";
        case FeatureStage::Final: return "Final";
    }
    return "?";
}

FeatureStage feature_stage_from_string(const std::string& name) {
    for (auto s : {FeatureStage::Original, FeatureStage::Delta, FeatureStage::Cmvn, FeatureStage::Final})
        if (name == to_string(s)) return s;
    throw ParameterError("unknown feature stage '" + name + "'");
}

FeatureMatrix FeatureMatrix::from_tensor(const grad::Tensor& t, FeatureStage stage, const FeatureConfig& cfg,
                                         int sample_rate) {
    if (t.rank() != 2) throw ShapeError("FeatureMatrix: expected a rank-2 tensor, got " + grad::shape_str(t.shape));
    FeatureMatrix m;
    m.rows = t.shape[0];
    m.cols = t.shape[1];
    m.data = t.data;
    m.stage = stage;
    m.frame_len = cfg.frame_len;
    m.hop_len = cfg.hop_len;
    m.sample_rate = sample_rate;
    return m;
}

std::size_t frame_count(std::size_t length, std::size_t frame_len, std::size_t hop_len) {
    if (hop_len == 0 || frame_len < hop_len) throw ParameterError("framing: need frame_len >= hop_len >= 1");
    if (length < frame_len) {
        throw ShapeError("framing: signal of " + std::to_string(length) + " samples is shorter than one frame (" +
                         std::to_string(frame_len) + ")");
    }
    return 1 + (length - frame_len) / hop_len;
}

std::vector<double> hamming_window(std::size_t n) {
    std::vector<double> w(n, 1.0);
    if (n == 1) return w;
    for (std::size_t i = 0; i < n; ++i)
        w[i] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n - 1));
    return w;
}

// ---- operators ---------------------------------------------------------------

FramingOperator::FramingOperator(std::size_t length, std::size_t frame_len, std::size_t hop_len, double preemphasis)
    : length_(length),
      frame_len_(frame_len),
      hop_len_(hop_len),
      frames_(frame_count(length, frame_len, hop_len)),
      preemphasis_(preemphasis),
      window_(hamming_window(frame_len)) {}

void FramingOperator::apply(std::span<const double> x, std::span<double> y) const {
    for (std::size_t f = 0; f < frames_; ++f) {
        const double* in = x.data() + f * hop_len_;
        double* out = y.data() + f * frame_len_;
        out[0] = window_[0] * in[0];
        for (std::size_t t = 1; t < frame_len_; ++t) out[t] = window_[t] * (in[t] - preemphasis_ * in[t - 1]);
    }
}

void FramingOperator::apply_adjoint_add(std::span<const double> g_out, std::span<double> g_in) const {
    for (std::size_t f = 0; f < frames_; ++f) {
        const double* go = g_out.data() + f * frame_len_;
        double* gi = g_in.data() + f * hop_len_;
        gi[0] += window_[0] * go[0];
        for (std::size_t t = 1; t < frame_len_; ++t) {
            double v = window_[t] * go[t];
            gi[t] += v;
            gi[t - 1] -= preemphasis_ * v;
        }
    }
}

RowSparseOperator::RowSparseOperator(const grad::Tensor& matrix, std::size_t rows)
    : rows_(rows), in_(matrix.shape.at(1)), out_(matrix.shape.at(0)) {
    for (std::size_t o = 0; o < out_; ++o)
        for (std::size_t i = 0; i < in_; ++i)
            if (double w = matrix.at(o, i); w != 0.0) entries_.push_back({o, i, w});
}

void RowSparseOperator::apply(std::span<const double> x, std::span<double> y) const {
    std::fill(y.begin(), y.end(), 0.0);
    for (std::size_t r = 0; r < rows_; ++r) {
        const double* xr = x.data() + r * in_;
        double* yr = y.data() + r * out_;
        for (const auto& e : entries_) yr[e.out] += e.w * xr[e.in];
    }
}

void RowSparseOperator::apply_adjoint_add(std::span<const double> g_out, std::span<double> g_in) const {
    for (std::size_t r = 0; r < rows_; ++r) {
        const double* go = g_out.data() + r * out_;
        double* gi = g_in.data() + r * in_;
        for (const auto& e : entries_) gi[e.in] += e.w * go[e.out];
    }
}

namespace {

constexpr int kDeltaWindow = 2;
constexpr double kDeltaNorm = 10.0;  // 2 * (1^2 + 2^2)

std::size_t clamp_row(std::ptrdiff_t t, std::size_t rows) {
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(t, 0, static_cast<std::ptrdiff_t>(rows) - 1));
}

}  // namespace

DeltaOperator::DeltaOperator(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols) {}

void DeltaOperator::apply(std::span<const double> x, std::span<double> y) const {
    for (std::size_t t = 0; t < rows_; ++t) {
        double* yr = y.data() + t * cols_;
        std::fill(yr, yr + cols_, 0.0);
        for (int n = 1; n <= kDeltaWindow; ++n) {
            const double* fwd = x.data() + clamp_row(static_cast<std::ptrdiff_t>(t) + n, rows_) * cols_;
            const double* bwd = x.data() + clamp_row(static_cast<std::ptrdiff_t>(t) - n, rows_) * cols_;
            for (std::size_t c = 0; c < cols_; ++c) yr[c] += n * (fwd[c] - bwd[c]) / kDeltaNorm;
        }
    }
}

void DeltaOperator::apply_adjoint_add(std::span<const double> g_out, std::span<double> g_in) const {
    for (std::size_t t = 0; t < rows_; ++t) {
        const double* go = g_out.data() + t * cols_;
        for (int n = 1; n <= kDeltaWindow; ++n) {
            double* fwd = g_in.data() + clamp_row(static_cast<std::ptrdiff_t>(t) + n, rows_) * cols_;
            double* bwd = g_in.data() + clamp_row(static_cast<std::ptrdiff_t>(t) - n, rows_) * cols_;
            for (std::size_t c = 0; c < cols_; ++c) {
                double v = n * go[c] / kDeltaNorm;
                fwd[c] += v;
                bwd[c] -= v;
            }
        }
    }
}

// ---- plain front end -----------------------------------------------------------

std::vector<std::vector<double>> frame_signal(const Waveform& w, std::size_t frame_len, std::size_t hop_len,
                                              double preemphasis) {
    FramingOperator op(w.size(), frame_len, hop_len, preemphasis);
    auto flat = op(w.samples());
    std::vector<std::vector<double>> frames(op.frames());
    for (std::size_t f = 0; f < frames.size(); ++f)
        frames[f].assign(flat.begin() + static_cast<std::ptrdiff_t>(f * frame_len),
                         flat.begin() + static_cast<std::ptrdiff_t>((f + 1) * frame_len));
    return frames;
}

std::vector<double> power_spectrum(std::span<const double> frame, std::size_t fft_size) {
    if (fft_size < frame.size()) throw ShapeError("power_spectrum: fft_size smaller than frame length");
    auto spec = fft::rfft(frame, fft_size);
    std::vector<double> p(spec.size());
    for (std::size_t k = 0; k < p.size(); ++k) p[k] = std::norm(spec[k]);
    return p;
}

std::vector<double> power_spectrum_reference(std::span<const double> frame, std::size_t fft_size) {
    std::vector<double> p(fft_size / 2 + 1);
    for (std::size_t k = 0; k < p.size(); ++k) {
        double re = 0.0, im = 0.0;
        for (std::size_t t = 0; t < frame.size(); ++t) {
            double ang = -2.0 * std::numbers::pi * static_cast<double>((k * t) % fft_size) / static_cast<double>(fft_size);
            re += frame[t] * std::cos(ang);
            im += frame[t] * std::sin(ang);
        }
        p[k] = re * re + im * im;
    }
    return p;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

grad::Tensor mel_filterbank_matrix(std::size_t num_mels, std::size_t fft_size, int sample_rate) {
    if (num_mels < 2) throw ParameterError("mel_filterbank_matrix: num_mels must be >= 2");
    if (fft_size < 2) throw ParameterError("mel_filterbank_matrix: fft_size must be >= 2");
    const std::size_t bins = fft_size / 2 + 1;
    const double nyquist = sample_rate / 2.0;
    const double top = hz_to_mel(nyquist);
    std::vector<double> edges(num_mels + 2);
    for (std::size_t i = 0; i < edges.size(); ++i)
        edges[i] = mel_to_hz(top * static_cast<double>(i) / static_cast<double>(num_mels + 1));
    grad::Tensor m({num_mels, bins});
    for (std::size_t j = 0; j < num_mels; ++j) {
        const double lo = edges[j], mid = edges[j + 1], hi = edges[j + 2];
        for (std::size_t k = 0; k < bins; ++k) {
            double f = static_cast<double>(k) * sample_rate / static_cast<double>(fft_size);
            double w = 0.0;
            if (f > lo && f <= mid) w = (f - lo) / (mid - lo);
            else if (f > mid && f < hi) w = (hi - f) / (hi - mid);
            m.at(j, k) = w;
        }
    }
    return m;
}

// ---- graph pipeline ------------------------------------------------------------

grad::Var delta_features(grad::Var original) {
    const std::size_t n = original.shape().at(0), d = original.shape().at(1);
    auto op = std::make_shared<DeltaOperator>(n, d);
    grad::Var d1 = grad::linear_map(op, original, {n, d});
    grad::Var d2 = grad::linear_map(op, d1, {n, d});
    grad::Var parts[] = {original, d1, d2};
    return grad::concat(parts, 1);
}

grad::Var cmvn_features(grad::Var delta) { return grad::standardize_columns(delta); }

std::vector<std::size_t> vad_keep_frames(std::span<const double> framed, std::size_t frames, std::size_t frame_len,
                                         double log_floor) {
    std::vector<double> energy(frames);
    for (std::size_t f = 0; f < frames; ++f) {
        double e = 0.0;
        for (std::size_t t = 0; t < frame_len; ++t) e += framed[f * frame_len + t] * framed[f * frame_len + t];
        energy[f] = std::log(e + log_floor);
    }
    double mean = 0.0;
    for (double e : energy) mean += e;
    mean /= static_cast<double>(frames);
    double var = 0.0;
    for (double e : energy) var += (e - mean) * (e - mean);
    double threshold = mean - 0.5 * std::sqrt(var / static_cast<double>(frames));
    std::vector<std::size_t> keep;
    for (std::size_t f = 0; f < frames; ++f)
        if (energy[f] >= threshold) keep.push_back(f);
    if (keep.empty())
        keep.push_back(static_cast<std::size_t>(std::max_element(energy.begin(), energy.end()) - energy.begin()));
    return keep;
}

FeatureGraph build_features(grad::Graph& g, grad::Var waveform, FeatureStage stage, const FeatureConfig& cfg) {
    (void)g;
    if (cfg.fft_size < cfg.frame_len) throw ParameterError("features: fft_size smaller than frame_len");
    auto framing = std::make_shared<FramingOperator>(waveform.numel(), cfg.frame_len, cfg.hop_len, cfg.preemphasis);
    const std::size_t n = framing->frames();
    grad::Var framed = grad::linear_map(framing, waveform, {n, cfg.frame_len});
    grad::Var power = grad::power_spectrum(framed, cfg.fft_size);
    auto mel = std::make_shared<RowSparseOperator>(mel_filterbank_matrix(cfg.num_mels, cfg.fft_size, kSampleRate), n);
    grad::Var melspec = grad::linear_map(mel, power, {n, cfg.num_mels});
    FeatureGraph out;
    out.original = grad::log(grad::add_scalar(melspec, cfg.log_floor));
    out.stage = out.original;
    if (stage != FeatureStage::Original) out.stage = delta_features(out.original);
    if (stage == FeatureStage::Cmvn || stage == FeatureStage::Final) out.stage = cmvn_features(out.stage);
    if (stage == FeatureStage::Final) {
        out.kept = vad_keep_frames(framed.value().data, n, cfg.frame_len, cfg.log_floor);
        out.stage = grad::gather_rows(out.stage, out.kept);
    } else {
        out.kept.resize(n);
        for (std::size_t i = 0; i < n; ++i) out.kept[i] = i;
    }
    return out;
}

FeatureMatrix extract_features(const Waveform& w, FeatureStage stage, const FeatureConfig& cfg) {
    require_rate(w, kSampleRate);
    grad::Graph g;
    grad::Var x = g.constant(grad::Tensor::vector(w.samples()));
    auto fg = build_features(g, x, stage, cfg);
    return FeatureMatrix::from_tensor(fg.stage.value(), stage, cfg, w.sample_rate());
}

std::vector<double> dct_ortho(std::span<const double> v) {
    const std::size_t n = v.size();
    std::vector<double> c(n, 0.0);
    for (std::size_t k = 0; k < n; ++k) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            s += v[i] * std::cos(std::numbers::pi * static_cast<double>(k) * (2.0 * i + 1.0) / (2.0 * n));
        c[k] = s * std::sqrt((k == 0 ? 1.0 : 2.0) / static_cast<double>(n));
    }
    return c;
}

std::vector<double> idct_ortho(std::span<const double> c) {
    const std::size_t n = c.size();
    std::vector<double> v(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < n; ++k)
            s += c[k] * std::sqrt((k == 0 ? 1.0 : 2.0) / static_cast<double>(n)) *
                 std::cos(std::numbers::pi * static_cast<double>(k) * (2.0 * i + 1.0) / (2.0 * n));
        v[i] = s;
    }
    return v;
}

FeatureMatrix mfcc(const Waveform& w, std::size_t num_ceps, const FeatureConfig& cfg) {
    if (num_ceps == 0 || num_ceps > cfg.num_mels)
        throw ParameterError("mfcc: num_ceps must be in [1, num_mels]");
    FeatureMatrix logmel = extract_features(w, FeatureStage::Original, cfg);
    FeatureMatrix out = logmel;
    out.cols = num_ceps;
    out.data.assign(logmel.rows * num_ceps, 0.0);
    for (std::size_t r = 0; r < logmel.rows; ++r) {
        auto c = dct_ortho(logmel.row(r));
        std::copy_n(c.begin(), num_ceps, out.data.begin() + static_cast<std::ptrdiff_t>(r * num_ceps));
    }
    return out;
}

}  // namespace spkdef
