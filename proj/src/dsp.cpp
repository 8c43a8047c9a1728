#include "spkdef/dsp.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "spkdef/error.hpp"

namespace spkdef {

namespace {

struct KindName {
    TransformKind kind;
    const char* name;
};

constexpr KindName kKindNames[] = {
    {TransformKind::QT, "QT"},   {TransformKind::AT, "AT"},           {TransformKind::AS, "AS"},
    {TransformKind::MS, "MS"},   {TransformKind::DS, "DS"},           {TransformKind::LPF, "LPF"},
    {TransformKind::BPF, "BPF"}, {TransformKind::CodecCBR, "CodecCBR"}, {TransformKind::CodecVBR, "CodecVBR"},
    {TransformKind::ExternalCodec, "ExternalCodec"}, {TransformKind::FeCo, "FeCo"},
};

}  // namespace

const char* to_string(TransformKind kind) {
    for (const auto& kn : kKindNames)
        if (kn.kind == kind) return kn.name;
    return "?";
}

TransformKind transform_kind_from_string(const std::string& name) {
    for (const auto& kn : kKindNames)
        if (name == kn.name) return kn.kind;
    throw ParameterError("unknown transformation kind '" + name + "'");
}

TransformSpec TransformSpec::defaults(TransformKind kind) {
    TransformSpec s;
    s.kind = kind;
    s.name = to_string(kind);
    switch (kind) {
        case TransformKind::QT: s.params = {{"q", 512}}; break;
        case TransformKind::AT: s.params = {{"snr", 16}}; break;
        case TransformKind::AS: s.params = {{"k", 17}}; break;
        case TransformKind::MS: s.params = {{"k", 7}}; break;
        case TransformKind::DS: s.params = {{"tau", 0.45}}; break;
        case TransformKind::LPF: s.params = {{"f_p", 4000}, {"f_s", 4500}}; break;
        case TransformKind::BPF: s.params = {{"f_pl", 300}, {"f_pu", 4000}, {"f_sl", 150}, {"f_su", 6000}}; break;
        case TransformKind::CodecCBR:
            s.params = {{"bitrate", 64}, {"frame_len", 512}, {"num_bands", 16}, {"max_bits_per_band", 16}};
            break;
        case TransformKind::CodecVBR:
            s.params = {{"quality", 0.25}, {"frame_len", 512}, {"num_bands", 16}, {"max_bits_per_band", 16}};
            break;
        case TransformKind::ExternalCodec: break;
        case TransformKind::FeCo: s.params = {{"cl_r", 0.2}, {"cl_m", 0}, {"stage", 0}}; break;
    }
    return s;
}

double TransformSpec::param(const std::string& key) const {
    auto it = params.find(key);
    if (it == params.end()) {
        throw ParameterError(std::string(to_string(kind)) + ": missing parameter '" + key + "'");
    }
    return it->second;
}

bool TransformSpec::differentiable() const {
    switch (kind) {
        case TransformKind::QT:
        case TransformKind::CodecCBR:
        case TransformKind::CodecVBR:
        case TransformKind::ExternalCodec: return false;
        default: return true;
    }
}

bool TransformSpec::randomized() const { return kind == TransformKind::AT || kind == TransformKind::FeCo; }

namespace {

void require_odd_window(double k, const char* who) {
    if (k < 1 || k != std::floor(k) || static_cast<long>(k) % 2 == 0) {
        throw ParameterError(std::string(who) + ": window size k must be an odd positive integer, got " +
                             std::to_string(k));
    }
}

}  // namespace

void TransformSpec::validate() const {
    switch (kind) {
        case TransformKind::QT:
            if (param("q") < 1 || param("q") != std::floor(param("q"))) throw ParameterError("QT: q must be an integer >= 1");
            break;
        case TransformKind::AT:
            if (!std::isfinite(param("snr"))) throw ParameterError("AT: snr must be finite");
            break;
        case TransformKind::AS:
        case TransformKind::MS: require_odd_window(param("k"), to_string(kind)); break;
        case TransformKind::DS:
            if (!(param("tau") > 0.0 && param("tau") < 1.0)) throw ParameterError("DS: tau must lie in (0, 1)");
            break;
        case TransformKind::LPF:
            if (!(param("f_p") > 0 && param("f_p") < param("f_s"))) throw ParameterError("LPF: need 0 < f_p < f_s");
            break;
        case TransformKind::BPF:
            if (!(param("f_sl") > 0 && param("f_sl") < param("f_pl") && param("f_pl") < param("f_pu") &&
                  param("f_pu") < param("f_su"))) {
                throw ParameterError("BPF: need 0 < f_sl < f_pl < f_pu < f_su");
            }
            break;
        case TransformKind::CodecCBR:
            if (param("bitrate") < 1) throw ParameterError("CodecCBR: bitrate must be positive");
            break;
        case TransformKind::CodecVBR:
            if (!(param("quality") > 0.0 && param("quality") <= 1.0)) {
                throw ParameterError("CodecVBR: quality must lie in (0, 1]");
            }
            break;
        case TransformKind::ExternalCodec:
            if (command.find("{in}") == std::string::npos || command.find("{out}") == std::string::npos) {
                throw ParameterError("ExternalCodec: command template needs {in} and {out}");
            }
            break;
        case TransformKind::FeCo: {
            const double r = param("cl_r");
            if (!(r > 0.0 && r < 1.0)) throw ParameterError("FeCo: cl_r must lie in (0, 1)");
            const double m = param("cl_m"), st = param("stage");
            if (m != 0 && m != 1) throw ParameterError("FeCo: cl_m must be 0 (kmeans) or 1 (warped)");
            if (st < 0 || st > 3 || st != std::floor(st)) throw ParameterError("FeCo: stage must be 0..3");
            break;
        }
    }
}

// ---- time domain -------------------------------------------------------------

Waveform quantize(const Waveform& w, int q) {
    if (q < 1) throw ParameterError("quantize: q must be >= 1, got " + std::to_string(q));
    std::vector<double> out(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double s16 = w[i] * 32768.0;
        const double snapped = std::round(s16 / q) * q;  // std::round: half away from zero
        out[i] = std::clamp(snapped, -32768.0, 32767.0) / 32768.0;
    }
    return Waveform(std::move(out), w.sample_rate());
}

std::vector<double> turbulence_noise(const Waveform& w, double snr, std::uint64_t seed) {
    if (!std::isfinite(snr)) throw ParameterError("add_turbulence: snr must be finite");
    const double noise_power = mean_power(w.samples()) / std::pow(10.0, snr / 10.0);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, std::sqrt(noise_power));
    std::vector<double> n(w.size());
    for (double& v : n) v = normal(rng);
    return n;
}

Waveform add_turbulence(const Waveform& w, double snr, std::uint64_t seed) {
    auto noise = turbulence_noise(w, snr, seed);
    for (std::size_t i = 0; i < noise.size(); ++i) noise[i] += w[i];
    return Waveform(std::move(noise), w.sample_rate());
}

Waveform avg_smooth(const Waveform& w, int k) {
    return Waveform((*avg_smooth_operator(w.size(), k))(w.samples()), w.sample_rate());
}

Waveform median_smooth(const Waveform& w, int k) {
    require_odd_window(k, "median_smooth");
    grad::Graph g;
    grad::Var x = g.constant(grad::Tensor::vector(w.samples()));
    return Waveform(grad::median_select(x, static_cast<std::size_t>(k)).value().data, w.sample_rate());
}

// ---- FIR machinery -------------------------------------------------------------

FirOperator::FirOperator(std::vector<double> taps, std::size_t length) : taps_(std::move(taps)), n_(length) {
    if (taps_.empty() || taps_.size() % 2 == 0) throw ParameterError("FirOperator: tap count must be odd");
}

void FirOperator::apply(std::span<const double> x, std::span<double> y) const {
    const auto n = static_cast<std::ptrdiff_t>(n_);
    const auto m = static_cast<std::ptrdiff_t>(taps_.size());
    const std::ptrdiff_t half = m / 2;
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        double acc = 0.0;
        if (i - half >= 0 && i + half < n) {
            const double* xp = x.data() + (i - half);
            for (std::ptrdiff_t j = 0; j < m; ++j) acc += taps_[j] * xp[j];
        } else {
            for (std::ptrdiff_t j = 0; j < m; ++j) acc += taps_[j] * x[std::clamp<std::ptrdiff_t>(i + j - half, 0, n - 1)];
        }
        y[i] = acc;
    }
}

void FirOperator::apply_adjoint_add(std::span<const double> g_out, std::span<double> g_in) const {
    const auto n = static_cast<std::ptrdiff_t>(n_);
    const auto m = static_cast<std::ptrdiff_t>(taps_.size());
    const std::ptrdiff_t half = m / 2;
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        const double g = g_out[i];
        if (i - half >= 0 && i + half < n) {
            double* gp = g_in.data() + (i - half);
            for (std::ptrdiff_t j = 0; j < m; ++j) gp[j] += taps_[j] * g;
        } else {
            for (std::ptrdiff_t j = 0; j < m; ++j) g_in[std::clamp<std::ptrdiff_t>(i + j - half, 0, n - 1)] += taps_[j] * g;
        }
    }
}

std::vector<double> lowpass_taps(double cutoff_hz, int sample_rate, std::size_t num_taps) {
    if (num_taps % 2 == 0) ++num_taps;
    const double fc = cutoff_hz / sample_rate;  // cycles per sample
    const double mid = static_cast<double>(num_taps - 1) / 2.0;
    std::vector<double> h(num_taps);
    double sum = 0.0;
    for (std::size_t n = 0; n < num_taps; ++n) {
        const double t = static_cast<double>(n) - mid;
        const double sinc = t == 0.0 ? 2.0 * fc : std::sin(2.0 * std::numbers::pi * fc * t) / (std::numbers::pi * t);
        const double window =
            num_taps == 1 ? 1.0 : 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) / (num_taps - 1));
        h[n] = sinc * window;
        sum += h[n];
    }
    for (double& v : h) v /= sum;
    return h;
}

std::size_t hamming_tap_count(double transition_hz, int sample_rate) {
    if (!(transition_hz > 0.0)) throw ParameterError("FIR transition width must be positive");
    auto taps = static_cast<std::size_t>(std::ceil(3.3 * sample_rate / transition_hz));
    if (taps % 2 == 0) ++taps;
    return std::max<std::size_t>(taps, 3);
}

// ---- resampling -------------------------------------------------------------

LinearResampler::LinearResampler(std::size_t n_in, std::size_t n_out)
    : n_in_(n_in), n_out_(n_out), lo_(n_out), frac_(n_out) {
    if (n_in == 0 || n_out == 0) throw ShapeError("LinearResampler: empty signal");
    for (std::size_t j = 0; j < n_out; ++j) {
        const double pos = n_out == 1 ? 0.0
                                      : static_cast<double>(j) * static_cast<double>(n_in - 1) /
                                            static_cast<double>(n_out - 1);
        auto lo = static_cast<std::size_t>(std::floor(pos));
        if (lo >= n_in - 1) {
            lo = n_in - 1;
            frac_[j] = 0.0;
        } else {
            frac_[j] = pos - static_cast<double>(lo);
        }
        lo_[j] = lo;
    }
}

void LinearResampler::apply(std::span<const double> x, std::span<double> y) const {
    for (std::size_t j = 0; j < n_out_; ++j) {
        const std::size_t lo = lo_[j];
        const double f = frac_[j];
        y[j] = f == 0.0 ? x[lo] : (1.0 - f) * x[lo] + f * x[lo + 1];
    }
}

void LinearResampler::apply_adjoint_add(std::span<const double> g_out, std::span<double> g_in) const {
    for (std::size_t j = 0; j < n_out_; ++j) {
        const std::size_t lo = lo_[j];
        const double f = frac_[j];
        if (f == 0.0) {
            g_in[lo] += g_out[j];
        } else {
            g_in[lo] += (1.0 - f) * g_out[j];
            g_in[lo + 1] += f * g_out[j];
        }
    }
}

// ---- operator factories ---------------------------------------------------------

std::shared_ptr<const grad::LinearOperator> avg_smooth_operator(std::size_t length, int k) {
    require_odd_window(k, "avg_smooth");
    return std::make_shared<FirOperator>(std::vector<double>(static_cast<std::size_t>(k), 1.0 / k), length);
}

std::shared_ptr<const grad::LinearOperator> down_up_operator(std::size_t length, double tau, int sample_rate) {
    if (!(tau > 0.0 && tau < 1.0)) throw ParameterError("down_up_sample: tau must lie in (0, 1)");
    const double cutoff = tau * sample_rate / 2.0;
    const std::size_t taps = std::min<std::size_t>(hamming_tap_count(0.1 * cutoff, sample_rate), 1001);
    auto anti_alias = std::make_shared<FirOperator>(lowpass_taps(cutoff, sample_rate, taps), length);
    const auto reduced = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(tau * length)));
    auto down = std::make_shared<LinearResampler>(length, reduced);
    auto up = std::make_shared<LinearResampler>(reduced, length);
    return std::make_shared<grad::ComposedOperator>(std::make_shared<grad::ComposedOperator>(anti_alias, down), up);
}

namespace {

void require_below_nyquist(double f, int sample_rate, const char* who) {
    if (!(f < sample_rate / 2.0)) throw ParameterError(std::string(who) + ": band edge above Nyquist");
}

}  // namespace

std::shared_ptr<const grad::LinearOperator> lowpass_operator(std::size_t length, double f_p, double f_s,
                                                             int sample_rate) {
    if (!(f_p > 0.0 && f_p < f_s)) throw ParameterError("fir_lowpass: need 0 < f_p < f_s");
    require_below_nyquist(f_s, sample_rate, "fir_lowpass");
    const std::size_t taps = hamming_tap_count(f_s - f_p, sample_rate);
    return std::make_shared<FirOperator>(lowpass_taps((f_p + f_s) / 2.0, sample_rate, taps), length);
}

std::shared_ptr<const grad::LinearOperator> bandpass_operator(std::size_t length, double f_pl, double f_pu,
                                                              double f_sl, double f_su, int sample_rate) {
    if (!(f_sl > 0.0 && f_sl < f_pl && f_pl < f_pu && f_pu < f_su)) {
        throw ParameterError("fir_bandpass: need 0 < f_sl < f_pl < f_pu < f_su");
    }
    require_below_nyquist(f_su, sample_rate, "fir_bandpass");
    const std::size_t taps =
        std::max(hamming_tap_count(f_pl - f_sl, sample_rate), hamming_tap_count(f_su - f_pu, sample_rate));
    auto upper = lowpass_taps((f_pu + f_su) / 2.0, sample_rate, taps);
    auto lower = lowpass_taps((f_sl + f_pl) / 2.0, sample_rate, taps);
    for (std::size_t i = 0; i < taps; ++i) upper[i] -= lower[i];
    return std::make_shared<FirOperator>(std::move(upper), length);
}

Waveform down_up_sample(const Waveform& w, double tau) {
    return Waveform((*down_up_operator(w.size(), tau, w.sample_rate()))(w.samples()), w.sample_rate());
}

Waveform fir_lowpass(const Waveform& w, double f_p, double f_s) {
    return Waveform((*lowpass_operator(w.size(), f_p, f_s, w.sample_rate()))(w.samples()), w.sample_rate());
}

Waveform fir_bandpass(const Waveform& w, double f_pl, double f_pu, double f_sl, double f_su) {
    return Waveform((*bandpass_operator(w.size(), f_pl, f_pu, f_sl, f_su, w.sample_rate()))(w.samples()),
                    w.sample_rate());
}

}  // namespace spkdef
