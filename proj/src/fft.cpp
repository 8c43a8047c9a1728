#include "spkdef/fft.hpp"

#include <fftw3.h>

#include <map>
#include <mutex>
#include <tuple>

#include "spkdef/error.hpp"

namespace spkdef::fft {

namespace {

enum class PlanKind { R2C, C2R, C2C };

// FFTW's planner is not thread-safe; execution with new-array calls is. Plans
// are created once per (kind, n) under a lock and reused with unaligned buffers.
fftw_plan get_plan(PlanKind kind, std::size_t n) {
    static std::mutex mu;
    static std::map<std::pair<PlanKind, std::size_t>, fftw_plan> plans;
    std::lock_guard lock(mu);
    auto key = std::make_pair(kind, n);
    auto it = plans.find(key);
    if (it != plans.end()) return it->second;

    const int ni = static_cast<int>(n);
    const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
    fftw_plan plan = nullptr;
    if (kind == PlanKind::R2C) {
        std::vector<double> in(n);
        std::vector<Complex> out(n / 2 + 1);
        plan = fftw_plan_dft_r2c_1d(ni, in.data(), reinterpret_cast<fftw_complex*>(out.data()), flags);
    } else if (kind == PlanKind::C2R) {
        std::vector<Complex> in(n / 2 + 1);
        std::vector<double> out(n);
        plan = fftw_plan_dft_c2r_1d(ni, reinterpret_cast<fftw_complex*>(in.data()), out.data(), flags);
    } else {
        std::vector<Complex> buf(n);
        plan = fftw_plan_dft_1d(ni, reinterpret_cast<fftw_complex*>(buf.data()),
                                reinterpret_cast<fftw_complex*>(buf.data()), FFTW_FORWARD, flags);
    }
    if (plan == nullptr) throw Error("FFTW failed to create a plan");
    plans.emplace(key, plan);
    return plan;
}

}  // namespace

std::size_t next_pow2(std::size_t n) {
    std::size_t p = 1;
    while (p < n) p <<= 1;
    return p;
}

std::vector<Complex> rfft(std::span<const double> in, std::size_t n) {
    std::vector<double> buf(n, 0.0);
    std::copy_n(in.begin(), std::min(n, in.size()), buf.begin());
    std::vector<Complex> out(n / 2 + 1);
    fftw_execute_dft_r2c(get_plan(PlanKind::R2C, n), buf.data(), reinterpret_cast<fftw_complex*>(out.data()));
    return out;
}

std::vector<double> irfft(std::span<const Complex> half_spectrum, std::size_t n) {
    if (half_spectrum.size() != n / 2 + 1) throw ShapeError("irfft: spectrum size does not match n");
    // c2r destroys its input.
    std::vector<Complex> buf(half_spectrum.begin(), half_spectrum.end());
    std::vector<double> out(n);
    fftw_execute_dft_c2r(get_plan(PlanKind::C2R, n), reinterpret_cast<fftw_complex*>(buf.data()), out.data());
    const double scale = 1.0 / static_cast<double>(n);
    for (double& v : out) v *= scale;
    return out;
}

void fft(std::vector<Complex>& data) {
    auto* p = reinterpret_cast<fftw_complex*>(data.data());
    fftw_execute_dft(get_plan(PlanKind::C2C, data.size()), p, p);
}

}  // namespace spkdef::fft
