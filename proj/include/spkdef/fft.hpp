#pragma once

#include <complex>
#include <span>
#include <vector>

namespace spkdef::fft {

using Complex = std::complex<double>;

// Real-to-complex DFT of `in` zero-padded (or truncated) to n points; returns
// bins 0..n/2. Unnormalized, e^{-2*pi*i*k*t/n} kernel.
std::vector<Complex> rfft(std::span<const double> in, std::size_t n);

// Inverse of rfft for n points, normalized by 1/n.
std::vector<double> irfft(std::span<const Complex> half_spectrum, std::size_t n);

// In-place complex forward DFT (unnormalized).
void fft(std::vector<Complex>& data);

std::size_t next_pow2(std::size_t n);

}  // namespace spkdef::fft
