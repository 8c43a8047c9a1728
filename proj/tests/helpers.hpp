#pragma once

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <unistd.h>
#include <vector>

#include "spkdef/audio.hpp"

namespace testutil {

inline spkdef::Waveform tone(double hz, std::size_t n, double amp = 0.5, int rate = spkdef::kSampleRate) {
    std::vector<double> s(n);
    for (std::size_t i = 0; i < n; ++i) s[i] = amp * std::sin(2.0 * std::numbers::pi * hz * static_cast<double>(i) / rate);
    return spkdef::Waveform(std::move(s), rate);
}

inline std::vector<double> random_vec(std::size_t n, std::uint64_t seed, double amp = 0.3) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-amp, amp);
    std::vector<double> v(n);
    for (auto& x : v) x = u(rng);
    return v;
}

inline spkdef::Waveform random_wave(std::size_t n, std::uint64_t seed, double amp = 0.3) {
    return spkdef::Waveform(random_vec(n, seed, amp));
}

// Same values on the int16 grid.
inline spkdef::Waveform random_pcm_wave(std::size_t n, std::uint64_t seed, double amp = 0.3) {
    return spkdef::pcm16_roundtrip(random_wave(n, seed, amp));
}

inline double power_db(const std::vector<double>& x) {
    double p = 0.0;
    for (double v : x) p += v * v;
    return 10.0 * std::log10(p / static_cast<double>(x.size()));
}

// Power of the middle half, away from filter edge effects.
inline double interior_power_db(const std::vector<double>& x) {
    std::vector<double> mid(x.begin() + static_cast<long>(x.size() / 4), x.end() - static_cast<long>(x.size() / 4));
    return power_db(mid);
}

inline std::filesystem::path temp_dir(const std::string& tag) {
    auto p = std::filesystem::temp_directory_path() / ("spkdef_test_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace testutil
