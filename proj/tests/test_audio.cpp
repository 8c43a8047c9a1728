#include <doctest.h>

#include <cstring>
#include <fstream>

#include "helpers.hpp"
#include "spkdef/audio.hpp"
#include "spkdef/error.hpp"

using namespace spkdef;

namespace {

void write_raw_wav(const std::filesystem::path& p, int bits, int channels, int format,
                   const std::vector<std::int16_t>& data) {
    std::ofstream f(p, std::ios::binary);
    auto u32 = [&](std::uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
    auto u16 = [&](std::uint16_t v) { f.write(reinterpret_cast<const char*>(&v), 2); };
    const std::uint32_t bytes = static_cast<std::uint32_t>(data.size() * 2);
    f.write("RIFF", 4);
    u32(36 + bytes);
    f.write("WAVE", 4);
    f.write("fmt ", 4);
    u32(16);
    u16(static_cast<std::uint16_t>(format));
    u16(static_cast<std::uint16_t>(channels));
    u32(16000);
    u32(16000u * static_cast<std::uint32_t>(channels * bits / 8));
    u16(static_cast<std::uint16_t>(channels * bits / 8));
    u16(static_cast<std::uint16_t>(bits));
    f.write("data", 4);
    u32(bytes);
    f.write(reinterpret_cast<const char*>(data.data()), bytes);
}

std::string data_chunk(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::string s((std::istreambuf_iterator<char>(f)), {});
    auto pos = s.find("data");
    REQUIRE(pos != std::string::npos);
    return s.substr(pos + 8);
}

}  // namespace

TEST_CASE("read_wav scales int16 by 1/32768") {
    auto dir = testutil::temp_dir("audio");
    write_raw_wav(dir / "a.wav", 16, 1, 1, {0, 16384, -32768});
    Waveform w = read_wav(dir / "a.wav");
    REQUIRE(w.size() == 3);
    CHECK(w[0] == 0.0);
    CHECK(w[1] == 0.5);
    CHECK(w[2] == -1.0);
    CHECK(w.sample_rate() == 16000);
}

TEST_CASE("write_wav after read_wav gives an identical data chunk") {
    auto dir = testutil::temp_dir("audio");
    std::vector<std::int16_t> data;
    std::mt19937 rng(3);
    std::uniform_int_distribution<int> d(-32768, 32767);
    for (int i = 0; i < 1000; ++i) data.push_back(static_cast<std::int16_t>(d(rng)));
    data.push_back(-32768);
    data.push_back(32767);
    write_raw_wav(dir / "in.wav", 16, 1, 1, data);
    write_wav(read_wav(dir / "in.wav"), dir / "out.wav");
    CHECK(data_chunk(dir / "in.wav") == data_chunk(dir / "out.wav"));
}

TEST_CASE("read_wav rejects unsupported encodings") {
    auto dir = testutil::temp_dir("audio");
    write_raw_wav(dir / "b8.wav", 8, 1, 1, {0, 0});
    CHECK_THROWS_AS(read_wav(dir / "b8.wav"), FormatError);
    write_raw_wav(dir / "st.wav", 16, 2, 1, {0, 0});
    CHECK_THROWS_AS(read_wav(dir / "st.wav"), FormatError);
    write_raw_wav(dir / "fl.wav", 16, 1, 3, {0, 0});
    CHECK_THROWS_AS(read_wav(dir / "fl.wav"), FormatError);
    {
        std::ofstream f(dir / "junk.wav", std::ios::binary);
        f << "not a wav file at all";
    }
    CHECK_THROWS_AS(read_wav(dir / "junk.wav"), FormatError);
    CHECK_THROWS_AS(read_wav(dir / "missing.wav"), IoError);
}

TEST_CASE("write_wav clipping and rounding") {
    CHECK(to_pcm16(1.5) == 32767);
    CHECK(to_pcm16(0.5) == 16384);
    CHECK(to_pcm16(0.0) == 0);
    CHECK(to_pcm16(-1.5) == -32768);
    auto dir = testutil::temp_dir("audio");
    CHECK_THROWS_AS(write_wav(Waveform({0.0}), dir / "no" / "such" / "dir" / "x.wav"), IoError);
}

TEST_CASE("WAV round trip is within one quantization step") {
    auto dir = testutil::temp_dir("audio");
    Waveform w = testutil::random_wave(5000, 11, 1.0);
    write_wav(w, dir / "r.wav");
    Waveform r = read_wav(dir / "r.wav");
    REQUIRE(r.size() == w.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) worst = std::max(worst, std::abs(r[i] - w[i]));
    CHECK(worst <= kPcmStep);
    CHECK(pcm16_roundtrip(w) == r);
}

TEST_CASE("snr_db examples") {
    // P_ref = 1, P_delta = 0.01
    Waveform ref({1.0, -1.0, 1.0, -1.0});
    Waveform deg({1.1, -1.1, 1.1, -1.1});
    CHECK(snr_db(ref, deg) == doctest::Approx(20.0).epsilon(1e-12));
    CHECK(std::isinf(snr_db(ref, ref)));
    Waveform a({1, 1, 1, 1}), b({1.1, 0.9, 1.1, 0.9});
    CHECK(snr_db(a, b) == doctest::Approx(20.0).epsilon(1e-12));
    CHECK_THROWS_AS(snr_db(a, Waveform({1.0})), ShapeError);
}

TEST_CASE("lp_distance examples") {
    Waveform a({0.0, 0.0}), b({0.003, -0.004});
    CHECK(lp_distance(a, a, Norm::L2) == 0.0);
    CHECK(lp_distance(a, a, Norm::LInf) == 0.0);
    CHECK(lp_distance(a, b, Norm::LInf) == doctest::Approx(0.004).epsilon(1e-12));
    CHECK(lp_distance(a, b, Norm::L2) == doctest::Approx(0.005).epsilon(1e-12));
    CHECK_THROWS_AS(lp_distance(a, Waveform({0.0}), Norm::L2), ShapeError);
}

TEST_CASE("SNR scaling law") {
    Waveform x = testutil::random_wave(4000, 1);
    auto delta = testutil::random_vec(4000, 2, 0.01);
    for (double s : {1.5, 2.0, 10.0, 123.0}) {
        std::vector<double> d1(4000), ds(4000);
        for (std::size_t i = 0; i < 4000; ++i) {
            d1[i] = x[i] + delta[i];
            ds[i] = x[i] + s * delta[i];
        }
        CHECK(std::abs(snr_db(x, Waveform(ds)) - (snr_db(x, Waveform(d1)) - 20.0 * std::log10(s))) <= 1e-6);
    }
}

TEST_CASE("L2 triangle inequality and distortion invariants") {
    for (std::uint64_t s = 0; s < 50; ++s) {
        Waveform a = testutil::random_wave(64, 3 * s), b = testutil::random_wave(64, 3 * s + 1),
                 c = testutil::random_wave(64, 3 * s + 2);
        CHECK(lp_distance(a, c, Norm::L2) <= lp_distance(a, b, Norm::L2) + lp_distance(b, c, Norm::L2) + 1e-15);
        DistortionReport d = distortion(a, b);
        CHECK(d.linf <= d.l2);
        CHECK(std::isfinite(d.snr_db));
    }
    DistortionReport z = distortion(Waveform({0.1, 0.2}), Waveform({0.1, 0.2}));
    CHECK(std::isinf(z.snr_db));
    CHECK(z.l2 == 0.0);
}

TEST_CASE("Waveform invariants and rate checks") {
    CHECK_THROWS_AS(Waveform(std::vector<double>{}), ShapeError);
    CHECK_THROWS_AS(Waveform({0.0}, 0), ParameterError);
    Waveform w({2.0, -3.0, 0.5});
    w.clip_samples();
    CHECK(w.samples() == std::vector<double>{1.0, -1.0, 0.5});
    CHECK_THROWS_AS(require_rate(Waveform({0.0}, 8000)), ParameterError);
    CHECK_THROWS_AS(snr_db(Waveform({0.0}, 8000), Waveform({0.0}, 16000)), ShapeError);
}
