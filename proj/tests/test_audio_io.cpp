#include <doctest.h>

#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ser/audio_io.hpp"
#include "ser/error.hpp"
#include "ser/features.hpp"

using namespace ser;
using audio::Clip;

namespace {

constexpr double kPi = 3.14159265358979323846;

void put_u16(std::vector<std::uint8_t>& v, std::uint16_t x) {
    v.push_back(static_cast<std::uint8_t>(x));
    v.push_back(static_cast<std::uint8_t>(x >> 8));
}

void put_u32(std::vector<std::uint8_t>& v, std::uint32_t x) {
    put_u16(v, static_cast<std::uint16_t>(x));
    put_u16(v, static_cast<std::uint16_t>(x >> 16));
}

void put_tag(std::vector<std::uint8_t>& v, const char* tag) {
    v.insert(v.end(), tag, tag + 4);
}

std::vector<std::uint8_t> make_wav(std::uint32_t rate, std::uint16_t channels,
                                   std::uint16_t bits, std::uint16_t format,
                                   const std::vector<std::int16_t>& pcm) {
    std::vector<std::uint8_t> v;
    const std::uint32_t data_bytes = static_cast<std::uint32_t>(pcm.size() * 2);
    put_tag(v, "RIFF");
    put_u32(v, 36 + data_bytes);
    put_tag(v, "WAVE");
    put_tag(v, "fmt ");
    put_u32(v, 16);
    put_u16(v, format);
    put_u16(v, channels);
    put_u32(v, rate);
    put_u32(v, rate * channels * bits / 8);
    put_u16(v, static_cast<std::uint16_t>(channels * bits / 8));
    put_u16(v, bits);
    put_tag(v, "data");
    put_u32(v, data_bytes);
    for (std::int16_t s : pcm) put_u16(v, static_cast<std::uint16_t>(s));
    return v;
}

Clip sine_clip(int rate, double freq, double seconds, double amp = 1.0) {
    Clip c;
    c.sample_rate = rate;
    c.channels = 1;
    const std::size_t n = static_cast<std::size_t>(std::llround(seconds * rate));
    c.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        c.samples[i] = static_cast<float>(amp * std::sin(2.0 * kPi * freq * i / rate));
    }
    return c;
}

} // namespace

TEST_SUITE("audio_io") {

TEST_CASE("decode scales 16-bit PCM by 32768") {
    const auto bytes = make_wav(16000, 1, 16, 1, {32767, 0, -32768, 16384});
    const Clip c = audio::decode_wav(bytes, "t");
    REQUIRE(c.samples.size() == 4);
    CHECK(c.samples[0] == doctest::Approx(32767.0 / 32768.0).epsilon(1e-9));
    CHECK(c.samples[1] == 0.0f);
    CHECK(c.samples[2] == -1.0f);
    CHECK(c.samples[3] == 0.5f);
    CHECK(c.sample_rate == 16000);
    CHECK(c.channels == 1);
    for (float s : c.samples) {
        CHECK(std::isfinite(s));
        CHECK(s >= -1.0f);
        CHECK(s <= 1.0f);
    }
}

TEST_CASE("decode rejects non-16-bit and non-PCM payloads") {
    CHECK_THROWS_AS(audio::decode_wav(make_wav(16000, 1, 8, 1, {0}), "t"),
                    UnsupportedFormatError);
    CHECK_THROWS_AS(audio::decode_wav(make_wav(16000, 1, 32, 3, {0}), "t"),
                    UnsupportedFormatError);
}

TEST_CASE("decode names the offending chunk on malformed input") {
    // data chunk declares more bytes than the file holds
    auto bytes = make_wav(16000, 1, 16, 1, {1, 2, 3});
    bytes[bytes.size() - 3 * 2 - 4] = 0xff; // bump declared data size
    try {
        audio::decode_wav(bytes, "t");
        FAIL("expected decode error");
    } catch (const DecodeError& e) {
        CHECK(std::string(e.what()).find("data") != std::string::npos);
    }

    std::vector<std::uint8_t> junk = {'R', 'I', 'F', 'X', 0, 0, 0, 0};
    CHECK_THROWS_AS(audio::decode_wav(junk, "t"), DecodeError);

    // container with no fmt chunk
    std::vector<std::uint8_t> no_fmt;
    put_tag(no_fmt, "RIFF");
    put_u32(no_fmt, 12);
    put_tag(no_fmt, "WAVE");
    put_tag(no_fmt, "data");
    put_u32(no_fmt, 0);
    try {
        audio::decode_wav(no_fmt, "t");
        FAIL("expected decode error");
    } catch (const DecodeError& e) {
        CHECK(std::string(e.what()).find("fmt") != std::string::npos);
    }
}

TEST_CASE("decode skips unknown chunks and handles odd-size padding") {
    std::vector<std::uint8_t> v;
    put_tag(v, "RIFF");
    put_u32(v, 0); // patched below
    put_tag(v, "WAVE");
    put_tag(v, "LIST");
    put_u32(v, 3); // odd size -> pad byte follows
    v.push_back('a');
    v.push_back('b');
    v.push_back('c');
    v.push_back(0);
    put_tag(v, "fmt ");
    put_u32(v, 16);
    put_u16(v, 1);
    put_u16(v, 1);
    put_u32(v, 8000);
    put_u32(v, 16000);
    put_u16(v, 2);
    put_u16(v, 16);
    put_tag(v, "data");
    put_u32(v, 4);
    put_u16(v, static_cast<std::uint16_t>(100));
    put_u16(v, static_cast<std::uint16_t>(-100));
    const std::uint32_t riff_size = static_cast<std::uint32_t>(v.size() - 8);
    v[4] = static_cast<std::uint8_t>(riff_size);
    v[5] = static_cast<std::uint8_t>(riff_size >> 8);
    v[6] = static_cast<std::uint8_t>(riff_size >> 16);
    v[7] = static_cast<std::uint8_t>(riff_size >> 24);

    const Clip c = audio::decode_wav(v, "t");
    CHECK(c.sample_rate == 8000);
    REQUIRE(c.samples.size() == 2);
    CHECK(c.samples[0] == doctest::Approx(100.0 / 32768.0));
}

TEST_CASE("wav file round-trip through write and load") {
    const auto dir = std::filesystem::temp_directory_path() / "ser_audio_rt";
    std::filesystem::create_directories(dir);
    const auto path = dir / "rt.wav";
    Clip c = sine_clip(16000, 440.0, 0.25, 0.7);
    audio::write_wav_pcm16(path, c);
    const Clip back = audio::load_wav(path);
    CHECK(back.sample_rate == c.sample_rate);
    CHECK(back.channels == 1);
    REQUIRE(back.samples.size() == c.samples.size());
    for (std::size_t i = 0; i < c.samples.size(); ++i) {
        // encode scales by 32767, decode divides by 32768: the skew adds
        // |x|/32768 on top of the half-step rounding error
        CHECK(std::abs(back.samples[i] - c.samples[i]) <= 1.5 / 32768.0);
    }
    const audio::WavInfo info = audio::read_wav_info(path);
    CHECK(info.sample_rate == 16000);
    CHECK(info.channels == 1);
    CHECK(info.bits_per_sample == 16);
    CHECK(info.duration_s() == doctest::Approx(0.25));
}

TEST_CASE("to_mono averages channels per frame") {
    Clip stereo;
    stereo.sample_rate = 16000;
    stereo.channels = 2;
    stereo.samples = {0.5f, -0.5f, 0.2f, 0.4f};
    const Clip m = audio::to_mono(stereo);
    CHECK(m.channels == 1);
    REQUIRE(m.samples.size() == 2);
    CHECK(m.samples[0] == doctest::Approx(0.0));
    CHECK(m.samples[1] == doctest::Approx(0.3));

    const Clip mono = sine_clip(16000, 100.0, 0.1);
    const Clip same = audio::to_mono(mono);
    CHECK(same.samples == mono.samples);

    Clip tri;
    tri.sample_rate = 16000;
    tri.channels = 3;
    tri.samples = {0.3f, 0.6f, 0.9f};
    CHECK(audio::to_mono(tri).samples[0] == doctest::Approx(0.6));
}

TEST_CASE("resample length follows the rate ratio") {
    Clip c = sine_clip(48000, 1000.0, 3.0);
    REQUIRE(c.samples.size() == 144000);
    const Clip r = audio::resample(c, 16000);
    CHECK(r.samples.size() == 48000);
    CHECK(r.sample_rate == 16000);

    // duration preserved within one output sample period
    for (int rate : {8000, 22050, 44100}) {
        const Clip x = sine_clip(rate, 200.0, 1.3);
        const Clip y = audio::resample(x, 16000);
        const double in_dur = static_cast<double>(x.samples.size()) / rate;
        const double out_dur = static_cast<double>(y.samples.size()) / 16000.0;
        CHECK(std::abs(in_dur - out_dur) <= 1.0 / 16000.0);
    }
}

TEST_CASE("resample at the current rate returns the clip unchanged") {
    const Clip c = sine_clip(16000, 440.0, 0.5);
    const Clip r = audio::resample(c, 16000);
    CHECK(r.samples == c.samples);
}

TEST_CASE("resampled sine keeps its frequency and rejects aliases by 60 dB") {
    // 1 kHz lands exactly on bin 512 of an 8192-point window at 16 kHz,
    // so a rectangular window has no leakage and everything outside the
    // guard band is resampler artifact.
    const Clip in = sine_clip(48000, 1000.0, 3.0);
    const Clip out = audio::resample(in, 16000);
    const int n = 8192;
    const int skip = 1024; // avoid filter edge transients
    REQUIRE(out.samples.size() >= static_cast<std::size_t>(skip + n));
    std::vector<std::complex<double>> buf(n);
    for (int i = 0; i < n; ++i) buf[i] = {static_cast<double>(out.samples[skip + i]), 0.0};
    features::fft_inplace(buf);

    const int expect_bin = 1000 * n / 16000; // = 512
    int peak_bin = 1;
    double peak = 0.0;
    for (int k = 1; k <= n / 2; ++k) {
        const double p = std::norm(buf[k]);
        if (p > peak) {
            peak = p;
            peak_bin = k;
        }
    }
    CHECK(peak_bin == expect_bin); // bin spacing is 1.95 Hz, so this is < 1 Hz off
    double worst = 0.0;
    for (int k = 1; k <= n / 2; ++k) {
        if (std::abs(k - expect_bin) <= 3) continue;
        worst = std::max(worst, std::norm(buf[k]));
    }
    CHECK(10.0 * std::log10(peak / worst) > 60.0);
}

TEST_CASE("normalize_duration pads with trailing zeros and truncates the tail") {
    Clip c = sine_clip(16000, 440.0, 2.5);
    REQUIRE(c.samples.size() == 40000);
    const Clip padded = audio::normalize_duration(c, 5.0);
    REQUIRE(padded.samples.size() == 80000);
    for (std::size_t i = 0; i < 40000; ++i) CHECK(padded.samples[i] == c.samples[i]);
    for (std::size_t i = 40000; i < 80000; ++i) {
        REQUIRE(padded.samples[i] == 0.0f);
    }

    const Clip exact = sine_clip(16000, 440.0, 5.0);
    CHECK(audio::normalize_duration(exact, 5.0).samples == exact.samples);

    Clip longer = sine_clip(16000, 440.0, 7.2);
    REQUIRE(longer.samples.size() == 115200);
    const Clip cut = audio::normalize_duration(longer, 5.0);
    REQUIRE(cut.samples.size() == 80000);
    for (std::size_t i = 0; i < 80000; ++i) CHECK(cut.samples[i] == longer.samples[i]);
}

TEST_CASE("preprocess yields mono 16 kHz 80000 samples and is idempotent") {
    Clip stereo;
    stereo.sample_rate = 48000;
    stereo.channels = 2;
    stereo.samples.resize(2 * 144000);
    for (std::size_t f = 0; f < 144000; ++f) {
        const float v = static_cast<float>(0.5 * std::sin(2.0 * kPi * 440.0 * f / 48000.0));
        stereo.samples[2 * f] = v;
        stereo.samples[2 * f + 1] = v * 0.5f;
    }
    const Clip p = audio::preprocess(stereo);
    CHECK(p.sample_rate == 16000);
    CHECK(p.channels == 1);
    CHECK(p.samples.size() == 80000);

    const Clip fixed = sine_clip(16000, 440.0, 5.0);
    CHECK(audio::preprocess(fixed).samples == fixed.samples);

    const Clip pp = audio::preprocess(p);
    CHECK(pp.samples == p.samples); // bit-for-bit fixed point

    for (double secs : {0.3, 4.999, 6.0}) {
        const Clip any = sine_clip(22050, 300.0, secs);
        CHECK(audio::preprocess(any).samples.size() == 80000);
    }
}

} // TEST_SUITE
