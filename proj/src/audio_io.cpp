#include "ser/audio_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "ser/error.hpp"

namespace ser::audio {

namespace {

std::uint32_t read_u32le(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint16_t read_u16le(const std::uint8_t* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

struct FmtChunk {
    std::uint16_t audio_format = 0;
    std::uint16_t channels = 0;
    std::uint32_t sample_rate = 0;
    std::uint16_t bits_per_sample = 0;
};

// Walks the chunk list and returns fmt plus the span of the data payload.
// Chunk sizes are validated against the container so a truncated file fails
// with the name of the chunk that overruns.
void parse_riff(std::span<const std::uint8_t> bytes, FmtChunk& fmt,
                std::size_t& data_offset, std::uint32_t& data_size) {
    if (bytes.size() < 12) throw DecodeError("wav: file too short for RIFF header");
    if (std::memcmp(bytes.data(), "RIFF", 4) != 0)
        throw DecodeError("wav: missing RIFF chunk id");
    if (std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
        throw DecodeError("wav: RIFF form type is not WAVE");

    bool fmt_found = false;
    bool data_found = false;
    std::size_t off = 12;
    while (off + 8 <= bytes.size()) {
        char id[5] = {0};
        std::memcpy(id, bytes.data() + off, 4);
        const std::uint32_t size = read_u32le(bytes.data() + off + 4);
        const std::size_t body = off + 8;
        if (body + size > bytes.size()) {
            throw DecodeError(std::string("wav: chunk '") + id + "' overruns the file");
        }
        if (std::memcmp(id, "fmt ", 4) == 0) {
            if (size < 16) throw DecodeError("wav: chunk 'fmt ' shorter than 16 bytes");
            fmt.audio_format = read_u16le(bytes.data() + body);
            fmt.channels = read_u16le(bytes.data() + body + 2);
            fmt.sample_rate = read_u32le(bytes.data() + body + 4);
            fmt.bits_per_sample = read_u16le(bytes.data() + body + 14);
            fmt_found = true;
        } else if (std::memcmp(id, "data", 4) == 0) {
            data_offset = body;
            data_size = size;
            data_found = true;
        }
        // Chunks are word-aligned; odd sizes carry a pad byte.
        off = body + size + (size & 1);
        if (fmt_found && data_found) break;
    }
    if (!fmt_found) throw DecodeError("wav: chunk 'fmt ' not found");
    if (!data_found) throw DecodeError("wav: chunk 'data' not found");
}

void check_supported(const FmtChunk& fmt) {
    if (fmt.audio_format != 1) {
        throw UnsupportedFormatError("wav: only PCM (format 1) is supported, got format " +
                                     std::to_string(fmt.audio_format));
    }
    if (fmt.bits_per_sample != 16) {
        throw UnsupportedFormatError("wav: only 16-bit samples are supported, got " +
                                     std::to_string(fmt.bits_per_sample) + "-bit");
    }
    if (fmt.channels == 0) throw DecodeError("wav: chunk 'fmt ' declares zero channels");
    if (fmt.sample_rate == 0) throw DecodeError("wav: chunk 'fmt ' declares zero sample rate");
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    in.seekg(0, std::ios::end);
    const auto size = in.tellg();
    in.seekg(0, std::ios::beg);
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(size));
    in.read(reinterpret_cast<char*>(bytes.data()), size);
    if (!in) throw IoError("short read on " + path.string());
    return bytes;
}

// Zeroth-order modified Bessel function, power series. Converges quickly for
// the argument range Kaiser windows use.
double bessel_i0(double x) {
    double sum = 1.0;
    double term = 1.0;
    const double half_x = x / 2.0;
    for (int k = 1; k < 64; ++k) {
        term *= (half_x / k) * (half_x / k);
        sum += term;
        if (term < 1e-18 * sum) break;
    }
    return sum;
}

constexpr double kPi = 3.14159265358979323846;
constexpr int kHalfTaps = 32; // 64 taps per phase
constexpr double kKaiserBeta = 9.0;

double sinc(double x) {
    if (x == 0.0) return 1.0;
    const double px = kPi * x;
    return std::sin(px) / px;
}

// One phase of the resampling kernel: taps at integer offsets j - frac for
// j in [-kHalfTaps+1, kHalfTaps], normalized to unit DC gain.
std::vector<double> make_phase(double frac, double cutoff_norm) {
    std::vector<double> taps(2 * kHalfTaps);
    const double i0_beta = bessel_i0(kKaiserBeta);
    double sum = 0.0;
    for (int j = -kHalfTaps + 1; j <= kHalfTaps; ++j) {
        const double x = static_cast<double>(j) - frac;
        const double u = x / kHalfTaps;
        double w = 0.0;
        if (u > -1.0 && u < 1.0) {
            w = bessel_i0(kKaiserBeta * std::sqrt(1.0 - u * u)) / i0_beta;
        }
        const double v = 2.0 * cutoff_norm * sinc(2.0 * cutoff_norm * x) * w;
        taps[static_cast<std::size_t>(j + kHalfTaps - 1)] = v;
        sum += v;
    }
    for (double& t : taps) t /= sum;
    return taps;
}

} // namespace

Clip decode_wav(std::span<const std::uint8_t> bytes, std::string source) {
    FmtChunk fmt;
    std::size_t data_offset = 0;
    std::uint32_t data_size = 0;
    parse_riff(bytes, fmt, data_offset, data_size);
    check_supported(fmt);

    const std::size_t n_values = data_size / 2;
    const std::size_t whole = n_values - n_values % fmt.channels;

    Clip clip;
    clip.sample_rate = static_cast<int>(fmt.sample_rate);
    clip.channels = static_cast<int>(fmt.channels);
    clip.source = std::move(source);
    clip.samples.resize(whole);
    const std::uint8_t* p = bytes.data() + data_offset;
    for (std::size_t i = 0; i < whole; ++i) {
        const std::int16_t s = static_cast<std::int16_t>(read_u16le(p + 2 * i));
        clip.samples[i] = static_cast<float>(s) / 32768.0f;
    }
    return clip;
}

Clip load_wav(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    return decode_wav(bytes, path.string());
}

WavInfo read_wav_info(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    FmtChunk fmt;
    std::size_t data_offset = 0;
    std::uint32_t data_size = 0;
    parse_riff(bytes, fmt, data_offset, data_size);
    check_supported(fmt);
    WavInfo info;
    info.sample_rate = static_cast<int>(fmt.sample_rate);
    info.channels = static_cast<int>(fmt.channels);
    info.bits_per_sample = static_cast<int>(fmt.bits_per_sample);
    info.data_bytes = data_size;
    return info;
}

void write_wav_pcm16(const std::filesystem::path& path, const Clip& clip) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot create " + path.string());

    const std::uint32_t data_bytes = static_cast<std::uint32_t>(clip.samples.size() * 2);
    const std::uint16_t channels = static_cast<std::uint16_t>(clip.channels);
    const std::uint32_t rate = static_cast<std::uint32_t>(clip.sample_rate);
    const std::uint16_t block_align = static_cast<std::uint16_t>(channels * 2);
    const std::uint32_t byte_rate = rate * block_align;

    auto put_u32 = [&](std::uint32_t v) {
        const char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8),
                           static_cast<char>(v >> 16), static_cast<char>(v >> 24)};
        out.write(b, 4);
    };
    auto put_u16 = [&](std::uint16_t v) {
        const char b[2] = {static_cast<char>(v), static_cast<char>(v >> 8)};
        out.write(b, 2);
    };

    out.write("RIFF", 4);
    put_u32(36 + data_bytes);
    out.write("WAVE", 4);
    out.write("fmt ", 4);
    put_u32(16);
    put_u16(1); // PCM
    put_u16(channels);
    put_u32(rate);
    put_u32(byte_rate);
    put_u16(block_align);
    put_u16(16);
    out.write("data", 4);
    put_u32(data_bytes);
    for (float s : clip.samples) {
        const float clamped = std::clamp(s, -1.0f, 1.0f);
        const long v = std::lrint(static_cast<double>(clamped) * 32767.0);
        const std::int16_t pcm = static_cast<std::int16_t>(std::clamp(v, -32768L, 32767L));
        const std::uint16_t u = static_cast<std::uint16_t>(pcm);
        const char b[2] = {static_cast<char>(u), static_cast<char>(u >> 8)};
        out.write(b, 2);
    }
    if (!out) throw IoError("short write on " + path.string());
}

Clip to_mono(const Clip& clip) {
    if (clip.channels < 1) throw DecodeError("to_mono: clip has no channels");
    if (clip.channels == 1) return clip;
    Clip mono;
    mono.sample_rate = clip.sample_rate;
    mono.channels = 1;
    mono.source = clip.source;
    const std::size_t frames = clip.frames();
    mono.samples.resize(frames);
    const auto ch = static_cast<std::size_t>(clip.channels);
    for (std::size_t f = 0; f < frames; ++f) {
        double acc = 0.0;
        for (std::size_t c = 0; c < ch; ++c) acc += clip.samples[f * ch + c];
        mono.samples[f] = static_cast<float>(acc / static_cast<double>(ch));
    }
    return mono;
}

Clip resample(const Clip& clip, int target_rate) {
    if (clip.channels != 1) throw DecodeError("resample: clip must be mono");
    if (target_rate <= 0) throw ConfigError("resample: target rate must be positive");
    if (clip.sample_rate == target_rate) return clip;

    const int in_rate = clip.sample_rate;
    const std::size_t n_in = clip.samples.size();
    const std::size_t n_out = static_cast<std::size_t>(std::llround(
        static_cast<double>(n_in) * target_rate / static_cast<double>(in_rate)));

    const double cutoff_hz = 0.45 * static_cast<double>(std::min(in_rate, target_rate));
    const double cutoff_norm = cutoff_hz / static_cast<double>(in_rate);

    // Output sample m sits at input position m * M / L where L/M is the
    // reduced rate ratio; there are exactly L distinct fractional phases.
    const std::uint64_t g = std::gcd(static_cast<std::uint64_t>(in_rate),
                                     static_cast<std::uint64_t>(target_rate));
    const std::uint64_t up = static_cast<std::uint64_t>(target_rate) / g;
    const std::uint64_t down = static_cast<std::uint64_t>(in_rate) / g;

    Clip out;
    out.sample_rate = target_rate;
    out.channels = 1;
    out.source = clip.source;
    out.samples.resize(n_out);

    constexpr std::uint64_t kMaxPhaseTable = 4096;
    std::vector<std::vector<double>> phases;
    if (up <= kMaxPhaseTable) {
        phases.reserve(up);
        for (std::uint64_t p = 0; p < up; ++p) {
            phases.push_back(make_phase(static_cast<double>(p) / static_cast<double>(up),
                                        cutoff_norm));
        }
    }

    const auto n_in_s = static_cast<std::int64_t>(n_in);
    for (std::size_t m = 0; m < n_out; ++m) {
        const std::uint64_t num = static_cast<std::uint64_t>(m) * down;
        const std::int64_t base = static_cast<std::int64_t>(num / up);
        const std::uint64_t phase = num % up;

        const std::vector<double>& taps =
            !phases.empty() ? phases[phase]
                            : make_phase(static_cast<double>(phase) / static_cast<double>(up),
                                         cutoff_norm);
        double acc = 0.0;
        for (int j = -kHalfTaps + 1; j <= kHalfTaps; ++j) {
            const std::int64_t idx = base + j;
            if (idx < 0 || idx >= n_in_s) continue;
            acc += taps[static_cast<std::size_t>(j + kHalfTaps - 1)] *
                   clip.samples[static_cast<std::size_t>(idx)];
        }
        out.samples[m] = static_cast<float>(acc);
    }
    return out;
}

Clip normalize_duration(const Clip& clip, double target_seconds) {
    if (clip.channels != 1) throw DecodeError("normalize_duration: clip must be mono");
    const std::size_t target = static_cast<std::size_t>(
        std::llround(target_seconds * clip.sample_rate));
    if (clip.samples.size() == target) return clip;
    Clip out = clip;
    out.samples.resize(target, 0.0f);
    return out;
}

Clip preprocess(const Clip& clip) {
    return normalize_duration(resample(to_mono(clip), kCanonicalRate), kCanonicalSeconds);
}

} // namespace ser::audio
