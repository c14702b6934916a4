#ifndef SER_AUDIO_IO_HPP
#define SER_AUDIO_IO_HPP

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace ser::audio {

// Decoded audio. Samples are interleaved amplitudes in [-1, 1];
// samples.size() is always a multiple of channels.
struct Clip {
    int sample_rate = 0;
    int channels = 0;
    std::vector<float> samples;
    std::string source;

    std::size_t frames() const {
        return channels > 0 ? samples.size() / static_cast<std::size_t>(channels) : 0;
    }
};

// Header fields of a WAV file, read without decoding the payload.
struct WavInfo {
    int sample_rate = 0;
    int channels = 0;
    int bits_per_sample = 0;
    std::uint32_t data_bytes = 0;

    double duration_s() const {
        const std::size_t bytes_per_frame =
            static_cast<std::size_t>(channels) * static_cast<std::size_t>(bits_per_sample / 8);
        if (bytes_per_frame == 0 || sample_rate == 0) return 0.0;
        return static_cast<double>(data_bytes) / static_cast<double>(bytes_per_frame) /
               static_cast<double>(sample_rate);
    }
};

// Decode a RIFF/WAVE container holding 16-bit signed little-endian PCM.
// Integer samples are scaled by 1/32768 so the range is symmetric around
// zero. Throws DecodeError on malformed chunks (the message names the
// offending chunk) and UnsupportedFormatError for non-PCM / non-16-bit data.
Clip decode_wav(std::span<const std::uint8_t> bytes, std::string source = {});

Clip load_wav(const std::filesystem::path& path);

// Parse only the header chunks; used for manifest duration scans.
WavInfo read_wav_info(const std::filesystem::path& path);

// Write a clip as 16-bit PCM. Amplitudes are clamped to [-1, 1] and rounded.
void write_wav_pcm16(const std::filesystem::path& path, const Clip& clip);

// Average all channels down to one; frame count is preserved.
Clip to_mono(const Clip& clip);

// Windowed-sinc polyphase resampler (Kaiser window, 64 taps per phase,
// cutoff at 0.45 x min(source, target) rate). Requires a mono clip.
// Output length is round(input_length * target_rate / input_rate).
// A clip already at the target rate is returned unchanged.
Clip resample(const Clip& clip, int target_rate);

// Pad with trailing zeros or truncate the tail so the clip lasts exactly
// target_seconds. Requires mono input.
Clip normalize_duration(const Clip& clip, double target_seconds = 5.0);

// to_mono -> resample(16 kHz) -> normalize_duration(5 s). The canonical form
// every corpus clip is reduced to: mono, 16 kHz, 80000 samples.
Clip preprocess(const Clip& clip);

inline constexpr int kCanonicalRate = 16000;
inline constexpr double kCanonicalSeconds = 5.0;

} // namespace ser::audio

#endif
