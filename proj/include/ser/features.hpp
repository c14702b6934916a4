#ifndef SER_FEATURES_HPP
#define SER_FEATURES_HPP

#include <complex>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ser/audio_io.hpp"

namespace ser::features {

// MFCC extraction parameters. The defaults mirror a widely used Python
// extractor so outputs can be checked against stored reference matrices.
struct MfccConfig {
    int sample_rate = 16000;
    int n_fft = 2048;
    int hop = 512;
    int n_mels = 128;
    int n_mfcc = 20;
    double fmin = 0.0;
    double fmax = 8000.0;
    double log_floor = 1e-10;

    // Throws ConfigError on any violated invariant.
    void validate() const;

    int n_bins() const { return n_fft / 2 + 1; }

    // 32 hex chars over the canonical field string; identifies cache entries.
    std::string fingerprint() const;
};

// Coefficients x frames, row-major.
struct FeatureMatrix {
    int n_mfcc = 0;
    int n_frames = 0;
    std::vector<float> values;
    std::string config_fingerprint;
    std::string clip_id;

    float at(int row, int col) const {
        return values[static_cast<std::size_t>(row) * static_cast<std::size_t>(n_frames) +
                      static_cast<std::size_t>(col)];
    }
    float& at(int row, int col) {
        return values[static_cast<std::size_t>(row) * static_cast<std::size_t>(n_frames) +
                      static_cast<std::size_t>(col)];
    }
};

// In-place radix-2 FFT; size must be a power of two.
void fft_inplace(std::vector<std::complex<double>>& a);

// Triangular mel filterbank, n_mels x (n_fft/2 + 1), row-major. Centers are
// spaced uniformly on mel(f) = 2595 log10(1 + f/700); each filter is scaled
// to 2 / (hz span) so it integrates to a constant.
std::vector<double> mel_filterbank(const MfccConfig& config);

// Full pipeline: centered reflect-padded frames -> periodic Hann window ->
// |FFT|^2 -> mel filterbank -> log10 with floor -> orthonormal DCT-II ->
// first n_mfcc rows. The clip must be preprocessed (mono, at config rate).
FeatureMatrix mfcc(const audio::Clip& clip, const MfccConfig& config, std::string clip_id = {});

// Per-coefficient standardization statistics, computed over every frame of a
// set of matrices. Callers must restrict the input to training clips.
// Kept in double so standardized rows center to well below 1e-6.
struct CoeffStats {
    std::vector<double> mean;
    std::vector<double> stddev;
};

CoeffStats compute_stats(const std::vector<const FeatureMatrix*>& matrices);

// (x - mean) / max(stddev, 1e-8) per coefficient row.
FeatureMatrix standardize(const FeatureMatrix& features, const CoeffStats& stats);

// Cache file layout: "SERF", u32 version, u32 n_mfcc, u32 n_frames, f32
// little-endian values row-major, then the 32-hex-char config fingerprint.
inline constexpr std::uint32_t kCacheFormatVersion = 1;

void write_cache_file(const std::filesystem::path& path, const FeatureMatrix& features);
FeatureMatrix read_cache_file(const std::filesystem::path& path);

// Directory-backed feature cache keyed by clip id, bound to one config
// fingerprint. A scoped view restricts loads to an allowed id set so that
// training code cannot touch held-out partitions.
class FeatureStore {
public:
    FeatureStore(std::filesystem::path dir, std::string fingerprint);

    const std::string& fingerprint() const { return fingerprint_; }
    const std::filesystem::path& dir() const { return dir_; }

    bool has(const std::string& clip_id) const;
    FeatureMatrix load(const std::string& clip_id) const;
    void store(const FeatureMatrix& features) const;

    // Throws CacheMissError listing every id that is absent.
    void require(const std::vector<std::string>& clip_ids) const;

    FeatureStore scoped(std::set<std::string> allowed_ids) const;

    static std::string cache_filename(const std::string& clip_id);

private:
    std::filesystem::path dir_;
    std::string fingerprint_;
    std::optional<std::set<std::string>> allowed_;
};

} // namespace ser::features

#endif
