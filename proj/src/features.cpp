#include "ser/features.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "ser/error.hpp"
#include "ser/hash.hpp"

namespace ser::features {

namespace {

constexpr double kPi = 3.14159265358979323846;

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

bool is_power_of_two(int n) { return n > 0 && (n & (n - 1)) == 0; }

} // namespace

void MfccConfig::validate() const {
    if (sample_rate <= 0) throw ConfigError("mfcc config: sample_rate must be positive");
    if (!is_power_of_two(n_fft)) throw ConfigError("mfcc config: n_fft must be a power of two");
    if (hop <= 0 || hop > n_fft) throw ConfigError("mfcc config: need 0 < hop <= n_fft");
    if (n_mels <= 0) throw ConfigError("mfcc config: n_mels must be positive");
    if (n_mfcc <= 0 || n_mfcc > n_mels) throw ConfigError("mfcc config: need 0 < n_mfcc <= n_mels");
    if (fmin < 0.0 || fmin >= fmax) throw ConfigError("mfcc config: need 0 <= fmin < fmax");
    if (fmax > sample_rate / 2.0) throw ConfigError("mfcc config: fmax exceeds Nyquist");
    if (log_floor <= 0.0) throw ConfigError("mfcc config: log_floor must be positive");
}

std::string MfccConfig::fingerprint() const {
    std::string canon = "sr=" + std::to_string(sample_rate) +
                        ";n_fft=" + std::to_string(n_fft) +
                        ";hop=" + std::to_string(hop) +
                        ";n_mels=" + std::to_string(n_mels) +
                        ";n_mfcc=" + std::to_string(n_mfcc) +
                        ";fmin=" + format_double(fmin) +
                        ";fmax=" + format_double(fmax) +
                        ";log_floor=" + format_double(log_floor);
    return fnv1a128_hex(canon);
}

void fft_inplace(std::vector<std::complex<double>>& a) {
    const std::size_t n = a.size();
    if (!is_power_of_two(static_cast<int>(n)))
        throw ConfigError("fft: size must be a power of two");

    // Bit-reversal permutation.
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = -2.0 * kPi / static_cast<double>(len);
        const std::complex<double> wlen(std::cos(ang), std::sin(ang));
        for (std::size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (std::size_t k = 0; k < len / 2; ++k) {
                const std::complex<double> u = a[i + k];
                const std::complex<double> v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
                w *= wlen;
            }
        }
    }
}

std::vector<double> mel_filterbank(const MfccConfig& config) {
    config.validate();
    const int n_bins = config.n_bins();
    const int n_mels = config.n_mels;

    // n_mels + 2 points uniform in mel between fmin and fmax, mapped back
    // to Hz; triangles are built on the Hz axis.
    std::vector<double> mel_pts(static_cast<std::size_t>(n_mels) + 2);
    const double mel_lo = hz_to_mel(config.fmin);
    const double mel_hi = hz_to_mel(config.fmax);
    for (std::size_t i = 0; i < mel_pts.size(); ++i) {
        const double mel = mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) /
                                        static_cast<double>(n_mels + 1);
        mel_pts[i] = mel_to_hz(mel);
    }

    std::vector<double> bin_hz(static_cast<std::size_t>(n_bins));
    for (int k = 0; k < n_bins; ++k) {
        bin_hz[static_cast<std::size_t>(k)] =
            static_cast<double>(k) * config.sample_rate / (2.0 * (n_bins - 1));
    }

    std::vector<double> weights(static_cast<std::size_t>(n_mels) * n_bins, 0.0);
    for (int m = 0; m < n_mels; ++m) {
        const double lo = mel_pts[static_cast<std::size_t>(m)];
        const double mid = mel_pts[static_cast<std::size_t>(m) + 1];
        const double hi = mel_pts[static_cast<std::size_t>(m) + 2];
        const double enorm = 2.0 / (hi - lo);
        for (int k = 0; k < n_bins; ++k) {
            const double f = bin_hz[static_cast<std::size_t>(k)];
            const double up = (f - lo) / (mid - lo);
            const double down = (hi - f) / (hi - mid);
            const double w = std::max(0.0, std::min(up, down));
            weights[static_cast<std::size_t>(m) * n_bins + static_cast<std::size_t>(k)] =
                w * enorm;
        }
    }
    return weights;
}

FeatureMatrix mfcc(const audio::Clip& clip, const MfccConfig& config, std::string clip_id) {
    config.validate();
    if (clip.channels != 1)
        throw ConfigError("mfcc: clip must be mono");
    if (clip.sample_rate != config.sample_rate)
        throw ConfigError("mfcc: clip rate " + std::to_string(clip.sample_rate) +
                          " does not match config rate " + std::to_string(config.sample_rate));

    const int n_fft = config.n_fft;
    const int hop = config.hop;
    const int n_bins = config.n_bins();
    const int pad = n_fft / 2;
    const std::size_t n = clip.samples.size();
    if (n < static_cast<std::size_t>(pad) + 1)
        throw ConfigError("mfcc: clip shorter than half a frame");

    const int n_frames = 1 + static_cast<int>(n / static_cast<std::size_t>(hop));

    // Reflect padding (no edge duplication): padded[i] for i in
    // [-pad, n + pad) maps to samples mirrored at 0 and n-1.
    auto sample_at = [&](std::int64_t i) -> double {
        if (i < 0) i = -i;
        if (i >= static_cast<std::int64_t>(n))
            i = 2 * static_cast<std::int64_t>(n) - 2 - i;
        return static_cast<double>(clip.samples[static_cast<std::size_t>(i)]);
    };

    // Periodic Hann.
    std::vector<double> window(static_cast<std::size_t>(n_fft));
    for (int i = 0; i < n_fft; ++i) {
        window[static_cast<std::size_t>(i)] =
            0.5 - 0.5 * std::cos(2.0 * kPi * i / static_cast<double>(n_fft));
    }

    const std::vector<double> fb = mel_filterbank(config);

    // Orthonormal DCT-II basis, n_mfcc x n_mels.
    const int n_mels = config.n_mels;
    const int n_mfcc = config.n_mfcc;
    std::vector<double> dct(static_cast<std::size_t>(n_mfcc) * n_mels);
    for (int k = 0; k < n_mfcc; ++k) {
        const double scale = k == 0 ? std::sqrt(1.0 / n_mels) : std::sqrt(2.0 / n_mels);
        for (int m = 0; m < n_mels; ++m) {
            dct[static_cast<std::size_t>(k) * n_mels + static_cast<std::size_t>(m)] =
                scale * std::cos(kPi * k * (2.0 * m + 1.0) / (2.0 * n_mels));
        }
    }

    FeatureMatrix out;
    out.n_mfcc = n_mfcc;
    out.n_frames = n_frames;
    out.values.resize(static_cast<std::size_t>(n_mfcc) * static_cast<std::size_t>(n_frames));
    out.config_fingerprint = config.fingerprint();
    out.clip_id = std::move(clip_id);

    std::vector<std::complex<double>> buf(static_cast<std::size_t>(n_fft));
    std::vector<double> power(static_cast<std::size_t>(n_bins));
    std::vector<double> logmel(static_cast<std::size_t>(n_mels));

    for (int t = 0; t < n_frames; ++t) {
        const std::int64_t center = static_cast<std::int64_t>(t) * hop;
        for (int i = 0; i < n_fft; ++i) {
            buf[static_cast<std::size_t>(i)] = {
                sample_at(center - pad + i) * window[static_cast<std::size_t>(i)], 0.0};
        }
        fft_inplace(buf);
        for (int k = 0; k < n_bins; ++k) {
            power[static_cast<std::size_t>(k)] = std::norm(buf[static_cast<std::size_t>(k)]);
        }
        for (int m = 0; m < n_mels; ++m) {
            double acc = 0.0;
            const double* row = fb.data() + static_cast<std::size_t>(m) * n_bins;
            for (int k = 0; k < n_bins; ++k) acc += row[k] * power[static_cast<std::size_t>(k)];
            logmel[static_cast<std::size_t>(m)] = std::log10(std::max(acc, config.log_floor));
        }
        for (int k = 0; k < n_mfcc; ++k) {
            double acc = 0.0;
            const double* row = dct.data() + static_cast<std::size_t>(k) * n_mels;
            for (int m = 0; m < n_mels; ++m) acc += row[m] * logmel[static_cast<std::size_t>(m)];
            out.at(k, t) = static_cast<float>(acc);
        }
    }
    return out;
}

CoeffStats compute_stats(const std::vector<const FeatureMatrix*>& matrices) {
    if (matrices.empty()) throw ConfigError("compute_stats: no matrices");
    const int n_mfcc = matrices.front()->n_mfcc;
    std::vector<double> sum(static_cast<std::size_t>(n_mfcc), 0.0);
    std::vector<double> sumsq(static_cast<std::size_t>(n_mfcc), 0.0);
    std::size_t count = 0;
    for (const FeatureMatrix* m : matrices) {
        if (m->n_mfcc != n_mfcc)
            throw ShapeError("compute_stats: matrices disagree on coefficient count");
        for (int r = 0; r < n_mfcc; ++r) {
            for (int c = 0; c < m->n_frames; ++c) {
                const double v = m->at(r, c);
                sum[static_cast<std::size_t>(r)] += v;
                sumsq[static_cast<std::size_t>(r)] += v * v;
            }
        }
        count += static_cast<std::size_t>(m->n_frames);
    }
    CoeffStats stats;
    stats.mean.resize(static_cast<std::size_t>(n_mfcc));
    stats.stddev.resize(static_cast<std::size_t>(n_mfcc));
    for (int r = 0; r < n_mfcc; ++r) {
        const double mean = sum[static_cast<std::size_t>(r)] / static_cast<double>(count);
        const double var =
            std::max(0.0, sumsq[static_cast<std::size_t>(r)] / static_cast<double>(count) -
                              mean * mean);
        stats.mean[static_cast<std::size_t>(r)] = mean;
        stats.stddev[static_cast<std::size_t>(r)] = std::sqrt(var);
    }
    return stats;
}

FeatureMatrix standardize(const FeatureMatrix& features, const CoeffStats& stats) {
    if (static_cast<std::size_t>(features.n_mfcc) != stats.mean.size() ||
        stats.mean.size() != stats.stddev.size()) {
        throw ShapeError("standardize: stats have " + std::to_string(stats.mean.size()) +
                         " coefficients, features have " + std::to_string(features.n_mfcc));
    }
    FeatureMatrix out = features;
    for (int r = 0; r < out.n_mfcc; ++r) {
        const double mean = stats.mean[static_cast<std::size_t>(r)];
        const double sd = std::max(stats.stddev[static_cast<std::size_t>(r)], 1e-8);
        for (int c = 0; c < out.n_frames; ++c) {
            out.at(r, c) = static_cast<float>((out.at(r, c) - mean) / sd);
        }
    }
    return out;
}

namespace {

void put_u32le(std::ofstream& out, std::uint32_t v) {
    const char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8),
                       static_cast<char>(v >> 16), static_cast<char>(v >> 24)};
    out.write(b, 4);
}

std::uint32_t get_u32le(std::ifstream& in, const std::string& what) {
    std::uint8_t b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw DecodeError("feature cache: truncated " + what);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

} // namespace

void write_cache_file(const std::filesystem::path& path, const FeatureMatrix& features) {
    if (features.config_fingerprint.size() != 32)
        throw ConfigError("feature cache: fingerprint must be 32 hex chars");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot create " + path.string());
    out.write("SERF", 4);
    put_u32le(out, kCacheFormatVersion);
    put_u32le(out, static_cast<std::uint32_t>(features.n_mfcc));
    put_u32le(out, static_cast<std::uint32_t>(features.n_frames));
    static_assert(sizeof(float) == 4);
    for (float v : features.values) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        put_u32le(out, bits);
    }
    out.write(features.config_fingerprint.data(),
              static_cast<std::streamsize>(features.config_fingerprint.size()));
    if (!out) throw IoError("short write on " + path.string());
}

FeatureMatrix read_cache_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "SERF", 4) != 0)
        throw DecodeError("feature cache: bad magic in " + path.string());
    const std::uint32_t version = get_u32le(in, "version");
    if (version != kCacheFormatVersion)
        throw DecodeError("feature cache: unsupported version " + std::to_string(version));
    FeatureMatrix m;
    m.n_mfcc = static_cast<int>(get_u32le(in, "n_mfcc"));
    m.n_frames = static_cast<int>(get_u32le(in, "n_frames"));
    const std::size_t count =
        static_cast<std::size_t>(m.n_mfcc) * static_cast<std::size_t>(m.n_frames);
    m.values.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::uint32_t bits = get_u32le(in, "values");
        std::memcpy(&m.values[i], &bits, 4);
    }
    m.config_fingerprint.resize(32);
    in.read(m.config_fingerprint.data(), 32);
    if (!in) throw DecodeError("feature cache: truncated fingerprint in " + path.string());
    return m;
}

FeatureStore::FeatureStore(std::filesystem::path dir, std::string fingerprint)
    : dir_(std::move(dir)), fingerprint_(std::move(fingerprint)) {
    std::filesystem::create_directories(dir_);
}

std::string FeatureStore::cache_filename(const std::string& clip_id) {
    std::string safe;
    safe.reserve(clip_id.size());
    for (char c : clip_id) {
        const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                        (c >= '0' && c <= '9') || c == '-' || c == '_' || c == '.';
        safe.push_back(ok ? c : '_');
    }
    // Short hash suffix keeps sanitized names collision-free.
    return safe + "-" + fnv1a128_hex(clip_id).substr(0, 8) + ".serf";
}

bool FeatureStore::has(const std::string& clip_id) const {
    const auto path = dir_ / cache_filename(clip_id);
    if (!std::filesystem::exists(path)) return false;
    try {
        return read_cache_file(path).config_fingerprint == fingerprint_;
    } catch (const Error&) {
        return false;
    }
}

FeatureMatrix FeatureStore::load(const std::string& clip_id) const {
    if (allowed_ && !allowed_->count(clip_id))
        throw CacheMissError("feature store: clip '" + clip_id +
                             "' is outside the allowed partition scope");
    const auto path = dir_ / cache_filename(clip_id);
    if (!std::filesystem::exists(path))
        throw CacheMissError("feature store: no cached features for '" + clip_id + "'");
    FeatureMatrix m = read_cache_file(path);
    if (m.config_fingerprint != fingerprint_)
        throw CacheMissError("feature store: stale fingerprint for '" + clip_id + "'");
    m.clip_id = clip_id;
    return m;
}

void FeatureStore::store(const FeatureMatrix& features) const {
    if (features.config_fingerprint != fingerprint_)
        throw ConfigError("feature store: fingerprint mismatch on store");
    write_cache_file(dir_ / cache_filename(features.clip_id), features);
}

void FeatureStore::require(const std::vector<std::string>& clip_ids) const {
    std::string missing;
    std::size_t n_missing = 0;
    for (const auto& id : clip_ids) {
        const bool in_scope = !allowed_ || allowed_->count(id);
        if (!in_scope || !has(id)) {
            ++n_missing;
            if (!missing.empty()) missing += ", ";
            if (n_missing <= 20) missing += id;
        }
    }
    if (n_missing > 0) {
        if (n_missing > 20) missing += ", ... (" + std::to_string(n_missing) + " total)";
        throw CacheMissError("feature store: missing features for: " + missing);
    }
}

FeatureStore FeatureStore::scoped(std::set<std::string> allowed_ids) const {
    FeatureStore view(dir_, fingerprint_);
    view.allowed_ = std::move(allowed_ids);
    return view;
}

} // namespace ser::features
