#include <doctest.h>

#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ser/audio_io.hpp"
#include "ser/error.hpp"
#include "ser/features.hpp"
#include "ser/rng.hpp"

using namespace ser;
using features::FeatureMatrix;
using features::MfccConfig;

namespace {

constexpr double kPi = 3.14159265358979323846;

const std::filesystem::path kGoldenDir =
    std::filesystem::path(SER_TEST_DATA_DIR) / "golden";

std::vector<double> read_f64(const std::filesystem::path& path, std::size_t count) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE_MESSAGE(in.good(), "missing fixture ", path.string());
    std::vector<double> v(count);
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(count * 8));
    REQUIRE_MESSAGE(in.gcount() == static_cast<std::streamsize>(count * 8),
                    "fixture too short: ", path.string());
    return v;
}

audio::Clip zero_clip(std::size_t n) {
    audio::Clip c;
    c.sample_rate = 16000;
    c.channels = 1;
    c.samples.assign(n, 0.0f);
    return c;
}

audio::Clip sine_clip(double freq, std::size_t n, double amp) {
    audio::Clip c = zero_clip(n);
    for (std::size_t i = 0; i < n; ++i) {
        c.samples[i] = static_cast<float>(amp * std::sin(2.0 * kPi * freq * i / 16000.0));
    }
    return c;
}

} // namespace

TEST_SUITE("features") {

TEST_CASE("config validation rejects out-of-range fields") {
    MfccConfig c;
    CHECK_NOTHROW(c.validate());
    c.n_mfcc = 200;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = MfccConfig{};
    c.hop = 4096;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = MfccConfig{};
    c.n_fft = 1000; // not a power of two
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = MfccConfig{};
    c.fmax = 9000.0; // above Nyquist
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = MfccConfig{};
    c.fmin = 500.0;
    c.fmax = 400.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = MfccConfig{};
    c.log_floor = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("config fingerprints separate distinct configs") {
    MfccConfig a;
    MfccConfig b;
    CHECK(a.fingerprint() == b.fingerprint());
    CHECK(a.fingerprint().size() == 32);
    b.n_mfcc = 13;
    CHECK(a.fingerprint() != b.fingerprint());
    MfccConfig c;
    c.fmax = 7999.0;
    CHECK(a.fingerprint() != c.fingerprint());
}

TEST_CASE("filterbank rows are positive with centers increasing in Hz") {
    MfccConfig cfg;
    const auto fb = features::mel_filterbank(cfg);
    const int n_bins = cfg.n_bins();
    REQUIRE(fb.size() == static_cast<std::size_t>(cfg.n_mels) * n_bins);
    int prev_peak = -1;
    int strictly_after = 0;
    for (int m = 0; m < cfg.n_mels; ++m) {
        double sum = 0.0;
        double best = -1.0;
        int best_k = 0;
        for (int k = 0; k < n_bins; ++k) {
            const double w = fb[static_cast<std::size_t>(m) * n_bins + k];
            CHECK(w >= 0.0);
            sum += w;
            if (w > best) {
                best = w;
                best_k = k;
            }
        }
        CHECK(sum > 0.0);
        CHECK(best_k >= prev_peak);
        if (best_k > prev_peak) ++strictly_after;
        prev_peak = best_k;
    }
    CHECK(strictly_after > cfg.n_mels / 2); // peaks genuinely march upward
}

TEST_CASE("filterbank matches the stored reference within 1e-6") {
    MfccConfig cfg;
    const auto fb = features::mel_filterbank(cfg);
    const std::size_t count = static_cast<std::size_t>(cfg.n_mels) * cfg.n_bins();
    const auto ref = read_f64(kGoldenDir / "melfb_default.f64", count);
    double worst = 0.0;
    for (std::size_t i = 0; i < count; ++i) worst = std::max(worst, std::abs(fb[i] - ref[i]));
    CHECK(worst < 1e-6);
}

TEST_CASE("fft satisfies Parseval on a windowed frame") {
    const int n = 2048;
    std::vector<std::complex<double>> buf(n);
    double time_power = 0.0;
    for (int i = 0; i < n; ++i) {
        const double w = 0.5 - 0.5 * std::cos(2.0 * kPi * i / n);
        const double x = w * std::sin(2.0 * kPi * 440.0 * i / 16000.0 + 0.3);
        buf[i] = {x, 0.0};
        time_power += x * x;
    }
    features::fft_inplace(buf);
    double spec_power = 0.0;
    for (const auto& v : buf) spec_power += std::norm(v);
    spec_power /= n;
    CHECK(std::abs(spec_power - time_power) / time_power < 1e-6);
}

TEST_CASE("frame count follows 1 + floor(n / hop)") {
    MfccConfig cfg;
    const FeatureMatrix m = features::mfcc(zero_clip(80000), cfg, "z");
    CHECK(m.n_mfcc == 20);
    CHECK(m.n_frames == 157);
    CHECK(features::mfcc(zero_clip(32000), cfg, "z").n_frames == 63);
    CHECK(features::mfcc(zero_clip(512 * 10), cfg, "z").n_frames == 11);
}

TEST_CASE("silence yields identical frame columns") {
    const FeatureMatrix m = features::mfcc(zero_clip(80000), MfccConfig{}, "z");
    for (int r = 0; r < m.n_mfcc; ++r) {
        for (int c = 1; c < m.n_frames; ++c) {
            REQUIRE(m.at(r, c) == m.at(r, 0));
        }
    }
}

TEST_CASE("mfcc is deterministic bit-for-bit") {
    const audio::Clip c = sine_clip(440.0, 80000, 0.8);
    const FeatureMatrix a = features::mfcc(c, MfccConfig{}, "a");
    const FeatureMatrix b = features::mfcc(c, MfccConfig{}, "b");
    CHECK(a.values == b.values);
}

TEST_CASE("doubling amplitude shifts only the zeroth coefficient") {
    // Needs a broadband signal: every mel band must sit above the log floor
    // both before and after doubling, or flooring breaks the pure log shift.
    audio::Clip c1 = zero_clip(32000);
    Rng rng(7);
    for (float& s : c1.samples) s = static_cast<float>(0.6 * (rng.uniform() - 0.5));
    audio::Clip c2 = c1;
    for (float& s : c2.samples) s *= 2.0f;
    const FeatureMatrix a = features::mfcc(c1, MfccConfig{}, "a");
    const FeatureMatrix b = features::mfcc(c2, MfccConfig{}, "b");
    // power x4 adds log10(4) to every band; through the orthonormal DCT that
    // lands entirely on c0 as sqrt(n_mels) * log10(4)
    const double c0_shift = std::sqrt(128.0) * std::log10(4.0);
    for (int t = 0; t < a.n_frames; ++t) {
        CHECK(std::abs((b.at(0, t) - a.at(0, t)) - c0_shift) < 1e-4);
        for (int r = 1; r < a.n_mfcc; ++r) {
            CHECK(std::abs(b.at(r, t) - a.at(r, t)) < 1e-6);
        }
    }
}

TEST_CASE("mfcc rejects mismatched clips") {
    audio::Clip c = zero_clip(4000);
    c.sample_rate = 8000;
    CHECK_THROWS_AS(features::mfcc(c, MfccConfig{}, "x"), ConfigError);
    audio::Clip stereo = zero_clip(4000);
    stereo.channels = 2;
    CHECK_THROWS_AS(features::mfcc(stereo, MfccConfig{}, "x"), ConfigError);
    CHECK_THROWS_AS(features::mfcc(zero_clip(100), MfccConfig{}, "x"), ConfigError);
}

TEST_CASE("extractor matches the stored reference signals within 1e-4") {
    std::ifstream in(kGoldenDir / "manifest.json");
    REQUIRE_MESSAGE(in.good(), "missing golden manifest");
    const auto manifest = nlohmann::json::parse(in);
    MfccConfig cfg;
    cfg.sample_rate = manifest.at("sample_rate").get<int>();
    cfg.n_fft = manifest.at("n_fft").get<int>();
    cfg.hop = manifest.at("hop").get<int>();
    cfg.n_mels = manifest.at("n_mels").get<int>();
    cfg.n_mfcc = manifest.at("n_mfcc").get<int>();
    cfg.fmin = manifest.at("fmin").get<double>();
    cfg.fmax = manifest.at("fmax").get<double>();
    cfg.log_floor = manifest.at("log_floor").get<double>();

    const auto& signals = manifest.at("signals");
    REQUIRE(signals.size() == 20);
    for (const auto& sig : signals) {
        const std::string id = sig.at("id").get<std::string>();
        CAPTURE(id);
        const audio::Clip clip = audio::load_wav(kGoldenDir / sig.at("wav").get<std::string>());
        REQUIRE(clip.samples.size() == sig.at("samples").get<std::size_t>());
        const FeatureMatrix m = features::mfcc(clip, cfg, id);
        REQUIRE(m.n_mfcc == sig.at("n_mfcc").get<int>());
        REQUIRE(m.n_frames == sig.at("n_frames").get<int>());
        const auto ref = read_f64(kGoldenDir / sig.at("mfcc").get<std::string>(),
                                  m.values.size());
        double worst = 0.0;
        for (std::size_t i = 0; i < m.values.size(); ++i) {
            REQUIRE(std::isfinite(m.values[i]));
            worst = std::max(worst, std::abs(static_cast<double>(m.values[i]) - ref[i]));
        }
        CHECK_MESSAGE(worst < 1e-4, "max abs deviation ", worst, " on ", id);
    }
}

TEST_CASE("standardize centers and scales each row") {
    const audio::Clip c = sine_clip(700.0, 32000, 0.5);
    const FeatureMatrix m = features::mfcc(c, MfccConfig{}, "s");
    const auto stats = features::compute_stats({&m});
    const FeatureMatrix z = features::standardize(m, stats);
    for (int r = 0; r < z.n_mfcc; ++r) {
        double sum = 0.0;
        double sumsq = 0.0;
        for (int t = 0; t < z.n_frames; ++t) {
            sum += z.at(r, t);
            sumsq += static_cast<double>(z.at(r, t)) * z.at(r, t);
        }
        const double mean = sum / z.n_frames;
        const double var = sumsq / z.n_frames - mean * mean;
        CHECK(std::abs(mean) < 1e-6);
        CHECK(std::abs(std::sqrt(std::max(var, 0.0)) - 1.0) < 1e-6);
    }
}

TEST_CASE("standardize handles zero-variance rows without NaN") {
    const FeatureMatrix m = features::mfcc(zero_clip(16000), MfccConfig{}, "z");
    const auto stats = features::compute_stats({&m});
    const FeatureMatrix z = features::standardize(m, stats);
    for (float v : z.values) {
        CHECK(std::isfinite(v));
        CHECK(v == 0.0f);
    }
}

TEST_CASE("standardize is a pure function of features and stats") {
    const audio::Clip c = sine_clip(300.0, 16000, 0.3);
    const FeatureMatrix m = features::mfcc(c, MfccConfig{}, "p");
    features::CoeffStats stats;
    stats.mean.assign(20, 1.5);
    stats.stddev.assign(20, 2.0);
    const FeatureMatrix a = features::standardize(m, stats);
    const FeatureMatrix b = features::standardize(m, stats);
    CHECK(a.values == b.values);

    features::CoeffStats bad;
    bad.mean.assign(13, 0.0);
    bad.stddev.assign(13, 1.0);
    CHECK_THROWS_AS(features::standardize(m, bad), ShapeError);
}

TEST_CASE("cache files round-trip bit-for-bit") {
    const auto dir = std::filesystem::temp_directory_path() / "ser_feat_cache";
    std::filesystem::create_directories(dir);
    const audio::Clip c = sine_clip(880.0, 16000, 0.6);
    const FeatureMatrix m = features::mfcc(c, MfccConfig{}, "cache-me");
    const auto path = dir / "roundtrip.serf";
    features::write_cache_file(path, m);
    const FeatureMatrix back = features::read_cache_file(path);
    CHECK(back.n_mfcc == m.n_mfcc);
    CHECK(back.n_frames == m.n_frames);
    CHECK(back.values == m.values);
    CHECK(back.config_fingerprint == m.config_fingerprint);

    // corrupt the magic
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    f.write("XXXX", 4);
    f.close();
    CHECK_THROWS_AS(features::read_cache_file(path), DecodeError);
}

TEST_CASE("feature store enforces fingerprints and partition scope") {
    const auto dir = std::filesystem::temp_directory_path() / "ser_feat_store";
    std::filesystem::remove_all(dir);
    MfccConfig cfg;
    features::FeatureStore store(dir, cfg.fingerprint());

    CHECK_FALSE(store.has("clip/one"));
    CHECK_THROWS_AS(store.load("clip/one"), CacheMissError);

    const FeatureMatrix m = features::mfcc(sine_clip(440.0, 16000, 0.5), cfg, "clip/one");
    store.store(m);
    CHECK(store.has("clip/one"));
    const FeatureMatrix back = store.load("clip/one");
    CHECK(back.values == m.values);
    CHECK(back.clip_id == "clip/one");

    // a store keyed by a different config refuses the stale entry
    MfccConfig other = cfg;
    other.n_mfcc = 13;
    features::FeatureStore store2(dir, other.fingerprint());
    CHECK_FALSE(store2.has("clip/one"));
    CHECK_THROWS_AS(store2.load("clip/one"), CacheMissError);

    // scoped view only serves ids inside the partition
    const auto train_view = store.scoped({"clip/one"});
    CHECK(train_view.load("clip/one").values == m.values);
    const auto test_view = store.scoped({"clip/two"});
    CHECK_THROWS_AS(test_view.load("clip/one"), CacheMissError);

    CHECK_NOTHROW(store.require({"clip/one"}));
    try {
        store.require({"clip/one", "clip/two", "clip/three"});
        FAIL("expected a cache miss");
    } catch (const CacheMissError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("clip/two") != std::string::npos);
        CHECK(msg.find("clip/three") != std::string::npos);
        CHECK(msg.find("clip/one") == std::string::npos);
    }
}

} // TEST_SUITE
