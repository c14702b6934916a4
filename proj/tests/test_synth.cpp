#include <doctest.h>

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "ser/audio_io.hpp"
#include "ser/corpus.hpp"
#include "ser/error.hpp"
#include "ser/features.hpp"
#include "ser/synth.hpp"

using namespace ser;
using corpus::CorpusKind;
using corpus::Valence;
using synth::SynthSpec;

namespace {

std::filesystem::path fresh_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

std::string file_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

SynthSpec one_language_spec(int speakers, int clips_per_speaker) {
    SynthSpec spec = synth::default_synth_spec();
    spec.languages.resize(1); // keep the test corpus small
    spec.speakers = speakers;
    spec.clips_per_speaker = clips_per_speaker;
    return spec;
}

} // namespace

TEST_SUITE("synth") {

TEST_CASE("spec validation catches inconsistent requests") {
    SynthSpec spec = synth::default_synth_spec();
    CHECK_NOTHROW(spec.validate());
    spec.clips_per_speaker = 7; // not divisible by two emotions
    CHECK_THROWS_AS(spec.validate(), ConfigError);
    spec = synth::default_synth_spec();
    spec.emotions[0].label = "angry"; // not a synthetic-corpus label
    CHECK_THROWS_AS(spec.validate(), MappingError);
    spec = synth::default_synth_spec();
    spec.languages[1].name = spec.languages[0].name;
    CHECK_THROWS_AS(spec.validate(), ConfigError);
    spec = synth::default_synth_spec();
    spec.min_seconds = 4.0;
    spec.max_seconds = 2.0;
    CHECK_THROWS_AS(spec.validate(), ConfigError);
}

TEST_CASE("generator produces the requested counts and balanced labels") {
    const auto root = fresh_dir("ser_synth_counts");
    const auto manifests = synth::synth_corpus(root, one_language_spec(10, 10), 42);
    REQUIRE(manifests.size() == 1);
    const auto& m = manifests[0];
    CHECK(m.entries.size() == 100);
    CHECK(m.speakers().size() == 10);
    CHECK(m.n_positive == 50);
    CHECK(m.n_negative == 50);
    for (const auto& e : m.entries) {
        CHECK(e.corpus == CorpusKind::SYNTH);
        CHECK(e.duration_s >= 2.0);
        CHECK(e.duration_s < 5.0);
        CHECK_FALSE(e.sentence_id.empty());
        CHECK(std::filesystem::exists(e.path));
    }
    CHECK(m.sentences().size() == 10);
}

TEST_CASE("same seed gives byte-identical corpora, different seed differs") {
    const SynthSpec spec = one_language_spec(2, 4);
    const auto root_a = fresh_dir("ser_synth_det_a");
    const auto root_b = fresh_dir("ser_synth_det_b");
    const auto root_c = fresh_dir("ser_synth_det_c");
    const auto ma = synth::synth_corpus(root_a, spec, 7);
    const auto mb = synth::synth_corpus(root_b, spec, 7);
    const auto mc = synth::synth_corpus(root_c, spec, 8);
    REQUIRE(ma[0].entries.size() == mb[0].entries.size());
    bool any_differs_across_seeds = false;
    for (std::size_t i = 0; i < ma[0].entries.size(); ++i) {
        CHECK(file_bytes(ma[0].entries[i].path) == file_bytes(mb[0].entries[i].path));
        if (file_bytes(ma[0].entries[i].path) != file_bytes(mc[0].entries[i].path)) {
            any_differs_across_seeds = true;
        }
    }
    CHECK(any_differs_across_seeds);
}

TEST_CASE("scanning a generated tree reproduces the manifest exactly") {
    const auto root = fresh_dir("ser_synth_rescan");
    SynthSpec spec = one_language_spec(3, 4);
    const auto generated = synth::synth_corpus(root, spec, 11)[0];
    const auto scanned =
        corpus::scan_corpus(root / spec.languages[0].name, CorpusKind::SYNTH,
                            spec.languages[0].name);
    CHECK(scanned.name == generated.name);
    CHECK(scanned.kind == generated.kind);
    CHECK(scanned.n_positive == generated.n_positive);
    CHECK(scanned.n_negative == generated.n_negative);
    REQUIRE(scanned.entries.size() == generated.entries.size());
    for (std::size_t i = 0; i < scanned.entries.size(); ++i) {
        CHECK(scanned.entries[i] == generated.entries[i]);
    }
}

TEST_CASE("sentence-free corpora omit the sentence field everywhere") {
    const auto root = fresh_dir("ser_synth_nosent");
    SynthSpec spec = one_language_spec(2, 2);
    spec.sentences = 0;
    const auto m = synth::synth_corpus(root, spec, 3)[0];
    for (const auto& e : m.entries) {
        CHECK(e.sentence_id.empty());
        CHECK(e.path.find("_t") == std::string::npos);
    }
    const auto rescanned = corpus::scan_corpus(root / spec.languages[0].name,
                                               CorpusKind::SYNTH, spec.languages[0].name);
    for (const auto& e : rescanned.entries) CHECK(e.sentence_id.empty());
}

TEST_CASE("valence classes separate linearly on mean features") {
    // The class cue is the AM rate (2 Hz vs 8 Hz): analysis frames are long
    // enough to average a full 8 Hz cycle before the log, but sample the
    // 2 Hz cycle at many phases, which shifts and spreads the log-energy.
    // A nearest-centroid rule on per-clip mean MFCC must separate the
    // classes almost perfectly, otherwise the corpus is too hard for the
    // small networks trained on it.
    const auto root = fresh_dir("ser_synth_sep");
    const auto m = synth::synth_corpus(root, one_language_spec(6, 10), 5)[0];
    REQUIRE(m.entries.size() == 60);

    features::MfccConfig cfg;
    std::vector<std::array<double, 20>> mean_mfcc;
    std::vector<int> label;
    for (const auto& e : m.entries) {
        // natural length, no padding: the mean must not be diluted by the
        // random amount of trailing silence the 5 s normalization would add
        const audio::Clip clip = audio::load_wav(e.path);
        const auto feat = features::mfcc(clip, cfg, e.clip_id);
        std::array<double, 20> mu{};
        for (int r = 0; r < feat.n_mfcc; ++r) {
            double acc = 0.0;
            for (int t = 0; t < feat.n_frames; ++t) acc += feat.at(r, t);
            mu[static_cast<std::size_t>(r)] = acc / feat.n_frames;
        }
        mean_mfcc.push_back(mu);
        label.push_back(e.valence == Valence::Positive ? 0 : 1);
    }

    // z-score each coefficient, then classify by nearest class centroid
    const std::size_t n = mean_mfcc.size();
    for (std::size_t r = 0; r < 20; ++r) {
        double s = 0.0;
        double ss = 0.0;
        for (const auto& v : mean_mfcc) {
            s += v[r];
            ss += v[r] * v[r];
        }
        const double mean = s / static_cast<double>(n);
        const double sd = std::max(std::sqrt(ss / static_cast<double>(n) - mean * mean), 1e-9);
        for (auto& v : mean_mfcc) v[r] = (v[r] - mean) / sd;
    }
    std::array<std::array<double, 20>, 2> centroid{};
    std::array<std::size_t, 2> count{};
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t r = 0; r < 20; ++r) centroid[label[i]][r] += mean_mfcc[i][r];
        count[label[i]]++;
    }
    REQUIRE(count[0] == 30);
    REQUIRE(count[1] == 30);
    for (int c = 0; c < 2; ++c) {
        for (std::size_t r = 0; r < 20; ++r) centroid[c][r] /= static_cast<double>(count[c]);
    }
    std::size_t correct = 0;
    for (std::size_t i = 0; i < n; ++i) {
        std::array<double, 2> dist{};
        for (int c = 0; c < 2; ++c) {
            for (std::size_t r = 0; r < 20; ++r) {
                const double d = mean_mfcc[i][r] - centroid[c][r];
                dist[c] += d * d;
            }
        }
        const int pred = dist[0] <= dist[1] ? 0 : 1;
        if (pred == label[i]) ++correct;
    }
    const double accuracy = static_cast<double>(correct) / static_cast<double>(n);
    CAPTURE(accuracy);
    CHECK(accuracy >= 0.95);
}

} // TEST_SUITE
