#include "ser/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "ser/audio_io.hpp"
#include "ser/error.hpp"
#include "ser/hash.hpp"
#include "ser/rng.hpp"

namespace ser::synth {

namespace {

constexpr double kTwoPi = 6.28318530717958647692;

std::string two_digits(int v) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%02d", v);
    return buf;
}

std::string three_digits(int v) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%03d", v);
    return buf;
}

// One clip: harmonic stack with per-speaker detune, slow vibrato, the
// emotion's AM cue, a raised-cosine attack/release, and a tiny noise floor.
std::vector<float> render_clip(const SynthSpec& spec, const SynthLanguage& lang,
                               const SynthEmotion& emo, double speaker_f0_factor,
                               const std::vector<double>& speaker_detune, Rng& rng) {
    const int sr = spec.sample_rate;
    const double seconds = rng.uniform(spec.min_seconds, spec.max_seconds);
    const std::size_t n = static_cast<std::size_t>(seconds * sr);

    const double f0 = lang.base_f0 * speaker_f0_factor;
    const std::size_t n_harm = lang.harmonic_gains.size();
    std::vector<double> gains(n_harm);
    std::vector<double> phases(n_harm);
    double norm = 0.0;
    for (std::size_t h = 0; h < n_harm; ++h) {
        gains[h] = lang.harmonic_gains[h] * std::pow(emo.tilt, static_cast<double>(h));
        phases[h] = rng.uniform(0.0, kTwoPi);
        norm += std::abs(gains[h]);
    }
    const double am_phase = rng.uniform(0.0, kTwoPi);
    const double vib_phase = rng.uniform(0.0, kTwoPi);
    const double level = rng.uniform(0.3, 0.45);
    const double ramp = 0.05 * sr; // 50 ms attack and release
    const std::uint64_t noise_seed = rng.next_u64();
    Rng noise(noise_seed);

    std::vector<float> x(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / sr;
        const double vib = 0.04 * std::sin(kTwoPi * 5.3 * t + vib_phase);
        double s = 0.0;
        for (std::size_t h = 0; h < n_harm; ++h) {
            const double f = f0 * static_cast<double>(h + 1) * (1.0 + speaker_detune[h]);
            s += gains[h] * std::sin(kTwoPi * f * t + phases[h] + vib * static_cast<double>(h + 1));
        }
        const double am = 1.0 + emo.am_depth * std::sin(kTwoPi * emo.am_hz * t + am_phase);
        const double contour =
            std::pow(10.0, emo.contour_db * (static_cast<double>(i) / static_cast<double>(n)) /
                               20.0);
        double env = 1.0;
        if (static_cast<double>(i) < ramp) {
            env = 0.5 - 0.5 * std::cos(kTwoPi * 0.5 * static_cast<double>(i) / ramp);
        } else if (static_cast<double>(n - 1 - i) < ramp) {
            env = 0.5 - 0.5 * std::cos(kTwoPi * 0.5 * static_cast<double>(n - 1 - i) / ramp);
        }
        const double v =
            level * env * contour * am * s / norm + 0.003 * (2.0 * noise.uniform() - 1.0);
        x[i] = static_cast<float>(v);
    }
    return x;
}

} // namespace

void SynthSpec::validate() const {
    if (languages.empty()) throw ConfigError("synth spec: no languages");
    if (emotions.empty()) throw ConfigError("synth spec: no emotions");
    if (speakers < 1) throw ConfigError("synth spec: speakers must be >= 1");
    if (clips_per_speaker < 1) throw ConfigError("synth spec: clips_per_speaker must be >= 1");
    if (clips_per_speaker % static_cast<int>(emotions.size()) != 0) {
        throw ConfigError("synth spec: clips_per_speaker (" + std::to_string(clips_per_speaker) +
                          ") must divide evenly across " + std::to_string(emotions.size()) +
                          " emotions");
    }
    if (sentences < 0) throw ConfigError("synth spec: sentences must be >= 0");
    if (!(min_seconds > 0.2) || !(max_seconds >= min_seconds)) {
        throw ConfigError("synth spec: need 0.2 < min_seconds <= max_seconds");
    }
    if (sample_rate < 8000) throw ConfigError("synth spec: sample_rate must be >= 8000");
    std::set<std::string> names;
    for (const auto& lang : languages) {
        if (lang.name.empty() || !names.insert(lang.name).second) {
            throw ConfigError("synth spec: language names must be unique and non-empty");
        }
        if (lang.base_f0 < 50.0 || lang.base_f0 * (1 + lang.harmonic_gains.size()) >
                                       sample_rate / 2.0) {
            throw ConfigError("synth spec: language '" + lang.name +
                              "' harmonics exceed the Nyquist band");
        }
        if (lang.harmonic_gains.empty()) {
            throw ConfigError("synth spec: language '" + lang.name + "' has no harmonics");
        }
    }
    std::set<std::string> labels;
    for (const auto& emo : emotions) {
        corpus::to_valence(corpus::CorpusKind::SYNTH, emo.label); // throws on unknown
        if (!labels.insert(emo.label).second) {
            throw ConfigError("synth spec: duplicate emotion label '" + emo.label + "'");
        }
        if (emo.am_hz <= 0.0 || emo.am_depth < 0.0 || emo.am_depth > 1.0 ||
            emo.tilt <= 0.0 || std::abs(emo.contour_db) > 24.0) {
            throw ConfigError("synth spec: emotion '" + emo.label + "' has out-of-range cues");
        }
    }
}

SynthSpec default_synth_spec() {
    SynthSpec spec;
    spec.languages = {
        {"alpha", 220.0, {1.0, 0.6, 0.4, 0.25, 0.15}},
        {"bravo", 180.0, {1.0, 0.08, 0.55, 0.06, 0.35}},
        {"charlie", 300.0, {1.0, 0.7, 0.12, 0.05, 0.3}},
        {"delta", 150.0, {0.8, 1.0, 0.5, 0.3, 0.2}},
    };
    spec.emotions = {
        {"happy", 2.0, 0.95, 1.0, -6.0},
        {"sad", 8.0, 0.95, 0.7, 0.0},
    };
    return spec;
}

std::vector<corpus::CorpusManifest> synth_corpus(const std::filesystem::path& root,
                                                 const SynthSpec& spec,
                                                 std::uint64_t seed) {
    spec.validate();
    const int takes = spec.clips_per_speaker / static_cast<int>(spec.emotions.size());

    std::vector<corpus::CorpusManifest> manifests;
    for (const auto& lang : spec.languages) {
        corpus::CorpusManifest manifest;
        manifest.name = lang.name;
        manifest.kind = corpus::CorpusKind::SYNTH;

        for (int sp = 0; sp < spec.speakers; ++sp) {
            const std::string speaker = "sp" + two_digits(sp);
            // Voice characteristics are fixed per (language, speaker).
            Rng voice(Rng::derive(seed, fnv1a64(lang.name + "/" + speaker + "/voice")));
            const double f0_factor = voice.uniform(0.78, 1.3);
            std::vector<double> detune(lang.harmonic_gains.size());
            for (double& d : detune) d = voice.uniform(-0.003, 0.003);

            for (std::size_t e = 0; e < spec.emotions.size(); ++e) {
                const SynthEmotion& emo = spec.emotions[e];
                const auto dir = root / lang.name / emo.label;
                std::filesystem::create_directories(dir);
                for (int take = 0; take < takes; ++take) {
                    std::string stem = speaker;
                    std::string sentence;
                    if (spec.sentences > 0) {
                        const int idx = (sp + 7 * take + 3 * static_cast<int>(e)) %
                                        spec.sentences;
                        sentence = "t" + two_digits(idx);
                        stem += "_" + sentence;
                    }
                    stem += "_c" + three_digits(take);

                    Rng rng(Rng::derive(seed, fnv1a64(lang.name + "/" + emo.label + "/" + stem)));
                    audio::Clip clip;
                    clip.sample_rate = spec.sample_rate;
                    clip.channels = 1;
                    clip.samples = render_clip(spec, lang, emo, f0_factor, detune, rng);
                    const auto path = dir / (stem + ".wav");
                    audio::write_wav_pcm16(path, clip);

                    corpus::ClipMeta meta;
                    meta.clip_id = lang.name + "/" + emo.label + "/" + stem;
                    meta.path = path.generic_string();
                    meta.corpus = corpus::CorpusKind::SYNTH;
                    meta.speaker_id = speaker;
                    meta.sentence_id = sentence;
                    meta.emotion = emo.label;
                    meta.valence = corpus::to_valence(corpus::CorpusKind::SYNTH, emo.label);
                    meta.duration_s = static_cast<double>(clip.samples.size()) / spec.sample_rate;
                    manifest.entries.push_back(std::move(meta));
                }
            }
        }
        std::sort(manifest.entries.begin(), manifest.entries.end(),
                  [](const corpus::ClipMeta& a, const corpus::ClipMeta& b) {
                      return a.clip_id < b.clip_id;
                  });
        manifest.recount();
        manifest.validate();
        manifests.push_back(std::move(manifest));
    }
    return manifests;
}

} // namespace ser::synth
