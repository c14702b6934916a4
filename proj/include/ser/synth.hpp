#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ser/corpus.hpp"

namespace ser::synth {

// One pseudo-emotion: a label from the SYNTH valence table plus the acoustic
// cues that realize it. The amplitude-modulation rate is the main class cue;
// tilt darkens higher harmonics and contour_db ramps the energy across the
// clip. The defaults were tuned once against the linear-separability check
// in the test suite and then frozen.
struct SynthEmotion {
    std::string label;
    double am_hz = 2.0;
    double am_depth = 0.95;
    double tilt = 1.0;       // per-harmonic gain factor, applied as tilt^(h-1)
    double contour_db = 0.0; // linear energy ramp start->end, in dB
};

// One pseudo-language: a base pitch and harmonic recipe shared by all its
// speakers. Each speaker detunes the recipe deterministically.
struct SynthLanguage {
    std::string name;
    double base_f0 = 220.0;
    std::vector<double> harmonic_gains = {1.0, 0.6, 0.4, 0.25, 0.15};
};

struct SynthSpec {
    std::vector<SynthLanguage> languages;
    std::vector<SynthEmotion> emotions;
    int speakers = 10;
    int clips_per_speaker = 10; // total per speaker, split evenly across emotions
    int sentences = 10;         // 0 = clips carry no sentence ids
    double min_seconds = 2.0;
    double max_seconds = 5.0;
    int sample_rate = 16000;

    void validate() const;
};

// Four languages with distinct timbres, two emotions (happy: 2 Hz AM,
// Positive; sad: 8 Hz AM, Negative), 10 speakers x 10 clips each.
SynthSpec default_synth_spec();

// Writes <root>/<language>/<emotion>/<speaker>[_<sentence>]_<take>.wav for
// every clip and returns one manifest per language, sorted by clip_id.
// Deterministic: the same spec and seed produce byte-identical WAVs.
std::vector<corpus::CorpusManifest> synth_corpus(const std::filesystem::path& root,
                                                 const SynthSpec& spec,
                                                 std::uint64_t seed);

} // namespace ser::synth
