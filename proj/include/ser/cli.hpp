#pragma once

// Command-line front end: wires corpus scanning, feature extraction,
// partitioning, training, evaluation and the experiment runners into
// file-based, reproducible workflows.

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ser/corpus.hpp"
#include "ser/experiments.hpp"
#include "ser/features.hpp"
#include "ser/synth.hpp"

namespace ser::cli {

// One corpus referenced by an experiment configuration file.
struct CorpusRef {
    std::filesystem::path root; // must exist when the config is loaded
    corpus::CorpusKind kind = corpus::CorpusKind::SYNTH;
};

// Parsed experiment configuration file: a single JSON object holding every
// knob a run needs, so the file itself is the reproducibility record.
// Unknown keys anywhere are rejected; relative paths resolve against the
// config file's directory. All keys are optional except "corpora".
//
//   {
//     "corpora":   {"alpha": {"root": "corpus/alpha", "kind": "synth"}, ...},
//     "mfcc":      {"n_mfcc": 20, ...},            // overrides on defaults
//     "train":     {"epochs": 100, ...},           // overrides on defaults
//     "models":    ["vgge"],                       // registry keys
//     "scenario":  "mono" | "sent" | "cross" | "multi",
//     "pairs":     [["alpha", "bravo"], ...],      // cross; default: all
//     "combos":    [["alpha", "bravo"], ...],      // multi; default: all
//     "target":    "delta",                        // multi test corpus
//     "output_dir": "out",
//     "cache_dir":  "<output_dir>/cache"
//   }
struct ExperimentConfig {
    std::map<std::string, CorpusRef> corpora;
    features::MfccConfig mfcc;
    experiments::TrainConfig train;
    std::vector<std::string> models = {"vgge"};
    std::string scenario;
    std::vector<std::pair<std::string, std::string>> pairs;
    std::vector<std::vector<std::string>> combos;
    std::string target;
    std::filesystem::path output_dir;
    std::filesystem::path cache_dir;
};

ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// MFCC parameter overrides from a JSON object file: absent keys keep their
// defaults, unknown keys or invalid values raise ConfigError.
features::MfccConfig load_mfcc_config(const std::filesystem::path& path);

// Synthetic-corpus recipe from a JSON object file; same conventions, and
// error messages name the offending field.
synth::SynthSpec load_synth_spec(const std::filesystem::path& path);

// Full command-line entry point. Returns the process exit code: 0 success,
// 1 internal failure, 2 user/config/data error (stable scripting contract).
int run(int argc, const char* const* argv);

} // namespace ser::cli
