#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "ser/corpus.hpp"

namespace ser::splits {

enum class Scenario { Monolingual, SentenceIndependent, CrossLingual, Multilingual };

std::string to_string(Scenario s);
Scenario scenario_from_string(const std::string& s);

// A train/validation/test partition of clip ids. Partition lists are sorted;
// the generating operations guarantee the scenario invariants:
//   - partitions pairwise disjoint
//   - Monolingual: no speaker in more than one partition
//   - SentenceIndependent: no sentence in both train and test
//   - CrossLingual/Multilingual: target_corpus not among source_corpora, test
//     drawn only from the target corpus, validation speakers unseen in train
struct SplitSpec {
    Scenario scenario = Scenario::Monolingual;
    std::uint64_t seed = 0;
    std::vector<double> ratios;              // clip-count fractions used
    std::vector<std::string> source_corpora; // manifests supplying train/validation
    std::string target_corpus;               // manifest supplying test
    std::vector<std::string> train;
    std::vector<std::string> validation;
    std::vector<std::string> test;

    bool operator==(const SplitSpec&) const = default;
};

// Whole speakers are shuffled by the seeded generator and packed greedily so
// partition clip counts approach the ratios. Requires >= 3 speakers.
SplitSpec speaker_split(const corpus::CorpusManifest& manifest,
                        std::array<double, 3> ratios = {0.7, 0.1, 0.2},
                        std::uint64_t seed = 0);

// Whole sentences packed into train/test; validation stays empty (the 80/20
// protocol trains for the fixed epoch budget without early stopping).
// Rejects manifests with unidentified sentences (URDU).
SplitSpec sentence_split(const corpus::CorpusManifest& manifest,
                         std::array<double, 2> ratios = {0.8, 0.2},
                         std::uint64_t seed = 0);

// Train on one corpus, test on the whole of another. 10% of the training
// corpus (whole speakers) is held out as validation, so validation speakers
// are never seen in training.
SplitSpec cross_lingual_split(const corpus::CorpusManifest& train_manifest,
                              const corpus::CorpusManifest& test_manifest,
                              std::uint64_t seed = 0);

// Train on the union of two or three corpora, test on the whole of another.
// Each training corpus contributes its own 10% speaker-held-out validation.
SplitSpec multilingual_split(const std::vector<corpus::CorpusManifest>& train_manifests,
                             const corpus::CorpusManifest& test_manifest,
                             std::uint64_t seed = 0);

struct PartitionCounts {
    std::size_t n_positive = 0;
    std::size_t n_negative = 0;
    std::size_t total() const { return n_positive + n_negative; }
};

// Per-corpus row of the class-distribution table (train, test, validation
// column order, positive/negative within each).
struct CorpusRow {
    std::string corpus;
    PartitionCounts train, test, validation;
};

struct VerifyReport {
    bool ok = true;
    std::vector<std::pair<std::string, bool>> checks; // name -> passed
    std::vector<std::string> failures;                // naming offending ids
    std::vector<CorpusRow> rows;                      // sorted by corpus name
    PartitionCounts train, test, validation;          // totals

    // Distribution table plus one "name: OK|FAIL" line per check and the
    // failure details.
    std::string render() const;
};

// Re-derives every SplitSpec invariant from the manifests and tallies
// per-partition, per-valence counts. Unresolvable clip ids violate the
// precondition and throw; invariant violations are reported, not thrown.
VerifyReport verify_split(const SplitSpec& spec,
                          const std::vector<corpus::CorpusManifest>& manifests);

// JSON artifact: scenario, seed, ratios, source_corpora, target_corpus and
// the three clip-id arrays. Reading validates types and rejects unknown keys.
std::string to_json(const SplitSpec& spec);
SplitSpec split_from_json(const std::string& text);
void write_split_json(const std::filesystem::path& path, const SplitSpec& spec);
SplitSpec read_split_json(const std::filesystem::path& path);

} // namespace ser::splits
