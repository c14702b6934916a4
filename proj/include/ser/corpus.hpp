#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace ser::corpus {

// Class order is part of the metrics/model contract: Positive = index 0.
enum class Valence { Positive = 0, Negative = 1 };

enum class CorpusKind { ASED, RAVDESS, EMODB, URDU, SYNTH };

std::string to_string(Valence v);
std::string to_string(CorpusKind k);
Valence valence_from_string(const std::string& s);
CorpusKind kind_from_string(const std::string& s);

struct ClipMeta {
    std::string clip_id;
    std::string path;
    CorpusKind corpus = CorpusKind::SYNTH;
    std::string speaker_id;
    std::string sentence_id; // empty = not identified (URDU, sentence-free synth)
    std::string emotion;     // canonical label, valid key for to_valence
    Valence valence = Valence::Positive;
    double duration_s = 0.0;

    bool operator==(const ClipMeta&) const = default;
};

struct CorpusManifest {
    std::string name; // corpus identifier, or language name for synthetic sets
    CorpusKind kind = CorpusKind::SYNTH;
    std::vector<ClipMeta> entries;
    std::size_t n_positive = 0;
    std::size_t n_negative = 0;

    void recount();
    // Throws on duplicate clip_ids, count drift, or a label/valence mismatch.
    void validate() const;
    std::set<std::string> speakers() const;
    std::set<std::string> sentences() const; // non-empty ids only
};

// Bucket-level clip-length statistics: each clip contributes floor(duration)
// and mean/std are the population statistics of those bucket values.
struct DurationStats {
    std::map<int, std::size_t> histogram;
    double mean = 0.0;
    double stddev = 0.0;
};

// The published recording count for the Amharic corpus disagrees with the
// sum of its published train/val/test partitions; scan reports both numbers
// rather than picking one.
inline constexpr std::size_t kAsedReportedRecordings = 2474;
inline constexpr std::size_t kAsedPartitionTotal = 2140;

// Binary valence for a canonical emotion label. Total over exactly the label
// set of each corpus; anything else is a mapping error that lists the valid
// labels. Never defaults.
Valence to_valence(CorpusKind corpus, const std::string& emotion);

// Canonical emotion labels defined for a corpus, in a stable order.
const std::vector<std::string>& emotion_labels(CorpusKind corpus);

// Parses speaker/sentence/emotion from a path relative to the corpus root.
// Filename conventions: RAVDESS "MM-VC-EE-II-SS-RR-AA.wav" (emotion code EE,
// actor AA, statement SS); EMO-DB "SStxxEV.wav" (speaker SS, sentence txx,
// emotion letter E); ASED/URDU/SYNTH take the emotion from the parent
// directory name and split the stem on '_' (speaker[_sentence]_take).
// Emotion codes are canonicalized to the label set of to_valence.
// Returned meta lacks clip_id, path, and duration.
ClipMeta parse_filename(CorpusKind corpus, const std::string& relative_path);

// Scans every .wav under root, parses metadata, reads durations from the WAV
// headers, and returns entries sorted by clip_id. Any per-file failure is
// collected and reported in one aggregate parse error; there is no partial
// manifest. `name` defaults to the corpus kind string.
CorpusManifest scan_corpus(const std::filesystem::path& root, CorpusKind kind,
                           const std::string& name = {});

DurationStats corpus_stats(const CorpusManifest& manifest);

// Manifest CSV: header clip_id,path,corpus,speaker_id,sentence_id,emotion,
// valence,duration_s; UTF-8, LF; RFC-4180 quoting; duration rendered with
// the shortest digits that parse back to the same value.
void write_manifest_csv(const std::filesystem::path& path,
                        const std::vector<ClipMeta>& entries);
std::vector<ClipMeta> read_manifest_csv(const std::filesystem::path& path);

} // namespace ser::corpus
