#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ser/corpus.hpp"
#include "ser/features.hpp"
#include "ser/nn.hpp"
#include "ser/splits.hpp"

namespace ser::experiments {

// Fixed-budget training setup: Adam on softmax cross-entropy for a set
// number of epochs, no early stopping. Each seed in `seeds` is a full
// retrain from scratch; reported numbers aggregate over all of them.
struct TrainConfig {
    int epochs = 100;
    int batch_size = 32;
    double learning_rate = 1e-3;
    std::vector<std::uint64_t> seeds = {11, 22, 33, 44, 55};
    bool strict_determinism = true;

    // epochs > 0, batch_size > 0, finite learning_rate >= 0, seeds
    // non-empty and distinct. Throws ConfigError.
    void validate() const;

    bool operator==(const TrainConfig&) const = default;
};

// JSON object with the five config fields. Reading rejects unknown keys,
// fills absent ones from the defaults, and validates the result.
std::string to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const std::string& text);

// Binary-classification quality measures. Class indices follow
// corpus::Valence: index 0 = Positive, 1 = Negative. The confusion matrix
// is indexed [true label][prediction] and sums to the evaluated clip count.
struct Metrics {
    std::array<std::array<std::size_t, 2>, 2> confusion{};
    double accuracy = 0.0;
    std::array<double, 2> precision{};
    std::array<double, 2> recall{};
    std::array<double, 2> f1{};
    double macro_f1 = 0.0; // unweighted mean of the two per-class F1 values

    bool operator==(const Metrics&) const = default;
};

// Derives every scalar measure from a confusion matrix. Ratios with a zero
// denominator (a class never predicted or never present) are defined as 0.
Metrics metrics_from_confusion(const std::array<std::array<std::size_t, 2>, 2>& confusion);

// Tallies the confusion matrix from parallel label/prediction vectors.
// Mismatched lengths are a shape error; values outside {0, 1} a label error.
Metrics compute_metrics(const std::vector<int>& labels, const std::vector<int>& predictions);

// Mean and sample standard deviation of accuracy and macro-F1 over repeated
// runs. A single run reports stddev 0 and is flagged so renderers can mark
// the number as unaveraged.
struct Aggregate {
    double accuracy_mean = 0.0;
    double accuracy_stddev = 0.0;
    double macro_f1_mean = 0.0;
    double macro_f1_stddev = 0.0;
    std::size_t n_runs = 0;
    bool single_run = false;

    bool operator==(const Aggregate&) const = default;
};

// Empty list is a protocol error.
Aggregate aggregate_runs(const std::vector<Metrics>& runs);

// clip_id -> class index (the numeric value of the clip's valence).
using LabelMap = std::map<std::string, int>;
LabelMap label_map(const std::vector<corpus::CorpusManifest>& manifests);

struct EpochStats {
    double train_loss = 0.0; // mean per-clip loss over the epoch's batches
    // Accuracy on the validation partition under the epoch's final weights;
    // absent when the split has no validation partition.
    std::optional<double> validation_accuracy;

    bool operator==(const EpochStats&) const = default;
};

// Final-epoch weights plus the standardization statistics that were fitted
// on the training partition; evaluation must reuse them verbatim.
struct TrainedModel {
    nn::Model<float> model;
    features::CoeffStats stats;
};

struct TrainResult {
    TrainedModel trained;
    std::vector<EpochStats> history; // one entry per epoch
    std::uint64_t steps = 0;         // epochs * ceil(|train| / batch_size)
};

// Trains `model_config` on the split's training partition: per-coefficient
// standardization statistics are fitted on the training clips only, batches
// are reshuffled every epoch, and Adam runs for the full epoch budget (no
// early stopping). All randomness (weight init, shuffling, dropout) derives
// from `seed`, so identical inputs reproduce bit-identical weights.
//
// Feature access is scoped to the train and validation partitions, so test
// features are never read (or required to exist) here; `evaluate` checks
// its own clips. Missing train/validation features raise a cache-miss error
// listing the clip ids.
TrainResult train(const nn::ModelConfig& model_config,
                  const splits::SplitSpec& split,
                  const features::FeatureStore& store,
                  const LabelMap& labels,
                  const TrainConfig& config,
                  std::uint64_t seed);

// Argmax prediction for every clip (features standardized with the trained
// model's statistics), tallied into Metrics. Empty clip list is a protocol
// error; missing features a cache-miss error.
Metrics evaluate(const TrainedModel& trained,
                 const std::vector<std::string>& clip_ids,
                 const features::FeatureStore& store,
                 const LabelMap& labels);

// An architecture under test: display name plus its full configuration.
struct NamedModel {
    std::string name;
    nn::ModelConfig config;
};

// One table row: seed-aggregated scores for a (model, train-source,
// test-target) cell. Summary rows reuse the structure with the reserved
// name "average" in the dimension that was averaged out.
struct RunRow {
    std::string model;
    std::string train_source;
    std::string test_target;
    Aggregate agg;

    bool operator==(const RunRow&) const = default;
};

struct RunTable {
    std::vector<RunRow> rows;     // one per (model, source, target)
    std::vector<RunRow> averages; // summary rows (see run_experiment* docs)
};

// One training run's full record for the results artifact.
struct RunRecord {
    std::string model;
    std::string train_source;
    std::string test_target;
    std::uint64_t seed = 0;
    std::string split_name; // artifact name, key into ExperimentResult::splits
    std::vector<EpochStats> history;
    Metrics metrics;
};

struct ExperimentResult {
    std::string experiment;            // splits::to_string of the scenario
    std::vector<std::string> corpora;  // corpus names referenced, in use order
    std::vector<std::string> models;   // model names, in input order
    // Protocol shape; filled only by the experiment that uses it.
    std::vector<std::pair<std::string, std::string>> pairs; // cross-lingual
    std::vector<std::vector<std::string>> combos;           // multilingual
    std::string target_corpus;                              // multilingual
    TrainConfig config;
    std::string features_fingerprint;  // feature-cache config binding
    std::string config_fingerprint;    // hash over everything above
    std::vector<RunRecord> runs;       // (model, cell, seed) order
    RunTable table;
    // Split artifacts by name (the names RunRecord::split_name refers to);
    // written as separate JSON files by the command-line layer.
    std::map<std::string, splits::SplitSpec> splits;
};

// Monolingual protocol: every model trains and tests inside each corpus,
// once per seed, on speaker-independent 70/10/20 splits (or, with
// `sentence_independent`, on sentence-exclusive 80/20 splits, which rejects
// URDU because its sentences are unidentified). Rows: one per
// (model, corpus). Averages: per corpus across models (model = "average").
// `jobs` >= 1 sets the number of parallel worker threads; results are
// identical for any value.
ExperimentResult run_experiment1(const std::vector<corpus::CorpusManifest>& corpora,
                                 const std::vector<NamedModel>& models,
                                 const features::FeatureStore& store,
                                 const TrainConfig& config,
                                 bool sentence_independent = false,
                                 int jobs = 1);

// Cross-lingual protocol: train on all of one corpus (10% of its speakers
// held out for validation), test on all of another. `pairs` lists directed
// (train, test) corpus names; each pair must also appear reversed, no pair
// may repeat, and train == test is a protocol error. Rows: one per
// (model, direction). Averages: per model across directions
// (train_source = test_target = "average").
ExperimentResult run_experiment2(const std::vector<std::pair<std::string, std::string>>& pairs,
                                 const std::vector<corpus::CorpusManifest>& corpora,
                                 const std::vector<NamedModel>& models,
                                 const features::FeatureStore& store,
                                 const TrainConfig& config,
                                 int jobs = 1);

// Multilingual protocol: train on the union of the combo's corpora, test on
// the whole target corpus. Combos must hold 2+ distinct non-target corpora.
// Rows: one per (model, combo), train_source = names joined with '+'.
// Averages: per model across combos (train_source = "average") and per
// combo across models (model = "average").
ExperimentResult run_experiment3(const std::vector<std::vector<std::string>>& train_combos,
                                 const std::string& test_corpus,
                                 const std::vector<corpus::CorpusManifest>& corpora,
                                 const std::vector<NamedModel>& models,
                                 const features::FeatureStore& store,
                                 const TrainConfig& config,
                                 int jobs = 1);

// Canonical results document: resolved protocol + config, fingerprint, one
// record per run with its history and metrics, and the aggregated table.
// Serialization is deterministic (sorted keys, shortest float form), so a
// strict-mode rerun produces a byte-identical document. Every emitted
// Metrics is re-derived from its confusion matrix first; a mismatch is an
// internal error.
std::string results_to_json(const ExperimentResult& result);

// Parses a results document back for offline rendering. The loader accepts
// exactly the schema results_to_json writes, recomputes the config
// fingerprint from the embedded protocol descriptor, and re-derives every
// run's metrics from its confusion matrix; any disagreement with the stored
// values means the file was edited or corrupted and raises ConfigError. The
// splits map is not part of the document and is left empty.
ExperimentResult results_from_json(const std::string& text);

// Table renderers. Monolingual results pivot to a models x corpora grid
// (accuracy first, macro-F1 second); the other protocols list one line per
// row plus their summary lines. Scores render as percentages with two
// decimals, "mean +- stddev", single-run cells marked with '*'.
std::string render_markdown(const ExperimentResult& result);
// Long form, one line per row and summary row:
// experiment,model,train_source,test_target,n_runs,accuracy_mean,
// accuracy_stddev,macro_f1_mean,macro_f1_stddev,is_average
std::string render_csv(const ExperimentResult& result);

} // namespace ser::experiments
