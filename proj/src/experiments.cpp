#include "ser/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <set>
#include <thread>

#include <json.hpp>

#include "ser/hash.hpp"
#include "ser/rng.hpp"

namespace ser::experiments {

namespace {

using nlohmann::json;

// RNG substream tags for the training loop. Arbitrary fixed constants; they
// are part of the determinism contract, so never change them.
constexpr std::uint64_t kShuffleStream = 0x45700000ull; // + epoch
constexpr std::uint64_t kDropoutStream = 0x45d00000ull; // + global step

// Shortest decimal form that parses back to the same value.
std::string format_double(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
    std::string out;
    for (const auto& p : parts) {
        if (!out.empty()) out += sep;
        out += p;
    }
    return out;
}

double ratio(std::size_t num, std::size_t den) {
    return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

// Arithmetic mean and sample standard deviation (n - 1; 0 for a singleton).
std::pair<double, double> mean_stddev(const std::vector<double>& values) {
    const auto n = static_cast<double>(values.size());
    const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
    if (values.size() < 2) return {mean, 0.0};
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    return {mean, std::sqrt(ss / (n - 1.0))};
}

int label_of(const LabelMap& labels, const std::string& clip_id) {
    const auto it = labels.find(clip_id);
    if (it == labels.end()) throw LabelError("no label for clip '" + clip_id + "'");
    if (it->second != 0 && it->second != 1) {
        throw LabelError("label for clip '" + clip_id + "' is " + std::to_string(it->second) +
                         "; binary valence expects 0 or 1");
    }
    return it->second;
}

std::vector<features::FeatureMatrix> load_clips(const features::FeatureStore& store,
                                                const std::vector<std::string>& clip_ids) {
    std::vector<features::FeatureMatrix> out;
    out.reserve(clip_ids.size());
    for (const auto& id : clip_ids) out.push_back(store.load(id));
    return out;
}

void check_feature_shape(const features::FeatureMatrix& m, const std::vector<int>& input_shape) {
    if (input_shape.size() != 3 || input_shape[2] != 1 || m.n_mfcc != input_shape[0] ||
        m.n_frames != input_shape[1]) {
        std::string want;
        for (int d : input_shape) want += (want.empty() ? "" : "x") + std::to_string(d);
        throw ShapeError("features for '" + m.clip_id + "' are " + std::to_string(m.n_mfcc) +
                         "x" + std::to_string(m.n_frames) + "x1 but the model expects " + want);
    }
}

// Packs the selected matrices into an (N, n_mfcc, n_frames, 1) batch; the
// row-major matrix layout matches the tensor layout exactly.
nn::Tensor<float> pack_batch(const std::vector<features::FeatureMatrix>& feats,
                             const std::vector<std::size_t>& indices) {
    const auto& first = feats[indices[0]];
    nn::Tensor<float> x({static_cast<int>(indices.size()), first.n_mfcc, first.n_frames, 1});
    float* dst = x.values.data();
    const std::size_t per_clip = first.values.size();
    for (const std::size_t i : indices) {
        std::copy(feats[i].values.begin(), feats[i].values.end(), dst);
        dst += per_clip;
    }
    return x;
}

// Argmax class per clip, evaluated in fixed-size batches.
std::vector<int> predict(nn::Model<float>& model, const std::vector<features::FeatureMatrix>& feats,
                         std::size_t batch_size) {
    std::vector<int> preds;
    preds.reserve(feats.size());
    const int n_classes = model.config.n_classes;
    for (std::size_t start = 0; start < feats.size(); start += batch_size) {
        const std::size_t stop = std::min(feats.size(), start + batch_size);
        std::vector<std::size_t> indices(stop - start);
        std::iota(indices.begin(), indices.end(), start);
        auto [logits, cache] = nn::forward(model, pack_batch(feats, indices), nn::Mode::Eval, 0);
        (void)cache;
        for (std::size_t row = 0; row < indices.size(); ++row) {
            const float* v = logits.values.data() + row * static_cast<std::size_t>(n_classes);
            int best = 0;
            for (int c = 1; c < n_classes; ++c) {
                if (v[c] > v[best]) best = c;
            }
            preds.push_back(best);
        }
    }
    return preds;
}

double fraction_correct(const std::vector<int>& predictions, const std::vector<int>& labels) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        if (predictions[i] == labels[i]) ++correct;
    }
    return ratio(correct, predictions.size());
}

json config_json(const TrainConfig& c) {
    return json{{"epochs", c.epochs},
                {"batch_size", c.batch_size},
                {"learning_rate", c.learning_rate},
                {"seeds", c.seeds},
                {"strict_determinism", c.strict_determinism}};
}

// Emitted metrics must be re-derivable from their confusion matrix; the
// derivation is the same code path, so the comparison is exact.
void check_metrics_consistency(const Metrics& m) {
    if (!(metrics_from_confusion(m.confusion) == m)) {
        throw Error("results are internally inconsistent: metrics do not match "
                    "their confusion matrix");
    }
}

void verify_result_consistency(const ExperimentResult& result) {
    for (const auto& run : result.runs) check_metrics_consistency(run.metrics);
}

json metrics_json(const Metrics& m) {
    return json{{"accuracy", m.accuracy},
                {"confusion",
                 json::array({json::array({m.confusion[0][0], m.confusion[0][1]}),
                              json::array({m.confusion[1][0], m.confusion[1][1]})})},
                {"precision", m.precision},
                {"recall", m.recall},
                {"f1", m.f1},
                {"macro_f1", m.macro_f1}};
}

json row_json(const RunRow& row) {
    return json{{"model", row.model},
                {"train_source", row.train_source},
                {"test_target", row.test_target},
                {"n_runs", row.agg.n_runs},
                {"single_run", row.agg.single_run},
                {"accuracy_mean", row.agg.accuracy_mean},
                {"accuracy_stddev", row.agg.accuracy_stddev},
                {"macro_f1_mean", row.agg.macro_f1_mean},
                {"macro_f1_stddev", row.agg.macro_f1_stddev}};
}

// The protocol descriptor every run is keyed by: experiment shape, data,
// models, and training setup. Hashed for the results fingerprint.
json descriptor_json(const ExperimentResult& r) {
    json d{{"experiment", r.experiment},
           {"corpora", r.corpora},
           {"models", r.models},
           {"config", config_json(r.config)},
           {"features_fingerprint", r.features_fingerprint}};
    if (!r.pairs.empty()) {
        json pairs = json::array();
        for (const auto& [a, b] : r.pairs) pairs.push_back(json::array({a, b}));
        d["pairs"] = pairs;
    }
    if (!r.combos.empty()) {
        d["combos"] = r.combos;
        d["target_corpus"] = r.target_corpus;
    }
    return d;
}

// ---- experiment runner core ----------------------------------------------

// One table cell: a (train source, test target) pairing with its per-seed
// split artifact names.
struct CellPlan {
    std::string train_source;
    std::string test_target;
    std::vector<std::string> split_names; // aligned with config.seeds
};

std::string split_artifact_name(const std::string& experiment, const std::string& key,
                                std::uint64_t seed) {
    return experiment + "_" + key + "_seed" + std::to_string(seed) + ".split.json";
}

// Runs every (model, cell, seed) task, optionally on `jobs` worker threads.
// Tasks are independent and internally deterministic, and results land in
// preassigned slots, so the outcome does not depend on scheduling. The
// lowest-index failure is rethrown, matching sequential order.
void run_tasks(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
    if (jobs <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const std::size_t workers = std::min(static_cast<std::size_t>(jobs), n);
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(n);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    }
    for (auto& worker : pool) worker.join();
    for (const auto& error : errors) {
        if (error) std::rethrow_exception(error);
    }
}

void check_corpora(const std::vector<corpus::CorpusManifest>& corpora) {
    if (corpora.empty()) throw ConfigError("no corpora configured");
    std::set<std::string> names;
    for (const auto& m : corpora) {
        if (m.name.empty() || !names.insert(m.name).second) {
            throw ConfigError("corpus names must be unique and non-empty; offender: '" +
                              m.name + "'");
        }
    }
}

const corpus::CorpusManifest& manifest_by_name(const std::vector<corpus::CorpusManifest>& corpora,
                                               const std::string& name) {
    for (const auto& m : corpora) {
        if (m.name == name) return m;
    }
    std::vector<std::string> known;
    known.reserve(corpora.size());
    for (const auto& m : corpora) known.push_back(m.name);
    throw ConfigError("unknown corpus '" + name + "'; known: " + join(known, ", "));
}

void check_models(const std::vector<NamedModel>& models) {
    if (models.empty()) throw ConfigError("no models configured");
    std::set<std::string> names;
    for (const auto& m : models) {
        if (m.name.empty() || m.name == "average" || !names.insert(m.name).second) {
            throw ConfigError("model names must be unique, non-empty, and not the reserved "
                              "'average'; offender: '" + m.name + "'");
        }
    }
}

// Trains and evaluates every (model, cell, seed) combination and assembles
// runs and per-cell rows. Averages and protocol fields are added by the
// specific experiment afterwards.
ExperimentResult execute(std::string experiment, std::vector<std::string> corpora_used,
                         const std::vector<NamedModel>& models,
                         const features::FeatureStore& store, const TrainConfig& config,
                         const std::vector<CellPlan>& cells,
                         std::map<std::string, splits::SplitSpec> split_map,
                         const LabelMap& labels, int jobs) {
    config.validate();
    check_models(models);
    if (jobs < 1) throw ConfigError("jobs must be >= 1");

    const std::size_t n_models = models.size();
    const std::size_t n_cells = cells.size();
    const std::size_t n_seeds = config.seeds.size();
    std::vector<RunRecord> runs(n_models * n_cells * n_seeds);
    run_tasks(runs.size(), jobs, [&](std::size_t t) {
        const std::size_t mi = t / (n_cells * n_seeds);
        const std::size_t ci = (t / n_seeds) % n_cells;
        const std::size_t si = t % n_seeds;
        const CellPlan& cell = cells[ci];
        const splits::SplitSpec& split = split_map.at(cell.split_names[si]);
        TrainResult tr =
            train(models[mi].config, split, store, labels, config, config.seeds[si]);
        RunRecord rec;
        rec.model = models[mi].name;
        rec.train_source = cell.train_source;
        rec.test_target = cell.test_target;
        rec.seed = config.seeds[si];
        rec.split_name = cell.split_names[si];
        rec.metrics = evaluate(tr.trained, split.test, store, labels);
        rec.history = std::move(tr.history);
        runs[t] = std::move(rec);
    });

    RunTable table;
    for (std::size_t mi = 0; mi < n_models; ++mi) {
        for (std::size_t ci = 0; ci < n_cells; ++ci) {
            std::vector<Metrics> cell_metrics;
            cell_metrics.reserve(n_seeds);
            for (std::size_t si = 0; si < n_seeds; ++si) {
                cell_metrics.push_back(runs[(mi * n_cells + ci) * n_seeds + si].metrics);
            }
            table.rows.push_back(RunRow{models[mi].name, cells[ci].train_source,
                                        cells[ci].test_target, aggregate_runs(cell_metrics)});
        }
    }

    ExperimentResult result;
    result.experiment = std::move(experiment);
    result.corpora = std::move(corpora_used);
    for (const auto& m : models) result.models.push_back(m.name);
    result.config = config;
    result.features_fingerprint = store.fingerprint();
    result.runs = std::move(runs);
    result.table = std::move(table);
    result.splits = std::move(split_map);
    return result;
}

// Mean and sample stddev over a set of already-aggregated rows (summary
// lines average the row means).
Aggregate aggregate_rows(const std::vector<const RunRow*>& rows) {
    std::vector<double> accs, f1s;
    accs.reserve(rows.size());
    f1s.reserve(rows.size());
    for (const RunRow* r : rows) {
        accs.push_back(r->agg.accuracy_mean);
        f1s.push_back(r->agg.macro_f1_mean);
    }
    const auto [am, as] = mean_stddev(accs);
    const auto [fm, fs] = mean_stddev(f1s);
    return Aggregate{am, as, fm, fs, rows.size(), rows.size() == 1};
}

std::vector<const RunRow*> select_rows(const RunTable& table,
                                       const std::function<bool(const RunRow&)>& pred) {
    std::vector<const RunRow*> out;
    for (const auto& row : table.rows) {
        if (pred(row)) out.push_back(&row);
    }
    return out;
}

void finalize(ExperimentResult& result) {
    result.config_fingerprint = fnv1a128_hex(descriptor_json(result).dump());
}

// ---- rendering helpers ----------------------------------------------------

std::string pct(double fraction) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", fraction * 100.0);
    return buf;
}

std::string score_cell(double mean, double stddev, bool single_run) {
    std::string s = pct(mean) + " ± " + pct(stddev);
    if (single_run) s += "*";
    return s;
}

std::string display(const std::string& key) { return key == "average" ? "Average" : key; }

const RunRow& find_row(const std::vector<RunRow>& rows, const std::string& model,
                       const std::string& source, const std::string& target) {
    for (const auto& row : rows) {
        if (row.model == model && row.train_source == source && row.test_target == target) {
            return row;
        }
    }
    throw Error("results table is missing the (" + model + ", " + source + ", " + target +
                ") row");
}

std::string seeds_list(const TrainConfig& c) {
    std::vector<std::string> parts;
    parts.reserve(c.seeds.size());
    for (const auto s : c.seeds) parts.push_back(std::to_string(s));
    return join(parts, ", ");
}

std::string csv_field(const std::string& value) {
    if (value.find_first_of(",\"\n") == std::string::npos) return value;
    std::string quoted = "\"";
    for (char c : value) {
        if (c == '"') quoted += '"';
        quoted += c;
    }
    return quoted + "\"";
}

} // namespace

// ---- configuration ---------------------------------------------------------

void TrainConfig::validate() const {
    if (epochs <= 0) throw ConfigError("train config: epochs must be positive");
    if (batch_size <= 0) throw ConfigError("train config: batch_size must be positive");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
        throw ConfigError("train config: learning_rate must be finite and >= 0");
    }
    if (seeds.empty()) throw ConfigError("train config: at least one seed is required");
    const std::set<std::uint64_t> unique(seeds.begin(), seeds.end());
    if (unique.size() != seeds.size()) {
        throw ConfigError("train config: seeds must be distinct");
    }
}

std::string to_json(const TrainConfig& config) {
    config.validate();
    return config_json(config).dump();
}

TrainConfig train_config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("train config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("train config must be a JSON object");
    static const std::set<std::string> known = {"epochs", "batch_size", "learning_rate",
                                               "seeds", "strict_determinism"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!known.count(it.key())) {
            throw ConfigError("train config: unknown key '" + it.key() + "'");
        }
    }
    TrainConfig c;
    const auto require_int = [&](const char* key, int& out) {
        if (!j.contains(key)) return;
        if (!j[key].is_number_integer()) {
            throw ConfigError(std::string("train config: '") + key + "' must be an integer");
        }
        out = j[key].get<int>();
    };
    require_int("epochs", c.epochs);
    require_int("batch_size", c.batch_size);
    if (j.contains("learning_rate")) {
        if (!j["learning_rate"].is_number()) {
            throw ConfigError("train config: 'learning_rate' must be a number");
        }
        c.learning_rate = j["learning_rate"].get<double>();
    }
    if (j.contains("seeds")) {
        if (!j["seeds"].is_array()) throw ConfigError("train config: 'seeds' must be an array");
        c.seeds.clear();
        for (const auto& el : j["seeds"]) {
            if (!el.is_number_integer() || (el.is_number_integer() && !el.is_number_unsigned() &&
                                            el.get<long long>() < 0)) {
                throw ConfigError("train config: seeds must be non-negative integers");
            }
            c.seeds.push_back(el.get<std::uint64_t>());
        }
    }
    if (j.contains("strict_determinism")) {
        if (!j["strict_determinism"].is_boolean()) {
            throw ConfigError("train config: 'strict_determinism' must be a boolean");
        }
        c.strict_determinism = j["strict_determinism"].get<bool>();
    }
    c.validate();
    return c;
}

// ---- metrics ----------------------------------------------------------------

Metrics metrics_from_confusion(const std::array<std::array<std::size_t, 2>, 2>& confusion) {
    Metrics m;
    m.confusion = confusion;
    const std::size_t total =
        confusion[0][0] + confusion[0][1] + confusion[1][0] + confusion[1][1];
    m.accuracy = ratio(confusion[0][0] + confusion[1][1], total);
    for (std::size_t k = 0; k < 2; ++k) {
        const std::size_t tp = confusion[k][k];
        const std::size_t fp = confusion[1 - k][k];
        const std::size_t fn = confusion[k][1 - k];
        m.precision[k] = ratio(tp, tp + fp);
        m.recall[k] = ratio(tp, tp + fn);
        const double denom = m.precision[k] + m.recall[k];
        m.f1[k] = denom > 0.0 ? 2.0 * m.precision[k] * m.recall[k] / denom : 0.0;
    }
    m.macro_f1 = (m.f1[0] + m.f1[1]) / 2.0;
    return m;
}

Metrics compute_metrics(const std::vector<int>& labels, const std::vector<int>& predictions) {
    if (labels.size() != predictions.size()) {
        throw ShapeError("compute_metrics: " + std::to_string(labels.size()) + " labels vs " +
                         std::to_string(predictions.size()) + " predictions");
    }
    std::array<std::array<std::size_t, 2>, 2> confusion{};
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] > 1 || predictions[i] < 0 || predictions[i] > 1) {
            throw LabelError("compute_metrics: class values must be 0 or 1");
        }
        ++confusion[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(predictions[i])];
    }
    return metrics_from_confusion(confusion);
}

Aggregate aggregate_runs(const std::vector<Metrics>& runs) {
    if (runs.empty()) throw ProtocolError("aggregate_runs: no runs to aggregate");
    std::vector<double> accs, f1s;
    accs.reserve(runs.size());
    f1s.reserve(runs.size());
    for (const auto& m : runs) {
        accs.push_back(m.accuracy);
        f1s.push_back(m.macro_f1);
    }
    const auto [am, as] = mean_stddev(accs);
    const auto [fm, fs] = mean_stddev(f1s);
    return Aggregate{am, as, fm, fs, runs.size(), runs.size() == 1};
}

LabelMap label_map(const std::vector<corpus::CorpusManifest>& manifests) {
    LabelMap out;
    for (const auto& manifest : manifests) {
        for (const auto& entry : manifest.entries) {
            out[entry.clip_id] = static_cast<int>(entry.valence);
        }
    }
    return out;
}

// ---- training and evaluation ------------------------------------------------

TrainResult train(const nn::ModelConfig& model_config, const splits::SplitSpec& split,
                  const features::FeatureStore& store, const LabelMap& labels,
                  const TrainConfig& config, std::uint64_t seed) {
    config.validate();
    if (split.train.empty()) throw ProtocolError("train: training partition is empty");

    // Scope feature access to the partitions training may see; test features
    // stay unread and unexamined.
    std::set<std::string> scope(split.train.begin(), split.train.end());
    scope.insert(split.validation.begin(), split.validation.end());
    const features::FeatureStore scoped =
        store.scoped(std::set<std::string>(scope.begin(), scope.end()));
    scoped.require(std::vector<std::string>(scope.begin(), scope.end()));

    std::vector<features::FeatureMatrix> train_feats = load_clips(scoped, split.train);
    std::vector<features::FeatureMatrix> val_feats = load_clips(scoped, split.validation);
    for (const auto& m : train_feats) check_feature_shape(m, model_config.input_shape);
    for (const auto& m : val_feats) check_feature_shape(m, model_config.input_shape);

    std::vector<int> train_labels, val_labels;
    train_labels.reserve(split.train.size());
    val_labels.reserve(split.validation.size());
    for (const auto& id : split.train) train_labels.push_back(label_of(labels, id));
    for (const auto& id : split.validation) val_labels.push_back(label_of(labels, id));

    // Standardization statistics come from the training partition alone and
    // are applied unchanged everywhere else.
    std::vector<const features::FeatureMatrix*> train_ptrs;
    train_ptrs.reserve(train_feats.size());
    for (const auto& m : train_feats) train_ptrs.push_back(&m);
    const features::CoeffStats stats = features::compute_stats(train_ptrs);
    for (auto& m : train_feats) m = features::standardize(m, stats);
    for (auto& m : val_feats) m = features::standardize(m, stats);

    nn::Model<float> model = nn::make_model<float>(model_config, seed);
    nn::AdamConfig adam_config;
    adam_config.learning_rate = config.learning_rate;
    nn::AdamState<float> adam = nn::make_adam_state(model, adam_config);

    const std::size_t n = train_feats.size();
    const std::size_t batch = static_cast<std::size_t>(config.batch_size);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);

    std::vector<EpochStats> history;
    history.reserve(static_cast<std::size_t>(config.epochs));
    std::uint64_t global_step = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        Rng shuffler(Rng::derive(seed, kShuffleStream + static_cast<std::uint64_t>(epoch)));
        shuffler.shuffle(order);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < n; start += batch) {
            const std::size_t stop = std::min(n, start + batch);
            const std::vector<std::size_t> indices(order.begin() + static_cast<long>(start),
                                                   order.begin() + static_cast<long>(stop));
            std::vector<int> y;
            y.reserve(indices.size());
            for (const std::size_t i : indices) y.push_back(train_labels[i]);
            auto [logits, cache] =
                nn::forward(model, pack_batch(train_feats, indices), nn::Mode::Train,
                            Rng::derive(seed, kDropoutStream + global_step));
            auto [loss, dlogits] = nn::loss_softmax_ce(logits, y);
            const std::vector<nn::Tensor<float>> grads = nn::backward(model, cache, dlogits);
            nn::adam_step(model, grads, adam);
            loss_sum += loss * static_cast<double>(indices.size());
            ++global_step;
        }
        EpochStats stats_row;
        stats_row.train_loss = loss_sum / static_cast<double>(n);
        if (!val_feats.empty()) {
            stats_row.validation_accuracy =
                fraction_correct(predict(model, val_feats, batch), val_labels);
        }
        history.push_back(std::move(stats_row));
    }

    return TrainResult{TrainedModel{std::move(model), stats}, std::move(history), global_step};
}

Metrics evaluate(const TrainedModel& trained, const std::vector<std::string>& clip_ids,
                 const features::FeatureStore& store, const LabelMap& labels) {
    if (clip_ids.empty()) throw ProtocolError("evaluate: the test set is empty");
    const features::FeatureStore scoped =
        store.scoped(std::set<std::string>(clip_ids.begin(), clip_ids.end()));
    scoped.require(clip_ids);

    std::vector<features::FeatureMatrix> feats = load_clips(scoped, clip_ids);
    std::vector<int> y;
    y.reserve(clip_ids.size());
    for (const auto& id : clip_ids) y.push_back(label_of(labels, id));
    for (auto& m : feats) {
        check_feature_shape(m, trained.model.config.input_shape);
        m = features::standardize(m, trained.stats);
    }

    // forward() takes a mutable model (train-mode BatchNorm updates running
    // statistics); evaluation works on a copy to keep the input pristine.
    nn::Model<float> model = trained.model;
    return compute_metrics(y, predict(model, feats, 32));
}

// ---- experiment protocols ----------------------------------------------------

ExperimentResult run_experiment1(const std::vector<corpus::CorpusManifest>& corpora,
                                 const std::vector<NamedModel>& models,
                                 const features::FeatureStore& store, const TrainConfig& config,
                                 bool sentence_independent, int jobs) {
    check_corpora(corpora);
    config.validate();
    if (sentence_independent) {
        for (const auto& m : corpora) {
            if (m.kind == corpus::CorpusKind::URDU) {
                throw ProtocolError("the sentence-independent protocol excludes URDU: its "
                                    "sentences are unidentified");
            }
        }
    }
    const std::string experiment = splits::to_string(
        sentence_independent ? splits::Scenario::SentenceIndependent
                             : splits::Scenario::Monolingual);

    std::vector<CellPlan> cells;
    std::map<std::string, splits::SplitSpec> split_map;
    std::vector<std::string> corpora_used;
    for (const auto& manifest : corpora) {
        CellPlan cell{manifest.name, manifest.name, {}};
        for (const std::uint64_t seed : config.seeds) {
            splits::SplitSpec split =
                sentence_independent
                    ? splits::sentence_split(manifest, {0.8, 0.2}, seed)
                    : splits::speaker_split(manifest, {0.7, 0.1, 0.2}, seed);
            const std::string name = split_artifact_name(experiment, manifest.name, seed);
            cell.split_names.push_back(name);
            split_map.emplace(name, std::move(split));
        }
        cells.push_back(std::move(cell));
        corpora_used.push_back(manifest.name);
    }

    ExperimentResult result = execute(experiment, corpora_used, models, store, config, cells,
                                      std::move(split_map), label_map(corpora), jobs);
    for (const auto& name : corpora_used) {
        const auto rows = select_rows(result.table, [&](const RunRow& r) {
            return r.train_source == name;
        });
        result.table.averages.push_back(RunRow{"average", name, name, aggregate_rows(rows)});
    }
    finalize(result);
    return result;
}

ExperimentResult run_experiment2(const std::vector<std::pair<std::string, std::string>>& pairs,
                                 const std::vector<corpus::CorpusManifest>& corpora,
                                 const std::vector<NamedModel>& models,
                                 const features::FeatureStore& store, const TrainConfig& config,
                                 int jobs) {
    check_corpora(corpora);
    config.validate();
    if (pairs.empty()) throw ProtocolError("cross-lingual protocol: no direction pairs given");
    std::set<std::pair<std::string, std::string>> seen;
    for (const auto& [a, b] : pairs) {
        if (a == b) {
            throw ProtocolError("cross-lingual pair trains and tests on the same corpus '" +
                                a + "'");
        }
        manifest_by_name(corpora, a);
        manifest_by_name(corpora, b);
        if (!seen.insert({a, b}).second) {
            throw ProtocolError("cross-lingual direction (" + a + ", " + b + ") repeats");
        }
    }
    for (const auto& [a, b] : pairs) {
        if (!seen.count({b, a})) {
            throw ProtocolError("cross-lingual protocol runs both directions; (" + b + ", " +
                                a + ") is missing");
        }
    }

    std::vector<CellPlan> cells;
    std::map<std::string, splits::SplitSpec> split_map;
    std::vector<std::string> corpora_used;
    const std::string experiment = splits::to_string(splits::Scenario::CrossLingual);
    for (const auto& [a, b] : pairs) {
        for (const auto& name : {a, b}) {
            if (std::find(corpora_used.begin(), corpora_used.end(), name) == corpora_used.end()) {
                corpora_used.push_back(name);
            }
        }
        CellPlan cell{a, b, {}};
        for (const std::uint64_t seed : config.seeds) {
            const std::string name = split_artifact_name(experiment, a + "__" + b, seed);
            cell.split_names.push_back(name);
            split_map.emplace(name, splits::cross_lingual_split(manifest_by_name(corpora, a),
                                                                manifest_by_name(corpora, b),
                                                                seed));
        }
        cells.push_back(std::move(cell));
    }

    ExperimentResult result = execute(experiment, corpora_used, models, store, config, cells,
                                      std::move(split_map), label_map(corpora), jobs);
    for (const auto& model : result.models) {
        const auto rows = select_rows(result.table, [&](const RunRow& r) {
            return r.model == model;
        });
        result.table.averages.push_back(
            RunRow{model, "average", "average", aggregate_rows(rows)});
    }
    result.pairs = pairs;
    finalize(result);
    return result;
}

ExperimentResult run_experiment3(const std::vector<std::vector<std::string>>& train_combos,
                                 const std::string& test_corpus,
                                 const std::vector<corpus::CorpusManifest>& corpora,
                                 const std::vector<NamedModel>& models,
                                 const features::FeatureStore& store, const TrainConfig& config,
                                 int jobs) {
    check_corpora(corpora);
    config.validate();
    if (train_combos.empty()) throw ProtocolError("multilingual protocol: no training combos");
    const corpus::CorpusManifest& target = manifest_by_name(corpora, test_corpus);

    std::set<std::string> combo_keys;
    for (const auto& combo : train_combos) {
        if (combo.size() < 2) {
            throw ProtocolError("a multilingual combo needs at least 2 training corpora");
        }
        std::set<std::string> members;
        for (const auto& name : combo) {
            manifest_by_name(corpora, name);
            if (name == test_corpus) {
                throw ProtocolError("target corpus '" + test_corpus +
                                    "' appears inside a training combo");
            }
            if (!members.insert(name).second) {
                throw ProtocolError("training combo repeats corpus '" + name + "'");
            }
        }
        if (!combo_keys.insert(join(combo, "+")).second) {
            throw ProtocolError("training combo '" + join(combo, "+") + "' repeats");
        }
    }

    std::vector<CellPlan> cells;
    std::map<std::string, splits::SplitSpec> split_map;
    std::vector<std::string> corpora_used;
    const std::string experiment = splits::to_string(splits::Scenario::Multilingual);
    for (const auto& combo : train_combos) {
        const std::string combo_str = join(combo, "+");
        for (const auto& name : combo) {
            if (std::find(corpora_used.begin(), corpora_used.end(), name) == corpora_used.end()) {
                corpora_used.push_back(name);
            }
        }
        CellPlan cell{combo_str, test_corpus, {}};
        for (const std::uint64_t seed : config.seeds) {
            std::vector<corpus::CorpusManifest> train_manifests;
            train_manifests.reserve(combo.size());
            for (const auto& name : combo) {
                train_manifests.push_back(manifest_by_name(corpora, name));
            }
            const std::string name =
                split_artifact_name(experiment, combo_str + "__" + test_corpus, seed);
            cell.split_names.push_back(name);
            split_map.emplace(name, splits::multilingual_split(train_manifests, target, seed));
        }
        cells.push_back(std::move(cell));
    }
    if (std::find(corpora_used.begin(), corpora_used.end(), test_corpus) ==
        corpora_used.end()) {
        corpora_used.push_back(test_corpus);
    }

    ExperimentResult result = execute(experiment, corpora_used, models, store, config, cells,
                                      std::move(split_map), label_map(corpora), jobs);
    for (const auto& model : result.models) {
        const auto rows = select_rows(result.table, [&](const RunRow& r) {
            return r.model == model;
        });
        result.table.averages.push_back(RunRow{model, "average", test_corpus,
                                               aggregate_rows(rows)});
    }
    for (const auto& combo : train_combos) {
        const std::string combo_str = join(combo, "+");
        const auto rows = select_rows(result.table, [&](const RunRow& r) {
            return r.train_source == combo_str;
        });
        result.table.averages.push_back(RunRow{"average", combo_str, test_corpus,
                                               aggregate_rows(rows)});
    }
    result.combos = train_combos;
    result.target_corpus = test_corpus;
    finalize(result);
    return result;
}

// ---- reports -------------------------------------------------------------------

std::string results_to_json(const ExperimentResult& result) {
    verify_result_consistency(result);
    json j = descriptor_json(result);
    j["config_fingerprint"] = result.config_fingerprint;

    json runs = json::array();
    for (const auto& run : result.runs) {
        json history = json::array();
        for (const auto& epoch : run.history) {
            json h{{"train_loss", epoch.train_loss}};
            if (epoch.validation_accuracy) {
                h["validation_accuracy"] = *epoch.validation_accuracy;
            } else {
                h["validation_accuracy"] = nullptr;
            }
            history.push_back(std::move(h));
        }
        runs.push_back(json{{"model", run.model},
                            {"train_source", run.train_source},
                            {"test_target", run.test_target},
                            {"seed", run.seed},
                            {"split", run.split_name},
                            {"history", std::move(history)},
                            {"metrics", metrics_json(run.metrics)}});
    }
    j["runs"] = std::move(runs);

    json rows = json::array(), averages = json::array();
    for (const auto& row : result.table.rows) rows.push_back(row_json(row));
    for (const auto& row : result.table.averages) averages.push_back(row_json(row));
    j["table"] = json{{"rows", std::move(rows)}, {"averages", std::move(averages)}};
    return j.dump(2) + "\n";
}

ExperimentResult results_from_json(const std::string& text) {
    ExperimentResult result;
    try {
        const json j = json::parse(text);
        if (!j.is_object()) throw ConfigError("results document: expected a JSON object");
        static const std::set<std::string> known = {
            "experiment", "corpora",  "models", "config", "features_fingerprint",
            "pairs",      "combos",   "target_corpus",    "config_fingerprint",
            "runs",       "table"};
        for (const auto& [key, value] : j.items()) {
            (void)value;
            if (!known.count(key)) {
                throw ConfigError("results document: unknown key '" + key + "'");
            }
        }
        result.experiment = j.at("experiment").get<std::string>();
        result.corpora = j.at("corpora").get<std::vector<std::string>>();
        result.models = j.at("models").get<std::vector<std::string>>();
        result.config = train_config_from_json(j.at("config").dump());
        result.features_fingerprint = j.at("features_fingerprint").get<std::string>();
        result.config_fingerprint = j.at("config_fingerprint").get<std::string>();
        if (j.contains("pairs")) {
            for (const auto& p : j.at("pairs")) {
                result.pairs.emplace_back(p.at(0).get<std::string>(),
                                          p.at(1).get<std::string>());
            }
        }
        if (j.contains("combos")) {
            result.combos = j.at("combos").get<std::vector<std::vector<std::string>>>();
            result.target_corpus = j.at("target_corpus").get<std::string>();
        }

        const auto parse_metrics = [](const json& m) {
            Metrics out;
            out.accuracy = m.at("accuracy").get<double>();
            const json& confusion = m.at("confusion");
            for (int t = 0; t < 2; ++t) {
                for (int p = 0; p < 2; ++p) {
                    out.confusion[t][p] = confusion.at(t).at(p).get<std::size_t>();
                }
            }
            const auto pair = [&m](const char* key, std::array<double, 2>& dst) {
                const json& v = m.at(key);
                dst = {v.at(0).get<double>(), v.at(1).get<double>()};
            };
            pair("precision", out.precision);
            pair("recall", out.recall);
            pair("f1", out.f1);
            out.macro_f1 = m.at("macro_f1").get<double>();
            return out;
        };
        for (const auto& r : j.at("runs")) {
            RunRecord run;
            run.model = r.at("model").get<std::string>();
            run.train_source = r.at("train_source").get<std::string>();
            run.test_target = r.at("test_target").get<std::string>();
            run.seed = r.at("seed").get<std::uint64_t>();
            run.split_name = r.at("split").get<std::string>();
            for (const auto& h : r.at("history")) {
                EpochStats epoch;
                epoch.train_loss = h.at("train_loss").get<double>();
                const json& va = h.at("validation_accuracy");
                if (!va.is_null()) epoch.validation_accuracy = va.get<double>();
                run.history.push_back(std::move(epoch));
            }
            run.metrics = parse_metrics(r.at("metrics"));
            result.runs.push_back(std::move(run));
        }
        const auto parse_row = [](const json& r) {
            RunRow row;
            row.model = r.at("model").get<std::string>();
            row.train_source = r.at("train_source").get<std::string>();
            row.test_target = r.at("test_target").get<std::string>();
            row.agg.n_runs = r.at("n_runs").get<std::size_t>();
            row.agg.single_run = r.at("single_run").get<bool>();
            row.agg.accuracy_mean = r.at("accuracy_mean").get<double>();
            row.agg.accuracy_stddev = r.at("accuracy_stddev").get<double>();
            row.agg.macro_f1_mean = r.at("macro_f1_mean").get<double>();
            row.agg.macro_f1_stddev = r.at("macro_f1_stddev").get<double>();
            return row;
        };
        for (const auto& r : j.at("table").at("rows")) {
            result.table.rows.push_back(parse_row(r));
        }
        for (const auto& r : j.at("table").at("averages")) {
            result.table.averages.push_back(parse_row(r));
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("results document: ") + e.what());
    }

    const std::string expected = fnv1a128_hex(descriptor_json(result).dump());
    if (result.config_fingerprint != expected) {
        throw ConfigError("results document: stored config fingerprint " +
                          result.config_fingerprint + " does not match the protocol (" +
                          expected + "); the file was edited or corrupted");
    }
    for (const auto& run : result.runs) {
        if (!(metrics_from_confusion(run.metrics.confusion) == run.metrics)) {
            throw ConfigError("results document: metrics for " + run.model + " on " +
                              run.split_name +
                              " do not match their confusion matrix; the file was "
                              "edited or corrupted");
        }
    }
    return result;
}

std::string render_markdown(const ExperimentResult& result) {
    verify_result_consistency(result);
    static const std::map<std::string, std::string> titles = {
        {"monolingual", "Monolingual (speaker-independent)"},
        {"sentence-independent", "Sentence-independent"},
        {"cross-lingual", "Cross-lingual"},
        {"multilingual", "Multilingual"},
    };
    const auto title = titles.find(result.experiment);
    std::string out = "# " + (title == titles.end() ? result.experiment : title->second) +
                      " results\n\n";
    out += "Config: epochs " + std::to_string(result.config.epochs) + ", batch size " +
           std::to_string(result.config.batch_size) + ", learning rate " +
           format_double(result.config.learning_rate) + ", seeds [" +
           seeds_list(result.config) + "], strict determinism " +
           (result.config.strict_determinism ? "on" : "off") + "\n";
    out += "Config fingerprint: `" + result.config_fingerprint + "`\n\n";
    const std::string over = " (%, mean ± stddev over " +
                             std::to_string(result.config.seeds.size()) + " seeds)";

    bool starred = false;
    const auto acc_cell = [&](const RunRow& row) {
        starred |= row.agg.single_run;
        return score_cell(row.agg.accuracy_mean, row.agg.accuracy_stddev, row.agg.single_run);
    };
    const auto f1_cell = [&](const RunRow& row) {
        starred |= row.agg.single_run;
        return score_cell(row.agg.macro_f1_mean, row.agg.macro_f1_stddev, row.agg.single_run);
    };

    if (result.experiment == "monolingual" || result.experiment == "sentence-independent") {
        // Models x corpora grid, one per statistic, with a cross-model
        // average line.
        const auto grid = [&](const char* heading,
                              const std::function<std::string(const RunRow&)>& cell) {
            out += std::string("## ") + heading + over + "\n\n| Model |";
            for (const auto& c : result.corpora) out += " " + c + " |";
            out += "\n|---|";
            for (std::size_t i = 0; i < result.corpora.size(); ++i) out += "---|";
            out += "\n";
            for (const auto& model : result.models) {
                out += "| " + model + " |";
                for (const auto& c : result.corpora) {
                    out += " " + cell(find_row(result.table.rows, model, c, c)) + " |";
                }
                out += "\n";
            }
            out += "| Average |";
            for (const auto& c : result.corpora) {
                out += " " + cell(find_row(result.table.averages, "average", c, c)) + " |";
            }
            out += "\n\n";
        };
        grid("Accuracy", acc_cell);
        grid("Macro-F1", f1_cell);
    } else {
        out += "## Results" + over + "\n\n";
        out += "| Model | Train | Test | Accuracy | Macro-F1 |\n|---|---|---|---|---|\n";
        for (const auto& row : result.table.rows) {
            out += "| " + row.model + " | " + row.train_source + " | " + row.test_target +
                   " | " + acc_cell(row) + " | " + f1_cell(row) + " |\n";
        }
        for (const auto& row : result.table.averages) {
            if (row.model == "average") continue; // cross-model lines get their own table
            out += "| " + row.model + " | " + display(row.train_source) + " | " +
                   display(row.test_target) + " | " + acc_cell(row) + " | " + f1_cell(row) +
                   " |\n";
        }
        out += "\n";
        if (result.experiment == "multilingual") {
            out += "## Cross-model combo averages" + over + "\n\n";
            out += "| Train corpora | Test | Accuracy | Macro-F1 |\n|---|---|---|---|\n";
            for (const auto& row : result.table.averages) {
                if (row.model != "average") continue;
                out += "| " + row.train_source + " | " + row.test_target + " | " +
                       acc_cell(row) + " | " + f1_cell(row) + " |\n";
            }
            out += "\n";
        }
    }
    if (starred) out += "\\* single run, no spread\n";
    return out;
}

std::string render_csv(const ExperimentResult& result) {
    verify_result_consistency(result);
    std::string out =
        "experiment,model,train_source,test_target,n_runs,accuracy_mean,accuracy_stddev,"
        "macro_f1_mean,macro_f1_stddev,is_average\n";
    const auto line = [&](const RunRow& row, bool is_average) {
        out += csv_field(result.experiment) + "," + csv_field(row.model) + "," +
               csv_field(row.train_source) + "," + csv_field(row.test_target) + "," +
               std::to_string(row.agg.n_runs) + "," + format_double(row.agg.accuracy_mean) +
               "," + format_double(row.agg.accuracy_stddev) + "," +
               format_double(row.agg.macro_f1_mean) + "," +
               format_double(row.agg.macro_f1_stddev) + "," + (is_average ? "1" : "0") + "\n";
    };
    for (const auto& row : result.table.rows) line(row, false);
    for (const auto& row : result.table.averages) line(row, true);
    return out;
}

} // namespace ser::experiments
