#include "ser/cli.hpp"

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "ser/audio_io.hpp"
#include "ser/error.hpp"
#include "ser/models.hpp"
#include "ser/nn.hpp"
#include "ser/splits.hpp"

namespace ser::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---- shared plumbing -------------------------------------------------------

// Options shared by every command; set before the subcommand or after it
// (subcommands fall through unmatched options to the main app).
struct GlobalOpts {
    std::uint64_t seed = 0;
    int jobs = 1;
    bool strict = false;
};

json parse_json_file(const fs::path& path, const std::string& what) {
    std::ifstream in(path);
    if (!in) throw IoError(what + ": cannot read '" + path.string() + "'");
    std::stringstream buffer;
    buffer << in.rdbuf();
    json j;
    try {
        j = json::parse(buffer.str());
    } catch (const json::exception& e) {
        throw ConfigError(what + " '" + path.string() + "': " + e.what());
    }
    if (!j.is_object()) {
        throw ConfigError(what + " '" + path.string() + "': expected a JSON object");
    }
    return j;
}

void reject_unknown_keys(const json& j, const std::set<std::string>& known,
                         const std::string& what) {
    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (!known.count(key)) throw ConfigError(what + ": unknown key '" + key + "'");
    }
}

// Typed field access with error messages that name the field.
template <class T>
void read_field(const json& j, const char* key, T& dst, const std::string& what) {
    if (!j.contains(key)) return;
    try {
        dst = j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(what + ": field '" + std::string(key) + "' has the wrong type");
    }
}

void write_text_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot create '" + path.string() + "'");
    out << text;
    if (!out) throw IoError("short write on '" + path.string() + "'");
}

std::string read_text_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read '" + path.string() + "'");
    std::stringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

// Manifest CSV -> validated in-memory corpus. The corpus name is the clip-id
// prefix the scanner wrote; the kind comes from the entries themselves.
corpus::CorpusManifest manifest_from_csv(const fs::path& path) {
    corpus::CorpusManifest manifest;
    manifest.entries = corpus::read_manifest_csv(path);
    if (!manifest.entries.empty()) {
        manifest.kind = manifest.entries.front().corpus;
        const std::string& id = manifest.entries.front().clip_id;
        manifest.name = id.substr(0, id.find('/'));
    }
    manifest.recount();
    manifest.validate();
    return manifest;
}

features::MfccConfig mfcc_from_optional_file(const std::string& path) {
    if (path.empty()) return features::MfccConfig{};
    return load_mfcc_config(path);
}

// Feature extraction for one manifest: preprocess + MFCC for every entry not
// already cached under this fingerprint. Per-file failures are collected and
// reported together so one bad file does not hide the rest.
struct FeatureCounts {
    std::size_t computed = 0;
    std::size_t skipped = 0;
};

FeatureCounts ensure_features(const corpus::CorpusManifest& manifest, const fs::path& root,
                              const features::MfccConfig& config,
                              const features::FeatureStore& store) {
    FeatureCounts counts;
    std::vector<std::string> failures;
    for (const auto& entry : manifest.entries) {
        if (store.has(entry.clip_id)) {
            ++counts.skipped;
            continue;
        }
        try {
            const audio::Clip clip = audio::preprocess(audio::load_wav(root / entry.path));
            store.store(features::mfcc(clip, config, entry.clip_id));
            ++counts.computed;
        } catch (const Error& e) {
            failures.push_back(entry.path + ": " + e.what());
        }
    }
    if (!failures.empty()) {
        std::string msg = std::to_string(failures.size()) + " file(s) failed in '" +
                          manifest.name + "':";
        for (const auto& f : failures) msg += "\n  " + f;
        throw DecodeError(msg);
    }
    return counts;
}

// The model input shape is whatever the cached features actually are; proved
// against every clip later by the training shape check.
std::vector<int> input_shape_from(const features::FeatureStore& store,
                                  const std::string& clip_id) {
    const features::FeatureMatrix probe = store.load(clip_id);
    return {probe.n_mfcc, probe.n_frames, 1};
}

std::string stats_sidecar_path(const std::string& checkpoint) {
    return checkpoint + ".stats.json";
}

// ---- commands ---------------------------------------------------------------

void cmd_synth(const std::string& out, const std::string& spec_path, std::uint64_t seed) {
    const synth::SynthSpec spec =
        spec_path.empty() ? synth::default_synth_spec() : load_synth_spec(spec_path);
    const auto manifests = synth::synth_corpus(out, spec, seed);
    for (const auto& manifest : manifests) {
        corpus::write_manifest_csv(fs::path(out) / manifest.name / "manifest.csv",
                                   manifest.entries);
        std::cout << manifest.name << ": " << manifest.entries.size() << " clips, "
                  << manifest.speakers().size() << " speakers\n";
    }
    std::cout << "wrote " << manifests.size() << " corpora under " << out << "\n";
}

void cmd_scan(const std::string& root, const std::string& kind_str, std::string name,
              std::string out) {
    const corpus::CorpusKind kind = corpus::kind_from_string(kind_str);
    if (name.empty()) name = fs::path(root).filename().string();
    if (out.empty()) out = (fs::path(root) / "manifest.csv").string();

    const corpus::CorpusManifest manifest = corpus::scan_corpus(root, kind, name);
    corpus::write_manifest_csv(out, manifest.entries);

    std::cout << manifest.entries.size() << " clips, " << manifest.speakers().size()
              << " speakers (" << manifest.n_positive << " positive, " << manifest.n_negative
              << " negative)\n";
    if (!manifest.entries.empty()) {
        const corpus::DurationStats stats = corpus::corpus_stats(manifest);
        std::cout << "clip length histogram (seconds):\n";
        for (const auto& [bucket, count] : stats.histogram) {
            std::cout << "  [" << bucket << ", " << bucket + 1 << "): " << count << "\n";
        }
        std::ostringstream line;
        line.setf(std::ios::fixed);
        line.precision(2);
        line << "mean " << stats.mean << " s, stddev " << stats.stddev << " s";
        std::cout << line.str() << "\n";
    }
    if (kind == corpus::CorpusKind::ASED) {
        std::cout << "note: published recording total " << corpus::kAsedReportedRecordings
                  << " differs from the published partition sum "
                  << corpus::kAsedPartitionTotal << "; scanned count reported as-is\n";
    }
    std::cout << "manifest written to " << out << "\n";
}

void cmd_features(const std::string& manifest_path, const std::string& cache,
                  std::string root, const std::string& mfcc_path) {
    const corpus::CorpusManifest manifest = manifest_from_csv(manifest_path);
    if (root.empty()) root = fs::path(manifest_path).parent_path().string();
    const features::MfccConfig config = mfcc_from_optional_file(mfcc_path);
    const features::FeatureStore store(cache, config.fingerprint());
    const FeatureCounts counts = ensure_features(manifest, root, config, store);
    std::cout << "computed " << counts.computed << ", skipped " << counts.skipped
              << " cache hit(s); fingerprint " << store.fingerprint() << "\n";
}

void cmd_split(const std::string& manifest_path, const std::string& scenario,
               const std::string& ratio_str, std::uint64_t seed, const std::string& out) {
    const corpus::CorpusManifest manifest = manifest_from_csv(manifest_path);
    std::vector<double> ratios;
    if (!ratio_str.empty()) {
        std::stringstream ss(ratio_str);
        std::string part;
        while (std::getline(ss, part, ',')) {
            try {
                ratios.push_back(std::stod(part));
            } catch (const std::exception&) {
                throw ConfigError("--ratios: '" + part + "' is not a number");
            }
        }
    }
    splits::SplitSpec split;
    if (scenario == "speaker") {
        std::array<double, 3> r = {0.7, 0.1, 0.2};
        if (!ratios.empty()) {
            if (ratios.size() != 3) {
                throw ConfigError("--ratios: speaker splits take three values");
            }
            std::copy(ratios.begin(), ratios.end(), r.begin());
        }
        split = splits::speaker_split(manifest, r, seed);
    } else if (scenario == "sentence") {
        std::array<double, 2> r = {0.8, 0.2};
        if (!ratios.empty()) {
            if (ratios.size() != 2) {
                throw ConfigError("--ratios: sentence splits take two values");
            }
            std::copy(ratios.begin(), ratios.end(), r.begin());
        }
        split = splits::sentence_split(manifest, r, seed);
    } else {
        throw ConfigError("--scenario must be 'speaker' or 'sentence' (cross/multi "
                          "partitions are produced by `expt`)");
    }
    splits::write_split_json(out, split);
    std::cout << splits::to_string(split.scenario) << " split, seed " << seed << ": train "
              << split.train.size() << ", validation " << split.validation.size() << ", test "
              << split.test.size() << " -> " << out << "\n";
}

void cmd_train(const std::string& manifest_path, const std::string& split_path,
               const std::string& cache, const std::string& model_key, int epochs,
               int batch_size, double learning_rate, std::uint64_t seed, bool strict,
               const std::string& mfcc_path, const std::string& out) {
    const corpus::CorpusManifest manifest = manifest_from_csv(manifest_path);
    const splits::SplitSpec split = splits::read_split_json(split_path);
    const features::MfccConfig mfcc = mfcc_from_optional_file(mfcc_path);
    const features::FeatureStore store(cache, mfcc.fingerprint());
    const experiments::LabelMap labels = experiments::label_map({manifest});

    if (split.train.empty()) throw ProtocolError("split has an empty training partition");
    const nn::ModelConfig model_config =
        models::build_model(model_key, input_shape_from(store, split.train.front()));

    experiments::TrainConfig config;
    config.epochs = epochs;
    config.batch_size = batch_size;
    config.learning_rate = learning_rate;
    config.seeds = {seed};
    config.strict_determinism = strict || config.strict_determinism;

    const experiments::TrainResult result =
        experiments::train(model_config, split, store, labels, config, seed);
    for (std::size_t e = 0; e < result.history.size(); ++e) {
        std::ostringstream line;
        line.setf(std::ios::fixed);
        line.precision(4);
        line << "epoch " << e + 1 << "/" << result.history.size() << "  loss "
             << result.history[e].train_loss;
        if (result.history[e].validation_accuracy) {
            line << "  val_acc " << *result.history[e].validation_accuracy;
        }
        std::cout << line.str() << "\n";
    }

    nn::save_checkpoint(out, result.trained.model);
    const json sidecar{{"features_fingerprint", store.fingerprint()},
                       {"mean", result.trained.stats.mean},
                       {"stddev", result.trained.stats.stddev}};
    write_text_file(stats_sidecar_path(out), sidecar.dump(2) + "\n");
    std::size_t n_params = 0;
    for (const auto* p : result.trained.model.parameters()) n_params += p->numel();
    std::cout << model_config.name << ": " << result.steps << " optimizer steps, " << n_params
              << " parameters -> " << out << " (+ .stats.json)\n";
}

void cmd_eval(const std::string& ckpt_path, const std::string& manifest_path,
              const std::string& split_path, const std::string& cache,
              const std::string& partition, const std::string& mfcc_path) {
    const corpus::CorpusManifest manifest = manifest_from_csv(manifest_path);
    const splits::SplitSpec split = splits::read_split_json(split_path);
    const features::MfccConfig mfcc = mfcc_from_optional_file(mfcc_path);
    const features::FeatureStore store(cache, mfcc.fingerprint());

    const std::vector<std::string>* ids = nullptr;
    if (partition == "train") ids = &split.train;
    else if (partition == "validation") ids = &split.validation;
    else if (partition == "test") ids = &split.test;
    else throw ConfigError("--partition must be train, validation, or test");

    experiments::TrainedModel trained{nn::load_checkpoint<float>(ckpt_path), {}};
    const fs::path sidecar_path = stats_sidecar_path(ckpt_path);
    const json sidecar = parse_json_file(sidecar_path, "standardization sidecar");
    reject_unknown_keys(sidecar, {"features_fingerprint", "mean", "stddev"},
                        "standardization sidecar");
    std::string trained_fingerprint;
    read_field(sidecar, "features_fingerprint", trained_fingerprint,
               "standardization sidecar");
    read_field(sidecar, "mean", trained.stats.mean, "standardization sidecar");
    read_field(sidecar, "stddev", trained.stats.stddev, "standardization sidecar");
    if (trained_fingerprint != store.fingerprint()) {
        throw ConfigError("checkpoint was trained on features with fingerprint " +
                          trained_fingerprint + " but the cache holds " + store.fingerprint());
    }

    const experiments::LabelMap labels = experiments::label_map({manifest});
    const experiments::Metrics m = experiments::evaluate(trained, *ids, store, labels);

    std::ostringstream out;
    out.setf(std::ios::fixed);
    out.precision(4);
    out << partition << " partition, " << ids->size() << " clips\n";
    out << "accuracy  " << m.accuracy << "\n";
    out << "macro-F1  " << m.macro_f1 << "\n";
    out << "positive  precision " << m.precision[0] << "  recall " << m.recall[0] << "  F1 "
        << m.f1[0] << "\n";
    out << "negative  precision " << m.precision[1] << "  recall " << m.recall[1] << "  F1 "
        << m.f1[1] << "\n";
    out << "confusion [true x predicted]: [[" << m.confusion[0][0] << ", " << m.confusion[0][1]
        << "], [" << m.confusion[1][0] << ", " << m.confusion[1][1] << "]]\n";
    std::cout << out.str();
}

void cmd_expt(std::string kind, const std::string& config_path, int jobs, bool strict) {
    ExperimentConfig config = load_experiment_config(config_path);
    if (kind.empty()) kind = config.scenario;
    if (kind.empty()) {
        throw ConfigError("no scenario given: pass one of mono/sent/cross/multi or set "
                          "\"scenario\" in the config file");
    }
    if (!config.scenario.empty() && kind != config.scenario) {
        throw ConfigError("scenario '" + kind + "' contradicts the config file's '" +
                          config.scenario + "'; change one of them");
    }
    if (strict) config.train.strict_determinism = true;

    // Scan every referenced corpus and make sure its features are cached.
    std::vector<corpus::CorpusManifest> manifests;
    const features::FeatureStore store(config.cache_dir, config.mfcc.fingerprint());
    FeatureCounts totals;
    for (const auto& [name, ref] : config.corpora) {
        manifests.push_back(corpus::scan_corpus(ref.root, ref.kind, name));
        const FeatureCounts counts = ensure_features(manifests.back(), ref.root, config.mfcc, store);
        totals.computed += counts.computed;
        totals.skipped += counts.skipped;
    }
    std::cout << "features: computed " << totals.computed << ", skipped " << totals.skipped
              << " cache hit(s)\n";

    std::size_t first_manifest = 0;
    while (first_manifest < manifests.size() && manifests[first_manifest].entries.empty()) {
        ++first_manifest;
    }
    if (first_manifest == manifests.size()) {
        throw ProtocolError("every configured corpus is empty");
    }
    const std::vector<int> input_shape =
        input_shape_from(store, manifests[first_manifest].entries.front().clip_id);
    std::vector<experiments::NamedModel> named;
    for (const auto& key : config.models) {
        named.push_back({key, models::build_model(key, input_shape)});
    }

    std::vector<std::string> ids;
    for (const auto& [name, ref] : config.corpora) {
        (void)ref;
        ids.push_back(name);
    }

    experiments::ExperimentResult result;
    if (kind == "mono") {
        result = experiments::run_experiment1(manifests, named, store, config.train, false, jobs);
    } else if (kind == "sent") {
        result = experiments::run_experiment1(manifests, named, store, config.train, true, jobs);
    } else if (kind == "cross") {
        auto pairs = config.pairs;
        if (pairs.empty()) {
            for (const auto& a : ids) {
                for (const auto& b : ids) {
                    if (a != b) pairs.emplace_back(a, b);
                }
            }
        }
        result = experiments::run_experiment2(pairs, manifests, named, store, config.train, jobs);
    } else if (kind == "multi") {
        if (config.target.empty()) {
            throw ConfigError("multilingual runs need \"target\" in the config file");
        }
        auto combos = config.combos;
        if (combos.empty()) {
            // Every subset of the non-target corpora with at least two
            // members, ordered by size then lexicographically.
            std::vector<std::string> sources;
            for (const auto& id : ids) {
                if (id != config.target) sources.push_back(id);
            }
            const std::size_t n = sources.size();
            for (std::size_t size = 2; size <= n; ++size) {
                std::vector<bool> pick(n, false);
                std::fill(pick.end() - static_cast<std::ptrdiff_t>(size), pick.end(), true);
                // Iterate subsets of this size in lexicographic member order.
                std::vector<std::vector<std::string>> of_size;
                std::vector<bool> mask(n, false);
                std::fill(mask.begin(), mask.begin() + static_cast<std::ptrdiff_t>(size), true);
                do {
                    std::vector<std::string> combo;
                    for (std::size_t i = 0; i < n; ++i) {
                        if (mask[i]) combo.push_back(sources[i]);
                    }
                    of_size.push_back(std::move(combo));
                } while (std::prev_permutation(mask.begin(), mask.end()));
                for (auto& combo : of_size) combos.push_back(std::move(combo));
            }
        }
        result = experiments::run_experiment3(combos, config.target, manifests, named, store,
                                              config.train, jobs);
    } else {
        throw ConfigError("unknown scenario '" + kind +
                          "' (valid: mono, sent, cross, multi)");
    }

    fs::create_directories(config.output_dir / "splits");
    for (const auto& [name, spec] : result.splits) {
        splits::write_split_json(config.output_dir / "splits" / name, spec);
    }
    const fs::path results_path = config.output_dir / (result.experiment + ".results.json");
    const fs::path md_path = config.output_dir / (result.experiment + ".report.md");
    const fs::path csv_path = config.output_dir / (result.experiment + ".report.csv");
    write_text_file(results_path, experiments::results_to_json(result));
    const std::string markdown = experiments::render_markdown(result);
    write_text_file(md_path, markdown);
    write_text_file(csv_path, experiments::render_csv(result));

    std::cout << "\n" << markdown << "\n";
    std::cout << result.runs.size() << " runs -> " << results_path.string() << ", "
              << md_path.string() << ", " << csv_path.string() << ", "
              << result.splits.size() << " split files\n";
}

void cmd_report(const std::string& results_path, const std::string& format,
                const std::string& out) {
    const experiments::ExperimentResult result =
        experiments::results_from_json(read_text_file(results_path));
    std::string text;
    if (format == "md") text = experiments::render_markdown(result);
    else if (format == "csv") text = experiments::render_csv(result);
    else throw ConfigError("--format must be 'md' or 'csv'");
    if (out.empty()) {
        std::cout << text;
    } else {
        write_text_file(out, text);
        std::cout << "wrote " << out << "\n";
    }
}

// User-input and data problems exit 2; anything else is an internal failure
// and exits 1 (documented contract on ser::Error).
int exit_code_for(const Error& e) {
    if (dynamic_cast<const DecodeError*>(&e) != nullptr ||
        dynamic_cast<const UnsupportedFormatError*>(&e) != nullptr ||
        dynamic_cast<const ConfigError*>(&e) != nullptr ||
        dynamic_cast<const MappingError*>(&e) != nullptr ||
        dynamic_cast<const ParseError*>(&e) != nullptr ||
        dynamic_cast<const ProtocolError*>(&e) != nullptr ||
        dynamic_cast<const CacheMissError*>(&e) != nullptr ||
        dynamic_cast<const IoError*>(&e) != nullptr) {
        return 2;
    }
    return 1;
}

} // namespace

// ---- configuration files ----------------------------------------------------

features::MfccConfig load_mfcc_config(const fs::path& path) {
    const json j = parse_json_file(path, "mfcc config");
    const std::string what = "mfcc config '" + path.string() + "'";
    reject_unknown_keys(j,
                        {"sample_rate", "n_fft", "hop", "n_mels", "n_mfcc", "fmin", "fmax",
                         "log_floor"},
                        what);
    features::MfccConfig config;
    read_field(j, "sample_rate", config.sample_rate, what);
    read_field(j, "n_fft", config.n_fft, what);
    read_field(j, "hop", config.hop, what);
    read_field(j, "n_mels", config.n_mels, what);
    read_field(j, "n_mfcc", config.n_mfcc, what);
    read_field(j, "fmin", config.fmin, what);
    read_field(j, "fmax", config.fmax, what);
    read_field(j, "log_floor", config.log_floor, what);
    config.validate();
    return config;
}

synth::SynthSpec load_synth_spec(const fs::path& path) {
    const json j = parse_json_file(path, "synthesis spec");
    const std::string what = "synthesis spec '" + path.string() + "'";
    reject_unknown_keys(j,
                        {"languages", "emotions", "speakers", "clips_per_speaker", "sentences",
                         "min_seconds", "max_seconds", "sample_rate"},
                        what);
    synth::SynthSpec spec = synth::default_synth_spec();
    if (j.contains("languages")) {
        spec.languages.clear();
        for (const auto& lj : j.at("languages")) {
            if (!lj.is_object()) throw ConfigError(what + ": field 'languages' entries must be objects");
            reject_unknown_keys(lj, {"name", "base_f0", "harmonic_gains"}, what + " languages");
            synth::SynthLanguage lang;
            read_field(lj, "name", lang.name, what);
            read_field(lj, "base_f0", lang.base_f0, what);
            read_field(lj, "harmonic_gains", lang.harmonic_gains, what);
            spec.languages.push_back(std::move(lang));
        }
    }
    if (j.contains("emotions")) {
        spec.emotions.clear();
        for (const auto& ej : j.at("emotions")) {
            if (!ej.is_object()) throw ConfigError(what + ": field 'emotions' entries must be objects");
            reject_unknown_keys(ej, {"label", "am_hz", "am_depth", "tilt", "contour_db"},
                                what + " emotions");
            synth::SynthEmotion emotion;
            read_field(ej, "label", emotion.label, what);
            read_field(ej, "am_hz", emotion.am_hz, what);
            read_field(ej, "am_depth", emotion.am_depth, what);
            read_field(ej, "tilt", emotion.tilt, what);
            read_field(ej, "contour_db", emotion.contour_db, what);
            spec.emotions.push_back(std::move(emotion));
        }
    }
    read_field(j, "speakers", spec.speakers, what);
    read_field(j, "clips_per_speaker", spec.clips_per_speaker, what);
    read_field(j, "sentences", spec.sentences, what);
    read_field(j, "min_seconds", spec.min_seconds, what);
    read_field(j, "max_seconds", spec.max_seconds, what);
    read_field(j, "sample_rate", spec.sample_rate, what);
    spec.validate();
    return spec;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
    const json j = parse_json_file(path, "experiment config");
    const std::string what = "experiment config '" + path.string() + "'";
    reject_unknown_keys(j,
                        {"corpora", "mfcc", "train", "models", "scenario", "pairs", "combos",
                         "target", "output_dir", "cache_dir"},
                        what);
    const fs::path base = fs::path(path).parent_path();
    const auto resolve = [&base](const fs::path& p) { return p.is_absolute() ? p : base / p; };

    ExperimentConfig config;
    if (!j.contains("corpora") || !j.at("corpora").is_object() || j.at("corpora").empty()) {
        throw ConfigError(what + ": field 'corpora' must be a non-empty object");
    }
    for (const auto& [name, cj] : j.at("corpora").items()) {
        if (!cj.is_object()) {
            throw ConfigError(what + ": corpus '" + name + "' must be an object");
        }
        reject_unknown_keys(cj, {"root", "kind"}, what + " corpus '" + name + "'");
        std::string root, kind = "synth";
        read_field(cj, "root", root, what);
        read_field(cj, "kind", kind, what);
        if (root.empty()) {
            throw ConfigError(what + ": corpus '" + name + "' needs a 'root' path");
        }
        CorpusRef ref;
        ref.root = resolve(root);
        ref.kind = corpus::kind_from_string(kind);
        if (!fs::is_directory(ref.root)) {
            throw ConfigError(what + ": corpus '" + name + "' root '" + ref.root.string() +
                              "' is not a directory");
        }
        config.corpora.emplace(name, std::move(ref));
    }
    if (j.contains("mfcc")) {
        const std::string mwhat = what + " mfcc";
        const json& mj = j.at("mfcc");
        if (!mj.is_object()) throw ConfigError(mwhat + ": expected an object");
        reject_unknown_keys(mj,
                            {"sample_rate", "n_fft", "hop", "n_mels", "n_mfcc", "fmin", "fmax",
                             "log_floor"},
                            mwhat);
        read_field(mj, "sample_rate", config.mfcc.sample_rate, mwhat);
        read_field(mj, "n_fft", config.mfcc.n_fft, mwhat);
        read_field(mj, "hop", config.mfcc.hop, mwhat);
        read_field(mj, "n_mels", config.mfcc.n_mels, mwhat);
        read_field(mj, "n_mfcc", config.mfcc.n_mfcc, mwhat);
        read_field(mj, "fmin", config.mfcc.fmin, mwhat);
        read_field(mj, "fmax", config.mfcc.fmax, mwhat);
        read_field(mj, "log_floor", config.mfcc.log_floor, mwhat);
        config.mfcc.validate();
    }
    if (j.contains("train")) {
        config.train = experiments::train_config_from_json(j.at("train").dump());
    }
    read_field(j, "models", config.models, what);
    if (config.models.empty()) {
        throw ConfigError(what + ": field 'models' must not be empty");
    }
    read_field(j, "scenario", config.scenario, what);
    if (j.contains("pairs")) {
        try {
            for (const auto& p : j.at("pairs")) {
                config.pairs.emplace_back(p.at(0).get<std::string>(),
                                          p.at(1).get<std::string>());
                if (p.size() != 2) throw json::other_error::create(501, "pair size", nullptr);
            }
        } catch (const json::exception&) {
            throw ConfigError(what + ": field 'pairs' must be a list of [train, test] pairs");
        }
    }
    read_field(j, "combos", config.combos, what);
    read_field(j, "target", config.target, what);
    std::string output_dir = "out", cache_dir;
    read_field(j, "output_dir", output_dir, what);
    read_field(j, "cache_dir", cache_dir, what);
    config.output_dir = resolve(output_dir);
    config.cache_dir = cache_dir.empty() ? config.output_dir / "cache" : resolve(cache_dir);
    return config;
}

// ---- entry point --------------------------------------------------------------

int run(int argc, const char* const* argv) {
    CLI::App app{"Binary speech-valence classification toolkit: corpus scanning, MFCC "
                 "features, speaker/sentence/cross-corpus partitions, deterministic CNN "
                 "training, and seeded experiment tables."};
    app.name("ser");
    app.require_subcommand(1);

    GlobalOpts global;
    app.add_option("--seed", global.seed, "Seed for synth/split/train")->capture_default_str();
    app.add_option("--jobs", global.jobs, "Worker slots for expt runs")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    app.add_flag("--strict", global.strict, "Force strict determinism in training configs");

    // synth
    std::string synth_out, synth_spec;
    auto* synth_cmd = app.add_subcommand("synth", "Generate the synthetic test corpora");
    synth_cmd->fallthrough();
    synth_cmd->add_option("--out", synth_out, "Output directory")->required();
    synth_cmd->add_option("--spec", synth_spec, "Recipe JSON (default: built-in four-language spec)")
        ->check(CLI::ExistingFile);
    synth_cmd->callback([&] { cmd_synth(synth_out, synth_spec, global.seed); });

    // scan
    std::string scan_root, scan_kind, scan_name, scan_out;
    auto* scan_cmd = app.add_subcommand("scan", "Index a corpus directory into a manifest CSV");
    scan_cmd->fallthrough();
    scan_cmd->add_option("root", scan_root, "Corpus root directory")->required();
    scan_cmd->add_option("--corpus", scan_kind, "Corpus kind: ased, ravdess, emodb, urdu, synth")
        ->required();
    scan_cmd->add_option("--name", scan_name, "Manifest name (default: root directory name)");
    scan_cmd->add_option("--out", scan_out, "Manifest CSV path (default: <root>/manifest.csv)");
    scan_cmd->callback([&] { cmd_scan(scan_root, scan_kind, scan_name, scan_out); });

    // features
    std::string feat_manifest, feat_cache, feat_root, feat_mfcc;
    auto* feat_cmd = app.add_subcommand("features", "Extract MFCC features into a cache");
    feat_cmd->fallthrough();
    feat_cmd->add_option("manifest", feat_manifest, "Manifest CSV")
        ->required()
        ->check(CLI::ExistingFile);
    feat_cmd->add_option("--cache", feat_cache, "Feature cache directory")->required();
    feat_cmd->add_option("--root", feat_root, "Audio root (default: the manifest's directory)");
    feat_cmd->add_option("--mfcc", feat_mfcc, "MFCC override JSON")->check(CLI::ExistingFile);
    feat_cmd->callback([&] { cmd_features(feat_manifest, feat_cache, feat_root, feat_mfcc); });

    // split
    std::string split_manifest, split_scenario, split_ratios, split_out;
    auto* split_cmd = app.add_subcommand("split", "Partition a manifest into train/validation/test");
    split_cmd->fallthrough();
    split_cmd->add_option("manifest", split_manifest, "Manifest CSV")
        ->required()
        ->check(CLI::ExistingFile);
    split_cmd->add_option("--scenario", split_scenario, "speaker or sentence")->required();
    split_cmd->add_option("--ratios", split_ratios,
                          "Comma-separated fractions (default 0.7,0.1,0.2 / 0.8,0.2)");
    split_cmd->add_option("--out", split_out, "Split JSON path")->required();
    split_cmd->callback(
        [&] { cmd_split(split_manifest, split_scenario, split_ratios, global.seed, split_out); });

    // train
    std::string train_manifest, train_split, train_cache, train_model = "vgge", train_mfcc,
                train_out;
    int train_epochs = 100, train_batch = 32;
    double train_lr = 1e-3;
    auto* train_cmd = app.add_subcommand("train", "Train one model on a split");
    train_cmd->fallthrough();
    train_cmd->add_option("manifest", train_manifest, "Manifest CSV")
        ->required()
        ->check(CLI::ExistingFile);
    train_cmd->add_option("split", train_split, "Split JSON")->required()->check(CLI::ExistingFile);
    train_cmd->add_option("--cache", train_cache, "Feature cache directory")->required();
    train_cmd->add_option("--model", train_model, "Registry key: vgge, alexnet_mini, resnet_mini")
        ->capture_default_str();
    train_cmd->add_option("--epochs", train_epochs, "Training epochs")->capture_default_str();
    train_cmd->add_option("--batch", train_batch, "Batch size")->capture_default_str();
    train_cmd->add_option("--lr", train_lr, "Adam learning rate")->capture_default_str();
    train_cmd->add_option("--mfcc", train_mfcc, "MFCC override JSON")->check(CLI::ExistingFile);
    train_cmd->add_option("--out", train_out, "Checkpoint path")->required();
    train_cmd->callback([&] {
        cmd_train(train_manifest, train_split, train_cache, train_model, train_epochs,
                  train_batch, train_lr, global.seed, global.strict, train_mfcc, train_out);
    });

    // eval
    std::string eval_ckpt, eval_manifest, eval_split, eval_cache, eval_partition = "test",
                eval_mfcc;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a split partition");
    eval_cmd->fallthrough();
    eval_cmd->add_option("checkpoint", eval_ckpt, "Checkpoint path")
        ->required()
        ->check(CLI::ExistingFile);
    eval_cmd->add_option("manifest", eval_manifest, "Manifest CSV")
        ->required()
        ->check(CLI::ExistingFile);
    eval_cmd->add_option("split", eval_split, "Split JSON")->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--cache", eval_cache, "Feature cache directory")->required();
    eval_cmd->add_option("--partition", eval_partition, "train, validation, or test")
        ->capture_default_str();
    eval_cmd->add_option("--mfcc", eval_mfcc, "MFCC override JSON")->check(CLI::ExistingFile);
    eval_cmd->callback([&] {
        cmd_eval(eval_ckpt, eval_manifest, eval_split, eval_cache, eval_partition, eval_mfcc);
    });

    // expt
    std::string expt_kind, expt_config;
    auto* expt_cmd =
        app.add_subcommand("expt", "Run a full experiment from a configuration file");
    expt_cmd->fallthrough();
    expt_cmd->add_option("kind", expt_kind, "mono, sent, cross, or multi (or set it in the config)");
    expt_cmd->add_option("--config", expt_config, "Experiment config JSON")
        ->required()
        ->check(CLI::ExistingFile);
    expt_cmd->callback([&] { cmd_expt(expt_kind, expt_config, global.jobs, global.strict); });

    // report
    std::string report_results, report_format = "md", report_out;
    auto* report_cmd = app.add_subcommand("report", "Re-render tables from a results document");
    report_cmd->fallthrough();
    report_cmd->add_option("results", report_results, "Results JSON")
        ->required()
        ->check(CLI::ExistingFile);
    report_cmd->add_option("--format", report_format, "md or csv")->capture_default_str();
    report_cmd->add_option("--out", report_out, "Output file (default: stdout)");
    report_cmd->callback([&] { cmd_report(report_results, report_format, report_out); });

    try {
        app.parse(argc, argv);
        return 0;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e); // prints help or the parse error
        return code == 0 ? 0 : 2;
    } catch (const Error& e) {
        const int code = exit_code_for(e);
        std::cerr << "error: " << e.what() << "\n";
        return code;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 1;
    }
}

} // namespace ser::cli
