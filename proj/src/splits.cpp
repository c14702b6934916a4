#include "ser/splits.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <iomanip>

#include <json.hpp>

#include "ser/error.hpp"
#include "ser/hash.hpp"
#include "ser/rng.hpp"

namespace ser::splits {

namespace {

using corpus::ClipMeta;
using corpus::CorpusManifest;

struct Group {
    std::string key;
    std::vector<const ClipMeta*> clips;
};

// Groups in ascending key order (entries are already sorted by clip_id, and
// map ordering makes the grouping independent of entry order anyway).
template <class KeyFn>
std::vector<Group> collect_groups(const CorpusManifest& manifest, KeyFn key_of) {
    std::map<std::string, Group> by_key;
    for (const auto& entry : manifest.entries) {
        const std::string key = key_of(entry);
        Group& g = by_key[key];
        g.key = key;
        g.clips.push_back(&entry);
    }
    std::vector<Group> out;
    out.reserve(by_key.size());
    for (auto& [key, group] : by_key) out.push_back(std::move(group));
    return out;
}

// Shuffles the groups with the seeded generator, then assigns each group to
// the partition with the largest remaining clip-count deficit (ties go to the
// earlier partition, i.e. train before validation before test). Each final
// count differs from ratio*total by less than the largest group size.
std::vector<std::vector<const Group*>> greedy_partition(std::vector<Group>& groups,
                                                        const std::vector<double>& ratios,
                                                        Rng& rng) {
    rng.shuffle(groups);

    std::size_t total = 0;
    for (const Group& g : groups) total += g.clips.size();

    const std::size_t n_parts = ratios.size();
    std::vector<double> target(n_parts);
    for (std::size_t p = 0; p < n_parts; ++p) {
        target[p] = ratios[p] * static_cast<double>(total);
    }

    std::vector<double> count(n_parts, 0.0);
    std::vector<std::vector<const Group*>> assigned(n_parts);
    for (const Group& g : groups) {
        std::size_t best = 0;
        double best_deficit = target[0] - count[0];
        for (std::size_t p = 1; p < n_parts; ++p) {
            const double deficit = target[p] - count[p];
            if (deficit > best_deficit) {
                best = p;
                best_deficit = deficit;
            }
        }
        assigned[best].push_back(&g);
        count[best] += static_cast<double>(g.clips.size());
    }

    // A partition with a positive share must not end up empty (possible when
    // one group dwarfs the rest). Move the smallest group out of the most
    // overfull partition that can spare one.
    for (std::size_t p = 0; p < n_parts; ++p) {
        if (!assigned[p].empty() || ratios[p] <= 0.0) continue;
        std::size_t donor = n_parts;
        double best_surplus = 0.0;
        for (std::size_t q = 0; q < n_parts; ++q) {
            if (q == p || assigned[q].size() < 2) continue;
            const double surplus = count[q] - target[q];
            if (donor == n_parts || surplus > best_surplus) {
                donor = q;
                best_surplus = surplus;
            }
        }
        if (donor == n_parts) {
            throw ProtocolError("split infeasible: not enough groups to fill every partition");
        }
        auto smallest = std::min_element(
            assigned[donor].begin(), assigned[donor].end(),
            [](const Group* a, const Group* b) {
                if (a->clips.size() != b->clips.size()) return a->clips.size() < b->clips.size();
                return a->key < b->key;
            });
        const Group* moved = *smallest;
        assigned[donor].erase(smallest);
        count[donor] -= static_cast<double>(moved->clips.size());
        assigned[p].push_back(moved);
        count[p] += static_cast<double>(moved->clips.size());
    }
    return assigned;
}

std::vector<std::string> collect_ids(const std::vector<const Group*>& groups) {
    std::vector<std::string> ids;
    for (const Group* g : groups) {
        for (const ClipMeta* clip : g->clips) ids.push_back(clip->clip_id);
    }
    std::sort(ids.begin(), ids.end());
    return ids;
}

void check_ratios(const std::vector<double>& ratios) {
    double sum = 0.0;
    for (double r : ratios) {
        if (!(r > 0.0) || !(r < 1.0)) {
            throw ConfigError("split ratios must each lie strictly between 0 and 1");
        }
        sum += r;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
        throw ConfigError("split ratios must sum to 1");
    }
}

Rng manifest_rng(const CorpusManifest& manifest, std::uint64_t seed) {
    return Rng(Rng::derive(seed, fnv1a64(manifest.name)));
}

// 90/10 whole-speaker holdout of one training corpus; shared by the
// cross-lingual and multilingual protocols so a corpus contributes the same
// holdout in either, given the same seed.
std::pair<std::vector<std::string>, std::vector<std::string>> holdout_validation(
    const CorpusManifest& manifest, std::uint64_t seed) {
    auto groups =
        collect_groups(manifest, [](const ClipMeta& m) { return m.speaker_id; });
    if (groups.size() < 2) {
        throw ProtocolError("corpus '" + manifest.name +
                            "' needs at least 2 speakers to hold out a validation set, has " +
                            std::to_string(groups.size()));
    }
    Rng rng = manifest_rng(manifest, seed);
    auto assigned = greedy_partition(groups, {0.9, 0.1}, rng);
    return {collect_ids(assigned[0]), collect_ids(assigned[1])};
}

std::string corpus_prefix(const std::string& clip_id) {
    return clip_id.substr(0, clip_id.find('/'));
}

} // namespace

std::string to_string(Scenario s) {
    switch (s) {
        case Scenario::Monolingual: return "monolingual";
        case Scenario::SentenceIndependent: return "sentence-independent";
        case Scenario::CrossLingual: return "cross-lingual";
        case Scenario::Multilingual: return "multilingual";
    }
    throw ConfigError("invalid scenario value");
}

Scenario scenario_from_string(const std::string& s) {
    if (s == "monolingual") return Scenario::Monolingual;
    if (s == "sentence-independent") return Scenario::SentenceIndependent;
    if (s == "cross-lingual") return Scenario::CrossLingual;
    if (s == "multilingual") return Scenario::Multilingual;
    throw MappingError("unknown scenario '" + s +
                       "'; valid: monolingual, sentence-independent, cross-lingual, "
                       "multilingual");
}

SplitSpec speaker_split(const CorpusManifest& manifest, std::array<double, 3> ratios,
                        std::uint64_t seed) {
    std::vector<double> r(ratios.begin(), ratios.end());
    check_ratios(r);
    auto groups =
        collect_groups(manifest, [](const ClipMeta& m) { return m.speaker_id; });
    if (groups.size() < 3) {
        throw ProtocolError("speaker split needs at least 3 speakers; manifest '" +
                            manifest.name + "' has " + std::to_string(groups.size()));
    }
    Rng rng = manifest_rng(manifest, seed);
    auto assigned = greedy_partition(groups, r, rng);

    SplitSpec spec;
    spec.scenario = Scenario::Monolingual;
    spec.seed = seed;
    spec.ratios = r;
    spec.source_corpora = {manifest.name};
    spec.target_corpus = manifest.name;
    spec.train = collect_ids(assigned[0]);
    spec.validation = collect_ids(assigned[1]);
    spec.test = collect_ids(assigned[2]);
    return spec;
}

SplitSpec sentence_split(const CorpusManifest& manifest, std::array<double, 2> ratios,
                         std::uint64_t seed) {
    std::vector<double> r(ratios.begin(), ratios.end());
    check_ratios(r);
    for (const ClipMeta& entry : manifest.entries) {
        if (entry.sentence_id.empty()) {
            throw ProtocolError("sentence-independent protocol requires sentence identifiers; '" +
                                entry.clip_id + "' in manifest '" + manifest.name +
                                "' has none");
        }
    }
    auto groups =
        collect_groups(manifest, [](const ClipMeta& m) { return m.sentence_id; });
    if (groups.size() < 2) {
        throw ProtocolError("sentence split needs at least 2 sentences; manifest '" +
                            manifest.name + "' has " + std::to_string(groups.size()));
    }
    Rng rng = manifest_rng(manifest, seed);
    auto assigned = greedy_partition(groups, r, rng);

    SplitSpec spec;
    spec.scenario = Scenario::SentenceIndependent;
    spec.seed = seed;
    spec.ratios = r;
    spec.source_corpora = {manifest.name};
    spec.target_corpus = manifest.name;
    spec.train = collect_ids(assigned[0]);
    spec.test = collect_ids(assigned[1]);
    return spec;
}

SplitSpec cross_lingual_split(const CorpusManifest& train_manifest,
                              const CorpusManifest& test_manifest, std::uint64_t seed) {
    if (train_manifest.name == test_manifest.name) {
        throw ProtocolError("cross-lingual protocol requires distinct corpora; got '" +
                            train_manifest.name + "' on both sides");
    }
    SplitSpec spec;
    spec.scenario = Scenario::CrossLingual;
    spec.seed = seed;
    spec.ratios = {0.9, 0.1};
    spec.source_corpora = {train_manifest.name};
    spec.target_corpus = test_manifest.name;
    std::tie(spec.train, spec.validation) = holdout_validation(train_manifest, seed);
    for (const ClipMeta& entry : test_manifest.entries) spec.test.push_back(entry.clip_id);
    std::sort(spec.test.begin(), spec.test.end());
    return spec;
}

SplitSpec multilingual_split(const std::vector<CorpusManifest>& train_manifests,
                             const CorpusManifest& test_manifest, std::uint64_t seed) {
    if (train_manifests.size() < 2 || train_manifests.size() > 3) {
        throw ProtocolError("multilingual protocol takes two or three training corpora, got " +
                            std::to_string(train_manifests.size()));
    }
    std::set<std::string> names;
    for (const CorpusManifest& m : train_manifests) {
        if (!names.insert(m.name).second) {
            throw ProtocolError("training corpus '" + m.name + "' listed more than once");
        }
        if (m.name == test_manifest.name) {
            throw ProtocolError("test corpus '" + test_manifest.name +
                                "' cannot also be a training corpus");
        }
    }
    SplitSpec spec;
    spec.scenario = Scenario::Multilingual;
    spec.seed = seed;
    spec.ratios = {0.9, 0.1};
    spec.target_corpus = test_manifest.name;
    for (const CorpusManifest& m : train_manifests) {
        spec.source_corpora.push_back(m.name);
        auto [train_ids, val_ids] = holdout_validation(m, seed);
        spec.train.insert(spec.train.end(), train_ids.begin(), train_ids.end());
        spec.validation.insert(spec.validation.end(), val_ids.begin(), val_ids.end());
    }
    for (const ClipMeta& entry : test_manifest.entries) spec.test.push_back(entry.clip_id);
    std::sort(spec.train.begin(), spec.train.end());
    std::sort(spec.validation.begin(), spec.validation.end());
    std::sort(spec.test.begin(), spec.test.end());
    return spec;
}

namespace {

constexpr const char* kPartitionNames[3] = {"train", "validation", "test"};

struct ResolvedPartitions {
    // Per partition: resolved metadata in partition order.
    std::array<std::vector<const ClipMeta*>, 3> clips;
};

ResolvedPartitions resolve(const SplitSpec& spec,
                           const std::vector<CorpusManifest>& manifests) {
    std::map<std::string, const ClipMeta*> by_id;
    std::set<std::string> manifest_names;
    for (const CorpusManifest& m : manifests) {
        if (!manifest_names.insert(m.name).second) {
            throw ConfigError("duplicate manifest name '" + m.name + "' in lookup");
        }
        for (const ClipMeta& entry : m.entries) {
            if (!by_id.emplace(entry.clip_id, &entry).second) {
                throw ConfigError("duplicate clip id '" + entry.clip_id + "' in lookup");
            }
        }
    }

    ResolvedPartitions out;
    std::vector<std::string> missing;
    const std::vector<std::string>* parts[3] = {&spec.train, &spec.validation, &spec.test};
    for (int p = 0; p < 3; ++p) {
        for (const std::string& id : *parts[p]) {
            auto it = by_id.find(id);
            if (it == by_id.end()) {
                missing.push_back(id);
            } else {
                out.clips[p].push_back(it->second);
            }
        }
    }
    if (!missing.empty()) {
        std::string msg = "split references " + std::to_string(missing.size()) +
                          " clip id(s) absent from the manifests:";
        const std::size_t listed = std::min<std::size_t>(missing.size(), 20);
        for (std::size_t i = 0; i < listed; ++i) msg += "\n  " + missing[i];
        if (missing.size() > listed) msg += "\n  ...";
        throw ProtocolError(msg);
    }
    return out;
}

// Speaker identity is only meaningful within one corpus, so scope the key by
// the clip id's manifest prefix.
std::string speaker_key(const ClipMeta& m) {
    return corpus_prefix(m.clip_id) + "/" + m.speaker_id;
}

std::string sentence_key(const ClipMeta& m) {
    return corpus_prefix(m.clip_id) + "/" + m.sentence_id;
}

std::string join_names(const std::set<int>& parts) {
    std::string out;
    for (int p : parts) {
        if (!out.empty()) out += ", ";
        out += kPartitionNames[p];
    }
    return out;
}

} // namespace

std::string VerifyReport::render() const {
    std::ostringstream os;
    os << std::left << std::setw(14) << "Dataset";
    for (const char* col : {"Train(Pos)", "Train(Neg)", "Test(Pos)", "Test(Neg)",
                            "Val(Pos)", "Val(Neg)"}) {
        os << std::right << std::setw(12) << col;
    }
    os << '\n';
    auto row_line = [&os](const std::string& label, const PartitionCounts& tr,
                          const PartitionCounts& te, const PartitionCounts& va) {
        os << std::left << std::setw(14) << label;
        for (std::size_t v : {tr.n_positive, tr.n_negative, te.n_positive, te.n_negative,
                              va.n_positive, va.n_negative}) {
            os << std::right << std::setw(12) << v;
        }
        os << '\n';
    };
    for (const CorpusRow& row : rows) row_line(row.corpus, row.train, row.test, row.validation);
    if (rows.size() > 1) row_line("TOTAL", train, test, validation);
    for (const auto& [name, passed] : checks) {
        os << name << ": " << (passed ? "OK" : "FAIL") << '\n';
    }
    for (const std::string& failure : failures) os << "  - " << failure << '\n';
    os << "verification: " << (ok ? "OK" : "FAIL (" + std::to_string(failures.size()) + ")")
       << '\n';
    return os.str();
}

VerifyReport verify_split(const SplitSpec& spec,
                          const std::vector<CorpusManifest>& manifests) {
    ResolvedPartitions resolved = resolve(spec, manifests);
    VerifyReport report;

    // Partition disjointness applies to every scenario.
    {
        bool passed = true;
        std::map<std::string, std::set<int>> partitions_of;
        for (int p = 0; p < 3; ++p) {
            for (const ClipMeta* clip : resolved.clips[p]) {
                partitions_of[clip->clip_id].insert(p);
            }
        }
        for (const auto& [id, parts] : partitions_of) {
            if (parts.size() > 1) {
                passed = false;
                report.failures.push_back("clip '" + id + "' appears in partitions " +
                                          join_names(parts));
            }
        }
        report.checks.emplace_back("partitions-disjoint", passed);
    }

    auto check_key_independence = [&](const std::string& check_name, auto key_of,
                                      std::set<int> scope) {
        bool passed = true;
        std::map<std::string, std::set<int>> partitions_of;
        for (int p : scope) {
            for (const ClipMeta* clip : resolved.clips[p]) {
                partitions_of[key_of(*clip)].insert(p);
            }
        }
        for (const auto& [key, parts] : partitions_of) {
            if (parts.size() > 1) {
                passed = false;
                report.failures.push_back(check_name + " violated: '" + key +
                                          "' appears in partitions " + join_names(parts));
            }
        }
        report.checks.emplace_back(check_name, passed);
    };

    switch (spec.scenario) {
        case Scenario::Monolingual:
            check_key_independence("speaker-independent", speaker_key, {0, 1, 2});
            break;
        case Scenario::SentenceIndependent:
            check_key_independence("sentence-independent", sentence_key, {0, 2});
            break;
        case Scenario::CrossLingual:
        case Scenario::Multilingual: {
            bool passed = true;
            const std::set<std::string> sources(spec.source_corpora.begin(),
                                                spec.source_corpora.end());
            if (sources.count(spec.target_corpus) != 0) {
                passed = false;
                report.failures.push_back("target corpus '" + spec.target_corpus +
                                          "' is listed among the source corpora");
            }
            for (int p : {0, 1}) {
                for (const ClipMeta* clip : resolved.clips[p]) {
                    if (sources.count(corpus_prefix(clip->clip_id)) == 0) {
                        passed = false;
                        report.failures.push_back("clip '" + clip->clip_id + "' in " +
                                                  kPartitionNames[p] +
                                                  " is not from a source corpus");
                    }
                }
            }
            for (const ClipMeta* clip : resolved.clips[2]) {
                if (corpus_prefix(clip->clip_id) != spec.target_corpus) {
                    passed = false;
                    report.failures.push_back("clip '" + clip->clip_id +
                                              "' in test is not from target corpus '" +
                                              spec.target_corpus + "'");
                }
            }
            report.checks.emplace_back("corpus-separation", passed);
            check_key_independence("validation-speaker-independent", speaker_key, {0, 1});
            break;
        }
    }

    // Class-distribution table, one row per corpus.
    std::map<std::string, CorpusRow> rows;
    PartitionCounts* totals[3] = {&report.train, &report.validation, &report.test};
    for (int p = 0; p < 3; ++p) {
        for (const ClipMeta* clip : resolved.clips[p]) {
            CorpusRow& row = rows[corpus_prefix(clip->clip_id)];
            row.corpus = corpus_prefix(clip->clip_id);
            PartitionCounts* cell[3] = {&row.train, &row.validation, &row.test};
            if (clip->valence == corpus::Valence::Positive) {
                ++cell[p]->n_positive;
                ++totals[p]->n_positive;
            } else {
                ++cell[p]->n_negative;
                ++totals[p]->n_negative;
            }
        }
    }
    for (auto& [name, row] : rows) report.rows.push_back(std::move(row));

    report.ok = report.failures.empty();
    return report;
}

std::string to_json(const SplitSpec& spec) {
    nlohmann::json j;
    j["scenario"] = to_string(spec.scenario);
    j["seed"] = spec.seed;
    j["ratios"] = spec.ratios;
    j["source_corpora"] = spec.source_corpora;
    j["target_corpus"] = spec.target_corpus;
    j["train"] = spec.train;
    j["validation"] = spec.validation;
    j["test"] = spec.test;
    return j.dump(2) + "\n";
}

SplitSpec split_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("split json: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("split json: top level must be an object");

    static const std::set<std::string> known = {"scenario",       "seed",   "ratios",
                                                "source_corpora", "target_corpus",
                                                "train",          "validation", "test"};
    for (const auto& [key, value] : j.items()) {
        if (known.count(key) == 0) {
            throw ConfigError("split json: unknown key '" + key + "'");
        }
    }
    for (const std::string& key : known) {
        if (!j.contains(key)) throw ConfigError("split json: missing key '" + key + "'");
    }

    SplitSpec spec;
    if (!j["scenario"].is_string()) throw ConfigError("split json: 'scenario' must be a string");
    spec.scenario = scenario_from_string(j["scenario"].get<std::string>());
    if (!j["seed"].is_number_unsigned()) {
        throw ConfigError("split json: 'seed' must be a non-negative integer");
    }
    spec.seed = j["seed"].get<std::uint64_t>();
    if (!j["ratios"].is_array()) throw ConfigError("split json: 'ratios' must be an array");
    for (const auto& r : j["ratios"]) {
        if (!r.is_number()) throw ConfigError("split json: 'ratios' entries must be numbers");
        spec.ratios.push_back(r.get<double>());
    }
    if (!j["target_corpus"].is_string()) {
        throw ConfigError("split json: 'target_corpus' must be a string");
    }
    spec.target_corpus = j["target_corpus"].get<std::string>();

    auto read_strings = [&j](const char* key) {
        if (!j[key].is_array()) {
            throw ConfigError(std::string("split json: '") + key + "' must be an array");
        }
        std::vector<std::string> out;
        for (const auto& v : j[key]) {
            if (!v.is_string()) {
                throw ConfigError(std::string("split json: '") + key +
                                  "' entries must be strings");
            }
            out.push_back(v.get<std::string>());
        }
        return out;
    };
    spec.source_corpora = read_strings("source_corpora");
    spec.train = read_strings("train");
    spec.validation = read_strings("validation");
    spec.test = read_strings("test");
    return spec;
}

void write_split_json(const std::filesystem::path& path, const SplitSpec& spec) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << to_json(spec);
    if (!out.flush()) throw IoError("failed writing " + path.string());
}

SplitSpec read_split_json(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return split_from_json(buffer.str());
}

} // namespace ser::splits
