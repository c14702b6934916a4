#include "ser/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "ser/audio_io.hpp"
#include "ser/error.hpp"

namespace ser::corpus {

namespace {

std::string lower(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

// Canonical label -> valence, one table per corpus. The label sets must stay
// exactly the published mapping; to_valence treats anything else as an error.
const std::vector<std::pair<std::string, Valence>>& valence_table(CorpusKind k) {
    static const std::vector<std::pair<std::string, Valence>> ased = {
        {"neutral", Valence::Positive}, {"happy", Valence::Positive},
        {"fear", Valence::Negative},    {"sadness", Valence::Negative},
        {"angry", Valence::Negative},
    };
    static const std::vector<std::pair<std::string, Valence>> ravdess = {
        {"neutral", Valence::Positive}, {"happy", Valence::Positive},
        {"calm", Valence::Positive},    {"surprise", Valence::Positive},
        {"fear", Valence::Negative},    {"sadness", Valence::Negative},
        {"angry", Valence::Negative},   {"disgust", Valence::Negative},
    };
    static const std::vector<std::pair<std::string, Valence>> emodb = {
        {"neutral", Valence::Positive},  {"happiness", Valence::Positive},
        {"anger", Valence::Negative},    {"sadness", Valence::Negative},
        {"fear", Valence::Negative},     {"disgust", Valence::Negative},
        {"boredom", Valence::Negative},
    };
    static const std::vector<std::pair<std::string, Valence>> urdu = {
        {"neutral", Valence::Positive}, {"happy", Valence::Positive},
        {"angry", Valence::Negative},   {"sad", Valence::Negative},
    };
    static const std::vector<std::pair<std::string, Valence>> synth = {
        {"happy", Valence::Positive}, {"sad", Valence::Negative},
    };
    switch (k) {
        case CorpusKind::ASED: return ased;
        case CorpusKind::RAVDESS: return ravdess;
        case CorpusKind::EMODB: return emodb;
        case CorpusKind::URDU: return urdu;
        case CorpusKind::SYNTH: return synth;
    }
    throw ConfigError("unknown corpus kind");
}

std::string join_labels(CorpusKind k) {
    std::string out;
    for (const auto& [label, v] : valence_table(k)) {
        if (!out.empty()) out += ", ";
        out += label;
    }
    return out;
}

bool all_digits(std::string_view s) {
    if (s.empty()) return false;
    return std::all_of(s.begin(), s.end(),
                       [](char c) { return c >= '0' && c <= '9'; });
}

ClipMeta parse_ravdess(const std::string& stem) {
    // MM-VC-EE-II-SS-RR-AA: seven two-digit fields.
    std::vector<std::string> fields;
    std::size_t pos = 0;
    while (pos <= stem.size()) {
        const std::size_t dash = stem.find('-', pos);
        fields.push_back(stem.substr(pos, dash == std::string::npos ? dash : dash - pos));
        if (dash == std::string::npos) break;
        pos = dash + 1;
    }
    if (fields.size() != 7) {
        throw ParseError("ravdess name '" + stem + "': expected 7 dash-separated fields, got " +
                         std::to_string(fields.size()));
    }
    for (std::size_t i = 0; i < 7; ++i) {
        if (fields[i].size() != 2 || !all_digits(fields[i])) {
            throw ParseError("ravdess name '" + stem + "': field " + std::to_string(i + 1) +
                             " is not a two-digit code");
        }
    }
    static const std::unordered_map<std::string, std::string> emotion_codes = {
        {"01", "neutral"}, {"02", "calm"},   {"03", "happy"},   {"04", "sadness"},
        {"05", "angry"},   {"06", "fear"},   {"07", "disgust"}, {"08", "surprise"},
    };
    const auto it = emotion_codes.find(fields[2]);
    if (it == emotion_codes.end()) {
        throw MappingError("ravdess name '" + stem + "': unknown emotion code '" + fields[2] +
                           "' (valid: 01..08)");
    }
    ClipMeta meta;
    meta.corpus = CorpusKind::RAVDESS;
    meta.emotion = it->second;
    meta.sentence_id = fields[4]; // statement
    meta.speaker_id = fields[6];  // actor
    return meta;
}

ClipMeta parse_emodb(const std::string& stem) {
    // SStxxEV: speaker (2 digits), sentence (letter + 2 digits), emotion
    // letter, version letter.
    if (stem.size() != 7) {
        throw ParseError("emodb name '" + stem + "': expected 7 characters, got " +
                         std::to_string(stem.size()));
    }
    if (!all_digits(stem.substr(0, 2)))
        throw ParseError("emodb name '" + stem + "': characters 1-2 must be the speaker digits");
    if (!std::isalpha(static_cast<unsigned char>(stem[2])) || !all_digits(stem.substr(3, 2)))
        throw ParseError("emodb name '" + stem +
                         "': characters 3-5 must be a sentence code (letter + 2 digits)");
    if (!std::isalpha(static_cast<unsigned char>(stem[6])))
        throw ParseError("emodb name '" + stem + "': character 7 must be a version letter");
    static const std::unordered_map<char, std::string> emotion_letters = {
        {'W', "anger"},   {'L', "boredom"}, {'E', "disgust"}, {'A', "fear"},
        {'F', "happiness"}, {'T', "sadness"}, {'N', "neutral"},
    };
    const auto it = emotion_letters.find(stem[5]);
    if (it == emotion_letters.end()) {
        throw MappingError("emodb name '" + stem + "': unknown emotion letter '" +
                           std::string(1, stem[5]) + "' (valid: W L E A F T N)");
    }
    ClipMeta meta;
    meta.corpus = CorpusKind::EMODB;
    meta.speaker_id = stem.substr(0, 2);
    meta.sentence_id = stem.substr(2, 3);
    meta.emotion = it->second;
    return meta;
}

// Directory-per-emotion layouts: <emotion>/<speaker>_<sentence>_<take>.wav
// for ASED (sentence field required), the same for SYNTH with the sentence
// field optional, and <speaker>_<rest...>.wav for URDU (speaker prefix only;
// the corpus does not identify sentences).
ClipMeta parse_emotion_dir(CorpusKind kind, const std::string& rel,
                           const std::string& dir, const std::string& stem) {
    if (dir.empty()) {
        throw ParseError(to_string(kind) + " path '" + rel +
                         "': expected an <emotion>/<file>.wav layout");
    }
    const std::string emotion = lower(dir);
    const auto& table = valence_table(kind);
    const bool known = std::any_of(table.begin(), table.end(),
                                   [&](const auto& p) { return p.first == emotion; });
    if (!known) {
        throw MappingError(to_string(kind) + " path '" + rel + "': directory '" + dir +
                           "' is not an emotion label (valid: " + join_labels(kind) + ")");
    }
    std::vector<std::string> parts;
    std::size_t pos = 0;
    while (pos <= stem.size()) {
        const std::size_t us = stem.find('_', pos);
        parts.push_back(stem.substr(pos, us == std::string::npos ? us : us - pos));
        if (us == std::string::npos) break;
        pos = us + 1;
    }
    ClipMeta meta;
    meta.corpus = kind;
    meta.emotion = emotion;
    if (kind == CorpusKind::ASED) {
        if (parts.size() != 3) {
            throw ParseError("ASED name '" + stem +
                             "': expected speaker_sentence_take fields separated by '_'");
        }
        meta.speaker_id = parts[0];
        meta.sentence_id = parts[1];
    } else if (kind == CorpusKind::SYNTH) {
        if (parts.size() == 3) {
            meta.speaker_id = parts[0];
            meta.sentence_id = parts[1];
        } else if (parts.size() == 2) {
            meta.speaker_id = parts[0];
        } else {
            throw ParseError("SYNTH name '" + stem +
                             "': expected speaker[_sentence]_take fields separated by '_'");
        }
    } else { // URDU
        if (parts.size() < 2) {
            throw ParseError("URDU name '" + stem +
                             "': expected a speaker prefix separated by '_'");
        }
        meta.speaker_id = parts[0];
    }
    if (meta.speaker_id.empty() ||
        std::any_of(parts.begin(), parts.end(), [](const std::string& p) { return p.empty(); })) {
        throw ParseError(to_string(kind) + " name '" + stem + "': empty field");
    }
    return meta;
}

// Shortest decimal digits that parse back to the same double.
std::string format_double_exact(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += '"';
    return out;
}

std::vector<std::string> split_csv_line(const std::string& line, std::size_t line_no) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur += c;
            }
        } else if (c == '"' && cur.empty()) {
            quoted = true;
        } else if (c == ',') {
            fields.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (quoted) {
        throw ParseError("manifest line " + std::to_string(line_no) + ": unterminated quote");
    }
    fields.push_back(std::move(cur));
    return fields;
}

} // namespace

std::string to_string(Valence v) {
    return v == Valence::Positive ? "Positive" : "Negative";
}

std::string to_string(CorpusKind k) {
    switch (k) {
        case CorpusKind::ASED: return "ASED";
        case CorpusKind::RAVDESS: return "RAVDESS";
        case CorpusKind::EMODB: return "EMODB";
        case CorpusKind::URDU: return "URDU";
        case CorpusKind::SYNTH: return "SYNTH";
    }
    throw ConfigError("unknown corpus kind");
}

Valence valence_from_string(const std::string& s) {
    if (s == "Positive") return Valence::Positive;
    if (s == "Negative") return Valence::Negative;
    throw ParseError("unknown valence '" + s + "' (valid: Positive, Negative)");
}

CorpusKind kind_from_string(const std::string& s) {
    const std::string u = lower(s);
    if (u == "ased") return CorpusKind::ASED;
    if (u == "ravdess") return CorpusKind::RAVDESS;
    if (u == "emodb" || u == "emo-db") return CorpusKind::EMODB;
    if (u == "urdu") return CorpusKind::URDU;
    if (u == "synth") return CorpusKind::SYNTH;
    throw ParseError("unknown corpus '" + s +
                     "' (valid: ased, ravdess, emodb, urdu, synth)");
}

Valence to_valence(CorpusKind corpus, const std::string& emotion) {
    for (const auto& [label, v] : valence_table(corpus)) {
        if (label == emotion) return v;
    }
    throw MappingError("emotion '" + emotion + "' is not defined for " + to_string(corpus) +
                       " (valid: " + join_labels(corpus) + ")");
}

const std::vector<std::string>& emotion_labels(CorpusKind corpus) {
    static std::map<CorpusKind, std::vector<std::string>> cache;
    auto it = cache.find(corpus);
    if (it == cache.end()) {
        std::vector<std::string> labels;
        for (const auto& [label, v] : valence_table(corpus)) labels.push_back(label);
        it = cache.emplace(corpus, std::move(labels)).first;
    }
    return it->second;
}

ClipMeta parse_filename(CorpusKind corpus, const std::string& relative_path) {
    const std::filesystem::path rel(relative_path);
    std::string stem = rel.stem().string();
    const std::string dir = rel.parent_path().filename().string();

    ClipMeta meta;
    switch (corpus) {
        case CorpusKind::RAVDESS:
            meta = parse_ravdess(stem);
            break;
        case CorpusKind::EMODB:
            meta = parse_emodb(stem);
            break;
        case CorpusKind::ASED:
        case CorpusKind::SYNTH:
        case CorpusKind::URDU:
            meta = parse_emotion_dir(corpus, relative_path, dir, stem);
            break;
    }
    meta.valence = to_valence(corpus, meta.emotion);
    return meta;
}

void CorpusManifest::recount() {
    n_positive = 0;
    n_negative = 0;
    for (const auto& e : entries) {
        (e.valence == Valence::Positive ? n_positive : n_negative)++;
    }
}

void CorpusManifest::validate() const {
    std::set<std::string> seen;
    std::size_t pos = 0;
    std::size_t neg = 0;
    for (const auto& e : entries) {
        if (!seen.insert(e.clip_id).second) {
            throw ParseError("manifest: duplicate clip_id '" + e.clip_id + "'");
        }
        if (to_valence(e.corpus, e.emotion) != e.valence) {
            throw MappingError("manifest: clip '" + e.clip_id + "' claims " +
                               to_string(e.valence) + " for emotion '" + e.emotion + "'");
        }
        (e.valence == Valence::Positive ? pos : neg)++;
    }
    if (pos != n_positive || neg != n_negative) {
        throw ParseError("manifest: stored counts " + std::to_string(n_positive) + "/" +
                         std::to_string(n_negative) + " differ from tallies " +
                         std::to_string(pos) + "/" + std::to_string(neg));
    }
}

std::set<std::string> CorpusManifest::speakers() const {
    std::set<std::string> out;
    for (const auto& e : entries) out.insert(e.speaker_id);
    return out;
}

std::set<std::string> CorpusManifest::sentences() const {
    std::set<std::string> out;
    for (const auto& e : entries) {
        if (!e.sentence_id.empty()) out.insert(e.sentence_id);
    }
    return out;
}

CorpusManifest scan_corpus(const std::filesystem::path& root, CorpusKind kind,
                           const std::string& name) {
    if (!std::filesystem::is_directory(root)) {
        throw IoError("scan: '" + root.string() + "' is not a directory");
    }
    CorpusManifest manifest;
    manifest.kind = kind;
    manifest.name = name.empty() ? to_string(kind) : name;

    std::vector<std::string> failures;
    for (const auto& entry : std::filesystem::recursive_directory_iterator(root)) {
        if (!entry.is_regular_file()) continue;
        const std::string ext = lower(entry.path().extension().string());
        if (ext != ".wav") continue;
        const std::string rel = entry.path().lexically_relative(root).generic_string();
        try {
            ClipMeta meta = parse_filename(kind, rel);
            const audio::WavInfo info = audio::read_wav_info(entry.path());
            meta.path = entry.path().generic_string();
            meta.duration_s = info.duration_s();
            std::string id = rel.substr(0, rel.size() - 4); // strip .wav
            meta.clip_id = manifest.name + "/" + id;
            manifest.entries.push_back(std::move(meta));
        } catch (const Error& e) {
            failures.push_back(rel + ": " + e.what());
        }
    }
    if (!failures.empty()) {
        std::sort(failures.begin(), failures.end());
        std::string report = "scan: " + std::to_string(failures.size()) +
                             " file(s) failed to parse:";
        const std::size_t shown = std::min<std::size_t>(failures.size(), 50);
        for (std::size_t i = 0; i < shown; ++i) report += "\n  " + failures[i];
        if (shown < failures.size()) {
            report += "\n  ... and " + std::to_string(failures.size() - shown) + " more";
        }
        throw ParseError(report);
    }
    std::sort(manifest.entries.begin(), manifest.entries.end(),
              [](const ClipMeta& a, const ClipMeta& b) { return a.clip_id < b.clip_id; });
    manifest.recount();
    manifest.validate();
    return manifest;
}

DurationStats corpus_stats(const CorpusManifest& manifest) {
    DurationStats stats;
    if (manifest.entries.empty()) return stats;
    double sum = 0.0;
    double sumsq = 0.0;
    for (const auto& e : manifest.entries) {
        const int bucket = static_cast<int>(std::floor(e.duration_s));
        stats.histogram[bucket]++;
        sum += bucket;
        sumsq += static_cast<double>(bucket) * bucket;
    }
    const double n = static_cast<double>(manifest.entries.size());
    stats.mean = sum / n;
    stats.stddev = std::sqrt(std::max(0.0, sumsq / n - stats.mean * stats.mean));
    return stats;
}

void write_manifest_csv(const std::filesystem::path& path,
                        const std::vector<ClipMeta>& entries) {
    std::ofstream out(path, std::ios::binary); // binary: LF endings everywhere
    if (!out) throw IoError("cannot create " + path.string());
    out << "clip_id,path,corpus,speaker_id,sentence_id,emotion,valence,duration_s\n";
    for (const auto& e : entries) {
        out << csv_field(e.clip_id) << ',' << csv_field(e.path) << ','
            << to_string(e.corpus) << ',' << csv_field(e.speaker_id) << ','
            << csv_field(e.sentence_id) << ',' << csv_field(e.emotion) << ','
            << to_string(e.valence) << ',' << format_double_exact(e.duration_s) << '\n';
    }
    if (!out) throw IoError("short write on " + path.string());
}

std::vector<ClipMeta> read_manifest_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw ParseError("manifest " + path.string() + ": empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string header = "clip_id,path,corpus,speaker_id,sentence_id,emotion,valence,duration_s";
    if (line != header) {
        throw ParseError("manifest " + path.string() + ": bad header '" + line + "'");
    }
    std::vector<ClipMeta> entries;
    std::set<std::string> seen;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto fields = split_csv_line(line, line_no);
        if (fields.size() != 8) {
            throw ParseError("manifest line " + std::to_string(line_no) + ": expected 8 fields, got " +
                             std::to_string(fields.size()));
        }
        ClipMeta e;
        e.clip_id = fields[0];
        e.path = fields[1];
        e.corpus = kind_from_string(fields[2]);
        e.speaker_id = fields[3];
        e.sentence_id = fields[4];
        e.emotion = fields[5];
        e.valence = valence_from_string(fields[6]);
        const char* begin = fields[7].data();
        const char* end = begin + fields[7].size();
        const auto res = std::from_chars(begin, end, e.duration_s);
        if (res.ec != std::errc() || res.ptr != end) {
            throw ParseError("manifest line " + std::to_string(line_no) + ": bad duration '" +
                             fields[7] + "'");
        }
        if (to_valence(e.corpus, e.emotion) != e.valence) {
            throw MappingError("manifest line " + std::to_string(line_no) + ": emotion '" +
                               e.emotion + "' maps to " + to_string(to_valence(e.corpus, e.emotion)) +
                               ", row claims " + to_string(e.valence));
        }
        if (!seen.insert(e.clip_id).second) {
            throw ParseError("manifest line " + std::to_string(line_no) + ": duplicate clip_id '" +
                             e.clip_id + "'");
        }
        entries.push_back(std::move(e));
    }
    return entries;
}

} // namespace ser::corpus
