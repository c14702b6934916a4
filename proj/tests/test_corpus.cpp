#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ser/audio_io.hpp"
#include "ser/corpus.hpp"
#include "ser/error.hpp"

using namespace ser;
using corpus::ClipMeta;
using corpus::CorpusKind;
using corpus::Valence;

namespace {

std::filesystem::path fresh_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

void write_tone(const std::filesystem::path& path, double seconds, int rate = 16000) {
    audio::Clip c;
    c.sample_rate = rate;
    c.channels = 1;
    const std::size_t n = static_cast<std::size_t>(seconds * rate);
    c.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        c.samples[i] = static_cast<float>(0.4 * std::sin(0.07 * static_cast<double>(i)));
    }
    std::filesystem::create_directories(path.parent_path());
    audio::write_wav_pcm16(path, c);
}

} // namespace

TEST_SUITE("corpus") {

TEST_CASE("valence mapping follows the published tables") {
    CHECK(corpus::to_valence(CorpusKind::RAVDESS, "calm") == Valence::Positive);
    CHECK(corpus::to_valence(CorpusKind::EMODB, "boredom") == Valence::Negative);

    // ASED: neutral/happy positive, fear/sadness/angry negative
    CHECK(corpus::to_valence(CorpusKind::ASED, "neutral") == Valence::Positive);
    CHECK(corpus::to_valence(CorpusKind::ASED, "happy") == Valence::Positive);
    CHECK(corpus::to_valence(CorpusKind::ASED, "fear") == Valence::Negative);
    CHECK(corpus::to_valence(CorpusKind::ASED, "sadness") == Valence::Negative);
    CHECK(corpus::to_valence(CorpusKind::ASED, "angry") == Valence::Negative);
    // RAVDESS adds calm/surprise positive, disgust negative
    CHECK(corpus::to_valence(CorpusKind::RAVDESS, "neutral") == Valence::Positive);
    CHECK(corpus::to_valence(CorpusKind::RAVDESS, "surprise") == Valence::Positive);
    CHECK(corpus::to_valence(CorpusKind::RAVDESS, "disgust") == Valence::Negative);
    CHECK(corpus::to_valence(CorpusKind::RAVDESS, "fear") == Valence::Negative);
    // EMO-DB: only neutral/happiness positive
    CHECK(corpus::to_valence(CorpusKind::EMODB, "happiness") == Valence::Positive);
    CHECK(corpus::to_valence(CorpusKind::EMODB, "anger") == Valence::Negative);
    CHECK(corpus::to_valence(CorpusKind::EMODB, "sadness") == Valence::Negative);
    // URDU: four emotions
    CHECK(corpus::to_valence(CorpusKind::URDU, "happy") == Valence::Positive);
    CHECK(corpus::to_valence(CorpusKind::URDU, "sad") == Valence::Negative);
    CHECK(corpus::to_valence(CorpusKind::URDU, "angry") == Valence::Negative);
}

TEST_CASE("valence mapping is total per corpus and errors elsewhere") {
    for (CorpusKind k : {CorpusKind::ASED, CorpusKind::RAVDESS, CorpusKind::EMODB,
                         CorpusKind::URDU, CorpusKind::SYNTH}) {
        for (const auto& label : corpus::emotion_labels(k)) {
            CHECK_NOTHROW(corpus::to_valence(k, label));
        }
    }
    // labels that belong to a different corpus are still errors
    CHECK_THROWS_AS(corpus::to_valence(CorpusKind::ASED, "surprise"), MappingError);
    CHECK_THROWS_AS(corpus::to_valence(CorpusKind::URDU, "sadness"), MappingError);
    CHECK_THROWS_AS(corpus::to_valence(CorpusKind::EMODB, "happy"), MappingError);
    try {
        corpus::to_valence(CorpusKind::ASED, "surprise");
        FAIL("expected mapping error");
    } catch (const MappingError& e) {
        const std::string msg = e.what(); // must list the valid labels
        CHECK(msg.find("neutral") != std::string::npos);
        CHECK(msg.find("angry") != std::string::npos);
    }
}

TEST_CASE("ravdess filenames parse to emotion, speaker, statement") {
    const ClipMeta m = corpus::parse_filename(CorpusKind::RAVDESS, "03-01-06-01-02-01-12.wav");
    CHECK(m.emotion == "fear"); // code 06, canonicalized
    CHECK(m.speaker_id == "12");
    CHECK(m.sentence_id == "02");
    CHECK(m.valence == Valence::Negative);

    // actor directory prefixes are fine; the name carries the fields
    const ClipMeta n =
        corpus::parse_filename(CorpusKind::RAVDESS, "Actor_05/03-01-02-02-01-02-05.wav");
    CHECK(n.emotion == "calm");
    CHECK(n.speaker_id == "05");
    CHECK(n.valence == Valence::Positive);

    CHECK_THROWS_AS(corpus::parse_filename(CorpusKind::RAVDESS, "99-xx.wav"), ParseError);
    CHECK_THROWS_AS(corpus::parse_filename(CorpusKind::RAVDESS, "03-01-3-01-02-01-12.wav"),
                    ParseError);
    // well-formed but unknown emotion code
    CHECK_THROWS_AS(corpus::parse_filename(CorpusKind::RAVDESS, "03-01-09-01-02-01-12.wav"),
                    MappingError);
}

TEST_CASE("emodb filenames parse to speaker, sentence, emotion letter") {
    const ClipMeta m = corpus::parse_filename(CorpusKind::EMODB, "03a01Fa.wav");
    CHECK(m.speaker_id == "03");
    CHECK(m.sentence_id == "a01");
    CHECK(m.emotion == "happiness");
    CHECK(m.valence == Valence::Positive);

    CHECK(corpus::parse_filename(CorpusKind::EMODB, "16b10Wb.wav").emotion == "anger");
    CHECK(corpus::parse_filename(CorpusKind::EMODB, "08a07Lc.wav").emotion == "boredom");

    CHECK_THROWS_AS(corpus::parse_filename(CorpusKind::EMODB, "3a01Fa.wav"), ParseError);
    CHECK_THROWS_AS(corpus::parse_filename(CorpusKind::EMODB, "03a01F.wav"), ParseError);
    CHECK_THROWS_AS(corpus::parse_filename(CorpusKind::EMODB, "03a01Xa.wav"), MappingError);
}

TEST_CASE("directory-per-emotion layouts parse speaker prefixes") {
    const ClipMeta u = corpus::parse_filename(CorpusKind::URDU, "Angry/SM1_F10_A010.wav");
    CHECK(u.emotion == "angry");
    CHECK(u.speaker_id == "SM1");
    CHECK(u.sentence_id.empty());
    CHECK(u.valence == Valence::Negative);

    const ClipMeta a = corpus::parse_filename(CorpusKind::ASED, "happy/s05_a03_001.wav");
    CHECK(a.emotion == "happy");
    CHECK(a.speaker_id == "s05");
    CHECK(a.sentence_id == "a03");

    const ClipMeta s3 = corpus::parse_filename(CorpusKind::SYNTH, "sad/sp02_t04_c001.wav");
    CHECK(s3.speaker_id == "sp02");
    CHECK(s3.sentence_id == "t04");
    const ClipMeta s2 = corpus::parse_filename(CorpusKind::SYNTH, "happy/sp02_c001.wav");
    CHECK(s2.sentence_id.empty());

    CHECK_THROWS_AS(corpus::parse_filename(CorpusKind::ASED, "happy/s05_001.wav"), ParseError);
    CHECK_THROWS_AS(corpus::parse_filename(CorpusKind::URDU, "SM1.wav"), ParseError);
    CHECK_THROWS_AS(corpus::parse_filename(CorpusKind::URDU, "Bored/SM1_001.wav"), MappingError);
}

TEST_CASE("scan builds a sorted, counted manifest") {
    const auto root = fresh_dir("ser_scan_urdu");
    write_tone(root / "Angry" / "SM1_F10_A010.wav", 2.5);
    write_tone(root / "Angry" / "SF2_F03_A002.wav", 2.5);
    write_tone(root / "Happy" / "SM1_F11_H005.wav", 3.5);
    write_tone(root / "Neutral" / "SM3_F01_N001.wav", 3.1);

    const auto manifest = corpus::scan_corpus(root, CorpusKind::URDU);
    CHECK(manifest.name == "URDU");
    REQUIRE(manifest.entries.size() == 4);
    CHECK(manifest.n_positive == 2);
    CHECK(manifest.n_negative == 2);
    CHECK(manifest.speakers() == std::set<std::string>{"SM1", "SF2", "SM3"});
    for (std::size_t i = 1; i < manifest.entries.size(); ++i) {
        CHECK(manifest.entries[i - 1].clip_id < manifest.entries[i].clip_id);
    }
    CHECK(manifest.entries[0].clip_id == "URDU/Angry/SF2_F03_A002");
    CHECK(manifest.entries[0].duration_s == doctest::Approx(2.5));
}

TEST_CASE("scan reports every failing file and keeps nothing partial") {
    const auto root = fresh_dir("ser_scan_bad");
    write_tone(root / "Angry" / "SM1_F10_A010.wav", 1.0);
    write_tone(root / "Angry" / "badname.wav", 1.0);
    write_tone(root / "Confused" / "SM2_C001.wav", 1.0);
    try {
        corpus::scan_corpus(root, CorpusKind::URDU);
        FAIL("expected aggregate parse error");
    } catch (const ParseError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("2 file(s)") != std::string::npos);
        CHECK(msg.find("badname") != std::string::npos);
        CHECK(msg.find("Confused") != std::string::npos);
    }
}

TEST_CASE("scan of an empty directory yields an empty manifest") {
    const auto root = fresh_dir("ser_scan_empty");
    const auto manifest = corpus::scan_corpus(root, CorpusKind::RAVDESS);
    CHECK(manifest.entries.empty());
    CHECK(manifest.n_positive == 0);
    CHECK(manifest.n_negative == 0);
    CHECK(corpus::corpus_stats(manifest).histogram.empty());
}

TEST_CASE("duration stats bucket by whole seconds") {
    corpus::CorpusManifest m;
    m.kind = CorpusKind::URDU;
    m.name = "URDU";
    auto add = [&](double d) {
        ClipMeta e;
        e.clip_id = "c" + std::to_string(m.entries.size());
        e.corpus = CorpusKind::URDU;
        e.emotion = "happy";
        e.valence = Valence::Positive;
        e.duration_s = d;
        m.entries.push_back(e);
    };

    SUBCASE("singleton clip occupies one bucket with zero spread") {
        add(2.2);
        const auto s = corpus::corpus_stats(m);
        CHECK(s.histogram == std::map<int, std::size_t>{{2, 1}});
        CHECK(s.mean == doctest::Approx(2.0));
        CHECK(s.stddev == doctest::Approx(0.0));
    }

    SUBCASE("two equal buckets give the published half-split statistics") {
        // 200 clips in [2,3), 200 in [3,4): mean 2.5, STD 0.5
        for (int i = 0; i < 200; ++i) add(2.0 + 0.004 * i);
        for (int i = 0; i < 200; ++i) add(3.0 + 0.004 * i);
        const auto s = corpus::corpus_stats(m);
        CHECK(s.histogram.at(2) == 200);
        CHECK(s.histogram.at(3) == 200);
        CHECK(s.mean == doctest::Approx(2.5));
        CHECK(s.stddev == doctest::Approx(0.5));
    }

    SUBCASE("a single bucket has zero deviation") {
        // 1440 clips all in [3,4): mean 3, STD 0
        for (int i = 0; i < 1440; ++i) add(3.0 + 0.0005 * i);
        const auto s = corpus::corpus_stats(m);
        CHECK(s.histogram == std::map<int, std::size_t>{{3, 1440}});
        CHECK(s.mean == doctest::Approx(3.0));
        CHECK(s.stddev == doctest::Approx(0.0));
    }

    SUBCASE("skewed multi-bucket distribution matches hand arithmetic") {
        // published bucket counts for the 535-clip German corpus
        const std::vector<std::pair<int, int>> buckets = {
            {1, 126}, {2, 224}, {3, 136}, {4, 24}, {5, 20}, {6, 3}, {7, 1}, {8, 1}};
        double sum = 0.0;
        double sumsq = 0.0;
        int n = 0;
        for (const auto& [value, count] : buckets) {
            for (int i = 0; i < count; ++i) add(value + 0.5);
            sum += static_cast<double>(value) * count;
            sumsq += static_cast<double>(value) * value * count;
            n += count;
        }
        REQUIRE(n == 535);
        const double mean = sum / n;
        const double std = std::sqrt(sumsq / n - mean * mean);
        const auto s = corpus::corpus_stats(m);
        CHECK(s.mean == doctest::Approx(mean).epsilon(1e-12));
        CHECK(s.stddev == doctest::Approx(std).epsilon(1e-12));
        CHECK(s.stddev == doctest::Approx(1.067).epsilon(1e-3)); // published STD
    }
}

TEST_CASE("manifest csv round-trips exactly") {
    const auto dir = fresh_dir("ser_manifest_rt");
    std::vector<ClipMeta> rows;
    ClipMeta a;
    a.clip_id = "URDU/Angry/SM1_F10_A010";
    a.path = "/data/urdu/Angry/SM1_F10_A010.wav";
    a.corpus = CorpusKind::URDU;
    a.speaker_id = "SM1";
    a.emotion = "angry";
    a.valence = Valence::Negative;
    a.duration_s = 2.4681234567891234;
    rows.push_back(a);
    ClipMeta b;
    b.clip_id = "EMODB/03a01Fa";
    b.path = "/data/emodb, with comma/03a01Fa.wav"; // forces quoting
    b.corpus = CorpusKind::EMODB;
    b.speaker_id = "03";
    b.sentence_id = "a01";
    b.emotion = "happiness";
    b.valence = Valence::Positive;
    b.duration_s = 1.0 / 3.0;
    rows.push_back(b);

    const auto path = dir / "manifest.csv";
    corpus::write_manifest_csv(path, rows);
    const auto back = corpus::read_manifest_csv(path);
    REQUIRE(back.size() == 2);
    CHECK(back[0] == rows[0]);
    CHECK(back[1] == rows[1]);

    // header line is fixed, LF-terminated
    std::ifstream in(path, std::ios::binary);
    std::string first;
    std::getline(in, first);
    CHECK(first == "clip_id,path,corpus,speaker_id,sentence_id,emotion,valence,duration_s");
    CHECK(first.find('\r') == std::string::npos);
}

TEST_CASE("manifest csv rejects inconsistent rows") {
    const auto dir = fresh_dir("ser_manifest_bad");
    const auto path = dir / "m.csv";
    const std::string header =
        "clip_id,path,corpus,speaker_id,sentence_id,emotion,valence,duration_s\n";

    {
        std::ofstream out(path, std::ios::binary);
        out << header << "c1,/x.wav,URDU,SM1,,angry,Positive,2.0\n"; // wrong valence
    }
    CHECK_THROWS_AS(corpus::read_manifest_csv(path), MappingError);

    {
        std::ofstream out(path, std::ios::binary);
        out << header << "c1,/x.wav,URDU,SM1,,angry,Negative,2.0\n"
            << "c1,/y.wav,URDU,SM2,,happy,Positive,2.0\n"; // duplicate id
    }
    CHECK_THROWS_AS(corpus::read_manifest_csv(path), ParseError);

    {
        std::ofstream out(path, std::ios::binary);
        out << "clip_id,path\n";
    }
    CHECK_THROWS_AS(corpus::read_manifest_csv(path), ParseError);

    {
        std::ofstream out(path, std::ios::binary);
        out << header << "c1,/x.wav,URDU,SM1,,angry,Negative,fast\n"; // bad duration
    }
    CHECK_THROWS_AS(corpus::read_manifest_csv(path), ParseError);
}

} // TEST_SUITE
