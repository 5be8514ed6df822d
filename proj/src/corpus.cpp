#include "splm/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "splm/serialize.hpp"

namespace splm {

namespace {

constexpr char kMagic[9] = "SPLM-CP1";

int32_t sample_index(const std::vector<double>& probs, Rng& rng) {
    const double u = rng.next_double();
    double acc = 0;
    for (size_t i = 0; i < probs.size(); ++i) {
        acc += probs[i];
        if (u < acc) return static_cast<int32_t>(i);
    }
    return static_cast<int32_t>(probs.size()) - 1;
}

int32_t sample_duration(const DurationLaw& law, Rng& rng) {
    const double d = law.mean + law.stddev * rng.next_gaussian();
    const int32_t rounded = static_cast<int32_t>(std::floor(d + 0.5));
    return std::max(law.min_frames, rounded);
}

}  // namespace

double ToyLanguageSpec::min_prototype_distance() const {
    double best = std::numeric_limits<double>::infinity();
    for (int64_t a = 0; a < prototypes.rows(); ++a)
        for (int64_t b = a + 1; b < prototypes.rows(); ++b) {
            double d2 = 0;
            for (int64_t j = 0; j < prototypes.cols(); ++j) {
                const double d = static_cast<double>(prototypes.at(a, j)) -
                                 static_cast<double>(prototypes.at(b, j));
                d2 += d * d;
            }
            best = std::min(best, std::sqrt(d2));
        }
    return best;
}

const CorpusSplit& Corpus::split(const std::string& name) const {
    for (const auto& s : splits)
        if (s.name == name) return s;
    fail("Corpus: no split named '", name, "'");
}

ToyLanguageSpec generate_language(const LanguageConfig& config, uint64_t seed) {
    require(config.n_phonemes >= 2, "generate_language: need at least 2 phonemes");
    require(config.n_words >= 1 && config.n_letters >= 2, "generate_language: bad inventory sizes");
    ToyLanguageSpec spec;
    spec.seed = seed;
    spec.config = config;

    std::vector<std::string> names;
    for (int32_t i = 0; i < config.n_phonemes; ++i) names.push_back(cat("p", i));
    spec.phoneme_vocab = UnitVocab::phonemes(names);
    spec.char_vocab = CharVocab::letters(config.n_letters);

    Rng rng(mix64(seed, 0x1a6ULL));

    // Words: no internal adjacent repeats so oracle alignments collapse
    // unambiguously; spellings unique since they key the lexicon.
    std::set<std::string> spellings;
    for (int32_t w = 0; w < config.n_words; ++w) {
        const int32_t len = config.min_word_phonemes +
                            static_cast<int32_t>(rng.next_below(
                                config.max_word_phonemes - config.min_word_phonemes + 1));
        std::vector<int32_t> phonemes;
        for (int32_t i = 0; i < len; ++i) {
            int32_t p = static_cast<int32_t>(rng.next_below(config.n_phonemes));
            while (!phonemes.empty() && p == phonemes.back())
                p = static_cast<int32_t>(rng.next_below(config.n_phonemes));
            phonemes.push_back(p);
        }
        std::string spelling;
        do {
            const int32_t slen = config.min_spelling +
                                 static_cast<int32_t>(rng.next_below(
                                     config.max_spelling - config.min_spelling + 1));
            spelling.clear();
            for (int32_t i = 0; i < slen; ++i)
                spelling += static_cast<char>('a' + rng.next_below(config.n_letters));
        } while (spellings.count(spelling));
        spellings.insert(spelling);
        spec.lexicon.add(spelling, std::move(phonemes));
    }

    // Unigram distribution via normalized exponentials.
    double total = 0;
    for (int32_t w = 0; w < config.n_words; ++w) {
        double u = rng.next_double();
        while (u <= 0) u = rng.next_double();
        spec.word_probs.push_back(-std::log(u));
        total += spec.word_probs.back();
    }
    for (auto& p : spec.word_probs) p /= total;

    // Prototypes with enforced separation (> 4 sigma) so clustering on the
    // noisy frames is well-posed.
    const double min_dist = 4.0 * config.noise_sigma;
    spec.prototypes = Tensor<float>(spec.phoneme_vocab.size, config.d_feat);
    for (int32_t p = 0; p < spec.phoneme_vocab.size; ++p) {
        bool placed = false;
        for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
            std::vector<float> cand(static_cast<size_t>(config.d_feat));
            for (auto& v : cand) v = static_cast<float>(rng.next_gaussian());
            placed = true;
            for (int32_t q = 0; q < p && placed; ++q) {
                double d2 = 0;
                for (int32_t j = 0; j < config.d_feat; ++j) {
                    const double d = static_cast<double>(cand[static_cast<size_t>(j)]) -
                                     static_cast<double>(spec.prototypes.at(q, j));
                    d2 += d * d;
                }
                if (std::sqrt(d2) <= min_dist) placed = false;
            }
            if (placed)
                for (int32_t j = 0; j < config.d_feat; ++j)
                    spec.prototypes.at(p, j) = cand[static_cast<size_t>(j)];
        }
        require(placed, "generate_language: could not separate prototype ", p,
                " after 1000 attempts (noise_sigma too large for d_feat)");
    }
    return spec;
}

Utterance synth_utterance(const ToyLanguageSpec& spec, int32_t n_words, Rng& rng, uint64_t id,
                          bool with_features) {
    require(n_words >= 1, "synth_utterance: n_words must be >= 1, got ", n_words);
    const auto& lex = spec.lexicon;
    Utterance utt;
    utt.id = id;

    // Sample words; SIL decisions are drawn per boundary up front. A boundary
    // without SIL must not join identical phonemes (the oracle alignment
    // would collapse across it), so such a next-word draw is resampled.
    std::vector<int32_t> word_ids;
    std::vector<bool> sil_after;  // after word i
    for (int32_t w = 0; w < n_words; ++w) {
        const bool sil = w + 1 < n_words && rng.next_bernoulli(spec.config.p_sil);
        int32_t next = sample_index(spec.word_probs, rng);
        if (w > 0 && !sil_after.back()) {
            const auto& prev = lex.entries[static_cast<size_t>(word_ids.back())].second;
            int attempts = 0;
            while (lex.entries[static_cast<size_t>(next)].second.front() == prev.back()) {
                next = sample_index(spec.word_probs, rng);
                require(++attempts < 100, "synth_utterance: cannot avoid phoneme collision");
            }
        }
        word_ids.push_back(next);
        if (w + 1 < n_words) sil_after.push_back(sil);
    }

    std::vector<int32_t> phonemes;
    for (size_t w = 0; w < word_ids.size(); ++w) {
        const auto& entry = lex.entries[static_cast<size_t>(word_ids[w])];
        utt.words.push_back(entry.first);
        phonemes.insert(phonemes.end(), entry.second.begin(), entry.second.end());
        if (w + 1 < word_ids.size() && sil_after[w]) phonemes.push_back(spec.phoneme_vocab.sil_id);
    }

    // Transcript: spelled words joined by the separator.
    for (size_t w = 0; w < utt.words.size(); ++w) {
        if (w) utt.transcript.push_back(spec.char_vocab.separator_id);
        for (char c : utt.words[w]) utt.transcript.push_back(static_cast<int32_t>(c - 'a') + 1);
    }

    if (!with_features) return utt;

    std::vector<int32_t> durations;
    int64_t frames = 0;
    for (size_t i = 0; i < phonemes.size(); ++i) {
        durations.push_back(sample_duration(spec.config.duration, rng));
        frames += durations.back();
    }
    utt.features = Tensor<float>(frames, spec.config.d_feat);
    utt.frame_phonemes.reserve(static_cast<size_t>(frames));
    int64_t t = 0;
    for (size_t i = 0; i < phonemes.size(); ++i) {
        for (int32_t k = 0; k < durations[i]; ++k, ++t) {
            utt.frame_phonemes.push_back(phonemes[i]);
            for (int32_t j = 0; j < spec.config.d_feat; ++j)
                utt.features.at(t, j) =
                    spec.prototypes.at(phonemes[i], j) +
                    static_cast<float>(spec.config.noise_sigma * rng.next_gaussian());
        }
    }
    return utt;
}

Corpus generate_corpora(const ToyLanguageSpec& spec, const SplitConfig& splits, uint64_t seed) {
    struct Plan {
        const char* name;
        int32_t count;
        bool with_features;
    };
    const Plan plan[] = {
        {"paired", splits.paired, true},       {"pretrain-speech", splits.pretrain_speech, true},
        {"pretrain-text", splits.pretrain_text, false}, {"finetune", splits.finetune, true},
        {"dev", splits.dev, true},             {"test", splits.test, true},
    };
    Corpus corpus;
    corpus.language = spec;
    uint64_t split_idx = 0;
    for (const auto& p : plan) {
        require(p.count >= 1, "generate_corpora: split '", p.name, "' has size ", p.count);
        CorpusSplit s;
        s.name = p.name;
        s.seed = mix64(seed, split_idx);
        for (int32_t i = 0; i < p.count; ++i) {
            Rng rng(mix64(s.seed, static_cast<uint64_t>(i)));
            const int32_t n_words =
                spec.config.min_utt_words +
                static_cast<int32_t>(rng.next_below(spec.config.max_utt_words -
                                                    spec.config.min_utt_words + 1));
            const uint64_t id = (split_idx << 32) | static_cast<uint64_t>(i);
            s.utterances.push_back(synth_utterance(spec, n_words, rng, id, p.with_features));
        }
        corpus.splits.push_back(std::move(s));
        ++split_idx;
    }
    return corpus;
}

UnitSequence collapse_alignment(const std::vector<int32_t>& frame_phonemes,
                                const UnitVocab& phoneme_vocab) {
    UnitSequence out;
    out.kind = UnitKind::Phoneme;
    int32_t prev = -1;
    for (int32_t p : frame_phonemes) {
        if (p != prev && p != phoneme_vocab.sil_id) out.ids.push_back(p);
        prev = p;
    }
    return out;
}

PaddedBatch batch_pad(const std::vector<Tensor<float>>& items) {
    require(!items.empty(), "batch_pad: empty batch");
    const int64_t width = items[0].cols();
    int64_t max_len = 0;
    for (const auto& it : items) {
        require(it.cols() == width, "batch_pad: width mismatch ", it.shape_str());
        max_len = std::max(max_len, it.rows());
    }
    PaddedBatch out;
    for (const auto& it : items) {
        Tensor<float> padded(max_len, width);
        for (int64_t i = 0; i < it.rows(); ++i)
            for (int64_t j = 0; j < width; ++j) padded.at(i, j) = it.at(i, j);
        out.features.push_back(std::move(padded));
        out.lengths.push_back(it.rows());
    }
    return out;
}

void save_corpus(const Corpus& corpus, const std::string& path) {
    BinaryWriter w(path);
    w.magic(kMagic);
    const ToyLanguageSpec& lang = corpus.language;
    w.u64(lang.seed);
    const LanguageConfig& c = lang.config;
    w.i32(c.n_phonemes);
    w.i32(c.n_words);
    w.i32(c.n_letters);
    w.i32(c.d_feat);
    w.i32(c.min_word_phonemes);
    w.i32(c.max_word_phonemes);
    w.i32(c.min_spelling);
    w.i32(c.max_spelling);
    w.i32(c.min_utt_words);
    w.i32(c.max_utt_words);
    w.f64(c.noise_sigma);
    w.f64(c.p_sil);
    w.f64(c.duration.mean);
    w.f64(c.duration.stddev);
    w.i32(c.duration.min_frames);

    w.i32(lang.phoneme_vocab.size);
    for (const auto& n : lang.phoneme_vocab.names) w.str(n);
    w.i32(lang.phoneme_vocab.sil_id);
    w.i32(lang.phoneme_vocab.unk_id);
    w.i32(static_cast<int32_t>(lang.char_vocab.chars.size()));
    for (const auto& ch : lang.char_vocab.chars) w.str(ch);
    w.i32(lang.char_vocab.separator_id);
    w.u32(static_cast<uint32_t>(lang.lexicon.entries.size()));
    for (const auto& [word, phonemes] : lang.lexicon.entries) {
        w.str(word);
        w.u32(static_cast<uint32_t>(phonemes.size()));
        for (int32_t p : phonemes) w.u16(static_cast<uint16_t>(p));
    }
    for (double p : lang.word_probs) w.f64(p);
    w.i32(static_cast<int32_t>(lang.prototypes.rows()));
    w.i32(static_cast<int32_t>(lang.prototypes.cols()));
    w.f32s(lang.prototypes.data);

    w.u32(static_cast<uint32_t>(corpus.splits.size()));
    for (const auto& s : corpus.splits) {
        w.str(s.name);
        w.u64(s.seed);
        w.u32(static_cast<uint32_t>(s.utterances.size()));
        for (const auto& u : s.utterances) {
            w.u64(u.id);
            w.u32(static_cast<uint32_t>(u.words.size()));
            for (const auto& word : u.words) w.str(word);
            w.u32(static_cast<uint32_t>(u.transcript.size()));
            for (int32_t ch : u.transcript) w.u8(static_cast<uint8_t>(ch));
            w.u8(u.has_features() ? 1 : 0);
            if (u.has_features()) {
                w.i32(static_cast<int32_t>(u.features.rows()));
                w.i32(static_cast<int32_t>(u.features.cols()));
                w.f32s(u.features.data);
                for (int32_t p : u.frame_phonemes) w.u16(static_cast<uint16_t>(p));
            }
        }
    }
    w.close();

    // Human-readable manifest alongside the binary.
    std::ofstream manifest(path + ".manifest.txt");
    require(manifest.good(), "save_corpus: cannot write manifest for '", path, "'");
    manifest << "split\tcount\tseed\n";
    for (const auto& s : corpus.splits)
        manifest << s.name << '\t' << s.utterances.size() << '\t' << s.seed << '\n';
}

Corpus load_corpus(const std::string& path) {
    BinaryReader r(path);
    r.magic(kMagic);
    Corpus corpus;
    ToyLanguageSpec& lang = corpus.language;
    lang.seed = r.u64();
    LanguageConfig& c = lang.config;
    c.n_phonemes = r.i32();
    c.n_words = r.i32();
    c.n_letters = r.i32();
    c.d_feat = r.i32();
    c.min_word_phonemes = r.i32();
    c.max_word_phonemes = r.i32();
    c.min_spelling = r.i32();
    c.max_spelling = r.i32();
    c.min_utt_words = r.i32();
    c.max_utt_words = r.i32();
    c.noise_sigma = r.f64();
    c.p_sil = r.f64();
    c.duration.mean = r.f64();
    c.duration.stddev = r.f64();
    c.duration.min_frames = r.i32();

    lang.phoneme_vocab.kind = UnitKind::Phoneme;
    lang.phoneme_vocab.size = r.i32();
    for (int32_t i = 0; i < lang.phoneme_vocab.size; ++i)
        lang.phoneme_vocab.names.push_back(r.str());
    lang.phoneme_vocab.sil_id = r.i32();
    lang.phoneme_vocab.unk_id = r.i32();
    lang.phoneme_vocab.validate();
    const int32_t n_chars = r.i32();
    for (int32_t i = 0; i < n_chars; ++i) lang.char_vocab.chars.push_back(r.str());
    lang.char_vocab.separator_id = r.i32();
    const uint32_t n_words = r.u32();
    for (uint32_t i = 0; i < n_words; ++i) {
        std::string word = r.str();
        const uint32_t n = r.u32();
        std::vector<int32_t> phonemes;
        for (uint32_t j = 0; j < n; ++j) phonemes.push_back(static_cast<int32_t>(r.u16()));
        lang.lexicon.add(word, std::move(phonemes));
    }
    lang.lexicon.validate(lang.phoneme_vocab);
    for (uint32_t i = 0; i < n_words; ++i) lang.word_probs.push_back(r.f64());
    const int32_t protos = r.i32(), d_feat = r.i32();
    lang.prototypes = Tensor<float>(protos, d_feat, r.f32s(static_cast<size_t>(protos * d_feat)));

    const uint32_t n_splits = r.u32();
    for (uint32_t si = 0; si < n_splits; ++si) {
        CorpusSplit s;
        s.name = r.str();
        s.seed = r.u64();
        const uint32_t count = r.u32();
        for (uint32_t i = 0; i < count; ++i) {
            Utterance u;
            u.id = r.u64();
            const uint32_t nw = r.u32();
            for (uint32_t wj = 0; wj < nw; ++wj) u.words.push_back(r.str());
            const uint32_t nt = r.u32();
            for (uint32_t tj = 0; tj < nt; ++tj)
                u.transcript.push_back(static_cast<int32_t>(r.u8()));
            if (r.u8()) {
                const int32_t rows = r.i32(), cols = r.i32();
                u.features =
                    Tensor<float>(rows, cols, r.f32s(static_cast<size_t>(rows) * cols));
                for (int32_t t = 0; t < rows; ++t)
                    u.frame_phonemes.push_back(static_cast<int32_t>(r.u16()));
            }
            s.utterances.push_back(std::move(u));
        }
        corpus.splits.push_back(std::move(s));
    }
    return corpus;
}

}  // namespace splm
