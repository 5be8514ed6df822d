#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "splm/error.hpp"
#include "splm/rng.hpp"

namespace splm {

enum class UnitKind { Phoneme, Hidden };

// Discrete unit inventory. Phoneme vocabularies carry SIL and UNK specials;
// hidden-unit vocabularies are plain cluster ids.
struct UnitVocab {
    UnitKind kind = UnitKind::Phoneme;
    int32_t size = 0;
    int32_t sil_id = -1;  // phoneme kind only
    int32_t unk_id = -1;
    std::vector<std::string> names;  // dense, names[id]

    static UnitVocab phonemes(const std::vector<std::string>& regular);
    static UnitVocab hidden(int32_t clusters);

    bool valid_id(int32_t id) const { return id >= 0 && id < size; }
    void validate() const;
};

// Characters plus a reserved CTC blank at id 0; transcript ids start at 1.
struct CharVocab {
    std::vector<std::string> chars;  // chars[i] is the symbol with id i+1
    int32_t separator_id = -1;

    int32_t blank_id() const { return 0; }
    int32_t size_with_blank() const { return static_cast<int32_t>(chars.size()) + 1; }
    bool valid_char_id(int32_t id) const {
        return id >= 1 && id <= static_cast<int32_t>(chars.size());
    }

    static CharVocab letters(int32_t count, char first = 'a');
    std::string to_string(const std::vector<int32_t>& ids) const;
};

struct Lexicon {
    // insertion-ordered so serialization is canonical
    std::vector<std::pair<std::string, std::vector<int32_t>>> entries;
    std::map<std::string, size_t> index;

    void add(const std::string& word, std::vector<int32_t> phonemes);
    const std::vector<int32_t>* find(const std::string& word) const;
    size_t size() const { return entries.size(); }

    void validate(const UnitVocab& phoneme_vocab) const;
    void save(const std::string& path, const UnitVocab& phoneme_vocab) const;
    static Lexicon load(const std::string& path, const UnitVocab& phoneme_vocab);
};

struct UnitSequence {
    UnitKind kind = UnitKind::Phoneme;
    std::vector<int32_t> ids;

    int64_t length() const { return static_cast<int64_t>(ids.size()); }
    bool operator==(const UnitSequence& o) const { return kind == o.kind && ids == o.ids; }
};

// Phoneme sequence plus the word-boundary positions needed by silence
// insertion. Boundaries are kept out-of-band; downstream consumers only see
// the ids.
struct PhonemeString {
    UnitSequence units;                     // kind == Phoneme
    std::vector<int64_t> word_boundaries;   // positions between words (after word i's phonemes)
};

// Lexicon lookup per word, concatenated; an out-of-vocabulary word
// contributes a single UNK slot so length accounting stays well-defined.
PhonemeString words_to_phonemes(const std::vector<std::string>& words, const Lexicon& lexicon,
                                const UnitVocab& phoneme_vocab);

// Independently insert SIL at each word boundary with probability p_sil.
UnitSequence insert_silence(const PhonemeString& phonemes, const UnitVocab& phoneme_vocab,
                            double p_sil, Rng& rng);

// The same sequence with every SIL removed (test / oracle helper).
UnitSequence strip_silence(const UnitSequence& seq, const UnitVocab& phoneme_vocab);

}  // namespace splm
