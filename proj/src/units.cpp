#include "splm/units.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace splm {

UnitVocab UnitVocab::phonemes(const std::vector<std::string>& regular) {
    UnitVocab v;
    v.kind = UnitKind::Phoneme;
    v.names = regular;
    v.sil_id = static_cast<int32_t>(v.names.size());
    v.names.push_back("SIL");
    v.unk_id = static_cast<int32_t>(v.names.size());
    v.names.push_back("UNK");
    v.size = static_cast<int32_t>(v.names.size());
    v.validate();
    return v;
}

UnitVocab UnitVocab::hidden(int32_t clusters) {
    UnitVocab v;
    v.kind = UnitKind::Hidden;
    v.size = clusters;
    v.names.reserve(static_cast<size_t>(clusters));
    for (int32_t i = 0; i < clusters; ++i) v.names.push_back(cat("u", i));
    v.validate();
    return v;
}

void UnitVocab::validate() const {
    require(size >= 2, "UnitVocab: size ", size, " < 2");
    require(static_cast<int32_t>(names.size()) == size, "UnitVocab: ", names.size(),
            " names for size ", size);
    if (kind == UnitKind::Phoneme) {
        require(valid_id(sil_id) && valid_id(unk_id), "UnitVocab: SIL/UNK ids out of range");
        require(sil_id != unk_id, "UnitVocab: SIL and UNK collide");
    }
}

CharVocab CharVocab::letters(int32_t count, char first) {
    CharVocab v;
    for (int32_t i = 0; i < count; ++i) v.chars.push_back(std::string(1, static_cast<char>(first + i)));
    v.chars.push_back("_");
    v.separator_id = static_cast<int32_t>(v.chars.size());  // ids are 1-based
    return v;
}

std::string CharVocab::to_string(const std::vector<int32_t>& ids) const {
    std::string s;
    for (int32_t id : ids) {
        require(valid_char_id(id), "CharVocab: id ", id, " not a transcript character");
        s += chars[static_cast<size_t>(id - 1)];
    }
    return s;
}

void Lexicon::add(const std::string& word, std::vector<int32_t> phonemes) {
    require(!word.empty(), "Lexicon: empty word");
    require(!phonemes.empty(), "Lexicon: word '", word, "' has no phonemes");
    require(index.find(word) == index.end(), "Lexicon: duplicate word '", word, "'");
    index[word] = entries.size();
    entries.emplace_back(word, std::move(phonemes));
}

const std::vector<int32_t>* Lexicon::find(const std::string& word) const {
    auto it = index.find(word);
    return it == index.end() ? nullptr : &entries[it->second].second;
}

void Lexicon::validate(const UnitVocab& phoneme_vocab) const {
    for (const auto& [word, phonemes] : entries) {
        require(!word.empty(), "Lexicon: empty word");
        for (int32_t p : phonemes)
            require(phoneme_vocab.valid_id(p), "Lexicon: word '", word, "' has invalid phoneme ",
                    p);
    }
}

void Lexicon::save(const std::string& path, const UnitVocab& phoneme_vocab) const {
    std::ofstream out(path);
    require(out.good(), "Lexicon: cannot open '", path, "' for writing");
    for (const auto& [word, phonemes] : entries) {
        out << word << '\t';
        for (size_t i = 0; i < phonemes.size(); ++i) {
            if (i) out << ' ';
            out << phoneme_vocab.names[static_cast<size_t>(phonemes[i])];
        }
        out << '\n';
    }
    require(out.good(), "Lexicon: write to '", path, "' failed");
}

Lexicon Lexicon::load(const std::string& path, const UnitVocab& phoneme_vocab) {
    std::ifstream in(path);
    require(in.good(), "Lexicon: cannot open '", path, "'");
    std::map<std::string, int32_t> by_name;
    for (int32_t i = 0; i < phoneme_vocab.size; ++i)
        by_name[phoneme_vocab.names[static_cast<size_t>(i)]] = i;
    Lexicon lex;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const size_t tab = line.find('\t');
        require(tab != std::string::npos, "Lexicon: '", path, "' line ", line_no,
                ": missing tab separator");
        const std::string word = line.substr(0, tab);
        std::istringstream rest(line.substr(tab + 1));
        std::vector<int32_t> phonemes;
        std::string tok;
        while (rest >> tok) {
            auto it = by_name.find(tok);
            require(it != by_name.end(), "Lexicon: '", path, "' line ", line_no,
                    ": unknown phoneme '", tok, "'");
            phonemes.push_back(it->second);
        }
        lex.add(word, std::move(phonemes));
    }
    lex.validate(phoneme_vocab);
    return lex;
}

PhonemeString words_to_phonemes(const std::vector<std::string>& words, const Lexicon& lexicon,
                                const UnitVocab& phoneme_vocab) {
    require(!words.empty(), "words_to_phonemes: empty word list");
    require(phoneme_vocab.kind == UnitKind::Phoneme, "words_to_phonemes: vocab is not phoneme kind");
    PhonemeString out;
    out.units.kind = UnitKind::Phoneme;
    for (size_t w = 0; w < words.size(); ++w) {
        const std::vector<int32_t>* phonemes = lexicon.find(words[w]);
        if (phonemes) {
            out.units.ids.insert(out.units.ids.end(), phonemes->begin(), phonemes->end());
        } else {
            out.units.ids.push_back(phoneme_vocab.unk_id);
        }
        if (w + 1 < words.size())
            out.word_boundaries.push_back(static_cast<int64_t>(out.units.ids.size()));
    }
    return out;
}

UnitSequence insert_silence(const PhonemeString& phonemes, const UnitVocab& phoneme_vocab,
                            double p_sil, Rng& rng) {
    require(p_sil >= 0.0 && p_sil <= 1.0, "insert_silence: p_sil ", p_sil, " outside [0,1]");
    require(phonemes.units.kind == UnitKind::Phoneme,
            "insert_silence: input is not phoneme kind");
    UnitSequence out;
    out.kind = UnitKind::Phoneme;
    size_t next_boundary = 0;
    for (size_t i = 0; i <= phonemes.units.ids.size(); ++i) {
        if (next_boundary < phonemes.word_boundaries.size() &&
            phonemes.word_boundaries[next_boundary] == static_cast<int64_t>(i)) {
            ++next_boundary;
            if (rng.next_bernoulli(p_sil)) out.ids.push_back(phoneme_vocab.sil_id);
        }
        if (i < phonemes.units.ids.size()) out.ids.push_back(phonemes.units.ids[i]);
    }
    return out;
}

UnitSequence strip_silence(const UnitSequence& seq, const UnitVocab& phoneme_vocab) {
    UnitSequence out;
    out.kind = seq.kind;
    for (int32_t id : seq.ids)
        if (id != phoneme_vocab.sil_id) out.ids.push_back(id);
    return out;
}

}  // namespace splm
