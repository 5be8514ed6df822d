#include <doctest.h>

#include <cstdio>

#include "splm/units.hpp"

using namespace splm;

namespace {

UnitVocab toy_vocab() { return UnitVocab::phonemes({"B", "A", "K"}); }

Lexicon toy_lexicon() {
    Lexicon lex;
    lex.add("ba", {0, 1});
    lex.add("ka", {2, 1});
    return lex;
}

}  // namespace

TEST_SUITE_BEGIN("units");

TEST_CASE("lexicon lookup concatenates per-word phonemes") {
    auto vocab = toy_vocab();
    auto lex = toy_lexicon();
    auto one = words_to_phonemes({"ba"}, lex, vocab);
    CHECK(one.units.ids == std::vector<int32_t>{0, 1});
    CHECK(one.word_boundaries.empty());

    auto two = words_to_phonemes({"ba", "ba"}, lex, vocab);
    CHECK(two.units.ids == std::vector<int32_t>{0, 1, 0, 1});
    CHECK(two.word_boundaries == std::vector<int64_t>{2});
}

TEST_CASE("out-of-vocabulary word becomes a single UNK slot") {
    auto vocab = toy_vocab();
    auto lex = toy_lexicon();
    auto out = words_to_phonemes({"zz"}, lex, vocab);
    CHECK(out.units.ids == std::vector<int32_t>{vocab.unk_id});
    auto mixed = words_to_phonemes({"ba", "zz", "ka"}, lex, vocab);
    CHECK(mixed.units.ids == std::vector<int32_t>{0, 1, vocab.unk_id, 2, 1});
    CHECK(mixed.word_boundaries == std::vector<int64_t>{2, 3});
}

TEST_CASE("empty word list is rejected") {
    auto vocab = toy_vocab();
    auto lex = toy_lexicon();
    CHECK_THROWS_AS(words_to_phonemes({}, lex, vocab), Error);
}

TEST_CASE("silence insertion at probability zero is the identity") {
    auto vocab = toy_vocab();
    auto lex = toy_lexicon();
    auto ps = words_to_phonemes({"ba", "ka", "ba"}, lex, vocab);
    Rng rng(1);
    auto out = insert_silence(ps, vocab, 0.0, rng);
    CHECK(out.ids == ps.units.ids);
}

TEST_CASE("silence insertion at probability one hits every boundary") {
    auto vocab = toy_vocab();
    auto lex = toy_lexicon();
    auto ps = words_to_phonemes({"ba", "ka", "ba"}, lex, vocab);
    Rng rng(1);
    auto out = insert_silence(ps, vocab, 1.0, rng);
    // 3 words, 2 boundaries, exactly 2 SILs, in between the words
    CHECK(out.ids == std::vector<int32_t>{0, 1, vocab.sil_id, 2, 1, vocab.sil_id, 0, 1});
}

TEST_CASE("silence frequency matches its probability") {
    auto vocab = toy_vocab();
    auto lex = toy_lexicon();
    auto ps = words_to_phonemes({"ba", "ka"}, lex, vocab);
    int hits = 0;
    const int n = 100000;
    Rng rng(123);
    for (int i = 0; i < n; ++i) {
        auto out = insert_silence(ps, vocab, 0.25, rng);
        hits += static_cast<int>(out.ids.size() - ps.units.ids.size());
    }
    const double freq = static_cast<double>(hits) / n;
    CHECK(std::abs(freq - 0.25) < 0.01);
}

TEST_CASE("silence insertion is deterministic under a fixed seed") {
    auto vocab = toy_vocab();
    auto lex = toy_lexicon();
    auto ps = words_to_phonemes({"ba", "ka", "ba", "ka"}, lex, vocab);
    Rng r1(77), r2(77);
    CHECK(insert_silence(ps, vocab, 0.5, r1).ids == insert_silence(ps, vocab, 0.5, r2).ids);
}

TEST_CASE("stripping SIL recovers the original sequence") {
    auto vocab = toy_vocab();
    auto lex = toy_lexicon();
    Rng rng(9);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<std::string> words;
        const int n = 1 + static_cast<int>(rng.next_below(5));
        for (int i = 0; i < n; ++i) words.push_back(rng.next_bernoulli(0.5) ? "ba" : "ka");
        auto ps = words_to_phonemes(words, lex, vocab);
        auto with_sil = insert_silence(ps, vocab, 0.5, rng);
        CHECK(strip_silence(with_sil, vocab).ids == ps.units.ids);
    }
}

TEST_CASE("p_sil outside [0,1] is rejected") {
    auto vocab = toy_vocab();
    auto lex = toy_lexicon();
    auto ps = words_to_phonemes({"ba", "ka"}, lex, vocab);
    Rng rng(1);
    CHECK_THROWS_AS(insert_silence(ps, vocab, 1.5, rng), Error);
    CHECK_THROWS_AS(insert_silence(ps, vocab, -0.1, rng), Error);
}

TEST_CASE("lexicon file round trip") {
    auto vocab = toy_vocab();
    auto lex = toy_lexicon();
    const std::string path = "test_lexicon.txt";
    lex.save(path, vocab);
    auto back = Lexicon::load(path, vocab);
    REQUIRE(back.size() == lex.size());
    for (size_t i = 0; i < lex.entries.size(); ++i) {
        CHECK(back.entries[i].first == lex.entries[i].first);
        CHECK(back.entries[i].second == lex.entries[i].second);
    }
    std::remove(path.c_str());
}

TEST_CASE("vocab invariants") {
    auto vocab = toy_vocab();
    CHECK(vocab.size == 5);
    CHECK(vocab.sil_id != vocab.unk_id);
    CHECK(vocab.valid_id(vocab.sil_id));
    auto hidden = UnitVocab::hidden(8);
    CHECK(hidden.size == 8);
    CHECK(hidden.kind == UnitKind::Hidden);
}

TEST_CASE("char vocab reserves blank zero and excludes it from text") {
    auto cv = CharVocab::letters(10);
    CHECK(cv.blank_id() == 0);
    CHECK(cv.size_with_blank() == 12);
    CHECK(!cv.valid_char_id(0));
    CHECK(cv.valid_char_id(11));
    CHECK(cv.to_string({1, 2, cv.separator_id}) == "ab_");
}

TEST_SUITE_END();
