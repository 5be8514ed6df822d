#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "splm/tensor.hpp"
#include "splm/units.hpp"

namespace splm {

struct DurationLaw {
    double mean = 5.0;
    double stddev = 2.0;
    int32_t min_frames = 1;
};

// Generation knobs for the synthetic language.
struct LanguageConfig {
    int32_t n_phonemes = 12;  // regular phonemes; SIL and UNK are added on top
    int32_t n_words = 40;
    int32_t n_letters = 10;
    int32_t d_feat = 16;
    int32_t min_word_phonemes = 1;
    int32_t max_word_phonemes = 4;
    int32_t min_spelling = 2;
    int32_t max_spelling = 5;
    int32_t min_utt_words = 1;
    int32_t max_utt_words = 4;
    double noise_sigma = 0.3;
    double p_sil = 0.25;
    DurationLaw duration;
};

// A fully materialized toy language: inventories, lexicon, per-phoneme
// prototype vectors and the sampling laws. Immutable after generation.
struct ToyLanguageSpec {
    uint64_t seed = 0;
    LanguageConfig config;
    UnitVocab phoneme_vocab;
    CharVocab char_vocab;
    Lexicon lexicon;
    std::vector<double> word_probs;  // unigram distribution over lexicon entries
    Tensor<float> prototypes;        // phoneme_vocab.size x d_feat

    double min_prototype_distance() const;
};

struct Utterance {
    uint64_t id = 0;
    std::vector<std::string> words;
    std::vector<int32_t> transcript;      // char ids (blank excluded)
    Tensor<float> features;               // M0 x d_feat; empty for text-only records
    std::vector<int32_t> frame_phonemes;  // oracle alignment, length M0

    bool has_features() const { return features.numel() > 0; }
};

struct CorpusSplit {
    std::string name;
    uint64_t seed = 0;
    std::vector<Utterance> utterances;
};

struct SplitConfig {
    int32_t paired = 200;
    int32_t pretrain_speech = 2000;
    int32_t pretrain_text = 8000;  // text-only records
    int32_t finetune = 300;
    int32_t dev = 200;
    int32_t test = 200;
};

struct Corpus {
    ToyLanguageSpec language;
    std::vector<CorpusSplit> splits;

    const CorpusSplit& split(const std::string& name) const;
};

// Deterministic language from seed. Prototype separation (min pairwise
// distance > 4*sigma) is enforced by rejection resampling; an impossible
// configuration is an error rather than a quiet degradation.
ToyLanguageSpec generate_language(const LanguageConfig& config, uint64_t seed);

// One synthetic utterance: sampled words -> phonemes (+SIL between words
// with p_sil) -> per-phoneme durations -> noisy prototype frames. The frame
// labels are the oracle alignment. `with_features` off produces a text-only
// record (transcript only).
Utterance synth_utterance(const ToyLanguageSpec& spec, int32_t n_words, Rng& rng, uint64_t id,
                          bool with_features = true);

Corpus generate_corpora(const ToyLanguageSpec& spec, const SplitConfig& splits, uint64_t seed);

// Test/metric helper: dedup consecutive frame labels, then drop SIL.
UnitSequence collapse_alignment(const std::vector<int32_t>& frame_phonemes,
                                const UnitVocab& phoneme_vocab);

// Right-pad feature matrices to the longest item. Padded rows are zero and
// excluded from everything downstream via the recorded lengths.
struct PaddedBatch {
    std::vector<Tensor<float>> features;  // all max_len x D
    std::vector<int64_t> lengths;
};
PaddedBatch batch_pad(const std::vector<Tensor<float>>& items);

void save_corpus(const Corpus& corpus, const std::string& path);
Corpus load_corpus(const std::string& path);

}  // namespace splm
