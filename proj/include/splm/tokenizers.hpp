#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "splm/model.hpp"
#include "splm/tensor.hpp"
#include "splm/units.hpp"

namespace splm {

// ---- speech-side hidden-unit tokenizer: k-means over frame features ----

struct KMeansModel {
    Tensor<double> centroids;            // K x D
    std::vector<double> inertia_history; // one entry per Lloyd iteration

    int64_t k() const { return centroids.rows(); }
    int64_t dim() const { return centroids.cols(); }

    void save(const std::string& path) const;  // SPLM-KM1, centroids as float32
    static KMeansModel load(const std::string& path);
};

// k-means++ seeding followed by Lloyd iterations. Inertia is asserted
// non-increasing every iteration; an emptied cluster is reseeded to the
// point farthest from its assigned centroid.
KMeansModel kmeans_fit(const Tensor<float>& frames, int32_t k, int32_t iters, uint64_t seed);

double kmeans_inertia(const KMeansModel& model, const Tensor<float>& frames);

// Nearest centroid per frame (Euclidean), ties to the lowest id.
UnitSequence kmeans_assign(const KMeansModel& model, const Tensor<float>& frames);

// ---- text-side phoneme upsampler ----

struct UpsamplerConfig {
    double mean = 5.0;
    double variance = 25.0;
    double sil_mean = 14.0;
    double sil_variance = 25.0;
    int32_t min_len = 1;
    int32_t max_len = 30;

    void validate() const {
        require(min_len >= 1, "UpsamplerConfig: min_len must be >= 1");
        require(max_len >= min_len, "UpsamplerConfig: max_len < min_len");
        require(mean > 0 && sil_mean > 0, "UpsamplerConfig: means must be positive");
        require(variance >= 0 && sil_variance >= 0, "UpsamplerConfig: negative variance");
    }
};

// Repeat each phoneme round(N(mean, variance)) times, clamped to
// [min_len, max_len]; SIL draws from its own longer law.
UnitSequence phoneme_upsample(const UnitSequence& phonemes, const UnitVocab& vocab,
                              const UpsamplerConfig& cfg, Rng& rng);

// ---- text-side hidden-unit tokenizer: non-autoregressive text-to-unit ----

struct T2uConfig {
    int32_t d_model = 64;
    int32_t enc_layers = 2;
    int32_t dec_layers = 2;
    int32_t heads = 4;
    int32_t ffn_dim = 128;
    int32_t rel_buckets = 16;
    int32_t rel_max_distance = 64;
    double lr = 1e-3;
    double grad_clip = 5.0;
};

struct T2uPair {
    UnitSequence phonemes;           // with oracle per-phoneme durations
    std::vector<int32_t> durations;  // one per phoneme, sums to units length
    UnitSequence units;              // hidden-unit targets, frame rate
};

// Phoneme encoder + per-phoneme log-duration regressor + frame-level unit
// classifier. Durations are teacher-forced during training and predicted
// (rounded, floored at 1) at inference.
struct TextToUnitModel {
    T2uConfig config;
    int32_t phoneme_vocab = 0;
    int32_t unit_vocab = 0;
    bool trained = false;
    ParamStore<float> params;

    void save(const std::string& path) const;
    static TextToUnitModel load(const std::string& path);
};

TextToUnitModel t2u_train(const std::vector<T2uPair>& pairs, int32_t phoneme_vocab,
                          int32_t unit_vocab, int32_t epochs, uint64_t seed,
                          const T2uConfig& cfg = {});

std::vector<int32_t> t2u_predict_durations(const TextToUnitModel& model,
                                           const UnitSequence& phonemes);

UnitSequence t2u_infer(const TextToUnitModel& model, const UnitSequence& phonemes);

}  // namespace splm
