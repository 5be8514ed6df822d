#include "splm/tokenizers.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "splm/graph.hpp"
#include "splm/optim.hpp"
#include "splm/serialize.hpp"

namespace splm {

namespace {

constexpr char kKMeansMagic[9] = "SPLM-KM1";

double sq_dist(const Tensor<double>& centroids, int64_t c, const Tensor<float>& frames,
               int64_t f) {
    double d2 = 0;
    for (int64_t j = 0; j < centroids.cols(); ++j) {
        const double d = centroids.at(c, j) - static_cast<double>(frames.at(f, j));
        d2 += d * d;
    }
    return d2;
}

// nearest centroid, ties to the lowest id
int64_t nearest(const Tensor<double>& centroids, const Tensor<float>& frames, int64_t f,
                double* dist_out = nullptr) {
    int64_t best = 0;
    double best_d = sq_dist(centroids, 0, frames, f);
    for (int64_t c = 1; c < centroids.rows(); ++c) {
        const double d = sq_dist(centroids, c, frames, f);
        if (d < best_d) {
            best_d = d;
            best = c;
        }
    }
    if (dist_out) *dist_out = best_d;
    return best;
}

}  // namespace

void KMeansModel::save(const std::string& path) const {
    BinaryWriter w(path);
    w.magic(kKMeansMagic);
    w.i32(static_cast<int32_t>(k()));
    w.i32(static_cast<int32_t>(dim()));
    for (double v : centroids.data) w.f32(static_cast<float>(v));
    w.close();
}

KMeansModel KMeansModel::load(const std::string& path) {
    BinaryReader r(path);
    r.magic(kKMeansMagic);
    const int32_t k = r.i32(), d = r.i32();
    require(k >= 2 && d >= 1, "KMeansModel: bad header k=", k, " d=", d);
    KMeansModel m;
    m.centroids = Tensor<double>(k, d);
    for (auto& v : m.centroids.data) v = static_cast<double>(r.f32());
    return m;
}

double kmeans_inertia(const KMeansModel& model, const Tensor<float>& frames) {
    double total = 0;
    for (int64_t f = 0; f < frames.rows(); ++f) {
        double d;
        nearest(model.centroids, frames, f, &d);
        total += d;
    }
    return total;
}

KMeansModel kmeans_fit(const Tensor<float>& frames, int32_t k, int32_t iters, uint64_t seed) {
    const int64_t n = frames.rows(), dim = frames.cols();
    require(k >= 2, "kmeans_fit: k must be >= 2, got ", k);
    require(n >= k, "kmeans_fit: ", n, " frames for k=", k);
    require(iters >= 1, "kmeans_fit: iters must be >= 1");

    KMeansModel model;
    model.centroids = Tensor<double>(k, dim);
    Rng rng(mix64(seed, 0x36c5ULL));

    // k-means++ seeding
    std::vector<double> min_d2(static_cast<size_t>(n), 0.0);
    {
        const int64_t first = rng.next_below(n);
        for (int64_t j = 0; j < dim; ++j)
            model.centroids.at(0, j) = static_cast<double>(frames.at(first, j));
        for (int64_t f = 0; f < n; ++f)
            min_d2[static_cast<size_t>(f)] = sq_dist(model.centroids, 0, frames, f);
        for (int32_t c = 1; c < k; ++c) {
            double total = std::accumulate(min_d2.begin(), min_d2.end(), 0.0);
            int64_t pick = 0;
            if (total > 0) {
                const double u = rng.next_double() * total;
                double acc = 0;
                for (int64_t f = 0; f < n; ++f) {
                    acc += min_d2[static_cast<size_t>(f)];
                    if (u < acc) {
                        pick = f;
                        break;
                    }
                    pick = f;
                }
            } else {
                pick = rng.next_below(n);
            }
            for (int64_t j = 0; j < dim; ++j)
                model.centroids.at(c, j) = static_cast<double>(frames.at(pick, j));
            for (int64_t f = 0; f < n; ++f)
                min_d2[static_cast<size_t>(f)] =
                    std::min(min_d2[static_cast<size_t>(f)], sq_dist(model.centroids, c, frames, f));
        }
    }

    std::vector<int64_t> assign(static_cast<size_t>(n));
    double prev_inertia = std::numeric_limits<double>::infinity();
    for (int32_t it = 0; it < iters; ++it) {
        double inertia = 0;
        for (int64_t f = 0; f < n; ++f) {
            double d;
            assign[static_cast<size_t>(f)] = nearest(model.centroids, frames, f, &d);
            inertia += d;
        }
        require(inertia <= prev_inertia * (1 + 1e-12) + 1e-12,
                "kmeans_fit: inertia increased at iteration ", it, " (", prev_inertia, " -> ",
                inertia, ")");
        model.inertia_history.push_back(inertia);
        prev_inertia = inertia;

        Tensor<double> sums(k, dim);
        std::vector<int64_t> counts(static_cast<size_t>(k), 0);
        for (int64_t f = 0; f < n; ++f) {
            const int64_t c = assign[static_cast<size_t>(f)];
            ++counts[static_cast<size_t>(c)];
            for (int64_t j = 0; j < dim; ++j) sums.at(c, j) += static_cast<double>(frames.at(f, j));
        }
        for (int32_t c = 0; c < k; ++c) {
            if (counts[static_cast<size_t>(c)] == 0) {
                // reseed to the farthest point from its assigned centroid
                int64_t far = 0;
                double far_d = -1;
                for (int64_t f = 0; f < n; ++f) {
                    const double d =
                        sq_dist(model.centroids, assign[static_cast<size_t>(f)], frames, f);
                    if (d > far_d) {
                        far_d = d;
                        far = f;
                    }
                }
                for (int64_t j = 0; j < dim; ++j)
                    model.centroids.at(c, j) = static_cast<double>(frames.at(far, j));
            } else {
                for (int64_t j = 0; j < dim; ++j)
                    model.centroids.at(c, j) =
                        sums.at(c, j) / static_cast<double>(counts[static_cast<size_t>(c)]);
            }
        }
    }

    for (int64_t a = 0; a < k; ++a)
        for (int64_t b = a + 1; b < k; ++b) {
            bool same = true;
            for (int64_t j = 0; j < dim && same; ++j)
                same = model.centroids.at(a, j) == model.centroids.at(b, j);
            require(!same, "kmeans_fit: centroids ", a, " and ", b, " identical after fitting");
        }
    return model;
}

UnitSequence kmeans_assign(const KMeansModel& model, const Tensor<float>& frames) {
    require(frames.cols() == model.dim(), "kmeans_assign: frame dim ", frames.cols(),
            " != model dim ", model.dim());
    UnitSequence out;
    out.kind = UnitKind::Hidden;
    for (int64_t f = 0; f < frames.rows(); ++f)
        out.ids.push_back(static_cast<int32_t>(nearest(model.centroids, frames, f)));
    return out;
}

UnitSequence phoneme_upsample(const UnitSequence& phonemes, const UnitVocab& vocab,
                              const UpsamplerConfig& cfg, Rng& rng) {
    cfg.validate();
    require(phonemes.kind == UnitKind::Phoneme, "phoneme_upsample: input is not phoneme kind");
    UnitSequence out;
    out.kind = UnitKind::Phoneme;
    for (int32_t id : phonemes.ids) {
        require(vocab.valid_id(id), "phoneme_upsample: invalid phoneme id ", id);
        const bool is_sil = id == vocab.sil_id;
        const double mean = is_sil ? cfg.sil_mean : cfg.mean;
        const double stddev = std::sqrt(is_sil ? cfg.sil_variance : cfg.variance);
        const double draw = mean + stddev * rng.next_gaussian();
        int32_t reps = static_cast<int32_t>(std::floor(draw + 0.5));
        reps = std::clamp(reps, cfg.min_len, cfg.max_len);
        for (int32_t r = 0; r < reps; ++r) out.ids.push_back(id);
    }
    return out;
}

// ---- text-to-unit ----

namespace {

StackConfig t2u_stack(const T2uConfig& cfg, int32_t layers) {
    return StackConfig{layers,        cfg.d_model,          cfg.heads, cfg.ffn_dim,
                       cfg.rel_buckets, cfg.rel_max_distance, 0.0};
}

ParamStore<float> init_t2u_params(const T2uConfig& cfg, int32_t phoneme_vocab,
                                  int32_t unit_vocab, uint64_t seed) {
    ParamStore<float> store;
    Rng rng(mix64(seed, 0x72aULL));
    auto normal = [&](int64_t r, int64_t c) {
        Tensor<float> t(r, c);
        for (auto& v : t.data) v = static_cast<float>(rng.next_gaussian() * 0.02);
        return t;
    };
    store.add("t2u.emb", normal(phoneme_vocab, cfg.d_model));
    detail::add_block_params(store, "t2u.enc", t2u_stack(cfg, cfg.enc_layers), rng);
    store.add("t2u.dur.w", normal(cfg.d_model, 1));
    store.add("t2u.dur.b", Tensor<float>(1, 1));
    detail::add_block_params(store, "t2u.dec", t2u_stack(cfg, cfg.dec_layers), rng);
    store.add("t2u.out.w", normal(cfg.d_model, unit_vocab));
    store.add("t2u.out.b", Tensor<float>(1, unit_vocab));
    return store;
}

struct T2uGraph {
    Graphf::Ref encoded;    // per-phoneme hidden states
    Graphf::Ref log_dur;    // N x 1
};

T2uGraph t2u_encode(Graphf& g, Binder<float>& params, const T2uConfig& cfg,
                    const std::vector<int32_t>& phonemes, int32_t phoneme_vocab) {
    std::vector<int64_t> ids;
    for (int32_t p : phonemes) {
        require(p >= 0 && p < phoneme_vocab, "t2u: phoneme id ", p, " out of range");
        ids.push_back(p);
    }
    DropoutStream no_drop;
    auto x = g.gather_rows(params("t2u.emb"), ids);
    auto enc = encoder_stack(g, params, "t2u.enc", t2u_stack(cfg, cfg.enc_layers), x, no_drop);
    auto log_dur = g.add_row(g.matmul(enc, params("t2u.dur.w")), params("t2u.dur.b"));
    return {enc, log_dur};
}

Graphf::Ref t2u_decode_logits(Graphf& g, Binder<float>& params, const T2uConfig& cfg,
                              Graphf::Ref encoded, const std::vector<int32_t>& durations) {
    std::vector<int64_t> frame_map;
    for (size_t i = 0; i < durations.size(); ++i)
        for (int32_t r = 0; r < durations[i]; ++r) frame_map.push_back(static_cast<int64_t>(i));
    DropoutStream no_drop;
    auto frames = g.gather_rows(encoded, frame_map);
    auto dec = encoder_stack(g, params, "t2u.dec", t2u_stack(cfg, cfg.dec_layers), frames, no_drop);
    return g.add_row(g.matmul(dec, params("t2u.out.w")), params("t2u.out.b"));
}

}  // namespace

void TextToUnitModel::save(const std::string& path) const {
    BinaryWriter w(path);
    w.magic("SPLM-CK1");
    std::string cfg_text = cat("kind=t2u\n", "d_model=", config.d_model, "\n",
                               "enc_layers=", config.enc_layers, "\n",
                               "dec_layers=", config.dec_layers, "\n", "heads=", config.heads,
                               "\n", "ffn_dim=", config.ffn_dim, "\n",
                               "rel_buckets=", config.rel_buckets, "\n",
                               "rel_max_distance=", config.rel_max_distance, "\n",
                               "phoneme_vocab=", phoneme_vocab, "\n",
                               "unit_vocab=", unit_vocab, "\n", "trained=", trained ? 1 : 0, "\n");
    w.str(cfg_text);
    w.u32(static_cast<uint32_t>(params.items.size()));
    for (const auto& [name, t] : params.items) {
        w.str(name);
        w.u32(2);
        w.u64(static_cast<uint64_t>(t.rows()));
        w.u64(static_cast<uint64_t>(t.cols()));
        w.f32s(t.data);
    }
    w.close();
}

TextToUnitModel TextToUnitModel::load(const std::string& path) {
    BinaryReader r(path);
    r.magic("SPLM-CK1");
    const std::string cfg_text = r.str();
    TextToUnitModel model;
    auto get = [&](const std::string& key) {
        const std::string needle = key + "=";
        const size_t pos = cfg_text.find(needle);
        require(pos != std::string::npos, "TextToUnitModel: missing config key '", key, "'");
        return std::stoi(cfg_text.substr(pos + needle.size()));
    };
    require(cfg_text.rfind("kind=t2u", 0) == 0, "TextToUnitModel: '", path,
            "' is not a text-to-unit checkpoint");
    model.config.d_model = get("d_model");
    model.config.enc_layers = get("enc_layers");
    model.config.dec_layers = get("dec_layers");
    model.config.heads = get("heads");
    model.config.ffn_dim = get("ffn_dim");
    model.config.rel_buckets = get("rel_buckets");
    model.config.rel_max_distance = get("rel_max_distance");
    model.phoneme_vocab = get("phoneme_vocab");
    model.unit_vocab = get("unit_vocab");
    model.trained = get("trained") != 0;
    const uint32_t count = r.u32();
    for (uint32_t i = 0; i < count; ++i) {
        const std::string name = r.str();
        const uint32_t rank = r.u32();
        require(rank == 2, "TextToUnitModel: parameter '", name, "' has rank ", rank);
        const int64_t rows = static_cast<int64_t>(r.u64());
        const int64_t cols = static_cast<int64_t>(r.u64());
        model.params.add(name, Tensor<float>(rows, cols, r.f32s(static_cast<size_t>(rows * cols))));
    }
    return model;
}

TextToUnitModel t2u_train(const std::vector<T2uPair>& pairs, int32_t phoneme_vocab,
                          int32_t unit_vocab, int32_t epochs, uint64_t seed,
                          const T2uConfig& cfg) {
    require(!pairs.empty(), "t2u_train: empty pair list");
    require(epochs >= 1, "t2u_train: epochs must be >= 1");
    for (size_t i = 0; i < pairs.size(); ++i) {
        const auto& pr = pairs[i];
        require(pr.phonemes.ids.size() == pr.durations.size(), "t2u_train: pair ", i, " has ",
                pr.phonemes.ids.size(), " phonemes but ", pr.durations.size(), " durations");
        int64_t total = 0;
        for (int32_t d : pr.durations) {
            require(d >= 1, "t2u_train: pair ", i, " has non-positive duration");
            total += d;
        }
        require(total == pr.units.length(), "t2u_train: pair ", i, " durations sum to ", total,
                " but unit sequence has ", pr.units.length());
    }

    TextToUnitModel model;
    model.config = cfg;
    model.phoneme_vocab = phoneme_vocab;
    model.unit_vocab = unit_vocab;
    model.params = init_t2u_params(cfg, phoneme_vocab, unit_vocab, seed);

    AdamState<float> opt;
    std::vector<size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), size_t{0});
    for (int32_t epoch = 0; epoch < epochs; ++epoch) {
        Rng shuffle_rng(mix64(seed, 0x5433ULL, static_cast<uint64_t>(epoch)));
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<size_t>(shuffle_rng.next_below(
                                        static_cast<int64_t>(i)))]);
        for (size_t oi = 0; oi < order.size(); ++oi) {
            const T2uPair& pr = pairs[order[oi]];
            Graphf g;
            Binder<float> params(g, model.params);
            auto enc = t2u_encode(g, params, cfg, pr.phonemes.ids, phoneme_vocab);

            // squared error on log durations
            Tensor<float> log_dur_target(static_cast<int64_t>(pr.durations.size()), 1);
            for (size_t d = 0; d < pr.durations.size(); ++d)
                log_dur_target.at(static_cast<int64_t>(d), 0) =
                    std::log(static_cast<float>(pr.durations[d]));
            auto diff = g.add(enc.log_dur, g.scale(g.constant(log_dur_target), -1.0f));
            auto dur_loss = g.mean_all(g.mul(diff, diff));

            // teacher-forced frame classification
            auto logits = t2u_decode_logits(g, params, cfg, enc.encoded, pr.durations);
            std::vector<int64_t> targets;
            for (int32_t u : pr.units.ids) {
                require(u >= 0 && u < unit_vocab, "t2u_train: unit id ", u, " out of range");
                targets.push_back(u);
            }
            auto ce = g.scale(g.cross_entropy_sum(logits, targets),
                              1.0f / static_cast<float>(targets.size()));
            auto loss = g.add(dur_loss, ce);
            g.backward(loss);
            auto grads = params.grads();
            clip_gradients(grads, cfg.grad_clip);
            adam_step(model.params, grads, opt, cfg.lr);
        }
    }
    model.trained = true;
    return model;
}

std::vector<int32_t> t2u_predict_durations(const TextToUnitModel& model,
                                           const UnitSequence& phonemes) {
    require(model.trained, "t2u: model is not trained");
    require(!phonemes.ids.empty(), "t2u: empty phoneme sequence");
    Graphf g;
    Binder<float> params(g, model.params);
    auto enc = t2u_encode(g, params, model.config, phonemes.ids, model.phoneme_vocab);
    std::vector<int32_t> durations;
    const auto& log_dur = g.value(enc.log_dur);
    for (int64_t i = 0; i < log_dur.rows(); ++i) {
        const double d = std::exp(static_cast<double>(log_dur.at(i, 0)));
        durations.push_back(std::max(1, static_cast<int32_t>(std::floor(d + 0.5))));
    }
    return durations;
}

UnitSequence t2u_infer(const TextToUnitModel& model, const UnitSequence& phonemes) {
    const std::vector<int32_t> durations = t2u_predict_durations(model, phonemes);
    Graphf g;
    Binder<float> params(g, model.params);
    auto enc = t2u_encode(g, params, model.config, phonemes.ids, model.phoneme_vocab);
    auto logits_ref = t2u_decode_logits(g, params, model.config, enc.encoded, durations);
    const auto& logits = g.value(logits_ref);
    UnitSequence out;
    out.kind = UnitKind::Hidden;
    for (int64_t t = 0; t < logits.rows(); ++t) {
        int32_t best = 0;
        for (int64_t j = 1; j < logits.cols(); ++j)
            if (logits.at(t, j) > logits.at(t, best)) best = static_cast<int32_t>(j);
        out.ids.push_back(best);
    }
    return out;
}

}  // namespace splm
