#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "splm/graph.hpp"
#include "splm/units.hpp"

namespace splm {

// Hyperparameters of the two-stack encoder. `layers` counts both stacks;
// the speech stack takes the first half, the shared stack the rest.
struct ModelConfig {
    int32_t layers = 4;
    int32_t d_model = 64;
    int32_t heads = 4;
    int32_t ffn_dim = 256;
    int32_t d_feat = 16;
    int32_t unit_vocab = 14;
    int32_t char_vocab_with_blank = 12;  // characters + CTC blank
    double mask_prob = 0.08;
    int32_t mask_len = 10;
    double swap_prob = 0.15;  // not stated in the reference setup; config knob
    double tau = 0.1;
    int32_t frontend_stride = 1;
    int32_t rel_buckets = 16;
    int32_t rel_max_distance = 64;
    double dropout = 0.0;
    bool tie_label_embeddings = false;  // reuse unit_emb as the label tables

    int32_t half_layers() const { return layers / 2; }

    void validate() const {
        require(layers >= 2 && layers % 2 == 0, "ModelConfig: layers must be even, got ", layers);
        require(d_model % heads == 0, "ModelConfig: d_model ", d_model, " not divisible by ",
                heads, " heads");
        require(mask_prob >= 0 && mask_prob <= 1, "ModelConfig: mask_prob out of [0,1]");
        require(swap_prob >= 0 && swap_prob <= 1, "ModelConfig: swap_prob out of [0,1]");
        require(tau > 0, "ModelConfig: tau must be positive");
        require(mask_len >= 1, "ModelConfig: mask_len must be >= 1");
        require(frontend_stride >= 1, "ModelConfig: stride must be >= 1");
        require(rel_buckets >= 2 && rel_buckets % 2 == 0, "ModelConfig: rel_buckets must be even");
    }
};

// Shape of one transformer stack; also used by the text-to-unit tokenizer.
struct StackConfig {
    int32_t layers = 2;
    int32_t d_model = 64;
    int32_t heads = 4;
    int32_t ffn_dim = 256;
    int32_t rel_buckets = 16;
    int32_t rel_max_distance = 64;
    double dropout = 0.0;
};

// Named parameter arrays with a stable iteration order.
template <typename T>
struct ParamStore {
    std::vector<std::pair<std::string, Tensor<T>>> items;
    std::map<std::string, size_t> index;

    void add(const std::string& name, Tensor<T> value) {
        require(index.find(name) == index.end(), "ParamStore: duplicate parameter '", name, "'");
        index[name] = items.size();
        items.emplace_back(name, std::move(value));
    }
    bool has(const std::string& name) const { return index.find(name) != index.end(); }
    Tensor<T>& at(const std::string& name) {
        auto it = index.find(name);
        require(it != index.end(), "ParamStore: unknown parameter '", name, "'");
        return items[it->second].second;
    }
    const Tensor<T>& at(const std::string& name) const {
        auto it = index.find(name);
        require(it != index.end(), "ParamStore: unknown parameter '", name, "'");
        return items[it->second].second;
    }
    size_t size() const { return items.size(); }
    int64_t total_elements() const {
        int64_t n = 0;
        for (const auto& [name, t] : items) n += t.numel();
        return n;
    }
    bool all_finite() const {
        for (const auto& [name, t] : items)
            if (!t.all_finite()) return false;
        return true;
    }
    template <typename U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (const auto& [name, t] : items) out.add(name, t.template cast<U>());
        return out;
    }
};

// Lazily registers parameters as graph inputs, caching the node per name and
// recording which names a forward pass touched. A trainable predicate
// controls requires_grad per parameter (fine-tuning freezes by name).
template <typename T>
class Binder {
public:
    using Ref = typename Graph<T>::Ref;

    Binder(Graph<T>& g, const ParamStore<T>& store) : g_(g), store_(store) {}
    Binder(Graph<T>& g, const ParamStore<T>& store, std::function<bool(const std::string&)> trainable)
        : g_(g), store_(store), trainable_(std::move(trainable)) {}

    Ref operator()(const std::string& name) {
        auto it = refs_.find(name);
        if (it != refs_.end()) return it->second;
        const bool rg = trainable_ ? trainable_(name) : true;
        Ref r = g_.input(store_.at(name), rg, name);
        refs_[name] = r;
        used_.insert(name);
        return r;
    }

    const std::set<std::string>& used() const { return used_; }

    // Gradients of every bound trainable parameter after backward().
    std::map<std::string, Tensor<T>> grads() {
        std::map<std::string, Tensor<T>> out;
        for (const auto& [name, ref] : refs_)
            if (g_.requires_grad(ref)) out[name] = g_.grad(ref);
        return out;
    }

private:
    Graph<T>& g_;
    const ParamStore<T>& store_;
    std::function<bool(const std::string&)> trainable_;
    std::map<std::string, Ref> refs_;
    std::set<std::string> used_;
};

// ---- plans ------------------------------------------------------------------

// Span masking: every frame is a span start with probability mask_prob; the
// mask is the union of [s, s+mask_len) windows clipped to the sequence.
struct MaskPlan {
    std::vector<int64_t> positions;  // ascending, unique

    bool contains(int64_t i) const {
        return std::binary_search(positions.begin(), positions.end(), i);
    }
};

inline MaskPlan make_mask_plan(int64_t length, double mask_prob, int32_t mask_len, Rng& rng) {
    require(length >= 1, "make_mask_plan: empty sequence");
    require(mask_prob >= 0 && mask_prob <= 1, "make_mask_plan: mask_prob out of [0,1]");
    std::vector<char> masked(static_cast<size_t>(length), 0);
    for (int64_t t = 0; t < length; ++t)
        if (rng.next_bernoulli(mask_prob))
            for (int64_t k = t; k < std::min(length, t + mask_len); ++k)
                masked[static_cast<size_t>(k)] = 1;
    MaskPlan plan;
    for (int64_t t = 0; t < length; ++t)
        if (masked[static_cast<size_t>(t)]) plan.positions.push_back(t);
    return plan;
}

// Swap positions are drawn only outside the masked set, so a swapped-in unit
// embedding can never reveal a masked target.
struct SwapPlan {
    std::vector<int64_t> positions;  // ascending, unique
};

inline SwapPlan make_swap_plan(const MaskPlan& mask, int64_t length, double swap_prob, Rng& rng) {
    require(swap_prob >= 0 && swap_prob <= 1, "make_swap_plan: swap_prob out of [0,1]");
    SwapPlan plan;
    for (int64_t t = 0; t < length; ++t) {
        if (mask.contains(t)) continue;
        if (rng.next_bernoulli(swap_prob)) plan.positions.push_back(t);
    }
    return plan;
}

// ---- parameter initialization -------------------------------------------------

namespace detail {
template <typename T>
void add_block_params(ParamStore<T>& store, const std::string& prefix, const StackConfig& cfg,
                      Rng& rng) {
    const int32_t d = cfg.d_model;
    auto normal = [&](int64_t r, int64_t c) {
        Tensor<T> t(r, c);
        for (auto& v : t.data) v = static_cast<T>(rng.next_gaussian() * 0.02);
        return t;
    };
    for (int32_t l = 0; l < cfg.layers; ++l) {
        const std::string p = cat(prefix, ".", l);
        store.add(p + ".ln1.g", Tensor<T>::full(1, d, T(1)));
        store.add(p + ".ln1.b", Tensor<T>(1, d));
        for (const char* w : {"wq", "wk", "wv", "wo"}) store.add(cat(p, ".attn.", w), normal(d, d));
        for (const char* b : {"bq", "bk", "bv", "bo"}) store.add(cat(p, ".attn.", b), Tensor<T>(1, d));
        store.add(p + ".relbias", Tensor<T>(cfg.rel_buckets, 1));
        store.add(p + ".ln2.g", Tensor<T>::full(1, d, T(1)));
        store.add(p + ".ln2.b", Tensor<T>(1, d));
        store.add(p + ".ffn.w1", normal(d, cfg.ffn_dim));
        store.add(p + ".ffn.b1", Tensor<T>(1, cfg.ffn_dim));
        store.add(p + ".ffn.w2", normal(cfg.ffn_dim, d));
        store.add(p + ".ffn.b2", Tensor<T>(1, d));
    }
}
}  // namespace detail

template <typename T>
ParamStore<T> init_model_params(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    ParamStore<T> store;
    Rng rng(mix64(seed, 0x9a7aULL));
    auto normal = [&](int64_t r, int64_t c) {
        Tensor<T> t(r, c);
        for (auto& v : t.data) v = static_cast<T>(rng.next_gaussian() * 0.02);
        return t;
    };
    store.add("frontend.w", normal(cfg.d_feat, cfg.d_model));
    store.add("frontend.b", Tensor<T>(1, cfg.d_model));
    store.add("mask_emb", normal(1, cfg.d_model));
    store.add("unit_emb", normal(cfg.unit_vocab, cfg.d_model));

    StackConfig stack{cfg.half_layers(), cfg.d_model,          cfg.heads,  cfg.ffn_dim,
                      cfg.rel_buckets,   cfg.rel_max_distance, cfg.dropout};
    detail::add_block_params(store, "speech", stack, rng);
    detail::add_block_params(store, "shared", stack, rng);

    if (!cfg.tie_label_embeddings) {
        store.add("umlm.mid.e", normal(cfg.unit_vocab, cfg.d_model));
        store.add("umlm.top.e", normal(cfg.unit_vocab, cfg.d_model));
    }
    store.add("umlm.mid.w", normal(cfg.d_model, cfg.d_model));
    store.add("umlm.top.w", normal(cfg.d_model, cfg.d_model));

    store.add("ctc.conv.wp", normal(cfg.d_model, cfg.d_model));
    store.add("ctc.conv.wc", normal(cfg.d_model, cfg.d_model));
    store.add("ctc.conv.b", Tensor<T>(1, cfg.d_model));
    store.add("ctc.proj.w", normal(cfg.d_model, cfg.char_vocab_with_blank));
    store.add("ctc.proj.b", Tensor<T>(1, cfg.char_vocab_with_blank));
    return store;
}

// ---- forward pieces ------------------------------------------------------------

// Bidirectional T5-style distance bucketing: half the buckets for each
// direction, exact for short offsets, log-spaced out to max_distance.
inline int64_t relative_bucket(int64_t rel, int32_t num_buckets, int32_t max_distance) {
    const int32_t half = num_buckets / 2;
    int64_t bucket = rel > 0 ? half : 0;
    int64_t a = std::llabs(rel);
    const int32_t max_exact = std::max(1, half / 2);
    if (a < max_exact) return bucket + a;
    const double frac = std::log(static_cast<double>(a) / max_exact) /
                        std::log(static_cast<double>(max_distance) / max_exact);
    const int64_t mapped =
        max_exact + static_cast<int64_t>(frac * (half - 1 - max_exact));
    return bucket + std::min<int64_t>(half - 1, mapped);
}

// Per-call dropout streams derived from (base, counter) keep the loss trace
// reproducible and make repeated graph builds see identical masks.
struct DropoutStream {
    uint64_t base = 0;
    bool enabled = false;
    int32_t counter = 0;

    uint64_t next() { return mix64(base, static_cast<uint64_t>(counter++)); }
};

// One pre-norm transformer block rooted at `prefix` (layer norms, multi-head
// attention with a bucketed relative-position bias shared across heads, FFN).
template <typename T>
typename Graph<T>::Ref encoder_block(Graph<T>& g, Binder<T>& params, const std::string& prefix,
                                     const StackConfig& cfg, typename Graph<T>::Ref x,
                                     DropoutStream& drop) {
    using Ref = typename Graph<T>::Ref;
    const int64_t len = g.value(x).rows();
    const int32_t head_dim = cfg.d_model / cfg.heads;
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(head_dim));

    std::vector<int64_t> bucket_ids(static_cast<size_t>(len * len));
    for (int64_t i = 0; i < len; ++i)
        for (int64_t j = 0; j < len; ++j)
            bucket_ids[static_cast<size_t>(i * len + j)] =
                relative_bucket(j - i, cfg.rel_buckets, cfg.rel_max_distance);

    Ref normed =
        g.add_row(g.mul_row(g.layer_norm_rows(x), params(prefix + ".ln1.g")), params(prefix + ".ln1.b"));
    Ref q = g.add_row(g.matmul(normed, params(prefix + ".attn.wq")), params(prefix + ".attn.bq"));
    Ref k = g.add_row(g.matmul(normed, params(prefix + ".attn.wk")), params(prefix + ".attn.bk"));
    Ref v = g.add_row(g.matmul(normed, params(prefix + ".attn.wv")), params(prefix + ".attn.bv"));
    Ref bias = g.reshape(g.gather_rows(params(prefix + ".relbias"), bucket_ids), len, len);
    std::vector<Ref> ctx;
    for (int32_t h = 0; h < cfg.heads; ++h) {
        Ref qh = g.slice_cols(q, h * head_dim, head_dim);
        Ref kh = g.slice_cols(k, h * head_dim, head_dim);
        Ref vh = g.slice_cols(v, h * head_dim, head_dim);
        Ref scores = g.add(g.scale(g.matmul(qh, g.transpose(kh)), inv_sqrt), bias);
        ctx.push_back(g.matmul(g.softmax_rows(scores), vh));
    }
    Ref attn =
        g.add_row(g.matmul(g.concat_cols(ctx), params(prefix + ".attn.wo")), params(prefix + ".attn.bo"));
    if (drop.enabled && cfg.dropout > 0)
        attn = g.dropout(attn, static_cast<T>(cfg.dropout), drop.next());
    x = g.add(x, attn);

    Ref normed2 =
        g.add_row(g.mul_row(g.layer_norm_rows(x), params(prefix + ".ln2.g")), params(prefix + ".ln2.b"));
    Ref hidden =
        g.gelu(g.add_row(g.matmul(normed2, params(prefix + ".ffn.w1")), params(prefix + ".ffn.b1")));
    Ref ffn = g.add_row(g.matmul(hidden, params(prefix + ".ffn.w2")), params(prefix + ".ffn.b2"));
    if (drop.enabled && cfg.dropout > 0)
        ffn = g.dropout(ffn, static_cast<T>(cfg.dropout), drop.next());
    return g.add(x, ffn);
}

template <typename T>
typename Graph<T>::Ref encoder_stack(Graph<T>& g, Binder<T>& params, const std::string& prefix,
                                     const StackConfig& cfg, typename Graph<T>::Ref x,
                                     DropoutStream& drop) {
    for (int32_t l = 0; l < cfg.layers; ++l)
        x = encoder_block(g, params, cat(prefix, ".", l), cfg, x, drop);
    return x;
}

// Bundles the pieces of one forward construction over a single sequence.
template <typename T>
struct ModelForward {
    Graph<T>& g;
    Binder<T>& params;
    const ModelConfig& cfg;
    DropoutStream drop;

    using Ref = typename Graph<T>::Ref;

    StackConfig stack_config() const {
        return StackConfig{cfg.half_layers(), cfg.d_model,          cfg.heads,  cfg.ffn_dim,
                           cfg.rel_buckets,   cfg.rel_max_distance, cfg.dropout};
    }

    // Strided linear projection of the frame features.
    Ref frontend(const Tensor<T>& features) {
        require(features.rows() >= 1, "frontend: empty input");
        require(features.cols() == cfg.d_feat, "frontend: feature width ", features.cols(),
                " != d_feat ", cfg.d_feat);
        Tensor<T> strided = features;
        if (cfg.frontend_stride > 1) {
            const int64_t out_rows =
                (features.rows() + cfg.frontend_stride - 1) / cfg.frontend_stride;
            strided = Tensor<T>(out_rows, features.cols());
            for (int64_t i = 0; i < out_rows; ++i)
                for (int64_t j = 0; j < features.cols(); ++j)
                    strided.at(i, j) = features.at(i * cfg.frontend_stride, j);
        }
        return g.add_row(g.matmul(g.constant(strided), params("frontend.w")),
                         params("frontend.b"));
    }

    Ref apply_mask(Ref x, const MaskPlan& plan) {
        if (plan.positions.empty()) return x;
        return g.replace_rows(x, params("mask_emb"), plan.positions);
    }

    Ref encode_speech(Ref x) { return encoder_stack(g, params, "speech", stack_config(), x, drop); }

    Ref embed_units(const UnitSequence& z) {
        require(!z.ids.empty(), "embed_units: empty unit sequence");
        std::vector<int64_t> ids;
        for (int32_t id : z.ids) {
            require(id >= 0 && id < cfg.unit_vocab, "embed_units: unit id ", id,
                    " out of range for vocab ", cfg.unit_vocab);
            ids.push_back(id);
        }
        return g.gather_rows(params("unit_emb"), ids);
    }

    Ref apply_swap(Ref h, const UnitSequence& z, const SwapPlan& plan) {
        require(static_cast<int64_t>(z.ids.size()) == g.value(h).rows(),
                "apply_swap: unit sequence length ", z.ids.size(), " != representation length ",
                g.value(h).rows());
        if (plan.positions.empty()) return h;
        UnitSequence swapped;
        swapped.kind = z.kind;
        for (int64_t i : plan.positions) swapped.ids.push_back(z.ids[static_cast<size_t>(i)]);
        return g.replace_rows_with(h, embed_units(swapped), plan.positions);
    }

    Ref encode_shared(Ref h) {
        require(g.value(h).cols() == cfg.d_model, "encode_shared: input width ",
                g.value(h).cols(), " != d_model ", cfg.d_model);
        require(g.value(h).rows() >= 1, "encode_shared: empty input");
        return encoder_stack(g, params, "shared", stack_config(), h, drop);
    }

    // Input plus every shared-layer output, for the layer-wise probe.
    std::vector<Ref> encode_shared_layers(Ref h) {
        std::vector<Ref> outs{h};
        const StackConfig full = stack_config();
        for (int32_t l = 0; l < full.layers; ++l) {
            h = encoder_block(g, params, cat("shared.", l), full, h, drop);
            outs.push_back(h);
        }
        return outs;
    }

    // Width-2 causal convolution (left pad one frame) + linear projection.
    Ref ctc_head(Ref h) {
        require(g.value(h).rows() >= 1, "ctc_head: empty input");
        Ref conv = g.add_row(g.add(g.matmul(g.shift_rows_down(h), params("ctc.conv.wp")),
                                   g.matmul(h, params("ctc.conv.wc"))),
                             params("ctc.conv.b"));
        return g.add_row(g.matmul(conv, params("ctc.proj.w")), params("ctc.proj.b"));
    }

    Ref label_embedding(const std::string& which) {
        return cfg.tie_label_embeddings ? params("unit_emb") : params(cat("umlm.", which, ".e"));
    }

};

}  // namespace splm
