#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "splm/graph.hpp"
#include "splm/model.hpp"

namespace splm {

// Per-step loss report. Totals are recombined in double so the identity
// total == umlm_half + umlm_full + lambda * uctc holds to 1e-9 regardless of
// the training precision.
struct LossBreakdown {
    double umlm_half = 0;  // masked-unit term at the speech-stack output
    double umlm_full = 0;  // masked-unit term at the shared-stack output
    double uctc = 0;
    double total = 0;
    double lambda = 0;
    bool umlm_empty_warning = false;  // no masked positions anywhere in the batch
};

inline LossBreakdown joint_loss(double umlm_half, double umlm_full, double uctc, double lambda) {
    require(lambda >= 0, "joint_loss: lambda must be >= 0, got ", lambda);
    LossBreakdown b;
    b.umlm_half = umlm_half;
    b.umlm_full = umlm_full;
    b.uctc = uctc;
    b.lambda = lambda;
    b.total = umlm_half + umlm_full + lambda * uctc;
    return b;
}

// Softmax over cosine similarities between the projected representation and
// each label embedding, sharpened by 1/tau. Rows of `h` are scored
// independently; returns one probability row per input row. This is the
// eager reference path; training builds the same computation on the tape.
template <typename T>
Tensor<T> unit_distribution(const Tensor<T>& h, const Tensor<T>& proj, const Tensor<T>& emb,
                            T tau, T eps = T(1e-8)) {
    require(tau > 0, "unit_distribution: tau must be positive");
    require(h.cols() == proj.rows(), "unit_distribution: h width ", h.cols(),
            " vs projection ", proj.shape_str());
    require(proj.cols() == emb.cols(), "unit_distribution: projection ", proj.shape_str(),
            " vs embeddings ", emb.shape_str());
    Tensor<T> out(h.rows(), emb.rows());
    std::vector<T> projected(static_cast<size_t>(proj.cols()));
    for (int64_t i = 0; i < h.rows(); ++i) {
        for (int64_t c = 0; c < proj.cols(); ++c) {
            T s = 0;
            for (int64_t j = 0; j < h.cols(); ++j) s += h.at(i, j) * proj.at(j, c);
            projected[static_cast<size_t>(c)] = s;
        }
        T pn = 0;
        for (T v : projected) pn += v * v;
        pn = std::max(std::sqrt(pn), eps);
        T mx = -std::numeric_limits<T>::infinity();
        for (int64_t k = 0; k < emb.rows(); ++k) {
            T dot = 0, en = 0;
            for (int64_t j = 0; j < emb.cols(); ++j) {
                dot += projected[static_cast<size_t>(j)] * emb.at(k, j);
                en += emb.at(k, j) * emb.at(k, j);
            }
            en = std::max(std::sqrt(en), eps);
            out.at(i, k) = dot / (pn * en) / tau;
            mx = std::max(mx, out.at(i, k));
        }
        T z = 0;
        for (int64_t k = 0; k < emb.rows(); ++k) {
            out.at(i, k) = std::exp(out.at(i, k) - mx);
            z += out.at(i, k);
        }
        for (int64_t k = 0; k < emb.rows(); ++k) out.at(i, k) /= z;
    }
    return out;
}

// Tape-side unit-prediction logits for the rows of `h` listed in `positions`:
// cos(h W, e) / tau. Cross-entropy against the units at those positions gives
// the masked-prediction sum.
template <typename T>
typename Graph<T>::Ref unit_logits_at(Graph<T>& g, typename Graph<T>::Ref h,
                                      const std::vector<int64_t>& positions,
                                      typename Graph<T>::Ref proj, typename Graph<T>::Ref emb,
                                      double tau) {
    auto rows = g.gather_rows(h, positions);
    auto scores = g.cosine_rows(g.matmul(rows, proj), emb);
    return g.scale(scores, static_cast<T>(1.0 / tau));
}

template <typename T>
struct UmlmSums {
    typename Graph<T>::Ref sum_mid;  // valid only if count > 0
    typename Graph<T>::Ref sum_top;
    int64_t count = 0;
};

// Unnormalized masked-unit sums at both scoring layers for one sequence.
// The caller divides by the batch-wide masked-position count.
template <typename T>
UmlmSums<T> umlm_sums(ModelForward<T>& fwd, typename Graph<T>::Ref h_mid,
                      typename Graph<T>::Ref h_top, const UnitSequence& units,
                      const MaskPlan& plan) {
    Graph<T>& g = fwd.g;
    require(g.value(h_mid).rows() == static_cast<int64_t>(units.ids.size()),
            "umlm: unit sequence length ", units.ids.size(), " != representation length ",
            g.value(h_mid).rows());
    require(g.value(h_mid).rows() == g.value(h_top).rows(), "umlm: layer length mismatch");
    UmlmSums<T> out;
    out.count = static_cast<int64_t>(plan.positions.size());
    if (out.count == 0) return out;
    std::vector<int64_t> targets;
    for (int64_t i : plan.positions) targets.push_back(units.ids[static_cast<size_t>(i)]);
    auto mid_logits = unit_logits_at(g, h_mid, plan.positions, fwd.params("umlm.mid.w"),
                                     fwd.label_embedding("mid"), fwd.cfg.tau);
    auto top_logits = unit_logits_at(g, h_top, plan.positions, fwd.params("umlm.top.w"),
                                     fwd.label_embedding("top"), fwd.cfg.tau);
    out.sum_mid = g.cross_entropy_sum(mid_logits, targets);
    out.sum_top = g.cross_entropy_sum(top_logits, targets);
    return out;
}

// Masked-unit loss for one sequence, normalized by the masked count.
// Zero (with the warning surfaced by the caller) when nothing is masked.
template <typename T>
typename Graph<T>::Ref umlm_loss(ModelForward<T>& fwd, typename Graph<T>::Ref h_mid,
                                 typename Graph<T>::Ref h_top, const UnitSequence& units,
                                 const MaskPlan& plan) {
    auto sums = umlm_sums(fwd, h_mid, h_top, units, plan);
    if (sums.count == 0) return fwd.g.scalar(T(0));
    return fwd.g.scale(fwd.g.add(sums.sum_mid, sums.sum_top), T(1) / static_cast<T>(sums.count));
}

// Exact CTC negative log-likelihood (sum over alignments), eager form.
template <typename T>
T uctc_loss_value(const Tensor<T>& logits, const std::vector<int32_t>& target, int32_t blank) {
    Graph<T> g;
    auto loss = g.ctc_loss(g.constant(logits), target, blank);
    return g.value(loss).item();
}

// Enumeration oracle: walk every length-T label path, keep those whose
// collapse (dedup repeats, then drop blanks) equals the target, and sum
// their path probabilities. Exponential in T, hence the hard bounds.
inline double uctc_brute_force(const Tensor<double>& logits, const std::vector<int32_t>& target,
                               int32_t blank) {
    const int64_t frames = logits.rows(), vocab = logits.cols();
    require(frames >= 1 && frames <= 8, "uctc_brute_force: T=", frames, " outside [1,8]");
    require(vocab >= 2 && vocab <= 5, "uctc_brute_force: V=", vocab, " outside [2,5]");
    require(!target.empty(), "uctc_brute_force: empty target");
    for (int32_t t : target)
        require(t >= 0 && t < vocab && t != blank, "uctc_brute_force: bad target symbol ", t);

    Tensor<double> probs(frames, vocab);
    for (int64_t t = 0; t < frames; ++t) {
        double mx = logits.at(t, 0);
        for (int64_t j = 1; j < vocab; ++j) mx = std::max(mx, logits.at(t, j));
        double z = 0;
        for (int64_t j = 0; j < vocab; ++j) z += std::exp(logits.at(t, j) - mx);
        for (int64_t j = 0; j < vocab; ++j) probs.at(t, j) = std::exp(logits.at(t, j) - mx) / z;
    }

    std::vector<int32_t> path(static_cast<size_t>(frames), 0);
    double total = 0;
    while (true) {
        // collapse: dedup consecutive, then drop blanks
        std::vector<int32_t> collapsed;
        int32_t prev = -1;
        for (int32_t s : path) {
            if (s != prev && s != blank) collapsed.push_back(s);
            prev = s;
        }
        if (collapsed == target) {
            double p = 1;
            for (int64_t t = 0; t < frames; ++t) p *= probs.at(t, path[static_cast<size_t>(t)]);
            total += p;
        }
        // odometer increment
        int64_t pos = frames - 1;
        while (pos >= 0) {
            if (++path[static_cast<size_t>(pos)] < vocab) break;
            path[static_cast<size_t>(pos)] = 0;
            --pos;
        }
        if (pos < 0) break;
    }
    require(total > 0, "uctc_brute_force: target has zero probability (unproducible)");
    return -std::log(total);
}

// Per-frame argmax (ties to the lowest id), collapse repeats, drop blanks.
template <typename T>
std::vector<int32_t> ctc_greedy_decode(const Tensor<T>& logits, int32_t blank) {
    std::vector<int32_t> out;
    int32_t prev = -1;
    for (int64_t t = 0; t < logits.rows(); ++t) {
        int32_t best = 0;
        for (int64_t j = 1; j < logits.cols(); ++j)
            if (logits.at(t, j) > logits.at(t, best)) best = static_cast<int32_t>(j);
        if (best != prev && best != blank) out.push_back(best);
        prev = best;
    }
    return out;
}

// Edit distance between two id sequences (insert/delete/substitute, unit cost).
inline int64_t edit_distance(const std::vector<int32_t>& a, const std::vector<int32_t>& b) {
    const size_t n = a.size(), m = b.size();
    std::vector<int64_t> prev(m + 1), cur(m + 1);
    for (size_t j = 0; j <= m; ++j) prev[j] = static_cast<int64_t>(j);
    for (size_t i = 1; i <= n; ++i) {
        cur[0] = static_cast<int64_t>(i);
        for (size_t j = 1; j <= m; ++j) {
            const int64_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

}  // namespace splm
