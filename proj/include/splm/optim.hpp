#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "splm/model.hpp"

namespace splm {

// Linear warmup to the peak, then linear decay to zero at `total`.
struct Schedule {
    double peak_lr = 5e-4;
    int64_t warmup = 1600;
    int64_t total = 20000;

    void validate() const {
        require(warmup > 0 && warmup < total, "Schedule: need 0 < warmup < total, got ", warmup,
                " / ", total);
        require(peak_lr > 0, "Schedule: peak_lr must be positive");
    }
};

inline double lr_at(const Schedule& s, int64_t step) {
    s.validate();
    require(step >= 0, "lr_at: negative step ", step);
    if (step >= s.total) return 0.0;
    if (step <= s.warmup)
        return s.peak_lr * static_cast<double>(step) / static_cast<double>(s.warmup);
    return s.peak_lr * static_cast<double>(s.total - step) /
           static_cast<double>(s.total - s.warmup);
}

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-8;
};

template <typename T>
struct AdamState {
    std::map<std::string, Tensor<T>> m;
    std::map<std::string, Tensor<T>> v;
    int64_t step = 0;
};

// Bias-corrected Adam over the parameters named in `grads`; parameters
// without a gradient entry are untouched. A non-finite gradient rejects the
// whole step before any state is mutated.
template <typename T>
void adam_step(ParamStore<T>& params, const std::map<std::string, Tensor<T>>& grads,
               AdamState<T>& state, double lr, const AdamConfig& cfg = {}) {
    for (const auto& [name, g] : grads) {
        require(params.has(name), "adam_step: gradient for unknown parameter '", name, "'");
        require(params.at(name).same_shape(g), "adam_step: gradient shape ", g.shape_str(),
                " != parameter '", name, "' shape ", params.at(name).shape_str());
        require(g.all_finite(), "adam_step: non-finite gradient for parameter '", name, "'");
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (const auto& [name, g] : grads) {
        Tensor<T>& p = params.at(name);
        auto mit = state.m.find(name);
        if (mit == state.m.end()) {
            state.m[name] = Tensor<T>(p.rows(), p.cols());
            state.v[name] = Tensor<T>(p.rows(), p.cols());
            mit = state.m.find(name);
        }
        Tensor<T>& m = mit->second;
        Tensor<T>& v = state.v[name];
        for (size_t i = 0; i < p.data.size(); ++i) {
            const double gi = static_cast<double>(g.data[i]);
            const double mi = cfg.beta1 * static_cast<double>(m.data[i]) + (1 - cfg.beta1) * gi;
            const double vi =
                cfg.beta2 * static_cast<double>(v.data[i]) + (1 - cfg.beta2) * gi * gi;
            m.data[i] = static_cast<T>(mi);
            v.data[i] = static_cast<T>(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            p.data[i] = static_cast<T>(static_cast<double>(p.data[i]) -
                                       lr * mhat / (std::sqrt(vhat) + cfg.eps));
        }
    }
}

// Global-norm clipping in place; returns the pre-clip norm.
template <typename T>
double clip_gradients(std::map<std::string, Tensor<T>>& grads, double max_norm) {
    double sq = 0;
    for (const auto& [name, g] : grads)
        for (T v : g.data) sq += static_cast<double>(v) * static_cast<double>(v);
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0) {
        const double s = max_norm / norm;
        for (auto& [name, g] : grads)
            for (auto& v : g.data) v = static_cast<T>(static_cast<double>(v) * s);
    }
    return norm;
}

}  // namespace splm
