#pragma once

#include <map>
#include <string>

#include "splm/graph.hpp"

namespace splm {

// Central-difference gradient verification. Always runs at float64: the
// whole point is to be a trustworthy independent check, and float32 noise
// floors would drown the signal.
struct GradCheckReport {
    double max_rel_error = 0.0;
    std::map<std::string, double> per_input;
};

using NamedTensors = std::map<std::string, Tensor<double>>;

// `build` receives a graph plus the named inputs already registered on it
// (requires_grad set) and must return the scalar output node.
template <typename Builder>
GradCheckReport finite_diff_check(Builder&& build, const NamedTensors& inputs, double step) {
    require(step >= 1e-7 && step <= 1e-4, "finite_diff_check: step ", step,
            " outside [1e-7, 1e-4]");

    auto forward_only = [&](const NamedTensors& values) {
        Graphd g(/*check_finite=*/true);
        std::map<std::string, Graphd::Ref> refs;
        for (const auto& [name, tensor] : values)
            refs[name] = g.input(tensor, /*requires_grad=*/true, name);
        Graphd::Ref out = build(g, refs);
        require(g.value(out).numel() == 1, "finite_diff_check: program output is ",
                g.value(out).shape_str(), ", not scalar");
        return g.value(out).item();
    };

    // analytic gradients
    std::map<std::string, Tensor<double>> analytic;
    {
        Graphd g(/*check_finite=*/true);
        std::map<std::string, Graphd::Ref> refs;
        for (const auto& [name, tensor] : inputs)
            refs[name] = g.input(tensor, /*requires_grad=*/true, name);
        Graphd::Ref out = build(g, refs);
        require(g.value(out).numel() == 1, "finite_diff_check: program output is ",
                g.value(out).shape_str(), ", not scalar");
        g.backward(out);
        for (const auto& [name, ref] : refs) analytic[name] = g.grad(ref);
    }

    GradCheckReport report;
    NamedTensors work = inputs;
    for (const auto& [name, tensor] : inputs) {
        double worst = 0.0;
        for (size_t i = 0; i < tensor.data.size(); ++i) {
            const double orig = work[name].data[i];
            work[name].data[i] = orig + step;
            const double plus = forward_only(work);
            work[name].data[i] = orig - step;
            const double minus = forward_only(work);
            work[name].data[i] = orig;
            const double numeric = (plus - minus) / (2.0 * step);
            const double exact = analytic[name].data[i];
            const double rel = std::abs(exact - numeric) /
                               std::max({std::abs(exact), std::abs(numeric), 1e-8});
            worst = std::max(worst, rel);
        }
        report.per_input[name] = worst;
        report.max_rel_error = std::max(report.max_rel_error, worst);
    }
    return report;
}

}  // namespace splm
