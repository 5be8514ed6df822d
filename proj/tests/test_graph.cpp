#include <doctest.h>

#include <cmath>

#include "splm/gradcheck.hpp"
#include "splm/graph.hpp"

using namespace splm;

namespace {

// Independent triple-loop reference for matmul.
Tensor<double> naive_matmul(const Tensor<double>& a, const Tensor<double>& b) {
    Tensor<double> c(a.rows(), b.cols());
    for (int64_t i = 0; i < a.rows(); ++i)
        for (int64_t j = 0; j < b.cols(); ++j) {
            double s = 0;
            for (int64_t k = 0; k < a.cols(); ++k) s += a.at(i, k) * b.at(k, j);
            c.at(i, j) = s;
        }
    return c;
}

Tensor<double> random_tensor(int64_t r, int64_t c, uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    return Tensor<double>::randn(r, c, rng, scale);
}

}  // namespace

TEST_SUITE_BEGIN("graph");

TEST_CASE("softmax of equal logits is uniform") {
    Graphd g;
    auto out = g.softmax_rows(g.constant(Tensor<double>::row({0, 0, 0})));
    for (int j = 0; j < 3; ++j) CHECK(g.value(out).at(0, j) == doctest::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one") {
    Graphd g;
    auto out = g.softmax_rows(g.constant(random_tensor(7, 11, 42, 5.0)));
    for (int64_t i = 0; i < 7; ++i) {
        double s = 0;
        for (int64_t j = 0; j < 11; ++j) s += g.value(out).at(i, j);
        CHECK(std::abs(s - 1.0) < 1e-6);
    }
}

TEST_CASE("softmax is stable for large logits") {
    Graphd g(true);
    auto out = g.softmax_rows(g.constant(Tensor<double>::row({1000.0, 999.0, -1000.0})));
    CHECK(g.value(out).all_finite());
    CHECK(g.value(out).at(0, 0) > 0.7);
}

TEST_CASE("layer norm yields zero mean unit variance") {
    Graphd g;
    auto out = g.layer_norm_rows(g.constant(Tensor<double>::row({1, 2, 3})));
    const auto& y = g.value(out);
    double mean = 0, var = 0;
    for (int j = 0; j < 3; ++j) mean += y.at(0, j);
    mean /= 3;
    for (int j = 0; j < 3; ++j) var += (y.at(0, j) - mean) * (y.at(0, j) - mean);
    var /= 3;
    CHECK(std::abs(mean) < 1e-12);
    CHECK(std::abs(var - 1.0) < 1e-4);  // eps shifts variance slightly below 1
}

TEST_CASE("matmul matches the naive triple loop") {
    auto a = random_tensor(2, 3, 7);
    auto b = random_tensor(3, 4, 8);
    Graphd g;
    auto out = g.matmul(g.constant(a), g.constant(b));
    CHECK(max_abs_diff(g.value(out), naive_matmul(a, b)) < 1e-12);
}

TEST_CASE("grad of x squared at 3 is 6") {
    Graphd g;
    auto x = g.input(Tensor<double>::scalar(3.0), true);
    auto y = g.mul(x, x);
    g.backward(y);
    CHECK(g.grad(x).item() == doctest::Approx(6.0).epsilon(1e-14));
}

TEST_CASE("grad of a constant function is exactly zero") {
    Graphd g;
    auto x = g.input(Tensor<double>::scalar(3.0), true);
    auto c = g.constant(Tensor<double>::scalar(5.0));
    auto y = g.mul(c, c);  // does not depend on x
    g.backward(y);
    CHECK(g.grad(x).item() == 0.0);
}

TEST_CASE("gradient of a non-participating array is exactly zero") {
    Graphd g;
    auto x = g.input(random_tensor(3, 3, 1), true);
    auto unused = g.input(random_tensor(4, 5, 2), true);
    auto y = g.sum_all(g.mul(x, x));
    g.backward(y);
    const auto& gu = g.grad(unused);
    for (double v : gu.data) CHECK(v == 0.0);
}

TEST_CASE("softmax cross entropy gradient equals p minus onehot") {
    auto logits = random_tensor(1, 5, 99, 2.0);
    Graphd g;
    auto l = g.input(logits, true);
    auto loss = g.cross_entropy_sum(l, {3});
    g.backward(loss);
    // reference: p - onehot
    double mx = logits.at(0, 0);
    for (int j = 1; j < 5; ++j) mx = std::max(mx, logits.at(0, j));
    double z = 0;
    for (int j = 0; j < 5; ++j) z += std::exp(logits.at(0, j) - mx);
    for (int j = 0; j < 5; ++j) {
        const double p = std::exp(logits.at(0, j) - mx) / z;
        const double expect = p - (j == 3 ? 1.0 : 0.0);
        CHECK(std::abs(g.grad(l).at(0, j) - expect) < 1e-10);
    }
}

TEST_CASE("backward rejects non-scalar outputs") {
    Graphd g;
    auto x = g.input(random_tensor(2, 2, 3), true);
    auto y = g.mul(x, x);
    CHECK_THROWS_AS(g.backward(y), Error);
}

TEST_CASE("shape mismatch errors carry the kernel name") {
    Graphd g;
    auto a = g.constant(random_tensor(2, 3, 1));
    auto b = g.constant(random_tensor(2, 3, 2));
    try {
        g.matmul(a, b);
        FAIL("expected throw");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("matmul") != std::string::npos);
        CHECK(std::string(e.what()).find("2x3") != std::string::npos);
    }
}

TEST_CASE("backward visits each recorded operation exactly once") {
    Graphd g;
    auto x = g.input(random_tensor(3, 3, 4), true);
    auto a = g.mul(x, x);     // op 1
    auto b = g.add(a, x);     // op 2
    auto c = g.sum_all(b);    // op 3
    g.backward(c);
    CHECK(g.last_backward_visits() == 3);
}

TEST_CASE("forward is bitwise deterministic") {
    auto build = [](Graphd& g) {
        auto x = g.constant(random_tensor(6, 8, 11));
        auto w = g.constant(random_tensor(8, 8, 12));
        auto h = g.gelu(g.matmul(x, w));
        return g.value(g.softmax_rows(h));
    };
    Graphd g1, g2;
    CHECK(bit_equal(build(g1), build(g2)));
}

TEST_CASE("dropout mask is a pure function of the stream seed") {
    auto x = random_tensor(10, 10, 5);
    Graphd g1, g2;
    auto y1 = g1.dropout(g1.constant(x), 0.3, 777);
    auto y2 = g2.dropout(g2.constant(x), 0.3, 777);
    CHECK(bit_equal(g1.value(y1), g2.value(y2)));
    Graphd g3;
    auto y3 = g3.dropout(g3.constant(x), 0.3, 778);
    CHECK(!bit_equal(g1.value(y1), g3.value(y3)));
}

TEST_CASE("finite diff: quadratic form is tight") {
    auto report = finite_diff_check(
        [](Graphd& g, std::map<std::string, Graphd::Ref>& in) {
            auto q = g.matmul(g.matmul(in["x"], in["a"]), g.transpose(in["x"]));
            return g.sum_all(q);
        },
        {{"x", random_tensor(1, 4, 21)}, {"a", random_tensor(4, 4, 22)}}, 1e-5);
    CHECK(report.max_rel_error < 1e-8);
}

TEST_CASE("finite diff rejects step outside range") {
    NamedTensors in{{"x", Tensor<double>::scalar(1.0)}};
    auto build = [](Graphd& g, std::map<std::string, Graphd::Ref>& r) {
        return g.sum_all(r["x"]);
    };
    CHECK_THROWS_AS(finite_diff_check(build, in, 1e-2), Error);
    CHECK_THROWS_AS(finite_diff_check(build, in, 1e-8), Error);
}

// Every registered kernel, 20 random shapes/seeds each, max rel err < 1e-5.
TEST_CASE("finite diff sweep over every kernel") {
    struct KernelCase {
        const char* name;
        std::function<Graphd::Ref(Graphd&, std::map<std::string, Graphd::Ref>&, Rng&)> build;
        std::function<NamedTensors(Rng&)> make_inputs;
    };

    auto rand_dims = [](Rng& rng, int64_t lo, int64_t hi) {
        return lo + rng.next_below(hi - lo + 1);
    };

    std::vector<KernelCase> cases;
    cases.push_back({"matmul",
                     [](Graphd& g, auto& in, Rng&) {
                         return g.sum_all(g.mul(g.matmul(in["a"], in["b"]), in["w"]));
                     },
                     [&](Rng& rng) {
                         const int64_t m = rand_dims(rng, 1, 5), k = rand_dims(rng, 1, 5),
                                       n = rand_dims(rng, 1, 5);
                         return NamedTensors{{"a", Tensor<double>::randn(m, k, rng)},
                                             {"b", Tensor<double>::randn(k, n, rng)},
                                             {"w", Tensor<double>::randn(m, n, rng)}};
                     }});
    cases.push_back({"add_mul_scale",
                     [](Graphd& g, auto& in, Rng&) {
                         return g.sum_all(g.mul(g.add(in["a"], in["b"]), g.scale(in["a"], 0.7)));
                     },
                     [&](Rng& rng) {
                         const int64_t m = rand_dims(rng, 1, 6), n = rand_dims(rng, 1, 6);
                         return NamedTensors{{"a", Tensor<double>::randn(m, n, rng)},
                                             {"b", Tensor<double>::randn(m, n, rng)}};
                     }});
    cases.push_back({"row_broadcast",
                     [](Graphd& g, auto& in, Rng&) {
                         return g.sum_all(
                             g.mul(g.add_row(g.mul_row(in["x"], in["g"]), in["b"]), in["w"]));
                     },
                     [&](Rng& rng) {
                         const int64_t m = rand_dims(rng, 1, 6), n = rand_dims(rng, 1, 6);
                         return NamedTensors{{"x", Tensor<double>::randn(m, n, rng)},
                                             {"g", Tensor<double>::randn(1, n, rng)},
                                             {"b", Tensor<double>::randn(1, n, rng)},
                                             {"w", Tensor<double>::randn(m, n, rng)}};
                     }});
    cases.push_back({"softmax",
                     [](Graphd& g, auto& in, Rng&) {
                         auto p = g.softmax_rows(in["x"]);
                         return g.sum_all(g.mul(p, in["w"]));
                     },
                     [&](Rng& rng) {
                         const int64_t m = rand_dims(rng, 1, 5), n = rand_dims(rng, 2, 6);
                         return NamedTensors{{"x", Tensor<double>::randn(m, n, rng, 1.2)},
                                             {"w", Tensor<double>::randn(m, n, rng)}};
                     }});
    cases.push_back({"layer_norm",
                     [](Graphd& g, auto& in, Rng&) {
                         return g.sum_all(g.mul(g.layer_norm_rows(in["x"]), in["w"]));
                     },
                     [&](Rng& rng) {
                         const int64_t m = rand_dims(rng, 1, 5), n = rand_dims(rng, 2, 7);
                         return NamedTensors{{"x", Tensor<double>::randn(m, n, rng, 1.5)},
                                             {"w", Tensor<double>::randn(m, n, rng)}};
                     }});
    cases.push_back({"gelu",
                     [](Graphd& g, auto& in, Rng&) { return g.sum_all(g.gelu(in["x"])); },
                     [&](Rng& rng) {
                         const int64_t m = rand_dims(rng, 1, 6), n = rand_dims(rng, 1, 6);
                         return NamedTensors{{"x", Tensor<double>::randn(m, n, rng, 1.0)}};
                     }});
    cases.push_back({"gather_rows",
                     [](Graphd& g, auto& in, Rng& rng) {
                         const int64_t v = g.value(in["t"]).rows();
                         std::vector<int64_t> ids;
                         for (int i = 0; i < 6; ++i) ids.push_back(rng.next_below(v));
                         auto picked = g.gather_rows(in["t"], ids);
                         return g.sum_all(g.mul(picked, g.scale(picked, 0.5)));
                     },
                     [&](Rng& rng) {
                         const int64_t v = rand_dims(rng, 2, 6), d = rand_dims(rng, 1, 5);
                         return NamedTensors{{"t", Tensor<double>::randn(v, d, rng)}};
                     }});
    cases.push_back({"cosine_rows",
                     [](Graphd& g, auto& in, Rng&) {
                         return g.sum_all(g.mul(g.cosine_rows(in["a"], in["b"]), in["w"]));
                     },
                     [&](Rng& rng) {
                         const int64_t m = rand_dims(rng, 1, 4), k = rand_dims(rng, 1, 4),
                                       d = rand_dims(rng, 2, 6);
                         return NamedTensors{{"a", Tensor<double>::randn(m, d, rng)},
                                             {"b", Tensor<double>::randn(k, d, rng)},
                                             {"w", Tensor<double>::randn(m, k, rng)}};
                     }});
    cases.push_back({"logsumexp",
                     [](Graphd& g, auto& in, Rng&) {
                         return g.sum_all(g.logsumexp_rows(in["x"]));
                     },
                     [&](Rng& rng) {
                         const int64_t m = rand_dims(rng, 1, 5), n = rand_dims(rng, 1, 6);
                         return NamedTensors{{"x", Tensor<double>::randn(m, n, rng, 2.0)}};
                     }});
    cases.push_back({"cross_entropy",
                     [](Graphd& g, auto& in, Rng& rng) {
                         const int64_t m = g.value(in["x"]).rows(), n = g.value(in["x"]).cols();
                         std::vector<int64_t> t;
                         for (int64_t i = 0; i < m; ++i) t.push_back(rng.next_below(n));
                         return g.cross_entropy_sum(in["x"], t);
                     },
                     [&](Rng& rng) {
                         const int64_t m = rand_dims(rng, 1, 5), n = rand_dims(rng, 2, 6);
                         return NamedTensors{{"x", Tensor<double>::randn(m, n, rng, 2.0)}};
                     }});
    cases.push_back({"dropout",
                     [](Graphd& g, auto& in, Rng& rng) {
                         const uint64_t seed = rng.next_u64();
                         auto d = g.dropout(in["x"], 0.4, seed);
                         return g.sum_all(g.mul(d, g.scale(d, 0.5)));
                     },
                     [&](Rng& rng) {
                         const int64_t m = rand_dims(rng, 2, 6), n = rand_dims(rng, 2, 6);
                         return NamedTensors{{"x", Tensor<double>::randn(m, n, rng)}};
                     }});
    cases.push_back({"concat_and_slice",
                     [](Graphd& g, auto& in, Rng&) {
                         auto c = g.concat_cols({in["a"], in["b"]});
                         auto s = g.slice_cols(c, 1, g.value(c).cols() - 1);
                         auto r = g.concat_rows({s, s});
                         return g.sum_all(g.gelu(r));
                     },
                     [&](Rng& rng) {
                         const int64_t m = rand_dims(rng, 1, 4), n1 = rand_dims(rng, 2, 4),
                                       n2 = rand_dims(rng, 1, 4);
                         return NamedTensors{{"a", Tensor<double>::randn(m, n1, rng)},
                                             {"b", Tensor<double>::randn(m, n2, rng)}};
                     }});
    cases.push_back({"replace_rows",
                     [](Graphd& g, auto& in, Rng& rng) {
                         const int64_t m = g.value(in["x"]).rows();
                         std::vector<int64_t> idx{rng.next_below(m)};
                         auto masked = g.replace_rows(in["x"], in["e"], idx);
                         return g.sum_all(g.gelu(masked));
                     },
                     [&](Rng& rng) {
                         const int64_t m = rand_dims(rng, 2, 6), n = rand_dims(rng, 1, 5);
                         return NamedTensors{{"x", Tensor<double>::randn(m, n, rng)},
                                             {"e", Tensor<double>::randn(1, n, rng)}};
                     }});
    cases.push_back({"replace_rows_with",
                     [](Graphd& g, auto& in, Rng&) {
                         auto swapped = g.replace_rows_with(in["x"], in["r"], {0, 2});
                         return g.sum_all(g.gelu(swapped));
                     },
                     [&](Rng& rng) {
                         const int64_t n = rand_dims(rng, 1, 5);
                         return NamedTensors{{"x", Tensor<double>::randn(4, n, rng)},
                                             {"r", Tensor<double>::randn(2, n, rng)}};
                     }});
    cases.push_back({"shift_transpose_reshape",
                     [](Graphd& g, auto& in, Rng&) {
                         auto s = g.shift_rows_down(in["x"]);
                         auto t = g.transpose(s);
                         auto r = g.reshape(t, g.value(in["x"]).rows(), g.value(in["x"]).cols());
                         return g.mean_all(g.gelu(r));
                     },
                     [&](Rng& rng) {
                         const int64_t m = rand_dims(rng, 2, 6), n = rand_dims(rng, 1, 5);
                         return NamedTensors{{"x", Tensor<double>::randn(m, n, rng)}};
                     }});
    cases.push_back({"ctc",
                     [](Graphd& g, auto& in, Rng&) {
                         return g.ctc_loss(in["x"], {1, 2}, 0);
                     },
                     [&](Rng& rng) {
                         return NamedTensors{{"x", Tensor<double>::randn(5, 4, rng, 1.5)}};
                     }});

    for (const auto& kc : cases) {
        const std::string kernel_name = kc.name;
        CAPTURE(kernel_name);
        for (int trial = 0; trial < 20; ++trial) {
            Rng rng(mix64(0xfeedULL, static_cast<uint64_t>(trial),
                          std::hash<std::string>{}(kc.name)));
            NamedTensors inputs = kc.make_inputs(rng);
            // The builder runs once per finite-difference evaluation; reseed
            // so its random choices (ids, targets, dropout streams) are the
            // same function every time.
            const uint64_t builder_seed = rng.next_u64();
            auto report = finite_diff_check(
                [&](Graphd& g, std::map<std::string, Graphd::Ref>& refs) {
                    Rng per_call(builder_seed);
                    return kc.build(g, refs, per_call);
                },
                inputs, 1e-4);
            CAPTURE(trial);
            CHECK(report.max_rel_error < 1e-5);
        }
    }
}

TEST_SUITE_END();
