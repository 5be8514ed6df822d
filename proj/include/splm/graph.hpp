#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "splm/rng.hpp"
#include "splm/tensor.hpp"

namespace splm {

// Reverse-mode tape. Operations execute eagerly at record time, so the node
// order is already topological; backward() sweeps the tape once in reverse.
//
// Execution contract: one Graph is single-threaded. Distinct graphs over
// distinct tensors may run concurrently; nothing in here is shared.
template <typename T>
class Graph {
public:
    struct Ref {
        int32_t id = -1;
        bool valid() const { return id >= 0; }
    };

    using EigenMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
    using EigenCMap =
        Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

    explicit Graph(bool check_finite = false) : check_finite_(check_finite) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // ---- leaves ---------------------------------------------------------

    Ref input(Tensor<T> value, bool requires_grad = false, std::string name = {}) {
        return push("input", std::move(name), {}, std::move(value), requires_grad, nullptr);
    }

    Ref constant(Tensor<T> value) { return input(std::move(value), false); }
    Ref scalar(T v) { return input(Tensor<T>::scalar(v), false); }

    // ---- elementwise / broadcast ----------------------------------------

    Ref add(Ref a, Ref b) {
        const Tensor<T>&A = val(a), &B = val(b);
        require(A.same_shape(B), "add: shape mismatch ", A.shape_str(), " vs ", B.shape_str());
        Tensor<T> out = A;
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += B.data[i];
        return push("add", {}, {a, b}, std::move(out), needs(a, b), [a, b](Graph& g, int32_t self) {
            const Tensor<T>& go = g.node(self).grad;
            g.accumulate(a, [&](Tensor<T>& ga) {
                for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += go.data[i];
            });
            g.accumulate(b, [&](Tensor<T>& gb) {
                for (size_t i = 0; i < gb.data.size(); ++i) gb.data[i] += go.data[i];
            });
        });
    }

    Ref mul(Ref a, Ref b) {
        const Tensor<T>&A = val(a), &B = val(b);
        require(A.same_shape(B), "mul: shape mismatch ", A.shape_str(), " vs ", B.shape_str());
        Tensor<T> out = A;
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= B.data[i];
        return push("mul", {}, {a, b}, std::move(out), needs(a, b), [a, b](Graph& g, int32_t self) {
            const Tensor<T>& go = g.node(self).grad;
            const Tensor<T>&A2 = g.val(a), &B2 = g.val(b);
            g.accumulate(a, [&](Tensor<T>& ga) {
                for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += go.data[i] * B2.data[i];
            });
            g.accumulate(b, [&](Tensor<T>& gb) {
                for (size_t i = 0; i < gb.data.size(); ++i) gb.data[i] += go.data[i] * A2.data[i];
            });
        });
    }

    Ref scale(Ref a, T c) {
        Tensor<T> out = val(a);
        for (auto& x : out.data) x *= c;
        return push("scale", {}, {a}, std::move(out), needs(a), [a, c](Graph& g, int32_t self) {
            const Tensor<T>& go = g.node(self).grad;
            g.accumulate(a, [&](Tensor<T>& ga) {
                for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += c * go.data[i];
            });
        });
    }

    // x: MxN plus row vector 1xN broadcast over rows.
    Ref add_row(Ref x, Ref r) {
        const Tensor<T>&X = val(x), &R = val(r);
        require(R.rows() == 1 && R.cols() == X.cols(), "add_row: bias ", R.shape_str(),
                " does not broadcast over ", X.shape_str());
        Tensor<T> out = X;
        for (int64_t i = 0; i < X.rows(); ++i)
            for (int64_t j = 0; j < X.cols(); ++j) out.at(i, j) += R.at(0, j);
        return push("add_row", {}, {x, r}, std::move(out), needs(x, r),
                    [x, r](Graph& g, int32_t self) {
                        const Tensor<T>& go = g.node(self).grad;
                        g.accumulate(x, [&](Tensor<T>& gx) {
                            for (size_t i = 0; i < gx.data.size(); ++i) gx.data[i] += go.data[i];
                        });
                        g.accumulate(r, [&](Tensor<T>& gr) {
                            for (int64_t i = 0; i < go.rows(); ++i)
                                for (int64_t j = 0; j < go.cols(); ++j) gr.at(0, j) += go.at(i, j);
                        });
                    });
    }

    Ref mul_row(Ref x, Ref r) {
        const Tensor<T>&X = val(x), &R = val(r);
        require(R.rows() == 1 && R.cols() == X.cols(), "mul_row: scale ", R.shape_str(),
                " does not broadcast over ", X.shape_str());
        Tensor<T> out = X;
        for (int64_t i = 0; i < X.rows(); ++i)
            for (int64_t j = 0; j < X.cols(); ++j) out.at(i, j) *= R.at(0, j);
        return push("mul_row", {}, {x, r}, std::move(out), needs(x, r),
                    [x, r](Graph& g, int32_t self) {
                        const Tensor<T>& go = g.node(self).grad;
                        const Tensor<T>&X2 = g.val(x), &R2 = g.val(r);
                        g.accumulate(x, [&](Tensor<T>& gx) {
                            for (int64_t i = 0; i < go.rows(); ++i)
                                for (int64_t j = 0; j < go.cols(); ++j)
                                    gx.at(i, j) += go.at(i, j) * R2.at(0, j);
                        });
                        g.accumulate(r, [&](Tensor<T>& gr) {
                            for (int64_t i = 0; i < go.rows(); ++i)
                                for (int64_t j = 0; j < go.cols(); ++j)
                                    gr.at(0, j) += go.at(i, j) * X2.at(i, j);
                        });
                    });
    }

    // ---- linear algebra ---------------------------------------------------

    Ref matmul(Ref a, Ref b) {
        const Tensor<T>&A = val(a), &B = val(b);
        require(A.cols() == B.rows(), "matmul: shape mismatch ", A.shape_str(), " * ",
                B.shape_str());
        Tensor<T> out(A.rows(), B.cols());
        EigenCMap ma(A.data.data(), A.rows(), A.cols());
        EigenCMap mb(B.data.data(), B.rows(), B.cols());
        EigenMap mo(out.data.data(), out.rows(), out.cols());
        mo.noalias() = ma * mb;
        return push("matmul", {}, {a, b}, std::move(out), needs(a, b),
                    [a, b](Graph& g, int32_t self) {
                        const Tensor<T>& go = g.node(self).grad;
                        const Tensor<T>&A2 = g.val(a), &B2 = g.val(b);
                        EigenCMap mgo(go.data.data(), go.rows(), go.cols());
                        EigenCMap ma(A2.data.data(), A2.rows(), A2.cols());
                        EigenCMap mb(B2.data.data(), B2.rows(), B2.cols());
                        g.accumulate(a, [&](Tensor<T>& ga) {
                            EigenMap mga(ga.data.data(), ga.rows(), ga.cols());
                            mga.noalias() += mgo * mb.transpose();
                        });
                        g.accumulate(b, [&](Tensor<T>& gb) {
                            EigenMap mgb(gb.data.data(), gb.rows(), gb.cols());
                            mgb.noalias() += ma.transpose() * mgo;
                        });
                    });
    }

    Ref transpose(Ref a) {
        const Tensor<T>& A = val(a);
        Tensor<T> out(A.cols(), A.rows());
        for (int64_t i = 0; i < A.rows(); ++i)
            for (int64_t j = 0; j < A.cols(); ++j) out.at(j, i) = A.at(i, j);
        return push("transpose", {}, {a}, std::move(out), needs(a), [a](Graph& g, int32_t self) {
            const Tensor<T>& go = g.node(self).grad;
            g.accumulate(a, [&](Tensor<T>& ga) {
                for (int64_t i = 0; i < go.rows(); ++i)
                    for (int64_t j = 0; j < go.cols(); ++j) ga.at(j, i) += go.at(i, j);
            });
        });
    }

    Ref reshape(Ref a, int64_t r, int64_t c) {
        const Tensor<T>& A = val(a);
        require(r * c == A.numel(), "reshape: cannot view ", A.shape_str(), " as ", r, "x", c);
        Tensor<T> out(r, c, A.data);
        return push("reshape", {}, {a}, std::move(out), needs(a), [a](Graph& g, int32_t self) {
            const Tensor<T>& go = g.node(self).grad;
            g.accumulate(a, [&](Tensor<T>& ga) {
                for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += go.data[i];
            });
        });
    }

    Ref slice_cols(Ref a, int64_t start, int64_t len) {
        const Tensor<T>& A = val(a);
        require(start >= 0 && len >= 1 && start + len <= A.cols(), "slice_cols: [", start, ",",
                start + len, ") out of range for ", A.shape_str());
        Tensor<T> out(A.rows(), len);
        for (int64_t i = 0; i < A.rows(); ++i)
            for (int64_t j = 0; j < len; ++j) out.at(i, j) = A.at(i, start + j);
        return push("slice_cols", {}, {a}, std::move(out), needs(a),
                    [a, start, len](Graph& g, int32_t self) {
                        const Tensor<T>& go = g.node(self).grad;
                        g.accumulate(a, [&](Tensor<T>& ga) {
                            for (int64_t i = 0; i < go.rows(); ++i)
                                for (int64_t j = 0; j < len; ++j)
                                    ga.at(i, start + j) += go.at(i, j);
                        });
                    });
    }

    Ref concat_cols(const std::vector<Ref>& parts) {
        require(!parts.empty(), "concat_cols: empty part list");
        const int64_t rows = val(parts[0]).rows();
        int64_t cols = 0;
        for (Ref p : parts) {
            require(val(p).rows() == rows, "concat_cols: row mismatch ", val(p).shape_str());
            cols += val(p).cols();
        }
        Tensor<T> out(rows, cols);
        int64_t off = 0;
        bool rg = false;
        for (Ref p : parts) {
            const Tensor<T>& P = val(p);
            for (int64_t i = 0; i < rows; ++i)
                for (int64_t j = 0; j < P.cols(); ++j) out.at(i, off + j) = P.at(i, j);
            off += P.cols();
            rg = rg || node(p.id).requires_grad;
        }
        std::vector<Ref> in = parts;
        return push("concat_cols", {}, in, std::move(out), rg, [in](Graph& g, int32_t self) {
            const Tensor<T>& go = g.node(self).grad;
            int64_t off2 = 0;
            for (Ref p : in) {
                const int64_t w = g.val(p).cols();
                g.accumulate(p, [&](Tensor<T>& gp) {
                    for (int64_t i = 0; i < go.rows(); ++i)
                        for (int64_t j = 0; j < w; ++j) gp.at(i, j) += go.at(i, off2 + j);
                });
                off2 += w;
            }
        });
    }

    // Concatenation along time (rows).
    Ref concat_rows(const std::vector<Ref>& parts) {
        require(!parts.empty(), "concat_rows: empty part list");
        const int64_t cols = val(parts[0]).cols();
        int64_t rows = 0;
        bool rg = false;
        for (Ref p : parts) {
            require(val(p).cols() == cols, "concat_rows: col mismatch ", val(p).shape_str());
            rows += val(p).rows();
            rg = rg || node(p.id).requires_grad;
        }
        Tensor<T> out(rows, cols);
        int64_t off = 0;
        for (Ref p : parts) {
            const Tensor<T>& P = val(p);
            for (int64_t i = 0; i < P.rows(); ++i)
                for (int64_t j = 0; j < cols; ++j) out.at(off + i, j) = P.at(i, j);
            off += P.rows();
        }
        std::vector<Ref> in = parts;
        return push("concat_rows", {}, in, std::move(out), rg, [in](Graph& g, int32_t self) {
            const Tensor<T>& go = g.node(self).grad;
            int64_t off2 = 0;
            for (Ref p : in) {
                const int64_t h = g.val(p).rows();
                g.accumulate(p, [&](Tensor<T>& gp) {
                    for (int64_t i = 0; i < h; ++i)
                        for (int64_t j = 0; j < go.cols(); ++j) gp.at(i, j) += go.at(off2 + i, j);
                });
                off2 += h;
            }
        });
    }

    // Row gather; doubles as the embedding lookup. Duplicate ids accumulate
    // their gradients into the same table row.
    Ref gather_rows(Ref table, std::vector<int64_t> ids) {
        const Tensor<T>& Tb = val(table);
        require(!ids.empty(), "gather_rows: empty id list");
        for (int64_t id : ids)
            require(id >= 0 && id < Tb.rows(), "gather_rows: id ", id, " out of range for ",
                    Tb.shape_str());
        Tensor<T> out(static_cast<int64_t>(ids.size()), Tb.cols());
        for (size_t i = 0; i < ids.size(); ++i)
            for (int64_t j = 0; j < Tb.cols(); ++j)
                out.at(static_cast<int64_t>(i), j) = Tb.at(ids[i], j);
        return push("gather_rows", {}, {table}, std::move(out), needs(table),
                    [table, ids = std::move(ids)](Graph& g, int32_t self) {
                        const Tensor<T>& go = g.node(self).grad;
                        g.accumulate(table, [&](Tensor<T>& gt) {
                            for (size_t i = 0; i < ids.size(); ++i)
                                for (int64_t j = 0; j < go.cols(); ++j)
                                    gt.at(ids[i], j) += go.at(static_cast<int64_t>(i), j);
                        });
                    });
    }

    // Rows listed in `idx` are replaced by the broadcast row `r` (the learned
    // mask embedding); all other rows pass through untouched.
    Ref replace_rows(Ref x, Ref r, std::vector<int64_t> idx) {
        const Tensor<T>&X = val(x), &R = val(r);
        require(R.rows() == 1 && R.cols() == X.cols(), "replace_rows: row ", R.shape_str(),
                " incompatible with ", X.shape_str());
        for (int64_t i : idx)
            require(i >= 0 && i < X.rows(), "replace_rows: index ", i, " out of range for ",
                    X.shape_str());
        Tensor<T> out = X;
        for (int64_t i : idx)
            for (int64_t j = 0; j < X.cols(); ++j) out.at(i, j) = R.at(0, j);
        return push("replace_rows", {}, {x, r}, std::move(out), needs(x, r),
                    [x, r, idx = std::move(idx)](Graph& g, int32_t self) {
                        const Tensor<T>& go = g.node(self).grad;
                        std::vector<char> hit(static_cast<size_t>(go.rows()), 0);
                        for (int64_t i : idx) hit[static_cast<size_t>(i)] = 1;
                        g.accumulate(x, [&](Tensor<T>& gx) {
                            for (int64_t i = 0; i < go.rows(); ++i)
                                if (!hit[static_cast<size_t>(i)])
                                    for (int64_t j = 0; j < go.cols(); ++j)
                                        gx.at(i, j) += go.at(i, j);
                        });
                        g.accumulate(r, [&](Tensor<T>& gr) {
                            for (int64_t i : idx)
                                for (int64_t j = 0; j < go.cols(); ++j)
                                    gr.at(0, j) += go.at(i, j);
                        });
                    });
    }

    // Row i of `x` becomes row k of `rows` for idx[k] == i (the swap
    // mechanism). Indices must be distinct.
    Ref replace_rows_with(Ref x, Ref rows, std::vector<int64_t> idx) {
        const Tensor<T>&X = val(x), &R = val(rows);
        require(R.cols() == X.cols() && R.rows() == static_cast<int64_t>(idx.size()),
                "replace_rows_with: rows ", R.shape_str(), " vs ", idx.size(), " indices into ",
                X.shape_str());
        for (int64_t i : idx)
            require(i >= 0 && i < X.rows(), "replace_rows_with: index ", i, " out of range for ",
                    X.shape_str());
        Tensor<T> out = X;
        for (size_t k = 0; k < idx.size(); ++k)
            for (int64_t j = 0; j < X.cols(); ++j) out.at(idx[k], j) = R.at(static_cast<int64_t>(k), j);
        return push("replace_rows_with", {}, {x, rows}, std::move(out), needs(x, rows),
                    [x, rows, idx = std::move(idx)](Graph& g, int32_t self) {
                        const Tensor<T>& go = g.node(self).grad;
                        std::vector<char> hit(static_cast<size_t>(go.rows()), 0);
                        for (int64_t i : idx) hit[static_cast<size_t>(i)] = 1;
                        g.accumulate(x, [&](Tensor<T>& gx) {
                            for (int64_t i = 0; i < go.rows(); ++i)
                                if (!hit[static_cast<size_t>(i)])
                                    for (int64_t j = 0; j < go.cols(); ++j)
                                        gx.at(i, j) += go.at(i, j);
                        });
                        g.accumulate(rows, [&](Tensor<T>& gr) {
                            for (size_t k = 0; k < idx.size(); ++k)
                                for (int64_t j = 0; j < go.cols(); ++j)
                                    gr.at(static_cast<int64_t>(k), j) += go.at(idx[k], j);
                        });
                    });
    }

    // ---- nonlinearities ---------------------------------------------------

    Ref softmax_rows(Ref a) {
        const Tensor<T>& A = val(a);
        Tensor<T> out(A.rows(), A.cols());
        for (int64_t i = 0; i < A.rows(); ++i) {
            T mx = A.at(i, 0);
            for (int64_t j = 1; j < A.cols(); ++j) mx = std::max(mx, A.at(i, j));
            T sum = 0;
            for (int64_t j = 0; j < A.cols(); ++j) {
                out.at(i, j) = std::exp(A.at(i, j) - mx);
                sum += out.at(i, j);
            }
            for (int64_t j = 0; j < A.cols(); ++j) out.at(i, j) /= sum;
        }
        return push("softmax_rows", {}, {a}, std::move(out), needs(a),
                    [a](Graph& g, int32_t self) {
                        const Tensor<T>&go = g.node(self).grad, &y = g.node(self).value;
                        g.accumulate(a, [&](Tensor<T>& ga) {
                            for (int64_t i = 0; i < y.rows(); ++i) {
                                T dot = 0;
                                for (int64_t j = 0; j < y.cols(); ++j)
                                    dot += go.at(i, j) * y.at(i, j);
                                for (int64_t j = 0; j < y.cols(); ++j)
                                    ga.at(i, j) += y.at(i, j) * (go.at(i, j) - dot);
                            }
                        });
                    });
    }

    // Per-row normalization to zero mean / unit variance (no affine part;
    // compose with mul_row/add_row for gamma and beta).
    Ref layer_norm_rows(Ref a, T eps = T(1e-5)) {
        const Tensor<T>& A = val(a);
        require(A.cols() >= 1, "layer_norm_rows: empty rows in ", A.shape_str());
        Tensor<T> out(A.rows(), A.cols());
        for (int64_t i = 0; i < A.rows(); ++i) {
            T mean = 0;
            for (int64_t j = 0; j < A.cols(); ++j) mean += A.at(i, j);
            mean /= static_cast<T>(A.cols());
            T var = 0;
            for (int64_t j = 0; j < A.cols(); ++j) {
                const T d = A.at(i, j) - mean;
                var += d * d;
            }
            var /= static_cast<T>(A.cols());
            const T inv = T(1) / std::sqrt(var + eps);
            for (int64_t j = 0; j < A.cols(); ++j) out.at(i, j) = (A.at(i, j) - mean) * inv;
        }
        return push("layer_norm_rows", {}, {a}, std::move(out), needs(a),
                    [a, eps](Graph& g, int32_t self) {
                        const Tensor<T>&go = g.node(self).grad, &y = g.node(self).value;
                        const Tensor<T>& x = g.val(a);
                        g.accumulate(a, [&](Tensor<T>& ga) {
                            const int64_t n = x.cols();
                            for (int64_t i = 0; i < x.rows(); ++i) {
                                T mean = 0;
                                for (int64_t j = 0; j < n; ++j) mean += x.at(i, j);
                                mean /= static_cast<T>(n);
                                T var = 0;
                                for (int64_t j = 0; j < n; ++j) {
                                    const T d = x.at(i, j) - mean;
                                    var += d * d;
                                }
                                var /= static_cast<T>(n);
                                const T inv = T(1) / std::sqrt(var + eps);
                                T gmean = 0, gydot = 0;
                                for (int64_t j = 0; j < n; ++j) {
                                    gmean += go.at(i, j);
                                    gydot += go.at(i, j) * y.at(i, j);
                                }
                                gmean /= static_cast<T>(n);
                                gydot /= static_cast<T>(n);
                                for (int64_t j = 0; j < n; ++j)
                                    ga.at(i, j) +=
                                        inv * (go.at(i, j) - gmean - y.at(i, j) * gydot);
                            }
                        });
                    });
    }

    Ref gelu(Ref a) {
        const Tensor<T>& A = val(a);
        Tensor<T> out = A;
        for (auto& x : out.data) {
            const T phi = T(0.5) * (T(1) + std::erf(x / T(M_SQRT2)));
            x = x * phi;
        }
        return push("gelu", {}, {a}, std::move(out), needs(a), [a](Graph& g, int32_t self) {
            const Tensor<T>& go = g.node(self).grad;
            const Tensor<T>& x = g.val(a);
            g.accumulate(a, [&](Tensor<T>& ga) {
                constexpr double inv_sqrt_2pi = 0.3989422804014327;
                for (size_t i = 0; i < x.data.size(); ++i) {
                    const double v = static_cast<double>(x.data[i]);
                    const double cdf = 0.5 * (1.0 + std::erf(v / M_SQRT2));
                    const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
                    ga.data[i] += go.data[i] * static_cast<T>(cdf + v * pdf);
                }
            });
        });
    }

    // Inverted dropout with an explicit stream seed; rate 0 is the identity.
    // The mask is drawn once at record time so repeated forwards of the same
    // graph construction (same seed) see the same mask.
    Ref dropout(Ref a, T rate, uint64_t stream_seed) {
        require(rate >= T(0) && rate < T(1), "dropout: rate ", rate, " outside [0,1)");
        if (rate == T(0)) return a;
        const Tensor<T>& A = val(a);
        Rng rng(stream_seed);
        Tensor<T> mask(A.rows(), A.cols());
        const T keep_scale = T(1) / (T(1) - rate);
        for (auto& m : mask.data)
            m = rng.next_double() < static_cast<double>(rate) ? T(0) : keep_scale;
        Tensor<T> out = A;
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= mask.data[i];
        return push("dropout", {}, {a}, std::move(out), needs(a),
                    [a, mask = std::move(mask)](Graph& g, int32_t self) {
                        const Tensor<T>& go = g.node(self).grad;
                        g.accumulate(a, [&](Tensor<T>& ga) {
                            for (size_t i = 0; i < ga.data.size(); ++i)
                                ga.data[i] += go.data[i] * mask.data[i];
                        });
                    });
    }

    // ---- similarity / reductions ------------------------------------------

    // C[i,k] = <a_i, b_k> / (max(|a_i|,eps) * max(|b_k|,eps)).
    Ref cosine_rows(Ref a, Ref b, T eps = T(1e-8)) {
        const Tensor<T>&A = val(a), &B = val(b);
        require(A.cols() == B.cols(), "cosine_rows: width mismatch ", A.shape_str(), " vs ",
                B.shape_str());
        Tensor<T> out(A.rows(), B.rows());
        std::vector<T> na(static_cast<size_t>(A.rows())), nb(static_cast<size_t>(B.rows()));
        for (int64_t i = 0; i < A.rows(); ++i) {
            T s = 0;
            for (int64_t j = 0; j < A.cols(); ++j) s += A.at(i, j) * A.at(i, j);
            na[static_cast<size_t>(i)] = std::max(std::sqrt(s), eps);
        }
        for (int64_t k = 0; k < B.rows(); ++k) {
            T s = 0;
            for (int64_t j = 0; j < B.cols(); ++j) s += B.at(k, j) * B.at(k, j);
            nb[static_cast<size_t>(k)] = std::max(std::sqrt(s), eps);
        }
        for (int64_t i = 0; i < A.rows(); ++i)
            for (int64_t k = 0; k < B.rows(); ++k) {
                T dot = 0;
                for (int64_t j = 0; j < A.cols(); ++j) dot += A.at(i, j) * B.at(k, j);
                out.at(i, k) = dot / (na[static_cast<size_t>(i)] * nb[static_cast<size_t>(k)]);
            }
        return push(
            "cosine_rows", {}, {a, b}, std::move(out), needs(a, b),
            [a, b, eps](Graph& g, int32_t self) {
                const Tensor<T>&go = g.node(self).grad, &C = g.node(self).value;
                const Tensor<T>&A2 = g.val(a), &B2 = g.val(b);
                std::vector<T> na(static_cast<size_t>(A2.rows())), nb(static_cast<size_t>(B2.rows()));
                std::vector<char> fa(na.size()), fb(nb.size());
                for (int64_t i = 0; i < A2.rows(); ++i) {
                    T s = 0;
                    for (int64_t j = 0; j < A2.cols(); ++j) s += A2.at(i, j) * A2.at(i, j);
                    const T n = std::sqrt(s);
                    fa[static_cast<size_t>(i)] = n < eps;
                    na[static_cast<size_t>(i)] = std::max(n, eps);
                }
                for (int64_t k = 0; k < B2.rows(); ++k) {
                    T s = 0;
                    for (int64_t j = 0; j < B2.cols(); ++j) s += B2.at(k, j) * B2.at(k, j);
                    const T n = std::sqrt(s);
                    fb[static_cast<size_t>(k)] = n < eps;
                    nb[static_cast<size_t>(k)] = std::max(n, eps);
                }
                g.accumulate(a, [&](Tensor<T>& ga) {
                    for (int64_t i = 0; i < A2.rows(); ++i)
                        for (int64_t k = 0; k < B2.rows(); ++k) {
                            const T gik = go.at(i, k);
                            if (gik == T(0)) continue;
                            const T inv = T(1) / (na[static_cast<size_t>(i)] * nb[static_cast<size_t>(k)]);
                            for (int64_t j = 0; j < A2.cols(); ++j) {
                                T d = B2.at(k, j) * inv;
                                if (!fa[static_cast<size_t>(i)])
                                    d -= C.at(i, k) * A2.at(i, j) /
                                         (na[static_cast<size_t>(i)] * na[static_cast<size_t>(i)]);
                                ga.at(i, j) += gik * d;
                            }
                        }
                });
                g.accumulate(b, [&](Tensor<T>& gb) {
                    for (int64_t i = 0; i < A2.rows(); ++i)
                        for (int64_t k = 0; k < B2.rows(); ++k) {
                            const T gik = go.at(i, k);
                            if (gik == T(0)) continue;
                            const T inv = T(1) / (na[static_cast<size_t>(i)] * nb[static_cast<size_t>(k)]);
                            for (int64_t j = 0; j < B2.cols(); ++j) {
                                T d = A2.at(i, j) * inv;
                                if (!fb[static_cast<size_t>(k)])
                                    d -= C.at(i, k) * B2.at(k, j) /
                                         (nb[static_cast<size_t>(k)] * nb[static_cast<size_t>(k)]);
                                gb.at(k, j) += gik * d;
                            }
                        }
                });
            });
    }

    Ref logsumexp_rows(Ref a) {
        const Tensor<T>& A = val(a);
        Tensor<T> out(A.rows(), 1);
        for (int64_t i = 0; i < A.rows(); ++i) {
            T mx = A.at(i, 0);
            for (int64_t j = 1; j < A.cols(); ++j) mx = std::max(mx, A.at(i, j));
            T s = 0;
            for (int64_t j = 0; j < A.cols(); ++j) s += std::exp(A.at(i, j) - mx);
            out.at(i, 0) = mx + std::log(s);
        }
        return push("logsumexp_rows", {}, {a}, std::move(out), needs(a),
                    [a](Graph& g, int32_t self) {
                        const Tensor<T>&go = g.node(self).grad, &lse = g.node(self).value;
                        const Tensor<T>& x = g.val(a);
                        g.accumulate(a, [&](Tensor<T>& ga) {
                            for (int64_t i = 0; i < x.rows(); ++i)
                                for (int64_t j = 0; j < x.cols(); ++j)
                                    ga.at(i, j) +=
                                        go.at(i, 0) * std::exp(x.at(i, j) - lse.at(i, 0));
                        });
                    });
    }

    // Sum over rows of -log softmax(logits_i)[target_i]; the caller gathers
    // the positions it wants scored (masked positions, frames, ...).
    Ref cross_entropy_sum(Ref logits, std::vector<int64_t> targets) {
        const Tensor<T>& L = val(logits);
        require(static_cast<int64_t>(targets.size()) == L.rows(), "cross_entropy_sum: ",
                targets.size(), " targets for ", L.shape_str(), " logits");
        for (int64_t t : targets)
            require(t >= 0 && t < L.cols(), "cross_entropy_sum: target ", t,
                    " out of range for ", L.shape_str());
        T total = 0;
        for (int64_t i = 0; i < L.rows(); ++i) {
            T mx = L.at(i, 0);
            for (int64_t j = 1; j < L.cols(); ++j) mx = std::max(mx, L.at(i, j));
            T s = 0;
            for (int64_t j = 0; j < L.cols(); ++j) s += std::exp(L.at(i, j) - mx);
            total += mx + std::log(s) - L.at(i, targets[static_cast<size_t>(i)]);
        }
        return push("cross_entropy_sum", {}, {logits}, Tensor<T>::scalar(total), needs(logits),
                    [logits, targets = std::move(targets)](Graph& g, int32_t self) {
                        const T go = g.node(self).grad.item();
                        const Tensor<T>& L2 = g.val(logits);
                        g.accumulate(logits, [&](Tensor<T>& gl) {
                            for (int64_t i = 0; i < L2.rows(); ++i) {
                                T mx = L2.at(i, 0);
                                for (int64_t j = 1; j < L2.cols(); ++j)
                                    mx = std::max(mx, L2.at(i, j));
                                T s = 0;
                                for (int64_t j = 0; j < L2.cols(); ++j)
                                    s += std::exp(L2.at(i, j) - mx);
                                for (int64_t j = 0; j < L2.cols(); ++j) {
                                    T p = std::exp(L2.at(i, j) - mx) / s;
                                    if (j == targets[static_cast<size_t>(i)]) p -= T(1);
                                    gl.at(i, j) += go * p;
                                }
                            }
                        });
                    });
    }

    Ref sum_all(Ref a) {
        const Tensor<T>& A = val(a);
        T s = 0;
        for (T v : A.data) s += v;
        return push("sum_all", {}, {a}, Tensor<T>::scalar(s), needs(a),
                    [a](Graph& g, int32_t self) {
                        const T go = g.node(self).grad.item();
                        g.accumulate(a, [&](Tensor<T>& ga) {
                            for (auto& v : ga.data) v += go;
                        });
                    });
    }

    Ref mean_all(Ref a) {
        const Tensor<T>& A = val(a);
        T s = 0;
        for (T v : A.data) s += v;
        const T n = static_cast<T>(A.numel());
        return push("mean_all", {}, {a}, Tensor<T>::scalar(s / n), needs(a),
                    [a, n](Graph& g, int32_t self) {
                        const T go = g.node(self).grad.item() / n;
                        g.accumulate(a, [&](Tensor<T>& ga) {
                            for (auto& v : ga.data) v += go;
                        });
                    });
    }

    // Row t of the output is row t-1 of the input; row 0 is zero. This is the
    // left-padding half of the width-2 convolution.
    Ref shift_rows_down(Ref a) {
        const Tensor<T>& A = val(a);
        Tensor<T> out(A.rows(), A.cols());
        for (int64_t i = 1; i < A.rows(); ++i)
            for (int64_t j = 0; j < A.cols(); ++j) out.at(i, j) = A.at(i - 1, j);
        return push("shift_rows_down", {}, {a}, std::move(out), needs(a),
                    [a](Graph& g, int32_t self) {
                        const Tensor<T>& go = g.node(self).grad;
                        g.accumulate(a, [&](Tensor<T>& ga) {
                            for (int64_t i = 1; i < go.rows(); ++i)
                                for (int64_t j = 0; j < go.cols(); ++j)
                                    ga.at(i - 1, j) += go.at(i, j);
                        });
                    });
    }

    // ---- CTC ---------------------------------------------------------------

    // Negative log marginal over all alignments whose collapse equals
    // `target`, computed with the forward recursion in log space. The
    // backward pass uses the alpha/beta posterior. An unreachable target
    // (too long for the frame count) is an error, not an infinite loss.
    Ref ctc_loss(Ref logits, std::vector<int32_t> target, int32_t blank) {
        const Tensor<T>& L = val(logits);
        const int64_t frames = L.rows(), vocab = L.cols();
        require(blank >= 0 && blank < vocab, "ctc_loss: blank id ", blank, " out of range for ",
                L.shape_str());
        require(!target.empty(), "ctc_loss: empty target");
        int64_t min_frames = static_cast<int64_t>(target.size());
        for (size_t i = 0; i < target.size(); ++i) {
            require(target[i] >= 0 && target[i] < vocab && target[i] != blank,
                    "ctc_loss: target symbol ", target[i], " invalid for vocab ", vocab);
            if (i > 0 && target[i] == target[i - 1]) ++min_frames;
        }
        require(min_frames <= frames, "ctc_loss: target needs at least ", min_frames,
                " frames but input has ", frames);

        // log-softmax per frame
        Tensor<T> logp(frames, vocab);
        for (int64_t t = 0; t < frames; ++t) {
            T mx = L.at(t, 0);
            for (int64_t j = 1; j < vocab; ++j) mx = std::max(mx, L.at(t, j));
            T s = 0;
            for (int64_t j = 0; j < vocab; ++j) s += std::exp(L.at(t, j) - mx);
            const T lse = mx + std::log(s);
            for (int64_t j = 0; j < vocab; ++j) logp.at(t, j) = L.at(t, j) - lse;
        }

        // blank-interleaved label sequence
        const int64_t S = 2 * static_cast<int64_t>(target.size()) + 1;
        std::vector<int32_t> lab(static_cast<size_t>(S), blank);
        for (size_t i = 0; i < target.size(); ++i) lab[2 * i + 1] = target[i];

        const T ninf = -std::numeric_limits<T>::infinity();
        auto lse2 = [](T a, T b) {
            if (a == -std::numeric_limits<T>::infinity()) return b;
            if (b == -std::numeric_limits<T>::infinity()) return a;
            const T m = std::max(a, b);
            return m + std::log(std::exp(a - m) + std::exp(b - m));
        };

        Tensor<T> alpha(frames, S);
        for (auto& v : alpha.data) v = ninf;
        alpha.at(0, 0) = logp.at(0, blank);
        if (S > 1) alpha.at(0, 1) = logp.at(0, lab[1]);
        for (int64_t t = 1; t < frames; ++t)
            for (int64_t s = 0; s < S; ++s) {
                T acc = alpha.at(t - 1, s);
                if (s >= 1) acc = lse2(acc, alpha.at(t - 1, s - 1));
                if (s >= 2 && lab[static_cast<size_t>(s)] != blank &&
                    lab[static_cast<size_t>(s)] != lab[static_cast<size_t>(s - 2)])
                    acc = lse2(acc, alpha.at(t - 1, s - 2));
                alpha.at(t, s) = acc + logp.at(t, lab[static_cast<size_t>(s)]);
            }
        T log_marginal = alpha.at(frames - 1, S - 1);
        if (S > 1) log_marginal = lse2(log_marginal, alpha.at(frames - 1, S - 2));
        require(std::isfinite(static_cast<double>(log_marginal)),
                "ctc_loss: target has zero probability mass");

        return push(
            "ctc_loss", {}, {logits}, Tensor<T>::scalar(-log_marginal), needs(logits),
            [logits, lab = std::move(lab), alpha = std::move(alpha), logp = std::move(logp),
             log_marginal, blank](Graph& g, int32_t self) {
                const T go = g.node(self).grad.item();
                const int64_t frames2 = logp.rows(), vocab2 = logp.cols();
                const int64_t S2 = static_cast<int64_t>(lab.size());
                const T ninf2 = -std::numeric_limits<T>::infinity();
                auto lse2b = [ninf2](T a, T b) {
                    if (a == ninf2) return b;
                    if (b == ninf2) return a;
                    const T m = std::max(a, b);
                    return m + std::log(std::exp(a - m) + std::exp(b - m));
                };
                // beta[t][s]: suffix probability from t+1 on, given state s at t.
                Tensor<T> beta(frames2, S2);
                for (auto& v : beta.data) v = ninf2;
                beta.at(frames2 - 1, S2 - 1) = T(0);
                if (S2 > 1) beta.at(frames2 - 1, S2 - 2) = T(0);
                for (int64_t t = frames2 - 2; t >= 0; --t)
                    for (int64_t s = 0; s < S2; ++s) {
                        T acc = beta.at(t + 1, s) + logp.at(t + 1, lab[static_cast<size_t>(s)]);
                        if (s + 1 < S2)
                            acc = lse2b(acc, beta.at(t + 1, s + 1) +
                                                 logp.at(t + 1, lab[static_cast<size_t>(s + 1)]));
                        if (s + 2 < S2 && lab[static_cast<size_t>(s + 2)] != blank &&
                            lab[static_cast<size_t>(s + 2)] != lab[static_cast<size_t>(s)])
                            acc = lse2b(acc, beta.at(t + 1, s + 2) +
                                                 logp.at(t + 1, lab[static_cast<size_t>(s + 2)]));
                        beta.at(t, s) = acc;
                    }
                g.accumulate(logits, [&](Tensor<T>& gl) {
                    for (int64_t t = 0; t < frames2; ++t) {
                        std::vector<T> occ(static_cast<size_t>(vocab2), ninf2);
                        for (int64_t s = 0; s < S2; ++s) {
                            const int32_t k = lab[static_cast<size_t>(s)];
                            occ[static_cast<size_t>(k)] = lse2b(
                                occ[static_cast<size_t>(k)], alpha.at(t, s) + beta.at(t, s));
                        }
                        for (int64_t k = 0; k < vocab2; ++k) {
                            // d(-log p)/d logits = softmax - posterior
                            const T post = occ[static_cast<size_t>(k)] == ninf2
                                               ? T(0)
                                               : std::exp(occ[static_cast<size_t>(k)] -
                                                          log_marginal);
                            gl.at(t, k) += go * (std::exp(logp.at(t, k)) - post);
                        }
                    }
                });
            });
    }

    // ---- execution ----------------------------------------------------------

    const Tensor<T>& value(Ref r) const { return node(r.id).value; }

    // Gradient of the last backward() w.r.t. this node. Exactly zero (never
    // touched) for nodes outside the output's ancestry.
    const Tensor<T>& grad(Ref r) {
        Node& n = node_mut(r.id);
        ensure_grad(n);
        return n.grad;
    }

    void backward(Ref output) {
        const Tensor<T>& out = value(output);
        require(out.numel() == 1, "backward: output must be scalar, got ", out.shape_str());
        // reset grads
        for (auto& n : nodes_) n.grad = Tensor<T>();
        // mark the ancestry that actually needs gradients
        std::vector<char> reachable(nodes_.size(), 0);
        std::vector<int32_t> stack{output.id};
        reachable[static_cast<size_t>(output.id)] = 1;
        while (!stack.empty()) {
            const int32_t id = stack.back();
            stack.pop_back();
            for (Ref in : nodes_[static_cast<size_t>(id)].inputs) {
                if (!nodes_[static_cast<size_t>(in.id)].requires_grad) continue;
                if (!reachable[static_cast<size_t>(in.id)]) {
                    reachable[static_cast<size_t>(in.id)] = 1;
                    stack.push_back(in.id);
                }
            }
        }
        ensure_grad(node_mut(output.id));
        node_mut(output.id).grad.data[0] = T(1);
        last_backward_visits_ = 0;
        for (int32_t id = output.id; id >= 0; --id) {
            Node& n = node_mut(id);
            if (!reachable[static_cast<size_t>(id)] || !n.backward) continue;
            if (!n.requires_grad) continue;
            ++last_backward_visits_;
            n.backward(*this, id);
        }
        if (check_finite_)
            for (const auto& n : nodes_)
                if (n.grad.numel() > 0 && !n.grad.all_finite())
                    fail("backward: non-finite gradient at op '", n.op, "'");
    }

    size_t size() const { return nodes_.size(); }
    size_t last_backward_visits() const { return last_backward_visits_; }
    const std::string& op_name(Ref r) const { return node(r.id).op; }
    bool requires_grad(Ref r) const { return node(r.id).requires_grad; }

private:
    struct Node {
        std::string op;
        std::string name;
        std::vector<Ref> inputs;
        Tensor<T> value;
        Tensor<T> grad;
        bool requires_grad = false;
        std::function<void(Graph&, int32_t)> backward;
    };

    const Tensor<T>& val(Ref r) const { return node(r.id).value; }
    bool needs(Ref a) const { return node(a.id).requires_grad; }
    bool needs(Ref a, Ref b) const { return needs(a) || needs(b); }

    const Node& node(int32_t id) const {
        require(id >= 0 && id < static_cast<int32_t>(nodes_.size()), "graph: invalid node id ",
                id);
        return nodes_[static_cast<size_t>(id)];
    }
    Node& node_mut(int32_t id) {
        require(id >= 0 && id < static_cast<int32_t>(nodes_.size()), "graph: invalid node id ",
                id);
        return nodes_[static_cast<size_t>(id)];
    }

    void ensure_grad(Node& n) {
        if (n.grad.numel() == 0) n.grad = Tensor<T>(n.value.rows(), n.value.cols());
    }

    template <typename F>
    void accumulate(Ref target, F&& f) {
        Node& n = node_mut(target.id);
        if (!n.requires_grad) return;
        ensure_grad(n);
        f(n.grad);
    }

    Ref push(std::string op, std::string name, std::vector<Ref> inputs, Tensor<T> value,
             bool requires_grad, std::function<void(Graph&, int32_t)> backward) {
        if (check_finite_ && !value.all_finite())
            fail("graph: non-finite values produced by op '", op, "'");
        Node n;
        n.op = std::move(op);
        n.name = std::move(name);
        n.inputs = std::move(inputs);
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return Ref{static_cast<int32_t>(nodes_.size() - 1)};
    }

    std::vector<Node> nodes_;
    bool check_finite_ = false;
    size_t last_backward_visits_ = 0;
};

using Graphd = Graph<double>;
using Graphf = Graph<float>;

}  // namespace splm
