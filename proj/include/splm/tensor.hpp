#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <vector>

#include "splm/error.hpp"
#include "splm/rng.hpp"

namespace splm {

// Dense row-major 2-D array. Everything in the compute core is a matrix;
// scalars are 1x1 and row vectors are 1xN.
template <typename T>
struct Tensor {
    int64_t rows_ = 0;
    int64_t cols_ = 0;
    std::vector<T> data;

    Tensor() = default;
    Tensor(int64_t r, int64_t c) : rows_(r), cols_(c), data(check_size(r, c), T(0)) {}
    Tensor(int64_t r, int64_t c, std::vector<T> d) : rows_(r), cols_(c), data(std::move(d)) {
        require(static_cast<int64_t>(data.size()) == r * c,
                "Tensor: data size ", data.size(), " does not match shape ", r, "x", c);
    }

    static Tensor scalar(T v) {
        Tensor t(1, 1);
        t.data[0] = v;
        return t;
    }
    static Tensor row(std::initializer_list<T> vals) {
        Tensor t(1, static_cast<int64_t>(vals.size()));
        int64_t i = 0;
        for (T v : vals) t.data[static_cast<size_t>(i++)] = v;
        return t;
    }
    static Tensor full(int64_t r, int64_t c, T v) {
        Tensor t(r, c);
        for (auto& x : t.data) x = v;
        return t;
    }
    static Tensor randn(int64_t r, int64_t c, Rng& rng, T stddev = T(1)) {
        Tensor t(r, c);
        for (auto& x : t.data) x = static_cast<T>(rng.next_gaussian()) * stddev;
        return t;
    }

    int64_t rows() const { return rows_; }
    int64_t cols() const { return cols_; }
    int64_t numel() const { return rows_ * cols_; }
    bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    T& at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * cols_ + c)]; }
    T at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * cols_ + c)]; }
    T item() const {
        require(numel() == 1, "Tensor::item: tensor is ", rows_, "x", cols_, ", not scalar");
        return data[0];
    }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(rows_, cols_);
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }

    std::string shape_str() const { return cat(rows_, "x", cols_); }

private:
    static size_t check_size(int64_t r, int64_t c) {
        require(r >= 0 && c >= 0, "Tensor: negative dimension ", r, "x", c);
        return static_cast<size_t>(r * c);
    }
};

template <typename T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) return false;
    for (size_t i = 0; i < a.data.size(); ++i)
        if (a.data[i] != b.data[i]) return false;
    return true;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.same_shape(b), "max_abs_diff: shape mismatch ", a.shape_str(), " vs ", b.shape_str());
    double m = 0;
    for (size_t i = 0; i < a.data.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
    return m;
}

}  // namespace splm
