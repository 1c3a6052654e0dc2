#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace dtem {

// Row-major dense array of 64-bit reals. The only shapes used in this
// library are rank-1 vectors and rank-2 matrices.
struct DenseArray {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    DenseArray() = default;
    DenseArray(std::vector<std::size_t> s, double fill = 0.0)
        : shape(std::move(s)), data(numel_of(shape), fill) {}
    DenseArray(std::vector<std::size_t> s, std::vector<double> d)
        : shape(std::move(s)), data(std::move(d)) {
        if (numel_of(shape) != data.size())
            throw std::invalid_argument("DenseArray: shape/data mismatch");
    }

    static std::size_t numel_of(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (auto e : s) n *= e;
        return n;
    }

    static DenseArray scalar(double v) { return DenseArray({1}, {v}); }
    static DenseArray vec(std::vector<double> d) {
        std::size_t n = d.size();
        return DenseArray({n}, std::move(d));
    }
    static DenseArray matrix(std::size_t r, std::size_t c, std::vector<double> d) {
        return DenseArray({r, c}, std::move(d));
    }
    static DenseArray zeros(std::vector<std::size_t> s) { return DenseArray(std::move(s)); }
    static DenseArray ones(std::vector<std::size_t> s) { return DenseArray(std::move(s), 1.0); }
    static DenseArray identity(std::size_t n) {
        DenseArray m({n, n});
        for (std::size_t i = 0; i < n; ++i) m.data[i * n + i] = 1.0;
        return m;
    }

    std::size_t numel() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
    std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    double& at(std::size_t i) { return data[i]; }
    double at(std::size_t i) const { return data[i]; }
    double& at(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * cols() + j]; }

    bool same_shape(const DenseArray& o) const { return shape == o.shape; }
    bool is_scalar() const { return numel() == 1; }

    std::string shape_str() const {
        std::string s = "[";
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) s += "x";
            s += std::to_string(shape[i]);
        }
        return s + "]";
    }
};

bool all_finite(const DenseArray& a);

}  // namespace dtem
