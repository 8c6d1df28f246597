#pragma once

// Dense row-major tensors over double, with Eigen maps for the GEMM-shaped
// work. Shapes follow NCHW for image-like data.

#include <cassert>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace concept_reach {

using real = double;
using EMat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

struct Tensor {
    std::vector<int> shape;
    std::vector<real> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(numel(shape), real(0)) {}

    static size_t numel(const std::vector<int>& s) {
        size_t n = 1;
        for (int d : s) n *= size_t(d);
        return n;
    }

    size_t size() const { return data.size(); }
    int dim(int i) const { return shape[size_t(i)]; }

    real* ptr() { return data.data(); }
    const real* ptr() const { return data.data(); }

    void zero() { std::fill(data.begin(), data.end(), real(0)); }

    real& operator[](size_t i) { return data[i]; }
    real operator[](size_t i) const { return data[i]; }

    // 2-D view with explicit rows/cols (row-major)
    EMap mat(int rows, int cols) {
        assert(size_t(rows) * size_t(cols) == size());
        return EMap(data.data(), rows, cols);
    }
    ECMap mat(int rows, int cols) const {
        assert(size_t(rows) * size_t(cols) == size());
        return ECMap(data.data(), rows, cols);
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    std::string shape_str() const {
        std::string s = "[";
        for (size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
        return s + "]";
    }

    real l2_norm() const {
        real s = 0;
        for (real v : data) s += v * v;
        return std::sqrt(s);
    }
};

inline void check_shape(const Tensor& t, const std::vector<int>& expect, const char* where) {
    if (t.shape != expect) {
        Tensor e(expect);
        throw std::invalid_argument(std::string(where) + ": shape mismatch, got " + t.shape_str() +
                                    " expected " + e.shape_str());
    }
}

}  // namespace concept_reach
