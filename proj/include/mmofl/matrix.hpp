#pragma once

#include <cstddef>
#include <vector>

namespace mmofl {

// Dense row-major matrix of 64-bit reals.
struct Matrix {
    size_t rows = 0;
    size_t cols = 0;
    std::vector<double> v;

    Matrix() = default;
    Matrix(size_t r, size_t c, double fill = 0.0) : rows(r), cols(c), v(r * c, fill) {}

    double& operator()(size_t i, size_t j) { return v[i * cols + j]; }
    double operator()(size_t i, size_t j) const { return v[i * cols + j]; }
    double* row(size_t i) { return v.data() + i * cols; }
    const double* row(size_t i) const { return v.data() + i * cols; }
    bool empty() const { return v.empty(); }
};

}  // namespace mmofl
