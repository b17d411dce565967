#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace cetsp::diff {

// Dense row-major 2-D array of doubles. Vectors are 1xN.
struct Tensor {
    int rows = 0;
    int cols = 0;
    std::vector<double> v;

    Tensor() = default;
    Tensor(int r, int c) : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, 0.0) {}
    Tensor(int r, int c, std::vector<double> data) : rows(r), cols(c), v(std::move(data)) {
        if (v.size() != static_cast<std::size_t>(r) * c)
            throw std::invalid_argument("Tensor: data size does not match shape");
    }

    static Tensor row(std::vector<double> data) {
        const int c = static_cast<int>(data.size());
        return Tensor(1, c, std::move(data));
    }
    static Tensor scalar(double x) { return Tensor(1, 1, {x}); }

    std::size_t size() const { return v.size(); }
    double& at(int r, int c) { return v[static_cast<std::size_t>(r) * cols + c]; }
    double at(int r, int c) const { return v[static_cast<std::size_t>(r) * cols + c]; }
    const double* row_ptr(int r) const { return v.data() + static_cast<std::size_t>(r) * cols; }
    double* row_ptr(int r) { return v.data() + static_cast<std::size_t>(r) * cols; }

    bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
    std::string shape_str() const {
        return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
    }

    void fill(double x) { std::fill(v.begin(), v.end(), x); }

    bool all_finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }
};

}  // namespace cetsp::diff
