// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cassert>
#include <cstddef>
#include <utility>
#include <vector>

namespace debias {

// Dense row-major matrix of doubles. Row vectors are 1xN matrices.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> a;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * c, 0.0) {}

    double& at(int i, int j) {
        assert(i >= 0 && i < rows && j >= 0 && j < cols);
        return a[static_cast<size_t>(i) * cols + j];
    }
    double at(int i, int j) const {
        assert(i >= 0 && i < rows && j >= 0 && j < cols);
        return a[static_cast<size_t>(i) * cols + j];
    }

    double* row_ptr(int i) { return a.data() + static_cast<size_t>(i) * cols; }
    const double* row_ptr(int i) const { return a.data() + static_cast<size_t>(i) * cols; }

    size_t size() const { return a.size(); }
    bool empty() const { return a.empty(); }
    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }

    void fill(double v) { std::fill(a.begin(), a.end(), v); }
    void zero() { fill(0.0); }
};

// C = A * B
Mat mm(const Mat& a, const Mat& b);
// C = A * B^T
Mat mm_nt(const Mat& a, const Mat& b);
// C = A^T * B
Mat mm_tn(const Mat& a, const Mat& b);

// y += alpha * x, elementwise over equal-shaped matrices.
void axpy(Mat& y, double alpha, const Mat& x);

double dot(const double* x, const double* y, int n);
double norm2(const double* x, int n);

bool all_finite(const Mat& m);

// Eigen-decomposition of a symmetric matrix via cyclic Jacobi rotations.
// Returns eigenvalues in descending order with matching unit eigenvectors
// (one per row of the returned matrix).
std::pair<std::vector<double>, Mat> symmetric_eigen(const Mat& m);

}  // namespace debias
