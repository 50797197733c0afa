// SPDX-License-Identifier: Apache-2.0
#include "debias/mat.hpp"

#include <algorithm>
#include <cmath>

namespace debias {

Mat mm(const Mat& a, const Mat& b) {
    assert(a.cols == b.rows);
    Mat c(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        const double* ai = a.row_ptr(i);
        double* ci = c.row_ptr(i);
        for (int k = 0; k < a.cols; ++k) {
            const double aik = ai[k];
            if (aik == 0.0) continue;
            const double* bk = b.row_ptr(k);
            for (int j = 0; j < b.cols; ++j) ci[j] += aik * bk[j];
        }
    }
    return c;
}

Mat mm_nt(const Mat& a, const Mat& b) {
    assert(a.cols == b.cols);
    Mat c(a.rows, b.rows);
    for (int i = 0; i < a.rows; ++i) {
        const double* ai = a.row_ptr(i);
        double* ci = c.row_ptr(i);
        for (int j = 0; j < b.rows; ++j) ci[j] = dot(ai, b.row_ptr(j), a.cols);
    }
    return c;
}

Mat mm_tn(const Mat& a, const Mat& b) {
    assert(a.rows == b.rows);
    Mat c(a.cols, b.cols);
    for (int k = 0; k < a.rows; ++k) {
        const double* ak = a.row_ptr(k);
        const double* bk = b.row_ptr(k);
        for (int i = 0; i < a.cols; ++i) {
            const double aki = ak[i];
            if (aki == 0.0) continue;
            double* ci = c.row_ptr(i);
            for (int j = 0; j < b.cols; ++j) ci[j] += aki * bk[j];
        }
    }
    return c;
}

void axpy(Mat& y, double alpha, const Mat& x) {
    assert(y.same_shape(x));
    const size_t n = y.size();
    for (size_t i = 0; i < n; ++i) y.a[i] += alpha * x.a[i];
}

double dot(const double* x, const double* y, int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += x[i] * y[i];
    return s;
}

double norm2(const double* x, int n) { return std::sqrt(dot(x, x, n)); }

bool all_finite(const Mat& m) {
    return std::all_of(m.a.begin(), m.a.end(), [](double v) { return std::isfinite(v); });
}

std::pair<std::vector<double>, Mat> symmetric_eigen(const Mat& m) {
    assert(m.rows == m.cols);
    const int n = m.rows;
    Mat a = m;
    Mat v(n, n);
    for (int i = 0; i < n; ++i) v.at(i, i) = 1.0;

    auto off_diag = [&]() {
        double s = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) s += a.at(i, j) * a.at(i, j);
        return s;
    };

    for (int sweep = 0; sweep < 100 && off_diag() > 1e-24; ++sweep) {
        for (int p = 0; p < n - 1; ++p) {
            for (int q = p + 1; q < n; ++q) {
                const double apq = a.at(p, q);
                if (std::fabs(apq) < 1e-300) continue;
                const double app = a.at(p, p);
                const double aqq = a.at(q, q);
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int k = 0; k < n; ++k) {
                    const double akp = a.at(k, p);
                    const double akq = a.at(k, q);
                    a.at(k, p) = c * akp - s * akq;
                    a.at(k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    const double apk = a.at(p, k);
                    const double aqk = a.at(q, k);
                    a.at(p, k) = c * apk - s * aqk;
                    a.at(q, k) = s * apk + c * aqk;
                }
                for (int k = 0; k < n; ++k) {
                    const double vkp = v.at(k, p);
                    const double vkq = v.at(k, q);
                    v.at(k, p) = c * vkp - s * vkq;
                    v.at(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }

    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](int x, int y) { return a.at(x, x) > a.at(y, y); });

    std::vector<double> eigvals(n);
    Mat eigvecs(n, n);
    for (int i = 0; i < n; ++i) {
        eigvals[i] = a.at(order[i], order[i]);
        for (int k = 0; k < n; ++k) eigvecs.at(i, k) = v.at(k, order[i]);
    }
    return {eigvals, eigvecs};
}

}  // namespace debias
