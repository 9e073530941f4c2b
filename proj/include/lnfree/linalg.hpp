#pragma once

// Symmetric eigendecomposition for small dense matrices (cyclic Jacobi).
// Sized for unembedding Gram matrices, i.e. d_model x d_model.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "lnfree/common.hpp"
#include "lnfree/tensor.hpp"

namespace lnfree {

struct SymmetricEigen {
    std::vector<double> values;  // descending
    Tensor<double> vectors;      // [N, N]; column i pairs with values[i]
};

template <typename T>
SymmetricEigen symmetric_eigen(const Tensor<T>& mat) {
    if (mat.rank() != 2 || mat.shape[0] != mat.shape[1]) {
        throw InputError("symmetric_eigen: matrix must be square");
    }
    const int64_t n = mat.shape[0];
    Tensor<double> a = mat.template cast<double>();
    Tensor<double> v({n, n});
    for (int64_t i = 0; i < n; ++i) v.at2(i, i) = 1.0;

    double norm = 0.0;
    for (int64_t i = 0; i < n * n; ++i) norm += a[i] * a[i];
    const double tol = 1e-30 * std::max(norm, 1e-300);

    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int64_t p = 0; p < n; ++p)
            for (int64_t q = p + 1; q < n; ++q) off += a.at2(p, q) * a.at2(p, q);
        if (off <= tol) break;
        for (int64_t p = 0; p < n; ++p) {
            for (int64_t q = p + 1; q < n; ++q) {
                const double apq = a.at2(p, q);
                if (apq == 0.0) continue;
                const double theta = (a.at2(q, q) - a.at2(p, p)) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int64_t i = 0; i < n; ++i) {
                    const double aip = a.at2(i, p), aiq = a.at2(i, q);
                    a.at2(i, p) = c * aip - s * aiq;
                    a.at2(i, q) = s * aip + c * aiq;
                }
                for (int64_t i = 0; i < n; ++i) {
                    const double api = a.at2(p, i), aqi = a.at2(q, i);
                    a.at2(p, i) = c * api - s * aqi;
                    a.at2(q, i) = s * api + c * aqi;
                }
                for (int64_t i = 0; i < n; ++i) {
                    const double vip = v.at2(i, p), viq = v.at2(i, q);
                    v.at2(i, p) = c * vip - s * viq;
                    v.at2(i, q) = s * vip + c * viq;
                }
            }
        }
    }

    std::vector<int64_t> order(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    std::sort(order.begin(), order.end(),
              [&a](int64_t x, int64_t y) { return a.at2(x, x) > a.at2(y, y); });

    SymmetricEigen out;
    out.values.resize(static_cast<size_t>(n));
    out.vectors = Tensor<double>({n, n});
    for (int64_t i = 0; i < n; ++i) {
        out.values[static_cast<size_t>(i)] = a.at2(order[static_cast<size_t>(i)], order[static_cast<size_t>(i)]);
        for (int64_t r = 0; r < n; ++r) out.vectors.at2(r, i) = v.at2(r, order[static_cast<size_t>(i)]);
    }
    return out;
}

}  // namespace lnfree
