#pragma once

// Brute-force reference implementations used only by tests. These are written
// as plain loops, independent of the library's forward/backward paths, so a
// shared bug cannot hide on both sides of a comparison.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "protodet/tensor.hpp"

namespace oracle {

inline std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b,
                                  int m, int k, int n) {
    std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            for (int p = 0; p < k; ++p)
                out[i * n + j] += a[i * k + p] * b[p * n + j];
    return out;
}

// Six-loop direct convolution, stride 1, zero padding for k=3.
inline std::vector<double> conv2d(const std::vector<double>& x, const std::vector<double>& w,
                                  const std::vector<double>& b, int ci, int h, int wd, int co,
                                  int k) {
    const int pad = (k == 3) ? 1 : 0;
    std::vector<double> out(static_cast<size_t>(co) * h * wd, 0.0);
    for (int oc = 0; oc < co; ++oc)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < wd; ++xx) {
                double acc = b[oc];
                for (int ic = 0; ic < ci; ++ic)
                    for (int ky = 0; ky < k; ++ky)
                        for (int kx = 0; kx < k; ++kx) {
                            const int sy = y + ky - pad, sx = xx + kx - pad;
                            if (sy < 0 || sy >= h || sx < 0 || sx >= wd) continue;
                            acc += w[((oc * ci + ic) * k + ky) * k + kx] * x[(ic * h + sy) * wd + sx];
                        }
                out[(oc * h + y) * wd + xx] = acc;
            }
    return out;
}

inline std::vector<double> linear(const std::vector<double>& x, const std::vector<double>& w,
                                  const std::vector<double>& b, int d, int c) {
    std::vector<double> out(static_cast<size_t>(d));
    for (int i = 0; i < d; ++i) {
        double acc = b[i];
        for (int j = 0; j < c; ++j) acc += w[i * c + j] * x[j];
        out[i] = acc;
    }
    return out;
}

inline std::vector<long double> softmax_ld(const std::vector<long double>& x) {
    long double mx = x[0];
    for (long double v : x) mx = std::max(mx, v);
    long double sum = 0.0L;
    std::vector<long double> out(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        out[i] = std::exp(x[i] - mx);
        sum += out[i];
    }
    for (auto& v : out) v /= sum;
    return out;
}

inline long double cosine_ld(const std::vector<long double>& a, const std::vector<long double>& b,
                             long double eps = 1e-8L) {
    long double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return dot / (std::max(std::sqrt(na), eps) * std::max(std::sqrt(nb), eps));
}

// Central finite difference of a scalar-valued function with respect to one
// coordinate of `values`.
inline double central_diff(std::vector<double>& values, size_t index,
                           const std::function<double()>& eval, double h = 1e-5) {
    const double saved = values[index];
    values[index] = saved + h;
    const double fp = eval();
    values[index] = saved - h;
    const double fm = eval();
    values[index] = saved;
    return (fp - fm) / (2 * h);
}

inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1.0});
}

}  // namespace oracle
