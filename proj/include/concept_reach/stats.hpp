#pragma once

// Small statistics helpers: Spearman rank correlation with a permutation
// p-value, used by the norm diagnostics and trend checks.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <vector>

#include "rng.hpp"

namespace concept_reach {

namespace detail {
inline std::vector<double> ranks(const std::vector<double>& v) {
    size_t n = v.size();
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t(0));
    std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
    std::vector<double> r(n);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
        double avg = double(i + j) / 2.0 + 1.0;  // average rank for ties
        for (size_t k = i; k <= j; ++k) r[idx[k]] = avg;
        i = j + 1;
    }
    return r;
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    size_t n = x.size();
    double mx = 0, my = 0;
    for (size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= double(n);
    my /= double(n);
    double sxy = 0, sxx = 0, syy = 0;
    for (size_t i = 0; i < n; ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0 || syy == 0) return std::nan("");
    return sxy / std::sqrt(sxx * syy);
}
}  // namespace detail

// Returns nullopt when the correlation is undefined (fewer than 2 points or a
// constant series).
inline std::optional<double> spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) return std::nullopt;
    double rho = detail::pearson(detail::ranks(x), detail::ranks(y));
    if (std::isnan(rho)) return std::nullopt;
    return rho;
}

// One-sided permutation p-value for H1: spearman(x, y) > 0 (or < 0 with
// `positive = false`). Exhaustive for n <= 7, Monte Carlo otherwise.
inline std::optional<double> spearman_perm_pvalue(const std::vector<double>& x,
                                                  const std::vector<double>& y, bool positive = true,
                                                  int mc_samples = 20000, uint64_t seed = 1234) {
    auto obs = spearman(x, y);
    if (!obs) return std::nullopt;
    double target = positive ? *obs : -*obs;

    std::vector<double> yp = y;
    long hits = 0, total = 0;
    if (y.size() <= 7) {
        std::sort(yp.begin(), yp.end());
        do {
            auto r = spearman(x, yp);
            double v = r ? (positive ? *r : -*r) : 0.0;
            if (v >= target - 1e-12) ++hits;
            ++total;
        } while (std::next_permutation(yp.begin(), yp.end()));
    } else {
        Rng rng(seed);
        for (int s = 0; s < mc_samples; ++s) {
            for (size_t i = yp.size() - 1; i > 0; --i)
                std::swap(yp[i], yp[rng.uniform_int(i + 1)]);
            auto r = spearman(x, yp);
            double v = r ? (positive ? *r : -*r) : 0.0;
            if (v >= target - 1e-12) ++hits;
            ++total;
        }
    }
    return double(hits) / double(total);
}

inline double mean(const std::vector<double>& v) {
    if (v.empty()) return std::nan("");
    double s = 0;
    for (double x : v) s += x;
    return s / double(v.size());
}

}  // namespace concept_reach
