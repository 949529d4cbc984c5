#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "equidiag/errors.hpp"
#include "equidiag/linalg.hpp"

namespace equidiag {

inline double pearson(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) throw argument_error("pearson: need >= 2 paired values");
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx <= 0 || syy <= 0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

/// Ranks with ties averaged.
inline VecX ranks(std::span<const double> x) {
    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    VecX r(x.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
        const double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
        i = j + 1;
    }
    return r;
}

inline double spearman(std::span<const double> x, std::span<const double> y) {
    const VecX rx = ranks(x), ry = ranks(y);
    return pearson(rx, ry);
}

/// Two-sample Kolmogorov-Smirnov statistic sup_t |F1(t) - F2(t)|.
inline double ks_two_sample(VecX a, VecX b) {
    if (a.empty() || b.empty()) throw argument_error("ks_two_sample: empty sample");
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    double d = 0;
    std::size_t i = 0, j = 0;
    while (i < a.size() && j < b.size()) {
        if (a[i] <= b[j])
            ++i;
        else
            ++j;
        const double fa = static_cast<double>(i) / static_cast<double>(a.size());
        const double fb = static_cast<double>(j) / static_cast<double>(b.size());
        d = std::max(d, std::abs(fa - fb));
    }
    return d;
}

/// Pearson chi-square statistic against uniform expected counts.
inline double chi_square_uniform(std::span<const std::size_t> observed) {
    const std::size_t total = std::accumulate(observed.begin(), observed.end(), std::size_t{0});
    if (observed.empty() || total == 0) throw argument_error("chi_square_uniform: empty counts");
    const double expected = static_cast<double>(total) / static_cast<double>(observed.size());
    double stat = 0;
    for (const std::size_t o : observed) {
        const double d = static_cast<double>(o) - expected;
        stat += d * d / expected;
    }
    return stat;
}

/// Least-squares slope of y against x.
inline double fit_slope(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) throw argument_error("fit_slope: need >= 2 points");
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
    }
    if (sxx == 0) throw argument_error("fit_slope: degenerate abscissa");
    return sxy / sxx;
}

}  // namespace equidiag
