#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "kodsim/rng.hpp"

namespace kodsim::stats {

inline double mean(const std::vector<double>& x) {
    if (x.empty()) throw std::invalid_argument("mean: empty sample");
    return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

inline double variance(const std::vector<double>& x) {
    const double m = mean(x);
    double s = 0.0;
    for (double v : x) s += (v - m) * (v - m);
    return s / static_cast<double>(x.size() - 1);
}

inline double median(std::vector<double> x) {
    if (x.empty()) throw std::invalid_argument("median: empty sample");
    const size_t k = x.size() / 2;
    std::nth_element(x.begin(), x.begin() + k, x.end());
    double hi = x[k];
    if (x.size() % 2 == 1) return hi;
    std::nth_element(x.begin(), x.begin() + k - 1, x.end());
    return 0.5 * (hi + x[k - 1]);
}

inline double weighted_mean(const std::vector<double>& x, const std::vector<double>& w) {
    double sw = 0.0, sx = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        sw += w[i];
        sx += w[i] * x[i];
    }
    if (sw <= 0.0) throw std::runtime_error("weighted_mean: nonpositive total weight");
    return sx / sw;
}

// Kish effective sample size of an importance-weighted ensemble.
inline double effective_sample_size(const std::vector<double>& w) {
    double s1 = 0.0, s2 = 0.0;
    for (double v : w) {
        s1 += v;
        s2 += v * v;
    }
    return s2 > 0.0 ? s1 * s1 / s2 : 0.0;
}

inline double std_error(const std::vector<double>& x) {
    return std::sqrt(variance(x) / static_cast<double>(x.size()));
}

// Bootstrap standard deviation of a statistic of a scalar sample.
inline double bootstrap_sigma(const std::vector<double>& x,
                              const std::function<double(const std::vector<double>&)>& stat,
                              int resamples, Rng& rng) {
    const size_t n = x.size();
    std::vector<double> vals(resamples);
    std::vector<double> draw(n);
    for (int b = 0; b < resamples; ++b) {
        for (size_t i = 0; i < n; ++i) draw[i] = x[rng.next_u64() % n];
        vals[b] = stat(draw);
    }
    return std::sqrt(variance(vals));
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// One-sample Kolmogorov-Smirnov distance against a CDF.
inline double ks_distance(std::vector<double> sample, const std::function<double(double)>& cdf) {
    std::sort(sample.begin(), sample.end());
    const double n = static_cast<double>(sample.size());
    double d = 0.0;
    for (size_t i = 0; i < sample.size(); ++i) {
        const double f = cdf(sample[i]);
        d = std::max(d, std::abs(f - static_cast<double>(i) / n));
        d = std::max(d, std::abs(static_cast<double>(i + 1) / n - f));
    }
    return d;
}

// Asymptotic KS critical distance at significance alpha.
inline double ks_critical(double alpha, size_t n) {
    return std::sqrt(-0.5 * std::log(alpha / 2.0)) / std::sqrt(static_cast<double>(n));
}

// Wilson-Hilferty upper quantile of chi-squared with k dof.
inline double chi2_quantile(double p, int k) {
    // inverse normal via Acklam-style rational fit is overkill here; the
    // only callers use fixed p, so a small table keeps this exact enough.
    double z;
    if (p >= 0.995)      z = 2.5758293035489004;
    else if (p >= 0.99)  z = 2.3263478740408408;
    else if (p >= 0.975) z = 1.959963984540054;
    else if (p >= 0.95)  z = 1.6448536269514722;
    else                 z = 1.2815515655446004;
    const double kk = static_cast<double>(k);
    const double t = 1.0 - 2.0 / (9.0 * kk) + z * std::sqrt(2.0 / (9.0 * kk));
    return kk * t * t * t;
}

// Least-squares slope of y against x.
inline double fit_slope(const std::vector<double>& x, const std::vector<double>& y) {
    const double mx = mean(x), my = mean(y);
    double num = 0.0, den = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        num += (x[i] - mx) * (y[i] - my);
        den += (x[i] - mx) * (x[i] - mx);
    }
    return num / den;
}

inline double loglog_slope(const std::vector<double>& dt, const std::vector<double>& err) {
    std::vector<double> lx(dt.size()), ly(err.size());
    for (size_t i = 0; i < dt.size(); ++i) {
        lx[i] = std::log(dt[i]);
        ly[i] = std::log(err[i]);
    }
    return fit_slope(lx, ly);
}

} // namespace kodsim::stats
