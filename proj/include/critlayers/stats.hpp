#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "error.hpp"
#include "similarity.hpp"

namespace critlayers {

// A per-layer series (delta curve, loss table, CCA curve) keyed by layer index.
struct RankedSeries {
    std::string name;
    std::vector<std::size_t> labels;
    std::vector<double> values;

    std::size_t size() const { return labels.size(); }
};

inline void validate(const RankedSeries & s) {
    require(s.labels.size() == s.values.size(), ErrorCode::invariant_violation,
            "series '" + s.name + "' has mismatched label/value lengths");
    std::set<std::size_t> seen;
    for (std::size_t i = 0; i < s.labels.size(); ++i) {
        require(seen.insert(s.labels[i]).second, ErrorCode::invariant_violation,
                "series '" + s.name + "' repeats label " + std::to_string(s.labels[i]));
        require(std::isfinite(s.values[i]), ErrorCode::invariant_violation,
                "series '" + s.name + "' has a non-finite value at label " + std::to_string(s.labels[i]));
    }
}

inline RankedSeries to_series(const std::vector<CurveEntry> & entries, std::string name) {
    RankedSeries s;
    s.name = std::move(name);
    for (const auto & e : entries) {
        s.labels.push_back(e.layer);
        s.values.push_back(e.value);
    }
    return s;
}

/// 1-based ranks; tied values share the average of the ranks they span.
inline std::vector<double> average_ranks(const std::vector<double> & values) {
    const std::size_t n = values.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && values[order[j + 1]] == values[order[i]]) {
            ++j;
        }
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t t = i; t <= j; ++t) {
            ranks[order[t]] = avg;
        }
        i = j + 1;
    }
    return ranks;
}

struct AlignedPair {
    std::vector<std::size_t> labels; // ascending
    std::vector<double> x;
    std::vector<double> y;
};

inline AlignedPair align(const RankedSeries & a, const RankedSeries & b) {
    validate(a);
    validate(b);
    std::map<std::size_t, double> bm;
    for (std::size_t i = 0; i < b.size(); ++i) {
        bm.emplace(b.labels[i], b.values[i]);
    }
    std::map<std::size_t, double> am;
    for (std::size_t i = 0; i < a.size(); ++i) {
        am.emplace(a.labels[i], a.values[i]);
    }
    AlignedPair out;
    for (const auto & [label, value] : am) {
        auto it = bm.find(label);
        if (it != bm.end()) {
            out.labels.push_back(label);
            out.x.push_back(value);
            out.y.push_back(it->second);
        }
    }
    return out;
}

inline double pearson(const std::vector<double> & x, const std::vector<double> & y) {
    const auto n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0.0;
    double sxx = 0.0;
    double syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    require(sxx > 0.0 && syy > 0.0, ErrorCode::degenerate_input, "zero rank variance");
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// Spearman's rho over the label intersection of a and b.
inline double spearman(const RankedSeries & a, const RankedSeries & b) {
    const AlignedPair p = align(a, b);
    require(p.labels.size() >= 3, ErrorCode::invalid_argument,
            "spearman('" + a.name + "', '" + b.name + "') needs >= 3 aligned points, got " +
                std::to_string(p.labels.size()));
    try {
        return pearson(average_ranks(p.x), average_ranks(p.y));
    } catch (const Error & e) {
        throw Error(e.code(), "spearman('" + a.name + "', '" + b.name + "'): " + e.detail());
    }
}

// Mean Spearman rho over all unordered pairs.
inline double pairwise_mean_correlation(const std::vector<RankedSeries> & series) {
    require(series.size() >= 2, ErrorCode::invalid_argument, "pairwise correlation needs >= 2 series");
    double sum = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < series.size(); ++i) {
        for (std::size_t j = i + 1; j < series.size(); ++j) {
            try {
                sum += spearman(series[i], series[j]);
            } catch (const Error & e) {
                throw Error(e.code(), "pair (" + std::to_string(i) + ", " + std::to_string(j) + "): " + e.detail());
            }
            ++pairs;
        }
    }
    return sum / static_cast<double>(pairs);
}

struct CorrelationEntry {
    std::string x_name;
    std::string y_name;
    double rho = 0.0;
    std::size_t n = 0;
    std::size_t range_low = 0;
    std::size_t range_high = 0;
};

inline CorrelationEntry correlate_curves(const RankedSeries & x, const RankedSeries & y) {
    const AlignedPair p = align(x, y);
    CorrelationEntry e;
    e.x_name = x.name;
    e.y_name = y.name;
    e.rho = spearman(x, y);
    e.n = p.labels.size();
    e.range_low = p.labels.front();
    e.range_high = p.labels.back();
    return e;
}

} // namespace critlayers
