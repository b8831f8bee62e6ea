#pragma once

// Linear CKA between layers, the pairwise CKA matrix and the windowed
// neighbourhood-average curve used to locate change-point layers.

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "error.hpp"
#include "repr_store.hpp"

namespace critlayers {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline constexpr int kDefaultWindow = 2;

struct CkaMatrix {
    std::size_t num_layers = 0;
    Matrix values;

    double operator()(std::size_t i, std::size_t j) const {
        return values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    }
};

struct CurveEntry {
    std::size_t layer = 0;
    double value = 0.0;

    bool operator==(const CurveEntry &) const = default;
};

// Average similarity of each layer to its 2k neighbours. Boundary layers
// without a full window are absent, not zero-filled.
struct DeltaCurve {
    int k = kDefaultWindow;
    std::vector<CurveEntry> entries;
    std::size_t range_low = 0;
    std::size_t range_high = 0;
};

inline Matrix center(const Matrix & x) {
    require(x.rows() >= 2, ErrorCode::degenerate_input,
            "centering needs at least 2 samples (got " + std::to_string(x.rows()) + ")");
    require(x.allFinite(), ErrorCode::invariant_violation, "centering input contains non-finite values");
    return x.rowwise() - x.colwise().mean();
}

inline Matrix center(const ReprMatrix & x) {
    validate(x);
    return center(to_eigen(x));
}

namespace detail {

// Frobenius norm of X^T X for an already-centered X; zero means no variance.
inline double self_norm(const Matrix & centered, const std::string & what) {
    const double n = (centered.transpose() * centered).norm();
    require(n > 0.0 && std::isfinite(n), ErrorCode::degenerate_input, what + " has zero variance");
    return n;
}

// ||B^T A||_F^2, evaluated through N x N Gram matrices when that is cheaper.
inline double cross_energy(const Matrix & a, const Matrix & b) {
    const auto n = a.rows();
    if (n < std::min(a.cols(), b.cols())) {
        const Matrix ka = a * a.transpose();
        const Matrix kb = b * b.transpose();
        return ka.cwiseProduct(kb).sum();
    }
    return (b.transpose() * a).squaredNorm();
}

inline double gram_self_norm(const Matrix & centered, const std::string & what) {
    if (centered.rows() < centered.cols()) {
        const double n = (centered * centered.transpose()).norm();
        require(n > 0.0 && std::isfinite(n), ErrorCode::degenerate_input, what + " has zero variance");
        return n;
    }
    return self_norm(centered, what);
}

} // namespace detail

/// Linear CKA on centered copies of both inputs. Column counts may differ.
inline double linear_cka(const Matrix & x1, const Matrix & x2) {
    require(x1.rows() == x2.rows(), ErrorCode::dimension_mismatch,
            "linear_cka row mismatch: " + std::to_string(x1.rows()) + " vs " + std::to_string(x2.rows()));
    const Matrix c1 = center(x1);
    const Matrix c2 = center(x2);
    const double n1 = detail::self_norm(c1, "first input");
    const double n2 = detail::self_norm(c2, "second input");
    return (c2.transpose() * c1).squaredNorm() / (n1 * n2);
}

inline double linear_cka(const ReprMatrix & x1, const ReprMatrix & x2) {
    validate(x1);
    validate(x2);
    return linear_cka(to_eigen(x1), to_eigen(x2));
}

inline CkaMatrix pairwise_cka(const ReprBundle & bundle) {
    validate(bundle);
    const std::size_t L = bundle.num_layers();
    std::vector<Matrix> centered;
    std::vector<double> norms;
    centered.reserve(L);
    for (std::size_t l = 0; l < L; ++l) {
        centered.push_back(center(to_eigen(bundle.layers[l])));
        norms.push_back(detail::gram_self_norm(centered.back(), "layer " + std::to_string(l)));
    }
    CkaMatrix out;
    out.num_layers = L;
    out.values = Matrix::Identity(static_cast<Eigen::Index>(L), static_cast<Eigen::Index>(L));
    for (std::size_t i = 0; i < L; ++i) {
        for (std::size_t j = i + 1; j < L; ++j) {
            const double v = detail::cross_energy(centered[i], centered[j]) / (norms[i] * norms[j]);
            out.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
            out.values(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = v;
        }
    }
    return out;
}

inline void validate_window(std::size_t num_layers, int k) {
    require(k >= 1 && static_cast<std::size_t>(2 * k + 1) <= num_layers, ErrorCode::out_of_range,
            "window half-width k=" + std::to_string(k) + " must satisfy 1 <= k <= (L-1)/2 for L=" +
                std::to_string(num_layers));
}

/// Mean of the 2k off-diagonal neighbours for every layer in [k, L-1-k].
inline DeltaCurve delta_curve(const CkaMatrix & cka, int k = kDefaultWindow) {
    const std::size_t L = cka.num_layers;
    validate_window(L, k);
    const auto uk = static_cast<std::size_t>(k);
    DeltaCurve curve;
    curve.k = k;
    curve.range_low = uk;
    curve.range_high = L - 1 - uk;
    for (std::size_t l = uk; l + uk < L; ++l) {
        double sum = 0.0;
        for (std::size_t j = l - uk; j <= l + uk; ++j) {
            if (j != l) {
                sum += cka(l, j);
            }
        }
        curve.entries.push_back({l, sum / static_cast<double>(2 * k)});
    }
    return curve;
}

namespace detail {

template <typename Better>
std::vector<std::size_t> select_layers(const std::vector<CurveEntry> & entries, std::size_t m, Better better) {
    require(m >= 1 && m <= entries.size(), ErrorCode::out_of_range,
            "m=" + std::to_string(m) + " must lie in [1, " + std::to_string(entries.size()) + "]");
    std::vector<CurveEntry> sorted = entries;
    std::sort(sorted.begin(), sorted.end(), [&](const CurveEntry & a, const CurveEntry & b) {
        if (a.value != b.value) {
            return better(a.value, b.value);
        }
        return a.layer < b.layer;
    });
    std::vector<std::size_t> out;
    out.reserve(m);
    for (std::size_t i = 0; i < m; ++i) {
        out.push_back(sorted[i].layer);
    }
    return out;
}

} // namespace detail

// m smallest-delta layers, ascending by delta, ties to the lower index
inline std::vector<std::size_t> rank_critical_layers(const DeltaCurve & curve, std::size_t m) {
    return detail::select_layers(curve.entries, m, std::less<double>{});
}

// m largest-delta layers, descending by delta, ties to the lower index
inline std::vector<std::size_t> rank_noncritical_layers(const DeltaCurve & curve, std::size_t m) {
    return detail::select_layers(curve.entries, m, std::greater<double>{});
}

} // namespace critlayers
