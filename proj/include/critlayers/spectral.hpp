#pragma once

// SVD of centered layer matrices, principal features, and CCA between
// top-K principal subspaces of neighbouring layers.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "error.hpp"
#include "repr_store.hpp"
#include "similarity.hpp"

namespace critlayers {

inline constexpr double kRankTrimTolerance = 1e-10;

// Thin SVD of a centered N x d matrix, trimmed to its numerical rank.
// Each left singular vector has its largest-magnitude entry non-negative.
struct SpectralDecomp {
    std::size_t layer_index = 0;
    Matrix left_vectors;    // N x r
    Vector singular_values; // r, descending
    Matrix right_vectors;   // d x r

    std::size_t rank() const { return static_cast<std::size_t>(singular_values.size()); }
    std::size_t num_samples() const { return static_cast<std::size_t>(left_vectors.rows()); }
};

struct PrincipalFeatures {
    std::size_t layer_index = 0;
    std::size_t K = 0;
    Matrix features; // N x K, column k = sigma_k * U[:, k]
};

struct CcaCurve {
    std::size_t K = 0;
    int k = kDefaultWindow;
    std::vector<CurveEntry> entries;
    std::size_t range_low = 0;
    std::size_t range_high = 0;
};

namespace detail {

inline void orient_columns(Matrix & u, Matrix & v) {
    for (Eigen::Index c = 0; c < u.cols(); ++c) {
        Eigen::Index arg = 0;
        double best = -1.0;
        for (Eigen::Index r = 0; r < u.rows(); ++r) {
            // strict comparison keeps the first of equal-magnitude entries
            if (std::abs(u(r, c)) > best) {
                best = std::abs(u(r, c));
                arg = r;
            }
        }
        if (u(arg, c) < 0.0) {
            u.col(c) *= -1.0;
            v.col(c) *= -1.0;
        }
    }
}

} // namespace detail

/// Decomposes an already-centered matrix.
inline SpectralDecomp decompose_centered(const Matrix & centered, std::size_t layer_index = 0) {
    require(centered.rows() >= 2, ErrorCode::degenerate_input, "decompose needs at least 2 samples");
    require(centered.allFinite(), ErrorCode::invariant_violation, "decompose input contains non-finite values");
    require(centered.norm() > 0.0, ErrorCode::degenerate_input,
            "layer " + std::to_string(layer_index) + " has zero variance");

    Eigen::BDCSVD<Matrix> svd(centered, Eigen::ComputeThinU | Eigen::ComputeThinV);
    require(svd.info() == Eigen::Success, ErrorCode::numeric_failure,
            "SVD did not converge for layer " + std::to_string(layer_index));
    const Vector & s = svd.singularValues();
    require(s.allFinite(), ErrorCode::numeric_failure, "SVD produced non-finite singular values");

    const double cutoff = kRankTrimTolerance * s(0);
    Eigen::Index r = 0;
    while (r < s.size() && s(r) > cutoff) {
        ++r;
    }
    SpectralDecomp d;
    d.layer_index = layer_index;
    d.singular_values = s.head(r);
    d.left_vectors = svd.matrixU().leftCols(r);
    d.right_vectors = svd.matrixV().leftCols(r);
    detail::orient_columns(d.left_vectors, d.right_vectors);
    return d;
}

inline SpectralDecomp decompose(const Matrix & x, std::size_t layer_index = 0) {
    return decompose_centered(center(x), layer_index);
}

inline SpectralDecomp decompose(const ReprMatrix & x, std::size_t layer_index = 0) {
    validate(x);
    return decompose(to_eigen(x), layer_index);
}

inline PrincipalFeatures principal_features(const SpectralDecomp & decomp, std::size_t K) {
    require(K >= 1 && K <= decomp.rank(), ErrorCode::out_of_range,
            "K=" + std::to_string(K) + " must lie in [1, rank=" + std::to_string(decomp.rank()) + "]");
    PrincipalFeatures pf;
    pf.layer_index = decomp.layer_index;
    pf.K = K;
    const auto k = static_cast<Eigen::Index>(K);
    pf.features = decomp.left_vectors.leftCols(k) * decomp.singular_values.head(k).asDiagonal();
    return pf;
}

namespace detail {

// Orthonormal basis for span(block), dropping directions below the trim tolerance.
inline Matrix orthonormal_basis(const Matrix & block, const std::string & what) {
    require(block.cols() >= 1, ErrorCode::invalid_argument, what + " has no columns");
    Eigen::JacobiSVD<Matrix> svd(block, Eigen::ComputeThinU);
    const Vector & s = svd.singularValues();
    require(s.size() > 0 && s(0) > 0.0 && std::isfinite(s(0)), ErrorCode::degenerate_input,
            what + " spans no directions");
    Eigen::Index r = 0;
    while (r < s.size() && s(r) > kRankTrimTolerance * s(0)) {
        ++r;
    }
    return svd.matrixU().leftCols(r);
}

} // namespace detail

/// Canonical correlations of two feature blocks.
///
/// Both blocks are orthonormalised; the canonical correlations are the
/// singular values of Qa^T Qb, clamped into [0, 1].
inline Vector canonical_correlations(const Matrix & a, const Matrix & b) {
    require(a.rows() == b.rows(), ErrorCode::dimension_mismatch,
            "CCA sample mismatch: " + std::to_string(a.rows()) + " vs " + std::to_string(b.rows()));
    const Matrix qa = detail::orthonormal_basis(a, "first feature block");
    const Matrix qb = detail::orthonormal_basis(b, "second feature block");
    Eigen::JacobiSVD<Matrix> svd(qa.transpose() * qb);
    Vector rho = svd.singularValues();
    for (Eigen::Index i = 0; i < rho.size(); ++i) {
        rho(i) = std::clamp(rho(i), 0.0, 1.0);
    }
    return rho;
}

/// Mean canonical correlation between the spans of two principal-feature blocks.
inline double cca_topk(const PrincipalFeatures & a, const PrincipalFeatures & b) {
    return canonical_correlations(a.features, b.features).mean();
}

/// Windowed average of top-K CCA, on the same layer range as delta_curve.
inline CcaCurve cca_curve(const std::vector<SpectralDecomp> & decomps, std::size_t K, int k = kDefaultWindow) {
    const std::size_t L = decomps.size();
    require(K >= 1, ErrorCode::out_of_range, "K must be >= 1");
    validate_window(L, k);
    std::vector<PrincipalFeatures> features;
    features.reserve(L);
    for (const auto & d : decomps) {
        features.push_back(principal_features(d, K));
    }
    const auto uk = static_cast<std::size_t>(k);
    CcaCurve curve;
    curve.K = K;
    curve.k = k;
    curve.range_low = uk;
    curve.range_high = L - 1 - uk;
    for (std::size_t l = uk; l + uk < L; ++l) {
        double sum = 0.0;
        for (std::size_t j = l - uk; j <= l + uk; ++j) {
            if (j != l) {
                sum += cca_topk(features[l], features[j]);
            }
        }
        curve.entries.push_back({l, sum / static_cast<double>(2 * k)});
    }
    return curve;
}

inline std::vector<SpectralDecomp> decompose_all(const ReprBundle & bundle) {
    validate(bundle);
    std::vector<SpectralDecomp> out;
    out.reserve(bundle.num_layers());
    for (std::size_t l = 0; l < bundle.num_layers(); ++l) {
        out.push_back(decompose(to_eigen(bundle.layers[l]), l));
    }
    return out;
}

inline CcaCurve cca_curve(const ReprBundle & bundle, std::size_t K, int k = kDefaultWindow) {
    return cca_curve(decompose_all(bundle), K, k);
}

// Smallest rank across layers: the largest K every layer supports.
inline std::size_t min_rank(const std::vector<SpectralDecomp> & decomps) {
    std::size_t r = decomps.empty() ? 0 : decomps.front().rank();
    for (const auto & d : decomps) {
        r = std::min(r, d.rank());
    }
    return r;
}

/// Linear CKA rebuilt from two decompositions:
/// ||diag(sx) Ux^T Uy diag(sy)||_F^2 / (||sx||_4^2 ||sy||_4^2).
inline double cka_from_spectra(const SpectralDecomp & x, const SpectralDecomp & y) {
    require(x.num_samples() == y.num_samples(), ErrorCode::dimension_mismatch, "cka_from_spectra sample mismatch");
    const Matrix cross = x.singular_values.asDiagonal() * (x.left_vectors.transpose() * y.left_vectors) *
                         y.singular_values.asDiagonal();
    const double nx = x.singular_values.array().pow(4).sum();
    const double ny = y.singular_values.array().pow(4).sum();
    return cross.squaredNorm() / std::sqrt(nx * ny);
}

} // namespace critlayers
