#pragma once

// Top-K principal component removal at a single layer.

#include <string>

#include "error.hpp"
#include "repr_store.hpp"
#include "spectral.hpp"

namespace critlayers {

enum class CleanMode { remove_topk };

struct CleanSpec {
    std::size_t layer_index = 0;
    std::size_t K = 1;
    CleanMode mode = CleanMode::remove_topk;
};

/// Rank-K reconstruction of one sample's centered row: U[i, :K] diag(s[:K]) V[:, :K]^T.
inline Vector topk_contribution(const SpectralDecomp & decomp, std::size_t sample_index, std::size_t K) {
    require(K >= 1 && K <= decomp.rank(), ErrorCode::out_of_range,
            "K=" + std::to_string(K) + " must lie in [1, rank=" + std::to_string(decomp.rank()) + "]");
    require(sample_index < decomp.num_samples(), ErrorCode::out_of_range,
            "sample index " + std::to_string(sample_index) + " outside batch of " +
                std::to_string(decomp.num_samples()));
    const auto k = static_cast<Eigen::Index>(K);
    const Vector weights = decomp.left_vectors.row(static_cast<Eigen::Index>(sample_index)).head(k).transpose().cwiseProduct(
        decomp.singular_values.head(k));
    return decomp.right_vectors.leftCols(k) * weights;
}

// Subtracts every sample's top-K contribution from the raw rows, in double precision.
inline Matrix remove_topk(const Matrix & raw, const SpectralDecomp & decomp, std::size_t K) {
    require(raw.rows() == static_cast<Eigen::Index>(decomp.num_samples()) &&
                raw.cols() == decomp.right_vectors.rows(),
            ErrorCode::dimension_mismatch, "decomposition does not match the matrix being cleaned");
    require(K >= 1 && K <= decomp.rank(), ErrorCode::out_of_range,
            "K=" + std::to_string(K) + " must lie in [1, rank=" + std::to_string(decomp.rank()) + "]");
    const auto k = static_cast<Eigen::Index>(K);
    const Matrix topk = decomp.left_vectors.leftCols(k) * decomp.singular_values.head(k).asDiagonal() *
                        decomp.right_vectors.leftCols(k).transpose();
    return raw - topk;
}

/// Returns a copy of the bundle whose layer spec.layer_index has its top-K
/// components removed. Other layers are copied untouched; later layers are
/// not recomputed.
inline ReprBundle clean_layer(const ReprBundle & bundle, const CleanSpec & spec) {
    validate(bundle);
    require(spec.layer_index < bundle.num_layers(), ErrorCode::out_of_range,
            "layer " + std::to_string(spec.layer_index) + " outside bundle of " +
                std::to_string(bundle.num_layers()) + " layers");
    require(spec.K >= 1, ErrorCode::out_of_range, "K must be >= 1");

    const Matrix raw = to_eigen(bundle.layers[spec.layer_index]);
    const SpectralDecomp decomp = decompose(raw, spec.layer_index);
    const Matrix cleaned = remove_topk(raw, decomp, spec.K);
    require(cleaned.allFinite(), ErrorCode::numeric_failure, "cleaned layer contains non-finite values");

    ReprBundle out = bundle;
    out.layers[spec.layer_index] = from_eigen(cleaned);
    std::string note = "clean_topk layer=" + std::to_string(spec.layer_index) + " K=" + std::to_string(spec.K) +
                       " source=" + bundle_hash(bundle);
    out.manifest.notes = out.manifest.notes.empty() ? note : out.manifest.notes + "; " + note;
    return out;
}

} // namespace critlayers
