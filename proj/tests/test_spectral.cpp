#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include <critlayers/spectral.hpp>
#include <critlayers/toymodel.hpp>

#include "oracles.hpp"
#include "test_util.hpp"

using namespace critlayers;
using testutil::error_of;

namespace {

Matrix rank_one() {
    Matrix x(2, 2);
    x << 1, 0, -1, 0;
    return x;
}

PrincipalFeatures block(const Matrix & m) {
    PrincipalFeatures pf;
    pf.K = static_cast<std::size_t>(m.cols());
    pf.features = m;
    return pf;
}

} // namespace

TEST(Decompose, RankOneAnalyticCase) {
    const auto d = decompose(rank_one());
    ASSERT_EQ(d.rank(), 1u);
    EXPECT_NEAR(d.singular_values(0), std::sqrt(2.0), 1e-14);
    const auto f = principal_features(d, 1);
    EXPECT_NEAR(f.features(0, 0), 1.0, 1e-14);
    EXPECT_NEAR(f.features(1, 0), -1.0, 1e-14);
}

TEST(Decompose, InvariantsOnRandomInput) {
    std::mt19937_64 rng(21);
    for (int t = 0; t < 20; ++t) {
        const Eigen::Index n = 2 + t % 9;
        const Eigen::Index dcols = 1 + (t * 7) % 11;
        const Matrix x = oracle::random_matrix(rng, n, dcols, 2.0);
        const Matrix c = center(x);
        const auto d = decompose(x);
        const auto r = static_cast<Eigen::Index>(d.rank());
        EXPECT_LE(d.rank(), static_cast<std::size_t>(std::min(n, dcols)));
        for (Eigen::Index i = 0; i + 1 < r; ++i) EXPECT_GE(d.singular_values(i), d.singular_values(i + 1));
        EXPECT_GE(d.singular_values.minCoeff(), 0.0);
        EXPECT_LT((d.left_vectors.transpose() * d.left_vectors - Matrix::Identity(r, r)).norm(), 1e-8);
        EXPECT_LT((d.right_vectors.transpose() * d.right_vectors - Matrix::Identity(r, r)).norm(), 1e-8);
        const Matrix rec = d.left_vectors * d.singular_values.asDiagonal() * d.right_vectors.transpose();
        EXPECT_LT((rec - c).norm() / c.norm(), 1e-6);
        for (Eigen::Index k = 0; k < r; ++k) {
            Eigen::Index arg;
            d.left_vectors.col(k).cwiseAbs().maxCoeff(&arg);
            EXPECT_GE(d.left_vectors(arg, k), 0.0);
        }
    }
}

TEST(Decompose, SingularValuesMatchEigenOracle) {
    std::mt19937_64 rng(22);
    const Matrix x = oracle::random_matrix(rng, 8, 5);
    const Matrix c = center(x);
    const auto ev = oracle::jacobi_eigenvalues(c.transpose() * c);
    const auto d = decompose(x);
    ASSERT_EQ(d.rank(), 5u);
    for (std::size_t i = 0; i < 5; ++i) {
        EXPECT_NEAR(d.singular_values(static_cast<Eigen::Index>(i)), std::sqrt(std::max(ev[i], 0.0)), 1e-8);
    }
}

TEST(Decompose, TrimsTheCenteringNullDirection) {
    // N <= d: centering removes one dimension
    std::mt19937_64 rng(23);
    const auto d = decompose(oracle::random_matrix(rng, 6, 10));
    EXPECT_EQ(d.rank(), 5u);
}

TEST(Decompose, IsBitReproducible) {
    std::mt19937_64 rng(24);
    const Matrix x = oracle::random_matrix(rng, 20, 12);
    const auto a = decompose(x);
    const auto b = decompose(x);
    EXPECT_TRUE(toy::bitwise_equal(a.left_vectors, b.left_vectors));
    EXPECT_TRUE(toy::bitwise_equal(a.right_vectors, b.right_vectors));
    EXPECT_TRUE(toy::bitwise_equal(Matrix(a.singular_values), Matrix(b.singular_values)));
}

TEST(Decompose, ZeroVarianceIsAnError) {
    EXPECT_EQ(error_of([] { decompose(Matrix::Constant(4, 3, 1.5)); }), ErrorCode::degenerate_input);
}

TEST(PrincipalFeatures, FullRankReproducesScaledLeftVectors) {
    std::mt19937_64 rng(25);
    const auto d = decompose(oracle::random_matrix(rng, 9, 4));
    const auto f = principal_features(d, d.rank());
    EXPECT_TRUE(f.features.isApprox(d.left_vectors * d.singular_values.asDiagonal(), 0.0));
}

TEST(PrincipalFeatures, ColumnNormsAndOrthogonality) {
    std::mt19937_64 rng(26);
    const auto d = decompose(oracle::random_matrix(rng, 15, 7));
    const auto f = principal_features(d, 4);
    const Matrix gram = f.features.transpose() * f.features;
    for (Eigen::Index k = 0; k < 4; ++k) {
        EXPECT_NEAR(f.features.col(k).norm(), d.singular_values(k), 1e-10);
        for (Eigen::Index j = 0; j < k; ++j) EXPECT_LT(std::abs(gram(j, k)), 1e-6 * std::pow(d.singular_values(0), 2));
    }
}

TEST(PrincipalFeatures, KOutOfRange) {
    const auto d = decompose(rank_one());
    EXPECT_EQ(error_of([&] { principal_features(d, 0); }), ErrorCode::out_of_range);
    EXPECT_EQ(error_of([&] { principal_features(d, 2); }), ErrorCode::out_of_range);
}

TEST(Cca, IdenticalSubspaces) {
    std::mt19937_64 rng(27);
    const auto f = principal_features(decompose(oracle::random_matrix(rng, 10, 6)), 3);
    EXPECT_NEAR(cca_topk(f, f), 1.0, 1e-10);
}

TEST(Cca, OrthogonalSubspaces) {
    const Matrix id = Matrix::Identity(4, 4);
    EXPECT_NEAR(cca_topk(block(id.leftCols(2)), block(id.rightCols(2))), 0.0, 1e-10);
}

TEST(Cca, InvariantUnderInvertibleMixing) {
    std::mt19937_64 rng(28);
    const auto f = principal_features(decompose(oracle::random_matrix(rng, 12, 5)), 3);
    Matrix mix(3, 3);
    mix << 2, 1, 0, 0.5, -1, 3, 1, 1, 1;
    EXPECT_NEAR(cca_topk(f, block(f.features * mix)), 1.0, 1e-8);
}

TEST(Cca, SymmetricAndBounded) {
    std::mt19937_64 rng(29);
    for (int t = 0; t < 20; ++t) {
        const auto a = principal_features(decompose(oracle::random_matrix(rng, 10, 6)), 1 + t % 4);
        const auto b = principal_features(decompose(oracle::random_matrix(rng, 10, 5)), 1 + (t / 4) % 4);
        EXPECT_NEAR(cca_topk(a, b), cca_topk(b, a), 1e-10);
        EXPECT_GE(cca_topk(a, b), 0.0);
        EXPECT_LE(cca_topk(a, b), 1.0 + 1e-8);
    }
}

TEST(Cca, RankDeficientColumnsAreDropped) {
    Matrix a(4, 2);
    a << 1, 0, 0, 0, 0, 0, 0, 0; // second column empty
    const Matrix id = Matrix::Identity(4, 4);
    EXPECT_NEAR(cca_topk(block(a), block(id.leftCols(1))), 1.0, 1e-12);
    EXPECT_EQ(error_of([&] { cca_topk(block(Matrix::Zero(4, 2)), block(id.leftCols(1))); }),
              ErrorCode::degenerate_input);
    EXPECT_EQ(error_of([&] { cca_topk(block(id.leftCols(1)), block(Matrix::Identity(3, 3).leftCols(1))); }),
              ErrorCode::dimension_mismatch);
}

TEST(CcaCurve, IdenticalLayersGiveOnes) {
    std::mt19937_64 rng(30);
    const auto layer = oracle::to_repr(oracle::random_matrix(rng, 10, 4));
    const auto c = cca_curve(make_bundle({layer, layer, layer, layer, layer}, "m", "d"), 2, 2);
    ASSERT_EQ(c.entries.size(), 1u);
    EXPECT_NEAR(c.entries[0].value, 1.0, 1e-10);
}

TEST(CcaCurve, ShapeAcrossK) {
    std::mt19937_64 rng(31);
    const auto b = oracle::random_bundle(rng, 7, 12, 6);
    const auto decomps = decompose_all(b);
    const auto lo = cca_curve(decomps, 1, 2);
    const auto hi = cca_curve(decomps, min_rank(decomps), 2);
    ASSERT_EQ(lo.entries.size(), hi.entries.size());
    for (std::size_t i = 0; i < lo.entries.size(); ++i) {
        EXPECT_EQ(lo.entries[i].layer, hi.entries[i].layer);
        for (double v : {lo.entries[i].value, hi.entries[i].value}) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0 + 1e-8);
        }
    }
}

TEST(CcaCurve, ToyCurveMatchesPairwiseRecomputation) {
    toy::ToyConfig cfg;
    const auto data = toy::make_synthetic_dataset(cfg, 40, toy::SyntheticTask::arithmetic, 42);
    const auto bundle = toy::forward_collect(toy::init_checkpoint(cfg), toy::prompts_of(data)).bundle;
    const auto curve = cca_curve(bundle, 3, 2);
    ASSERT_EQ(curve.entries.size(), 4u);
    for (const auto & e : curve.entries) {
        double sum = 0.0;
        for (std::size_t j : {e.layer - 2, e.layer - 1, e.layer + 1, e.layer + 2}) {
            sum += cca_topk(principal_features(decompose(bundle.layers[e.layer]), 3),
                            principal_features(decompose(bundle.layers[j]), 3));
        }
        EXPECT_NEAR(e.value, sum / 4.0, 1e-12);
    }
}

TEST(SpectralCka, MatchesSimilarityModule) {
    std::mt19937_64 rng(32);
    for (int t = 0; t < 20; ++t) {
        const Matrix x = oracle::random_matrix(rng, 14, 3 + t % 6);
        const Matrix y = oracle::random_matrix(rng, 14, 2 + t % 9) + 0.5 * Matrix::Ones(14, 2 + t % 9);
        EXPECT_NEAR(cka_from_spectra(decompose(x), decompose(y)), linear_cka(x, y), 1e-8);
    }
}
