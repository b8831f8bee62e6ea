// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
// Tolerances are fixed here and nowhere else.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include <critlayers/critlayers.hpp>

#include "oracles.hpp"

using namespace critlayers;
namespace fs = std::filesystem;

namespace {

constexpr double kCkaOracleTol = 1e-10;
constexpr double kSelfCkaTol = 1e-10;
constexpr double kInvarianceTol = 1e-8;
constexpr double kDeltaTol = 1e-12;
constexpr double kReconstructionTol = 1e-6;
constexpr double kEigenTol = 1e-8;
constexpr double kSpectralCkaTol = 1e-8;
constexpr double kCcaTol = 1e-8;
constexpr double kInterventionTol = 1e-6;
constexpr int kSpearmanUlps = 4;
constexpr double kGradRelTol = 1e-3;
constexpr double kCkaBudgetSeconds = 5.0;
constexpr double kToyBudgetSeconds = 60.0;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
    bool pass = true;
    std::string detail;
};

int failures = 0;

void criterion(const std::string & name, const std::function<Outcome()> & check) {
    Outcome o;
    try {
        o = check();
    } catch (const std::exception & e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
}

template <typename... Args>
std::string fmt(const char * f, Args... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

class ScratchDir {
public:
    explicit ScratchDir(const std::string & tag) {
        path_ = fs::temp_directory_path() / ("critlayers_acceptance_" + std::to_string(::getpid()) + "_" + tag);
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~ScratchDir() { fs::remove_all(path_); }
    const fs::path & path() const { return path_; }

private:
    fs::path path_;
};

template <typename F>
bool raises(ErrorCode code, F && fn) {
    try {
        fn();
    } catch (const Error & e) {
        return e.code() == code;
    }
    return false;
}

// ---- similarity

Outcome cka_oracle_equivalence() {
    std::mt19937_64 rng(1001);
    std::uniform_int_distribution<Eigen::Index> rows(2, 50), cols(1, 16);
    double worst = 0.0;
    const auto t0 = Clock::now();
    for (int t = 0; t < 100; ++t) {
        const Eigen::Index n = rows(rng);
        const Matrix x = oracle::random_matrix(rng, n, cols(rng), 2.0);
        const Eigen::Index dy = cols(rng);
        const Matrix y = oracle::random_matrix(rng, n, dy) + Matrix::Constant(n, dy, 0.5);
        worst = std::max(worst, std::abs(linear_cka(x, y) - oracle::gram_cka(x, y)));
    }
    const double secs = seconds_since(t0);
    return {worst <= kCkaOracleTol && secs < kCkaBudgetSeconds,
            fmt("max |cka - hsic oracle| = %.3g over 100 pairs (N<=50, d<=16) in %.3fs", worst, secs)};
}

Outcome cka_invariances() {
    std::mt19937_64 rng(1002);
    std::uniform_int_distribution<Eigen::Index> rows(3, 40), cols(1, 12);
    std::uniform_real_distribution<double> scale(0.01, 100.0);
    double self = 0.0, orth = 0.0, iso = 0.0, sym = 0.0;
    for (int t = 0; t < 100; ++t) {
        const Eigen::Index n = rows(rng);
        const Eigen::Index d = cols(rng);
        const Matrix x = oracle::random_matrix(rng, n, d);
        const Matrix y = oracle::random_matrix(rng, n, cols(rng));
        const double base = linear_cka(x, y);
        self = std::max(self, std::abs(linear_cka(x, x) - 1.0));
        orth = std::max(orth, std::abs(linear_cka(x * oracle::random_orthogonal(rng, d), y) - base));
        iso = std::max(iso, std::abs(linear_cka(scale(rng) * x, y) - base));
        sym = std::max(sym, std::abs(linear_cka(y, x) - base));
    }
    const bool ok = self <= kSelfCkaTol && orth <= kInvarianceTol && iso <= kInvarianceTol && sym <= kInvarianceTol;
    return {ok, fmt("self %.2g, orthogonal %.2g, isotropic scaling %.2g, symmetry %.2g (100 trials each)", self, orth,
                    iso, sym)};
}

Outcome delta_consistency() {
    std::mt19937_64 rng(1003);
    double worst = 0.0;
    bool ranges_ok = true;
    for (int trial = 0; trial < 5; ++trial) {
        const auto bundle = oracle::random_bundle(rng, 9, 20, 10);
        const CkaMatrix cka = pairwise_cka(bundle);
        for (int k : {1, 2, 3}) {
            const DeltaCurve c = delta_curve(cka, k);
            const auto uk = static_cast<std::size_t>(k);
            ranges_ok = ranges_ok && c.entries.size() == 9 - 2 * uk && c.range_low == uk && c.range_high == 8 - uk;
            for (const auto & e : c.entries) {
                double sum = 0.0;
                for (std::size_t j = e.layer - uk; j <= e.layer + uk; ++j) {
                    if (j != e.layer) sum += oracle::gram_cka(to_eigen(bundle.layers[e.layer]), to_eigen(bundle.layers[j]));
                }
                worst = std::max(worst, std::abs(e.value - sum / (2.0 * k)));
            }
        }
    }
    return {ranges_ok && worst <= kDeltaTol,
            fmt("max |delta - independent window mean| = %.3g for k in {1,2,3}; valid ranges %s", worst,
                ranges_ok ? "exact" : "WRONG")};
}

// ---- spectral

Outcome spectral_decomposition() {
    std::mt19937_64 rng(1004);
    double recon = 0.0, eig = 0.0, cka = 0.0;
    for (int t = 0; t < 30; ++t) {
        const Eigen::Index n = 4 + t % 20;
        const Eigen::Index d = 2 + (t * 5) % 12;
        const Matrix x = oracle::random_matrix(rng, n, d, 1.5);
        const Matrix c = center(x);
        const auto dec = decompose(x);
        const Matrix rebuilt = dec.left_vectors * dec.singular_values.asDiagonal() * dec.right_vectors.transpose();
        recon = std::max(recon, (rebuilt - c).norm() / c.norm());
        const auto ev = oracle::jacobi_eigenvalues(c.transpose() * c);
        for (Eigen::Index i = 0; i < dec.singular_values.size(); ++i) {
            eig = std::max(eig, std::abs(dec.singular_values(i) - std::sqrt(std::max(ev[static_cast<std::size_t>(i)], 0.0))));
        }
        const Matrix y = oracle::random_matrix(rng, n, 1 + t % 7);
        cka = std::max(cka, std::abs(cka_from_spectra(dec, decompose(y)) - oracle::gram_cka(x, y)));
    }
    return {recon < kReconstructionTol && eig <= kEigenTol && cka <= kSpectralCkaTol,
            fmt("relative residual %.2g, |sigma - sqrt(jacobi eig)| %.2g, |spectral cka - oracle| %.2g", recon, eig, cka)};
}

Outcome cca_properties() {
    std::mt19937_64 rng(1005);
    double ident = 0.0, ortho = 0.0, mix = 0.0;
    for (int t = 0; t < 20; ++t) {
        const Eigen::Index n = 10 + t;
        const auto dec = decompose(oracle::random_matrix(rng, n, 6));
        const std::size_t K = 1 + static_cast<std::size_t>(t) % 5;
        const auto f = principal_features(dec, K);
        ident = std::max(ident, std::abs(cca_topk(f, f) - 1.0));

        const Matrix q = oracle::random_orthogonal(rng, n);
        PrincipalFeatures a, b;
        a.K = 2;
        a.features = q.leftCols(2);
        b.K = 3;
        b.features = q.middleCols(2, 3);
        ortho = std::max(ortho, std::abs(cca_topk(a, b)));

        Matrix m = oracle::random_matrix(rng, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(K));
        m += 3.0 * Matrix::Identity(m.rows(), m.cols()); // well-conditioned
        PrincipalFeatures mixed = f;
        mixed.features = f.features * m;
        mix = std::max(mix, std::abs(cca_topk(f, mixed) - 1.0));
    }
    return {ident <= kCcaTol && ortho <= kCcaTol && mix <= kCcaTol,
            fmt("identical |1-cca| %.2g, orthogonal |cca| %.2g, invertible mixing |1-cca| %.2g", ident, ortho, mix)};
}

// ---- intervention

Outcome intervention_invariants() {
    std::mt19937_64 rng(1006);
    double mean_err = 0.0, energy = 0.0, orth = 0.0;
    for (int t = 0; t < 20; ++t) {
        const Eigen::Index n = 8 + t;
        const Eigen::Index d = 3 + t % 9;
        const Matrix x = oracle::random_matrix(rng, n, d) + Matrix::Constant(n, d, 2.0);
        const Matrix c = center(x);
        const auto dec = decompose(x);
        const Matrix full = remove_topk(x, dec, dec.rank());
        const Eigen::RowVectorXd mu = x.colwise().mean();
        for (Eigen::Index i = 0; i < n; ++i) mean_err = std::max(mean_err, (full.row(i) - mu).cwiseAbs().maxCoeff());
        for (std::size_t K = 1; K <= dec.rank(); ++K) {
            const auto k = static_cast<Eigen::Index>(K);
            const Matrix cc = center(remove_topk(x, dec, K));
            const double removed = dec.singular_values.head(k).squaredNorm();
            energy = std::max(energy, std::abs((cc.squaredNorm() + removed) / c.squaredNorm() - 1.0));
            orth = std::max(orth, (cc * dec.right_vectors.leftCols(k)).norm() / c.norm());
        }
    }
    return {mean_err <= kInterventionTol && energy <= kInterventionTol && orth <= kInterventionTol,
            fmt("K=rank rows-to-mean %.2g, relative energy %.2g, residual on removed basis %.2g", mean_err, energy, orth)};
}

// ---- statistics and planning

Outcome spearman_and_planner() {
    RankedSeries a{"a", {0, 1, 2, 3}, {1, 2, 2, 4}};
    RankedSeries b{"b", {0, 1, 2, 3}, {1, 2, 3, 4}};
    const double rho = spearman(a, b);
    const double expected = 3.0 / std::sqrt(10.0);
    const double ulps = std::abs(rho - expected) / std::numeric_limits<double>::epsilon();
    const bool ties_ok = ulps <= kSpearmanUlps && std::abs(rho - oracle::spearman(a.values, b.values)) <=
                                                      kSpearmanUlps * std::numeric_limits<double>::epsilon();
    const bool sym_ok = spearman(b, a) == rho;

    // loss = 3 - delta: delta-critical and loss-critical layers must agree exactly
    DeltaCurve curve;
    curve.k = 2;
    LossTable table;
    table.base_loss = 1.0;
    const double deltas[] = {0.93, 0.71, 0.88, 0.64, 0.97, 0.80, 0.69, 0.90};
    for (std::size_t i = 0; i < 8; ++i) {
        curve.entries.push_back({i + 2, deltas[i]});
        table.entries.push_back({i + 2, 3.0 - deltas[i]});
    }
    curve.range_low = 2;
    curve.range_high = 9;
    const auto r = criticality_report(curve, table);
    bool overlaps_ok = r.overlaps.size() == 2;
    for (const auto & o : r.overlaps) overlaps_ok = overlaps_ok && o.overlap == o.m;
    const bool anti_ok = r.correlation.rho == -1.0 && overlaps_ok;
    return {ties_ok && sym_ok && anti_ok,
            fmt("tie case rho=%.17g (%.1f ulp from 3/sqrt(10)); antitone fixture rho=%.3g, overlap@3/@5 %s", rho, ulps,
                r.correlation.rho, overlaps_ok ? "full" : "PARTIAL")};
}

// ---- toy model

Outcome toy_suite() {
    const auto t0 = Clock::now();
    std::vector<std::string> problems;

    // gradient check on a small model
    toy::ToyConfig small;
    small.num_layers = 3;
    small.hidden_size = 8;
    small.vocab_size = 13;
    small.seq_len = 8;
    {
        auto ck = toy::init_checkpoint(small);
        const auto data = toy::make_synthetic_dataset(small, 4, toy::SyntheticTask::arithmetic, 7);
        const auto lg = toy::loss_and_grad(ck, data);
        auto params = ck.params.tensors();
        const auto grads = lg.grads.tensors();
        std::mt19937_64 rng(1007);
        double worst = 0.0;
        for (int trial = 0; trial < 20; ++trial) {
            const std::size_t t = std::uniform_int_distribution<std::size_t>(0, params.size() - 1)(rng);
            Matrix & w = *params[t];
            const Eigen::Index i = std::uniform_int_distribution<Eigen::Index>(0, w.size() - 1)(rng);
            const double orig = w.data()[i];
            const double h = 1e-4;
            w.data()[i] = orig + h;
            const double up = toy::eval_loss(ck, data);
            w.data()[i] = orig - h;
            const double down = toy::eval_loss(ck, data);
            w.data()[i] = orig;
            const double num = (up - down) / (2 * h);
            const double ana = grads[t]->data()[i];
            worst = std::max(worst, std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), 1e-6}));
        }
        if (worst >= kGradRelTol) problems.push_back(fmt("gradient rel err %.3g", worst));
    }

    // freezing leaves listed blocks bit-identical
    {
        const auto ck = toy::init_checkpoint(small);
        const auto data = toy::make_synthetic_dataset(small, 4, toy::SyntheticTask::periodic, 8);
        LayerPlan p;
        p.mode = PlanMode::freeze_subset;
        p.layers = {0, 2};
        const auto out = toy::train(ck, data, 3, 0.05, p);
        if (!toy::bitwise_equal(out.params.layers[0], ck.params.layers[0]) ||
            !toy::bitwise_equal(out.params.layers[2], ck.params.layers[2]) ||
            toy::bitwise_equal(out.params.layers[1], ck.params.layers[1])) {
            problems.push_back("freeze plan did not hold");
        }
    }

    // identical models give zero loss change
    toy::ToyConfig cfg;
    {
        const auto ck = toy::init_checkpoint(cfg);
        const auto data = toy::make_synthetic_dataset(cfg, 8, toy::SyntheticTask::arithmetic, 9);
        for (double v : loss_change(toy::build_loss_table(ck, ck, data, 2)).values) {
            if (v != 0.0) problems.push_back(fmt("self-substitution delta-L %.3g", v));
        }
    }

    // 200 SGD steps reduce the training loss
    double before = 0.0, after = 0.0;
    {
        const auto data = toy::make_synthetic_dataset(cfg, 64, toy::SyntheticTask::arithmetic, 42);
        const auto start = toy::init_checkpoint(cfg);
        toy::TrainOptions opt;
        opt.steps = 200;
        opt.lr = 1e-2;
        opt.batch_size = 16;
        before = toy::eval_loss(start, data);
        after = toy::eval_loss(toy::train(start, data, opt), data);
        if (!(after < before)) problems.push_back(fmt("loss %.6f -> %.6f did not decrease", before, after));
    }

    // toygen -> delta -> plan -> criticality twice, byte-compared
    {
        ScratchDir dir("pipeline");
        auto pipeline = [&](const fs::path & root) {
            cli::cmd_toygen(toy::ExperimentConfig{}, root / "gen");
            cli::cmd_delta(root / "gen" / "bundle", 2, root / "delta");
            cli::PlanArgs pa;
            pa.curve_path = root / "delta" / "delta.json";
            pa.m = 2;
            cli::cmd_plan(pa, root / "plan");
            cli::cmd_criticality(root / "delta" / "delta.json", root / "gen" / "losses.json", root / "crit");
        };
        pipeline(dir.path() / "a");
        pipeline(dir.path() / "b");
        std::size_t compared = 0;
        for (const auto & e : fs::recursive_directory_iterator(dir.path() / "a")) {
            if (!e.is_regular_file() || e.path().filename() == "run.json") continue;
            const auto rel = fs::relative(e.path(), dir.path() / "a");
            ++compared;
            if (fsutil::read_file(e.path()) != fsutil::read_file(dir.path() / "b" / rel)) {
                problems.push_back("pipeline output differs: " + rel.string());
            }
        }
        if (compared < 10) problems.push_back("pipeline produced too few files");
    }

    const double secs = seconds_since(t0);
    if (secs >= kToyBudgetSeconds) problems.push_back(fmt("took %.1fs", secs));
    std::string detail = fmt("gradient check, freeze exactness, zero self-substitution change, 200-step loss %.4f -> %.4f, "
                             "reproducible pipeline; %.1fs",
                             before, after, secs);
    for (const auto & p : problems) detail += "; " + p;
    return {problems.empty(), detail};
}

// ---- storage format

Outcome format_round_trips() {
    ScratchDir dir("format");
    std::mt19937_64 rng(1008);
    int mismatches = 0;
    for (int t = 0; t < 50; ++t) {
        const auto b = oracle::random_bundle(rng, 1 + static_cast<std::size_t>(t) % 6, 2 + static_cast<std::size_t>(t) % 17, 12);
        const fs::path p = dir.path() / ("b" + std::to_string(t));
        write_bundle(b, p);
        if (!(read_bundle(p) == b)) ++mismatches;
    }

    const std::string good = encode_layer(from_eigen(oracle::random_matrix(rng, 3, 4)));
    std::string magic = good, version = good;
    magic[1] = 'Z';
    version[4] = 9;
    const bool decode_ok = raises(ErrorCode::truncated_payload, [&] { decode_layer(good.substr(0, good.size() - 4)); }) &&
                           raises(ErrorCode::truncated_payload, [&] { decode_layer(good.substr(0, 12)); }) &&
                           raises(ErrorCode::bad_magic, [&] { decode_layer(magic); }) &&
                           raises(ErrorCode::unsupported_version, [&] { decode_layer(version); });

    const fs::path p = dir.path() / "b0";
    fs::remove(p / "layers" / "layer_000.bin");
    const bool missing_ok = raises(ErrorCode::missing_layer_file, [&] { read_bundle(p); });

    ReprBundle bad = oracle::random_bundle(rng, 2, 4, 3);
    bad.layers[0](0, 0) = std::numeric_limits<float>::infinity();
    const bool nan_ok = raises(ErrorCode::invariant_violation, [&] { write_bundle(bad, dir.path() / "never"); }) &&
                        !fs::exists(dir.path() / "never");

    return {mismatches == 0 && decode_ok && missing_ok && nan_ok,
            fmt("%d/50 bit-exact round trips; truncation/magic/version %s; missing file %s; non-finite %s",
                50 - mismatches, decode_ok ? "rejected" : "NOT rejected", missing_ok ? "rejected" : "NOT rejected",
                nan_ok ? "rejected" : "NOT rejected")};
}

} // namespace

int main() {
    criterion("cka-oracle-equivalence", cka_oracle_equivalence);
    criterion("cka-invariances", cka_invariances);
    criterion("delta-consistency", delta_consistency);
    criterion("spectral-decomposition", spectral_decomposition);
    criterion("cca-properties", cca_properties);
    criterion("intervention-invariants", intervention_invariants);
    criterion("spearman-and-planner", spearman_and_planner);
    criterion("toy-model-suite", toy_suite);
    criterion("bundle-format", format_round_trips);
    std::printf("%s: %d failing criteria\n", failures == 0 ? "ACCEPTED" : "REJECTED", failures);
    return failures == 0 ? 0 : 1;
}
