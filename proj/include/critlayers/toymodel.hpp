#pragma once

// A small deterministic decoder-only transformer, enough to run the whole
// criticality pipeline without an external model: forward pass with
// last-token hidden-state capture, teacher-forced NLL on completions,
// analytic gradients, plain SGD with layer freezing, and layer-window
// substitution between two checkpoints.
//
// Each block is post-norm:
//
//   Ht  = LayerNorm1(H + MHA(H))
//   H'  = LayerNorm2(H + FF(Ht))
//
// Note the second residual adds the block input H, not Ht.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <limits>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "error.hpp"
#include "fsutil.hpp"
#include "planner.hpp"
#include "repr_store.hpp"
#include "similarity.hpp"

namespace critlayers::toy {

inline constexpr std::size_t kFeedForwardMultiplier = 4;
inline constexpr double kLayerNormEps = 1e-5;

struct ToyConfig {
    std::size_t num_layers = 8;
    std::size_t hidden_size = 32;
    std::size_t num_heads = 2;
    std::size_t vocab_size = 64;
    std::size_t seq_len = 16;
    std::uint64_t seed = 42;

    std::size_t head_dim() const { return hidden_size / num_heads; }
    std::size_t ff_size() const { return kFeedForwardMultiplier * hidden_size; }

    // seed is initialisation provenance, not architecture
    bool same_architecture(const ToyConfig & o) const {
        return num_layers == o.num_layers && hidden_size == o.hidden_size && num_heads == o.num_heads &&
               vocab_size == o.vocab_size && seq_len == o.seq_len;
    }
    bool operator==(const ToyConfig &) const = default;
};

inline void validate(const ToyConfig & c) {
    require(c.num_layers >= 1 && c.hidden_size >= 1 && c.num_heads >= 1 && c.vocab_size >= 1 && c.seq_len >= 1,
            ErrorCode::invalid_argument, "toy config sizes must all be >= 1");
    require(c.hidden_size % c.num_heads == 0, ErrorCode::invalid_argument,
            "hidden_size " + std::to_string(c.hidden_size) + " is not divisible by num_heads " +
                std::to_string(c.num_heads));
}

struct LayerParams {
    Matrix wq, bq, wk, bk, wv, bv, wo, bo;
    Matrix ln1_g, ln1_b;
    Matrix w1, b1, w2, b2;
    Matrix ln2_g, ln2_b;

    static constexpr std::size_t kTensorCount = 16;

    std::array<Matrix *, kTensorCount> tensors() {
        return {&wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo, &ln1_g, &ln1_b, &w1, &b1, &w2, &b2, &ln2_g, &ln2_b};
    }
    std::array<const Matrix *, kTensorCount> tensors() const {
        return {&wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo, &ln1_g, &ln1_b, &w1, &b1, &w2, &b2, &ln2_g, &ln2_b};
    }
    static constexpr std::array<const char *, kTensorCount> names() {
        return {"attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
                "ln1.gain", "ln1.bias", "ff.w1", "ff.b1", "ff.w2", "ff.b2", "ln2.gain", "ln2.bias"};
    }
};

struct ToyParams {
    Matrix tok_emb; // V x d
    Matrix pos_emb; // T x d
    std::vector<LayerParams> layers;
    Matrix head_w; // d x V
    Matrix head_b; // 1 x V

    // canonical order: embeddings, layers 0..L-1, head
    std::vector<Matrix *> tensors() {
        std::vector<Matrix *> out{&tok_emb, &pos_emb};
        for (auto & l : layers) {
            for (Matrix * t : l.tensors()) out.push_back(t);
        }
        out.push_back(&head_w);
        out.push_back(&head_b);
        return out;
    }
    std::vector<const Matrix *> tensors() const {
        std::vector<const Matrix *> out{&tok_emb, &pos_emb};
        for (const auto & l : layers) {
            for (const Matrix * t : l.tensors()) out.push_back(t);
        }
        out.push_back(&head_w);
        out.push_back(&head_b);
        return out;
    }
    std::vector<std::string> tensor_names() const {
        std::vector<std::string> out{"tok_emb", "pos_emb"};
        for (std::size_t l = 0; l < layers.size(); ++l) {
            for (const char * n : LayerParams::names()) out.push_back("layers." + std::to_string(l) + "." + n);
        }
        out.push_back("head.w");
        out.push_back("head.b");
        return out;
    }
    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const Matrix * t : tensors()) n += static_cast<std::size_t>(t->size());
        return n;
    }
};

inline ToyParams zeros_like(const ToyParams & p) {
    ToyParams z = p;
    for (Matrix * t : z.tensors()) t->setZero();
    return z;
}

inline bool bitwise_equal(const Matrix & a, const Matrix & b) {
    return a.rows() == b.rows() && a.cols() == b.cols() &&
           (a.size() == 0 || std::memcmp(a.data(), b.data(), static_cast<std::size_t>(a.size()) * sizeof(double)) == 0);
}

inline bool bitwise_equal(const LayerParams & a, const LayerParams & b) {
    const auto ta = a.tensors();
    const auto tb = b.tensors();
    for (std::size_t i = 0; i < ta.size(); ++i) {
        if (!bitwise_equal(*ta[i], *tb[i])) return false;
    }
    return true;
}

struct Checkpoint {
    ToyConfig config;
    ToyParams params;
};

inline bool bitwise_equal(const Checkpoint & a, const Checkpoint & b) {
    if (!(a.config == b.config)) return false;
    const auto ta = a.params.tensors();
    const auto tb = b.params.tensors();
    if (ta.size() != tb.size()) return false;
    for (std::size_t i = 0; i < ta.size(); ++i) {
        if (!bitwise_equal(*ta[i], *tb[i])) return false;
    }
    return true;
}

inline Checkpoint init_checkpoint(const ToyConfig & config) {
    validate(config);
    const auto d = static_cast<Eigen::Index>(config.hidden_size);
    const auto f = static_cast<Eigen::Index>(config.ff_size());
    const auto V = static_cast<Eigen::Index>(config.vocab_size);
    const auto T = static_cast<Eigen::Index>(config.seq_len);

    std::mt19937_64 rng(config.seed);
    auto gaussian = [&](Eigen::Index rows, Eigen::Index cols, double stddev) {
        std::normal_distribution<double> dist(0.0, stddev);
        Matrix m(rows, cols);
        // fill in row-major order so the stream position is layout independent
        for (Eigen::Index r = 0; r < rows; ++r) {
            for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = dist(rng);
        }
        return m;
    };

    Checkpoint ck;
    ck.config = config;
    ck.params.tok_emb = gaussian(V, d, 1.0);
    ck.params.pos_emb = gaussian(T, d, 0.1);
    const double proj = 1.0 / std::sqrt(static_cast<double>(d));
    const double down = 1.0 / std::sqrt(static_cast<double>(f));
    for (std::size_t l = 0; l < config.num_layers; ++l) {
        LayerParams p;
        p.wq = gaussian(d, d, proj);
        p.bq = Matrix::Zero(1, d);
        p.wk = gaussian(d, d, proj);
        p.bk = Matrix::Zero(1, d);
        p.wv = gaussian(d, d, proj);
        p.bv = Matrix::Zero(1, d);
        p.wo = gaussian(d, d, proj);
        p.bo = Matrix::Zero(1, d);
        p.ln1_g = Matrix::Ones(1, d);
        p.ln1_b = Matrix::Zero(1, d);
        p.w1 = gaussian(d, f, proj);
        p.b1 = Matrix::Zero(1, f);
        p.w2 = gaussian(f, d, down);
        p.b2 = Matrix::Zero(1, d);
        p.ln2_g = Matrix::Ones(1, d);
        p.ln2_b = Matrix::Zero(1, d);
        ck.params.layers.push_back(std::move(p));
    }
    ck.params.head_w = gaussian(d, V, 0.02);
    ck.params.head_b = Matrix::Zero(1, V);
    return ck;
}

// ---------------------------------------------------------------------------
// forward / backward

namespace detail {

inline constexpr double kGeluC = 0.7978845608028654; // sqrt(2/pi)

inline double gelu(double x) {
    return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
}

inline double gelu_grad(double x) {
    const double t = std::tanh(kGeluC * (x + 0.044715 * x * x * x));
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

struct NormCache {
    Matrix xhat;
    Vector rstd;
};

inline Matrix layer_norm(const Matrix & x, const Matrix & gain, const Matrix & bias, NormCache & cache) {
    const Eigen::Index n = x.cols();
    cache.xhat.resize(x.rows(), n);
    cache.rstd.resize(x.rows());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const double mu = x.row(r).mean();
        const double var = (x.row(r).array() - mu).square().sum() / static_cast<double>(n);
        const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
        cache.rstd(r) = rstd;
        cache.xhat.row(r) = (x.row(r).array() - mu) * rstd;
    }
    Matrix y = cache.xhat.array().rowwise() * gain.row(0).array();
    y.rowwise() += bias.row(0);
    return y;
}

inline Matrix layer_norm_backward(const Matrix & dy, const Matrix & gain, const NormCache & cache, Matrix & dgain,
                                  Matrix & dbias) {
    dgain.row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
    dbias.row(0) += dy.colwise().sum();
    const Matrix dxhat = dy.array().rowwise() * gain.row(0).array();
    const auto n = static_cast<double>(dy.cols());
    Matrix dx(dy.rows(), dy.cols());
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
        const double mean_d = dxhat.row(r).sum() / n;
        const double mean_dx = dxhat.row(r).dot(cache.xhat.row(r)) / n;
        dx.row(r) = cache.rstd(r) * (dxhat.row(r).array() - mean_d - cache.xhat.row(r).array() * mean_dx);
    }
    return dx;
}

struct LayerCache {
    Matrix input;
    Matrix q, k, v;
    std::vector<Matrix> probs; // per head, T x T, zero above the diagonal
    Matrix attn;               // concatenated head outputs
    NormCache ln1;
    Matrix ht;
    Matrix ff_pre, ff_act;
    NormCache ln2;
};

inline Matrix add_bias(Matrix x, const Matrix & b) {
    x.rowwise() += b.row(0);
    return x;
}

inline Matrix block_forward(const LayerParams & p, const ToyConfig & cfg, const Matrix & h, LayerCache & c) {
    const auto T = h.rows();
    const auto dh = static_cast<Eigen::Index>(cfg.head_dim());
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    c.input = h;
    c.q = add_bias(h * p.wq, p.bq);
    c.k = add_bias(h * p.wk, p.bk);
    c.v = add_bias(h * p.wv, p.bv);
    c.attn.resize(T, h.cols());
    c.probs.assign(cfg.num_heads, Matrix());
    for (std::size_t head = 0; head < cfg.num_heads; ++head) {
        const auto off = static_cast<Eigen::Index>(head) * dh;
        const Matrix scores = (c.q.middleCols(off, dh) * c.k.middleCols(off, dh).transpose()) * scale;
        Matrix prob = Matrix::Zero(T, T);
        for (Eigen::Index i = 0; i < T; ++i) {
            const double mx = scores.row(i).head(i + 1).maxCoeff();
            double z = 0.0;
            for (Eigen::Index j = 0; j <= i; ++j) {
                prob(i, j) = std::exp(scores(i, j) - mx);
                z += prob(i, j);
            }
            prob.row(i).head(i + 1) /= z;
        }
        c.attn.middleCols(off, dh) = prob * c.v.middleCols(off, dh);
        c.probs[head] = std::move(prob);
    }
    const Matrix mixed = add_bias(c.attn * p.wo, p.bo);
    c.ht = layer_norm(h + mixed, p.ln1_g, p.ln1_b, c.ln1);
    c.ff_pre = add_bias(c.ht * p.w1, p.b1);
    c.ff_act = c.ff_pre.unaryExpr([](double x) { return gelu(x); });
    const Matrix ff = add_bias(c.ff_act * p.w2, p.b2);
    return layer_norm(h + ff, p.ln2_g, p.ln2_b, c.ln2);
}

// Returns d(loss)/d(block input) and accumulates parameter gradients into g.
inline Matrix block_backward(const LayerParams & p, const ToyConfig & cfg, const LayerCache & c, const Matrix & dout,
                             LayerParams & g) {
    const auto dh = static_cast<Eigen::Index>(cfg.head_dim());
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    const Matrix da2 = layer_norm_backward(dout, p.ln2_g, c.ln2, g.ln2_g, g.ln2_b);
    Matrix dinput = da2;

    g.w2 += c.ff_act.transpose() * da2;
    g.b2.row(0) += da2.colwise().sum();
    const Matrix dact = da2 * p.w2.transpose();
    const Matrix dpre = dact.cwiseProduct(c.ff_pre.unaryExpr([](double x) { return gelu_grad(x); }));
    g.w1 += c.ht.transpose() * dpre;
    g.b1.row(0) += dpre.colwise().sum();
    const Matrix dht = dpre * p.w1.transpose();

    const Matrix da1 = layer_norm_backward(dht, p.ln1_g, c.ln1, g.ln1_g, g.ln1_b);
    dinput += da1;

    g.wo += c.attn.transpose() * da1;
    g.bo.row(0) += da1.colwise().sum();
    const Matrix dattn = da1 * p.wo.transpose();

    Matrix dq = Matrix::Zero(c.q.rows(), c.q.cols());
    Matrix dk = Matrix::Zero(c.k.rows(), c.k.cols());
    Matrix dv = Matrix::Zero(c.v.rows(), c.v.cols());
    for (std::size_t head = 0; head < cfg.num_heads; ++head) {
        const auto off = static_cast<Eigen::Index>(head) * dh;
        const Matrix & prob = c.probs[head];
        const Matrix dO = dattn.middleCols(off, dh);
        const Matrix dprob = dO * c.v.middleCols(off, dh).transpose();
        dv.middleCols(off, dh) = prob.transpose() * dO;
        Matrix dscores(prob.rows(), prob.cols());
        for (Eigen::Index i = 0; i < prob.rows(); ++i) {
            const double inner = prob.row(i).dot(dprob.row(i));
            dscores.row(i) = prob.row(i).array() * (dprob.row(i).array() - inner);
        }
        dscores *= scale;
        dq.middleCols(off, dh) = dscores * c.k.middleCols(off, dh);
        dk.middleCols(off, dh) = dscores.transpose() * c.q.middleCols(off, dh);
    }
    g.wq += c.input.transpose() * dq;
    g.bq.row(0) += dq.colwise().sum();
    g.wk += c.input.transpose() * dk;
    g.bk.row(0) += dk.colwise().sum();
    g.wv += c.input.transpose() * dv;
    g.bv.row(0) += dv.colwise().sum();
    dinput += dq * p.wq.transpose() + dk * p.wk.transpose() + dv * p.wv.transpose();
    return dinput;
}

inline void check_tokens(const ToyConfig & cfg, const std::vector<int> & tokens) {
    require(!tokens.empty(), ErrorCode::invalid_argument, "empty token sequence");
    require(tokens.size() <= cfg.seq_len, ErrorCode::out_of_range,
            "sequence of " + std::to_string(tokens.size()) + " tokens exceeds seq_len " + std::to_string(cfg.seq_len));
    for (int t : tokens) {
        require(t >= 0 && static_cast<std::size_t>(t) < cfg.vocab_size, ErrorCode::out_of_range,
                "token id " + std::to_string(t) + " outside vocabulary of " + std::to_string(cfg.vocab_size));
    }
}

inline Matrix embed(const ToyParams & p, const std::vector<int> & tokens) {
    Matrix h(static_cast<Eigen::Index>(tokens.size()), p.tok_emb.cols());
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        h.row(static_cast<Eigen::Index>(t)) = p.tok_emb.row(tokens[t]) + p.pos_emb.row(static_cast<Eigen::Index>(t));
    }
    return h;
}

struct SequenceTrace {
    std::vector<LayerCache> layers;
    std::vector<Matrix> hidden; // output of each block
    Matrix logits;              // T x V
};

inline SequenceTrace run_sequence(const Checkpoint & ck, const std::vector<int> & tokens) {
    check_tokens(ck.config, tokens);
    SequenceTrace tr;
    tr.layers.resize(ck.config.num_layers);
    Matrix h = embed(ck.params, tokens);
    for (std::size_t l = 0; l < ck.config.num_layers; ++l) {
        h = block_forward(ck.params.layers[l], ck.config, h, tr.layers[l]);
        tr.hidden.push_back(h);
    }
    tr.logits = add_bias(h * ck.params.head_w, ck.params.head_b);
    return tr;
}

} // namespace detail

// ---------------------------------------------------------------------------
// datasets

struct Example {
    std::vector<int> prompt;
    std::vector<int> completion;
};

using Dataset = std::vector<Example>;

enum class SyntheticTask {
    periodic,   // a random motif of period 2..4 repeated
    arithmetic, // t_i = (a + s*i) mod V with stride s in 1..3
};

/// Seeded sequences with learnable next-token structure. Each example has
/// seq_len + 1 tokens in total so the teacher-forced input fills the context.
inline Dataset make_synthetic_dataset(const ToyConfig & cfg, std::size_t n, SyntheticTask task, std::uint64_t seed) {
    validate(cfg);
    require(cfg.seq_len >= 4, ErrorCode::invalid_argument, "synthetic datasets need seq_len >= 4");
    std::mt19937_64 rng(seed);
    const auto V = static_cast<int>(cfg.vocab_size);
    const std::size_t total = cfg.seq_len + 1;
    Dataset out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<int> seq(total);
        if (task == SyntheticTask::periodic) {
            const std::size_t period = std::uniform_int_distribution<std::size_t>(2, 4)(rng);
            std::vector<int> motif(period);
            for (auto & t : motif) t = std::uniform_int_distribution<int>(0, V - 1)(rng);
            for (std::size_t t = 0; t < total; ++t) seq[t] = motif[t % period];
        } else {
            const int start = std::uniform_int_distribution<int>(0, V - 1)(rng);
            const int stride = std::uniform_int_distribution<int>(1, 3)(rng);
            for (std::size_t t = 0; t < total; ++t) seq[t] = (start + stride * static_cast<int>(t)) % V;
        }
        const std::size_t prompt_len = std::uniform_int_distribution<std::size_t>(total / 2, total - 2)(rng);
        out.push_back({std::vector<int>(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(prompt_len)),
                       std::vector<int>(seq.begin() + static_cast<std::ptrdiff_t>(prompt_len), seq.end())});
    }
    return out;
}

inline std::vector<std::vector<int>> prompts_of(const Dataset & data) {
    std::vector<std::vector<int>> out;
    out.reserve(data.size());
    for (const auto & ex : data) out.push_back(ex.prompt);
    return out;
}

// ---------------------------------------------------------------------------
// loss and gradients

namespace detail {

inline std::vector<int> teacher_forced_input(const ToyConfig & cfg, const Example & ex) {
    require(!ex.prompt.empty(), ErrorCode::invalid_argument, "example has an empty prompt");
    require(!ex.completion.empty(), ErrorCode::invalid_argument, "example has an empty completion");
    std::vector<int> input = ex.prompt;
    input.insert(input.end(), ex.completion.begin(), ex.completion.end() - 1);
    check_tokens(cfg, input);
    for (int t : ex.completion) {
        require(t >= 0 && static_cast<std::size_t>(t) < cfg.vocab_size, ErrorCode::out_of_range,
                "completion token id " + std::to_string(t) + " outside vocabulary");
    }
    return input;
}

// Summed completion NLL for one example; if grads is set, accumulates grad_scale * d(NLL).
inline double example_nll(const Checkpoint & ck, const Example & ex, ToyParams * grads, double grad_scale) {
    const std::vector<int> input = teacher_forced_input(ck.config, ex);
    const SequenceTrace tr = run_sequence(ck, input);
    const auto first = static_cast<Eigen::Index>(ex.prompt.size()) - 1;
    const auto V = tr.logits.cols();

    double nll = 0.0;
    Matrix dlogits = Matrix::Zero(tr.logits.rows(), V);
    for (std::size_t j = 0; j < ex.completion.size(); ++j) {
        const Eigen::Index pos = first + static_cast<Eigen::Index>(j);
        const auto row = tr.logits.row(pos);
        const double mx = row.maxCoeff();
        const Eigen::RowVectorXd e = (row.array() - mx).exp().matrix();
        const double z = e.sum();
        const int target = ex.completion[j];
        nll -= (row(target) - mx) - std::log(z);
        if (grads != nullptr) {
            dlogits.row(pos) = e / z;
            dlogits(pos, target) -= 1.0;
        }
    }
    if (grads == nullptr) {
        return nll;
    }
    dlogits *= grad_scale;

    const Matrix & last = tr.hidden.back();
    grads->head_w += last.transpose() * dlogits;
    grads->head_b.row(0) += dlogits.colwise().sum();
    Matrix dh = dlogits * ck.params.head_w.transpose();
    for (std::size_t l = ck.config.num_layers; l-- > 0;) {
        dh = block_backward(ck.params.layers[l], ck.config, tr.layers[l], dh, grads->layers[l]);
    }
    for (std::size_t t = 0; t < input.size(); ++t) {
        const auto r = static_cast<Eigen::Index>(t);
        grads->tok_emb.row(input[t]) += dh.row(r);
        grads->pos_emb.row(r) += dh.row(r);
    }
    return nll;
}

inline std::size_t completion_tokens(const Dataset & data) {
    std::size_t n = 0;
    for (const auto & ex : data) n += ex.completion.size();
    return n;
}

} // namespace detail

/// Mean teacher-forced NLL per completion token over the dataset.
inline double eval_loss(const Checkpoint & ck, const Dataset & data) {
    require(!data.empty(), ErrorCode::invalid_argument, "eval_loss on an empty dataset");
    double sum = 0.0;
    for (const auto & ex : data) sum += detail::example_nll(ck, ex, nullptr, 0.0);
    return sum / static_cast<double>(detail::completion_tokens(data));
}

struct LossAndGrad {
    double loss = 0.0;
    ToyParams grads;
};

inline LossAndGrad loss_and_grad(const Checkpoint & ck, const Dataset & data) {
    require(!data.empty(), ErrorCode::invalid_argument, "loss_and_grad on an empty dataset");
    LossAndGrad out;
    out.grads = zeros_like(ck.params);
    const double scale = 1.0 / static_cast<double>(detail::completion_tokens(data));
    double sum = 0.0;
    // fixed example order keeps the reduction bit-stable
    for (const auto & ex : data) sum += detail::example_nll(ck, ex, &out.grads, scale);
    out.loss = sum * scale;
    return out;
}

// ---------------------------------------------------------------------------
// representation capture

struct ForwardResult {
    ReprBundle bundle;
    Matrix logits; // N x V, last position of each sequence
};

/// Runs each sequence and records the last-token hidden state after every block.
inline ForwardResult forward_collect(const Checkpoint & ck, const std::vector<std::vector<int>> & batch,
                                     const std::string & model_id = "toy", const std::string & dataset_id = "toy") {
    require(batch.size() >= 2, ErrorCode::invalid_argument, "forward_collect needs at least 2 sequences");
    const std::size_t L = ck.config.num_layers;
    const std::size_t d = ck.config.hidden_size;
    std::vector<ReprMatrix> layers(L, ReprMatrix(batch.size(), d));
    ForwardResult out;
    out.logits.resize(static_cast<Eigen::Index>(batch.size()), static_cast<Eigen::Index>(ck.config.vocab_size));
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto tr = detail::run_sequence(ck, batch[i]);
        const auto last = static_cast<Eigen::Index>(batch[i].size()) - 1;
        for (std::size_t l = 0; l < L; ++l) {
            for (std::size_t c = 0; c < d; ++c) {
                layers[l](i, c) = static_cast<float>(tr.hidden[l](last, static_cast<Eigen::Index>(c)));
            }
        }
        out.logits.row(static_cast<Eigen::Index>(i)) = tr.logits.row(last);
    }
    out.bundle = make_bundle(std::move(layers), model_id, dataset_id);
    return out;
}

// ---------------------------------------------------------------------------
// training

struct TrainOptions {
    std::size_t steps = 0;
    double lr = 1e-2;
    std::size_t batch_size = 0; // 0 = full batch
    std::optional<LayerPlan> freeze;
};

/// Which layer blocks stay fixed under a plan: a freeze plan fixes its
/// layers, a fine-tune plan fixes every layer it does not list.
inline std::vector<bool> frozen_layers(const ToyConfig & cfg, const std::optional<LayerPlan> & plan) {
    std::vector<bool> frozen(cfg.num_layers, false);
    if (!plan) return frozen;
    for (std::size_t l : plan->layers) {
        require(l < cfg.num_layers, ErrorCode::out_of_range,
                "plan layer " + std::to_string(l) + " outside model of " + std::to_string(cfg.num_layers) + " layers");
    }
    if (plan->mode == PlanMode::freeze_subset) {
        for (std::size_t l : plan->layers) frozen[l] = true;
    } else {
        std::fill(frozen.begin(), frozen.end(), true);
        for (std::size_t l : plan->layers) frozen[l] = false;
    }
    return frozen;
}

/// Plain SGD on the mean completion NLL. Minibatches walk the dataset
/// cyclically in order, so a run is fully determined by its inputs.
inline Checkpoint train(const Checkpoint & start, const Dataset & data, const TrainOptions & opt) {
    require(opt.lr > 0.0 && std::isfinite(opt.lr), ErrorCode::invalid_argument, "learning rate must be > 0");
    require(!data.empty(), ErrorCode::invalid_argument, "training on an empty dataset");
    const std::vector<bool> frozen = frozen_layers(start.config, opt.freeze);
    const std::size_t batch = (opt.batch_size == 0 || opt.batch_size > data.size()) ? data.size() : opt.batch_size;

    Checkpoint ck = start;
    Dataset mb(batch);
    std::size_t cursor = 0;
    for (std::size_t step = 0; step < opt.steps; ++step) {
        for (std::size_t i = 0; i < batch; ++i) {
            mb[i] = data[cursor];
            cursor = (cursor + 1) % data.size();
        }
        const LossAndGrad lg = loss_and_grad(ck, mb);
        require(std::isfinite(lg.loss), ErrorCode::divergence,
                "training loss became non-finite at step " + std::to_string(step));

        auto sgd = [&](Matrix & w, const Matrix & g) { w -= opt.lr * g; };
        sgd(ck.params.tok_emb, lg.grads.tok_emb);
        sgd(ck.params.pos_emb, lg.grads.pos_emb);
        sgd(ck.params.head_w, lg.grads.head_w);
        sgd(ck.params.head_b, lg.grads.head_b);
        for (std::size_t l = 0; l < ck.config.num_layers; ++l) {
            if (frozen[l]) continue;
            auto w = ck.params.layers[l].tensors();
            const auto g = lg.grads.layers[l].tensors();
            for (std::size_t t = 0; t < w.size(); ++t) sgd(*w[t], *g[t]);
        }
    }
    return ck;
}

inline Checkpoint train(const Checkpoint & start, const Dataset & data, std::size_t steps, double lr,
                        const std::optional<LayerPlan> & freeze = std::nullopt) {
    TrainOptions opt;
    opt.steps = steps;
    opt.lr = lr;
    opt.freeze = freeze;
    return train(start, data, opt);
}

// ---------------------------------------------------------------------------
// substitution

/// tuned with the layer blocks [center-k, center+k] taken from base.
inline Checkpoint substitute_layers(const Checkpoint & tuned, const Checkpoint & base, std::size_t center, int k) {
    require(tuned.config.same_architecture(base.config), ErrorCode::config_mismatch,
            "substitution between checkpoints of different architectures");
    require(k >= 0 && center >= static_cast<std::size_t>(k) &&
                center + static_cast<std::size_t>(k) < tuned.config.num_layers,
            ErrorCode::out_of_range,
            "window [" + std::to_string(static_cast<long long>(center) - k) + ", " +
                std::to_string(center + static_cast<std::size_t>(std::max(k, 0))) + "] outside layers 0.." +
                std::to_string(tuned.config.num_layers - 1));
    Checkpoint out = tuned;
    for (std::size_t l = center - static_cast<std::size_t>(k); l <= center + static_cast<std::size_t>(k); ++l) {
        out.params.layers[l] = base.params.layers[l];
    }
    return out;
}

/// Substituted-window losses for every center in [k, L-1-k].
inline LossTable build_loss_table(const Checkpoint & tuned, const Checkpoint & base, const Dataset & data, int k,
                                  std::string dataset_id = "toy") {
    require(tuned.config.same_architecture(base.config), ErrorCode::config_mismatch,
            "loss table between checkpoints of different architectures");
    validate_window(tuned.config.num_layers, k);
    LossTable table;
    table.dataset_id = std::move(dataset_id);
    table.k = k;
    table.base_loss = eval_loss(tuned, data);
    const auto uk = static_cast<std::size_t>(k);
    for (std::size_t c = uk; c + uk < tuned.config.num_layers; ++c) {
        table.entries.push_back({c, eval_loss(substitute_layers(tuned, base, c, k), data)});
    }
    return table;
}

// ---------------------------------------------------------------------------
// checkpoint files: <dir>/config.json + <dir>/params.bin
// params.bin = "RDCK" | u32 version=1 | u64 count | count f32 LE in canonical tensor order

inline constexpr char kCheckpointMagic[4] = {'R', 'D', 'C', 'K'};

inline nlohmann::ordered_json config_to_json(const ToyConfig & c) {
    nlohmann::ordered_json j;
    j["num_layers"] = c.num_layers;
    j["hidden_size"] = c.hidden_size;
    j["num_heads"] = c.num_heads;
    j["vocab_size"] = c.vocab_size;
    j["seq_len"] = c.seq_len;
    j["seed"] = c.seed;
    j["ff_multiplier"] = kFeedForwardMultiplier;
    return j;
}

inline ToyConfig config_from_json(const nlohmann::json & j) {
    ToyConfig c;
    try {
        c.num_layers = j.at("num_layers").get<std::size_t>();
        c.hidden_size = j.at("hidden_size").get<std::size_t>();
        c.num_heads = j.at("num_heads").get<std::size_t>();
        c.vocab_size = j.at("vocab_size").get<std::size_t>();
        c.seq_len = j.at("seq_len").get<std::size_t>();
        c.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception & e) {
        throw Error(ErrorCode::parse, std::string("toy config: ") + e.what());
    }
    validate(c);
    return c;
}

inline void write_checkpoint(const Checkpoint & ck, const fs::path & dir) {
    std::string blob;
    blob.append(kCheckpointMagic, 4);
    fsutil::put_le<std::uint32_t>(blob, 1);
    fsutil::put_le<std::uint64_t>(blob, ck.params.parameter_count());
    for (const Matrix * t : ck.params.tensors()) {
        for (Eigen::Index r = 0; r < t->rows(); ++r) {
            for (Eigen::Index c = 0; c < t->cols(); ++c) {
                const auto v = static_cast<float>((*t)(r, c));
                require(std::isfinite(v), ErrorCode::invariant_violation, "checkpoint holds a non-finite parameter");
                fsutil::put_le<float>(blob, v);
            }
        }
    }
    fsutil::atomic_write(dir / "config.json", config_to_json(ck.config).dump(2) + "\n");
    fsutil::atomic_write(dir / "params.bin", blob);
}

inline Checkpoint read_checkpoint(const fs::path & dir) {
    const ToyConfig cfg = config_from_json(nlohmann::json::parse(fsutil::read_file(dir / "config.json")));
    Checkpoint ck = init_checkpoint(cfg); // for shapes only
    const std::string blob = fsutil::read_file(dir / "params.bin");
    require(blob.size() >= 16, ErrorCode::truncated_payload, "params.bin shorter than its header");
    require(std::memcmp(blob.data(), kCheckpointMagic, 4) == 0, ErrorCode::bad_magic, "params.bin: bad magic");
    require(fsutil::get_le<std::uint32_t>(blob.data() + 4) == 1, ErrorCode::unsupported_version,
            "params.bin: unsupported version");
    const auto count = fsutil::get_le<std::uint64_t>(blob.data() + 8);
    require(count == ck.params.parameter_count(), ErrorCode::dimension_mismatch,
            "params.bin holds " + std::to_string(count) + " parameters, config needs " +
                std::to_string(ck.params.parameter_count()));
    require(blob.size() == 16 + count * 4, ErrorCode::truncated_payload, "params.bin payload size mismatch");
    const char * p = blob.data() + 16;
    for (Matrix * t : ck.params.tensors()) {
        for (Eigen::Index r = 0; r < t->rows(); ++r) {
            for (Eigen::Index c = 0; c < t->cols(); ++c, p += 4) {
                (*t)(r, c) = static_cast<double>(fsutil::get_le<float>(p));
            }
        }
    }
    return ck;
}

// ---------------------------------------------------------------------------
// end-to-end fixture

struct ExperimentConfig {
    ToyConfig model;
    std::size_t train_samples = 64;
    std::size_t probe_samples = 64;
    std::size_t pretrain_steps = 100;
    std::size_t finetune_steps = 60;
    double pretrain_lr = 5e-2;
    double finetune_lr = 1e-2;
    std::size_t batch_size = 16;
    int k = kDefaultWindow;
};

struct Experiment {
    Checkpoint base;  // pre-fine-tuned
    Checkpoint tuned; // fine-tuned
    Dataset finetune_data;
    Dataset test_data;
    ReprBundle bundle; // base model, last-token states on test prompts
    LossTable losses;
};

/// Pretrains on periodic motifs, fine-tunes on arithmetic progressions, then
/// captures the base model's representations and the tuned model's
/// substitution losses on a held-out arithmetic test set.
inline Experiment run_experiment(const ExperimentConfig & cfg) {
    const std::uint64_t seed = cfg.model.seed;
    Experiment ex;
    const Dataset pretrain = make_synthetic_dataset(cfg.model, cfg.train_samples, SyntheticTask::periodic, seed + 1);
    ex.finetune_data = make_synthetic_dataset(cfg.model, cfg.train_samples, SyntheticTask::arithmetic, seed + 2);
    ex.test_data = make_synthetic_dataset(cfg.model, cfg.probe_samples, SyntheticTask::arithmetic, seed + 3);

    TrainOptions pre;
    pre.steps = cfg.pretrain_steps;
    pre.lr = cfg.pretrain_lr;
    pre.batch_size = cfg.batch_size;
    ex.base = train(init_checkpoint(cfg.model), pretrain, pre);

    TrainOptions ft;
    ft.steps = cfg.finetune_steps;
    ft.lr = cfg.finetune_lr;
    ft.batch_size = cfg.batch_size;
    ex.tuned = train(ex.base, ex.finetune_data, ft);

    const std::string model_id = "toy-L" + std::to_string(cfg.model.num_layers) + "-d" +
                                 std::to_string(cfg.model.hidden_size) + "-seed" + std::to_string(seed);
    ex.bundle = forward_collect(ex.base, prompts_of(ex.test_data), model_id + "-base", "synthetic-arithmetic-test")
                    .bundle;
    ex.losses = build_loss_table(ex.tuned, ex.base, ex.test_data, cfg.k, "synthetic-arithmetic-test");
    return ex;
}

} // namespace critlayers::toy
