#pragma once

// Transformer encoder (token + position embedding, post-norm layers with GELU
// feed-forward blocks) and the punctuation-mark prediction head, with
// hand-written backward passes.

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmp/error.hpp"
#include "pmp/rng.hpp"
#include "pmp/tensor.hpp"
#include "pmp/vocab.hpp"

namespace pmp {

struct ModelConfig {
    std::string preset = "custom";
    int layers = 2;
    int hidden = 32;
    int ffn = 128;
    int heads = 2;
    int vocab_size = SpecialTokens::kCount;
    int max_len = 128;
    int num_labels = 4;  // |Y|, O included
    int pad_id = SpecialTokens::kPad;
    int unk_id = SpecialTokens::kUnk;
    int cls_id = SpecialTokens::kCls;
    int sep_id = SpecialTokens::kSep;
    int mask_id = SpecialTokens::kMask;
    double layer_norm_eps = 1e-5;

    int head_dim() const { return hidden / heads; }

    void validate() const {
        require(layers >= 0 && hidden > 0 && ffn > 0 && heads > 0 && vocab_size > 0 && max_len > 0 &&
                    num_labels > 1,
                ErrorCode::kConfigMismatch, "model dimensions must be positive");
        require(hidden % heads == 0, ErrorCode::kConfigMismatch,
                "hidden size " + std::to_string(hidden) + " not divisible by " + std::to_string(heads) + " heads");
        for (int id : {pad_id, unk_id, cls_id, sep_id, mask_id})
            require(id >= 0 && id < vocab_size, ErrorCode::kConfigMismatch, "special token id outside vocabulary");
    }

    /// Architecture rows of the reference comparison table plus a scaled
    /// desk-size teacher/student pair. The full-size presets default to the
    /// 21,128-entry Chinese BERT vocabulary and 512 positions.
    static ModelConfig from_preset(std::string_view name, int vocab_size = 21128, int num_labels = 4) {
        ModelConfig c;
        c.preset = std::string(name);
        c.vocab_size = vocab_size;
        c.num_labels = num_labels;
        auto set = [&](int l, int d, int f, int h, int n) {
            c.layers = l;
            c.hidden = d;
            c.ffn = f;
            c.heads = h;
            c.max_len = n;
        };
        if (name == "teacher") set(12, 768, 3072, 12, 512);
        else if (name == "h768") set(6, 768, 3072, 12, 512);
        else if (name == "h256") set(6, 256, 1024, 8, 512);
        else if (name == "h312") set(4, 312, 1200, 12, 512);
        else if (name == "teacher-desk") set(4, 64, 256, 4, 128);
        else if (name == "student-desk") set(2, 32, 128, 2, 128);
        else throw Error(ErrorCode::kConfigMismatch, "unknown model preset '" + std::string(name) + "'");
        c.validate();
        return c;
    }

    static constexpr std::array<std::string_view, 6> kPresets{"teacher", "h768", "h256", "h312", "teacher-desk",
                                                              "student-desk"};

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"preset", c.preset},     {"layers", c.layers},         {"hidden", c.hidden},
         {"ffn", c.ffn},           {"heads", c.heads},           {"vocab_size", c.vocab_size},
         {"max_len", c.max_len},   {"num_labels", c.num_labels}, {"pad_id", c.pad_id},
         {"unk_id", c.unk_id},     {"cls_id", c.cls_id},         {"sep_id", c.sep_id},
         {"mask_id", c.mask_id},   {"layer_norm_eps", c.layer_norm_eps}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    const ModelConfig d;
    c.preset = j.value("preset", d.preset);
    c.layers = j.at("layers").get<int>();
    c.hidden = j.at("hidden").get<int>();
    c.ffn = j.at("ffn").get<int>();
    c.heads = j.at("heads").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_len = j.at("max_len").get<int>();
    c.num_labels = j.at("num_labels").get<int>();
    c.pad_id = j.value("pad_id", d.pad_id);
    c.unk_id = j.value("unk_id", d.unk_id);
    c.cls_id = j.value("cls_id", d.cls_id);
    c.sep_id = j.value("sep_id", d.sep_id);
    c.mask_id = j.value("mask_id", d.mask_id);
    c.layer_norm_eps = j.value("layer_norm_eps", d.layer_norm_eps);
    c.validate();
}

// ---------------------------------------------------------------------------
// Parameters

template <class S>
struct LayerParams {
    Matrix<S> wq, bq, wk, bk, wv, bv, wo, bo;  // attention, applied as x * W + b
    Matrix<S> ln1_gamma, ln1_beta;
    Matrix<S> w1, b1, w2, b2;  // feed-forward
    Matrix<S> ln2_gamma, ln2_beta;
};

template <class S>
inline const std::array<std::pair<const char*, Matrix<S> LayerParams<S>::*>, 16> kLayerFields{{
    {"wq", &LayerParams<S>::wq},
    {"bq", &LayerParams<S>::bq},
    {"wk", &LayerParams<S>::wk},
    {"bk", &LayerParams<S>::bk},
    {"wv", &LayerParams<S>::wv},
    {"bv", &LayerParams<S>::bv},
    {"wo", &LayerParams<S>::wo},
    {"bo", &LayerParams<S>::bo},
    {"ln1_gamma", &LayerParams<S>::ln1_gamma},
    {"ln1_beta", &LayerParams<S>::ln1_beta},
    {"w1", &LayerParams<S>::w1},
    {"b1", &LayerParams<S>::b1},
    {"w2", &LayerParams<S>::w2},
    {"b2", &LayerParams<S>::b2},
    {"ln2_gamma", &LayerParams<S>::ln2_gamma},
    {"ln2_beta", &LayerParams<S>::ln2_beta},
}};

/// Every learnable weight of the encoder plus the PMP head
/// (head_weight |Y| x d, head_bias 1 x |Y|).
template <class S>
struct EncoderParams {
    using Scalar = S;

    Matrix<S> token_embedding;     // vocab x d
    Matrix<S> position_embedding;  // max_len x d
    std::vector<LayerParams<S>> layers;
    Matrix<S> head_weight;
    Matrix<S> head_bias;
};

/// Calls f(name, tensor) for every parameter, always in the same order.
template <class P, class F>
void for_each_tensor(P& params, F&& f) {
    using S = typename std::remove_const_t<P>::Scalar;
    f(std::string("token_embedding"), params.token_embedding);
    f(std::string("position_embedding"), params.position_embedding);
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        for (const auto& [name, member] : kLayerFields<S>)
            f("layers." + std::to_string(l) + "." + name, params.layers[l].*member);
    }
    f(std::string("head_weight"), params.head_weight);
    f(std::string("head_bias"), params.head_bias);
}

/// Same traversal over two parameter sets of identical structure.
template <class P, class Q, class F>
void for_each_tensor_pair(P& a, Q& b, F&& f) {
    using S = typename std::remove_const_t<P>::Scalar;
    using T = typename std::remove_const_t<Q>::Scalar;
    require(a.layers.size() == b.layers.size(), ErrorCode::kShapeMismatch, "layer counts differ");
    f(std::string("token_embedding"), a.token_embedding, b.token_embedding);
    f(std::string("position_embedding"), a.position_embedding, b.position_embedding);
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
        for (std::size_t k = 0; k < kLayerFields<S>.size(); ++k)
            f("layers." + std::to_string(l) + "." + kLayerFields<S>[k].first, a.layers[l].*(kLayerFields<S>[k].second),
              b.layers[l].*(kLayerFields<T>[k].second));
    }
    f(std::string("head_weight"), a.head_weight, b.head_weight);
    f(std::string("head_bias"), a.head_bias, b.head_bias);
}

template <class S>
std::size_t parameter_count(const EncoderParams<S>& params) {
    std::size_t n = 0;
    for_each_tensor(params, [&](const std::string&, const Matrix<S>& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
}

/// Closed-form count for a configuration, without allocating it.
inline std::size_t parameter_count(const ModelConfig& c) {
    const auto d = static_cast<std::size_t>(c.hidden);
    const auto f = static_cast<std::size_t>(c.ffn);
    const std::size_t embeddings = (static_cast<std::size_t>(c.vocab_size) + static_cast<std::size_t>(c.max_len)) * d;
    const std::size_t layer = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d;
    const std::size_t head = static_cast<std::size_t>(c.num_labels) * (d + 1);
    return embeddings + static_cast<std::size_t>(c.layers) * layer + head;
}

template <class S>
EncoderParams<S> zeros_like(const EncoderParams<S>& params) {
    EncoderParams<S> out = params;
    for_each_tensor(out, [](const std::string&, Matrix<S>& m) { m.setZero(); });
    return out;
}

template <class T, class S>
EncoderParams<T> cast_params(const EncoderParams<S>& params) {
    EncoderParams<T> out;
    out.layers.resize(params.layers.size());
    for_each_tensor_pair(out, params,
                         [](const std::string&, Matrix<T>& dst, const Matrix<S>& src) { dst = src.template cast<T>(); });
    return out;
}

template <class S>
bool params_equal(const EncoderParams<S>& a, const EncoderParams<S>& b) {
    if (a.layers.size() != b.layers.size()) return false;
    bool same = true;
    for_each_tensor_pair(a, b, [&](const std::string&, const Matrix<S>& x, const Matrix<S>& y) {
        same = same && x.rows() == y.rows() && x.cols() == y.cols() && x == y;
    });
    return same;
}

/// Truncated normal (sigma 0.02) weights, zero biases, unit layer-norm gain.
template <class S>
EncoderParams<S> init_params(const ModelConfig& config, Rng& rng, double stddev = 0.02) {
    config.validate();
    const Eigen::Index d = config.hidden;
    const Eigen::Index f = config.ffn;
    auto weights = [&](Eigen::Index rows, Eigen::Index cols) {
        Matrix<S> m(rows, cols);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(rng.truncated_normal(stddev));
        return m;
    };
    auto zeros = [](Eigen::Index cols) { return Matrix<S>::Zero(1, cols); };
    auto ones = [](Eigen::Index cols) { return Matrix<S>::Ones(1, cols); };

    EncoderParams<S> p;
    p.token_embedding = weights(config.vocab_size, d);
    p.position_embedding = weights(config.max_len, d);
    p.layers.resize(static_cast<std::size_t>(config.layers));
    for (auto& layer : p.layers) {
        layer.wq = weights(d, d);
        layer.bq = zeros(d);
        layer.wk = weights(d, d);
        layer.bk = zeros(d);
        layer.wv = weights(d, d);
        layer.bv = zeros(d);
        layer.wo = weights(d, d);
        layer.bo = zeros(d);
        layer.ln1_gamma = ones(d);
        layer.ln1_beta = zeros(d);
        layer.w1 = weights(d, f);
        layer.b1 = zeros(f);
        layer.w2 = weights(f, d);
        layer.b2 = zeros(d);
        layer.ln2_gamma = ones(d);
        layer.ln2_beta = zeros(d);
    }
    p.head_weight = weights(config.num_labels, d);
    p.head_bias = zeros(config.num_labels);
    return p;
}

template <class S>
EncoderParams<S> init_params(const ModelConfig& config, std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0x1417));
    return init_params<S>(config, rng);
}

/// Throws kShapeMismatch unless every tensor has the shape `config` implies.
template <class S>
void check_shapes(const EncoderParams<S>& p, const ModelConfig& c) {
    auto expect = [](const Matrix<S>& m, Eigen::Index r, Eigen::Index k, const std::string& name) {
        require(m.rows() == r && m.cols() == k, ErrorCode::kShapeMismatch,
                name + " is " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ", expected " +
                    std::to_string(r) + "x" + std::to_string(k));
    };
    const Eigen::Index d = c.hidden;
    const Eigen::Index f = c.ffn;
    expect(p.token_embedding, c.vocab_size, d, "token_embedding");
    expect(p.position_embedding, c.max_len, d, "position_embedding");
    require(p.layers.size() == static_cast<std::size_t>(c.layers), ErrorCode::kShapeMismatch, "layer count");
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const auto& L = p.layers[l];
        const std::string at = "layers." + std::to_string(l) + ".";
        for (auto* m : {&L.wq, &L.wk, &L.wv, &L.wo}) expect(*m, d, d, at + "attention");
        for (auto* m : {&L.bq, &L.bk, &L.bv, &L.bo, &L.ln1_gamma, &L.ln1_beta, &L.b2, &L.ln2_gamma, &L.ln2_beta})
            expect(*m, 1, d, at + "vector");
        expect(L.w1, d, f, at + "w1");
        expect(L.b1, 1, f, at + "b1");
        expect(L.w2, f, d, at + "w2");
    }
    expect(p.head_weight, c.num_labels, d, "head_weight");
    expect(p.head_bias, 1, c.num_labels, "head_bias");
}

// ---------------------------------------------------------------------------
// Forward / backward

/// keep[j] == 1 when key position j may be attended to.
struct AttentionMask {
    std::vector<unsigned char> keep;

    static AttentionMask all(std::size_t n) { return {std::vector<unsigned char>(n, 1)}; }

    static AttentionMask prefix(std::size_t valid, std::size_t total) {
        AttentionMask m{std::vector<unsigned char>(total, 0)};
        for (std::size_t i = 0; i < valid && i < total; ++i) m.keep[i] = 1;
        return m;
    }

    std::size_t size() const { return keep.size(); }
    std::size_t valid_count() const {
        std::size_t n = 0;
        for (auto k : keep) n += k;
        return n;
    }
};

/// Input ids padded with [PAD] to `length`, plus the matching mask.
struct PaddedInput {
    std::vector<int> ids;
    AttentionMask mask;
};

inline PaddedInput pad_input(std::span<const int> ids, std::size_t length, const ModelConfig& config) {
    require(ids.size() <= length, ErrorCode::kShapeMismatch, "input longer than the padded length");
    require(length <= static_cast<std::size_t>(config.max_len), ErrorCode::kShapeMismatch,
            "padded length " + std::to_string(length) + " exceeds max_len " + std::to_string(config.max_len));
    PaddedInput in;
    in.ids.assign(ids.begin(), ids.end());
    in.ids.resize(length, config.pad_id);
    in.mask = AttentionMask::prefix(ids.size(), length);
    return in;
}

/// H0 = token embedding + position embedding, one row per input id.
template <class S>
Matrix<S> embed(std::span<const int> ids, const EncoderParams<S>& params, const ModelConfig& config) {
    require(ids.size() <= static_cast<std::size_t>(config.max_len), ErrorCode::kShapeMismatch,
            "sequence of " + std::to_string(ids.size()) + " tokens exceeds max_len " + std::to_string(config.max_len));
    Matrix<S> h(static_cast<Eigen::Index>(ids.size()), config.hidden);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        require(ids[i] >= 0 && ids[i] < config.vocab_size, ErrorCode::kIdOutOfRange,
                "token id " + std::to_string(ids[i]) + " outside vocabulary of " + std::to_string(config.vocab_size));
        const auto r = static_cast<Eigen::Index>(i);
        h.row(r) = params.token_embedding.row(ids[i]) + params.position_embedding.row(r);
    }
    return h;
}

template <class S>
struct LayerCache {
    Matrix<S> input, q, k, v, context;
    std::vector<Matrix<S>> probs;  // per head, n x n
    Matrix<S> xhat1;
    Column<S> rstd1;
    Matrix<S> x1, pre_act, act;
    Matrix<S> xhat2;
    Column<S> rstd2;
};

namespace detail {

template <class S>
Matrix<S> layer_norm(const Matrix<S>& x, const Matrix<S>& gamma, const Matrix<S>& beta, S eps, Matrix<S>* xhat_out,
                     Column<S>* rstd_out) {
    const Eigen::Index n = x.rows();
    Matrix<S> xhat(n, x.cols());
    Column<S> rstd(n);
    for (Eigen::Index r = 0; r < n; ++r) {
        const S mean = x.row(r).mean();
        const S var = (x.row(r).array() - mean).square().mean();
        rstd(r) = S(1) / std::sqrt(var + eps);
        xhat.row(r) = (x.row(r).array() - mean) * rstd(r);
    }
    Matrix<S> y = (xhat.array().rowwise() * gamma.row(0).array()).rowwise() + beta.row(0).array();
    if (xhat_out) *xhat_out = std::move(xhat);
    if (rstd_out) *rstd_out = std::move(rstd);
    return y;
}

template <class S>
Matrix<S> layer_norm_backward(const Matrix<S>& dy, const Matrix<S>& xhat, const Column<S>& rstd,
                              const Matrix<S>& gamma, Matrix<S>& dgamma, Matrix<S>& dbeta) {
    dgamma.row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
    dbeta.row(0) += dy.colwise().sum();
    const Matrix<S> dxhat = dy.array().rowwise() * gamma.row(0).array();
    const S inv_d = S(1) / static_cast<S>(dy.cols());
    Matrix<S> dx(dy.rows(), dy.cols());
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
        const S mean_d = dxhat.row(r).sum() * inv_d;
        const S mean_dx = dxhat.row(r).dot(xhat.row(r)) * inv_d;
        dx.row(r) = (dxhat.row(r).array() - mean_d - xhat.row(r).array() * mean_dx) * rstd(r);
    }
    return dx;
}

template <class S>
S gelu(S x) {
    return S(0.5) * x * (S(1) + std::erf(x * S(std::numbers::sqrt2 / 2)));
}

template <class S>
S gelu_grad(S x) {
    const S cdf = S(0.5) * (S(1) + std::erf(x * S(std::numbers::sqrt2 / 2)));
    const S pdf = std::exp(S(-0.5) * x * x) * S(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
    return cdf + x * pdf;
}

// Element-wise versions of the above over a whole matrix (vectorized erf/exp).
template <class S>
Matrix<S> gelu(const Matrix<S>& x) {
    const auto a = x.array();
    return (S(0.5) * a * (S(1) + (a * S(std::numbers::sqrt2 / 2)).erf())).matrix();
}

template <class S>
Matrix<S> gelu_grad(const Matrix<S>& x) {
    const auto a = x.array();
    const auto cdf = S(0.5) * (S(1) + (a * S(std::numbers::sqrt2 / 2)).erf());
    const auto pdf = (S(-0.5) * a.square()).exp() * S(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
    return (cdf + a * pdf).matrix();
}

}  // namespace detail

/// One post-norm transformer layer:
///   x1 = LN(x + MHA(x)),  y = LN(x1 + W2 gelu(W1 x1 + b1) + b2).
/// Keys masked out in `mask` receive zero attention weight.
template <class S>
Matrix<S> layer_forward(const LayerParams<S>& p, const Matrix<S>& x, const AttentionMask& mask, int heads, S eps,
                        LayerCache<S>* cache = nullptr) {
    const Eigen::Index n = x.rows();
    const Eigen::Index d = x.cols();
    require_shape(static_cast<std::size_t>(n) == mask.size(), "attention mask length differs from sequence length");
    require_shape(d % heads == 0 && p.wq.rows() == d, "hidden size mismatch in layer");
    const Eigen::Index dh = d / heads;
    const S scale = S(1) / std::sqrt(static_cast<S>(dh));

    Matrix<S> q = (x * p.wq).rowwise() + p.bq.row(0);
    Matrix<S> k = (x * p.wk).rowwise() + p.bk.row(0);
    Matrix<S> v = (x * p.wv).rowwise() + p.bv.row(0);
    Matrix<S> context(n, d);
    std::vector<Matrix<S>> probs;
    if (cache) probs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        const Eigen::Index off = h * dh;
        Matrix<S> scores = (q.middleCols(off, dh) * k.middleCols(off, dh).transpose()) * scale;
        for (Eigen::Index j = 0; j < n; ++j)
            if (!mask.keep[static_cast<std::size_t>(j)]) scores.col(j).setConstant(-std::numeric_limits<S>::infinity());
        Matrix<S> prob = softmax_rows(scores);
        context.middleCols(off, dh).noalias() = prob * v.middleCols(off, dh);
        if (cache) probs.push_back(std::move(prob));
    }
    Matrix<S> r1 = (context * p.wo).rowwise() + p.bo.row(0);
    r1 += x;
    Matrix<S> xhat1, xhat2;
    Column<S> rstd1, rstd2;
    Matrix<S> x1 = detail::layer_norm(r1, p.ln1_gamma, p.ln1_beta, eps, &xhat1, &rstd1);
    Matrix<S> pre_act = (x1 * p.w1).rowwise() + p.b1.row(0);
    Matrix<S> act = detail::gelu(pre_act);
    Matrix<S> r2 = (act * p.w2).rowwise() + p.b2.row(0);
    r2 += x1;
    Matrix<S> y = detail::layer_norm(r2, p.ln2_gamma, p.ln2_beta, eps, &xhat2, &rstd2);
    if (cache) {
        cache->input = x;
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->context = std::move(context);
        cache->probs = std::move(probs);
        cache->xhat1 = std::move(xhat1);
        cache->rstd1 = std::move(rstd1);
        cache->x1 = std::move(x1);
        cache->pre_act = std::move(pre_act);
        cache->act = std::move(act);
        cache->xhat2 = std::move(xhat2);
        cache->rstd2 = std::move(rstd2);
    }
    return y;
}

/// Accumulates parameter gradients into `g` and returns dL/dx.
template <class S>
Matrix<S> layer_backward(const LayerParams<S>& p, const LayerCache<S>& c, const Matrix<S>& dy, int heads,
                         LayerParams<S>& g) {
    const Eigen::Index d = dy.cols();
    const Eigen::Index dh = d / heads;
    const S scale = S(1) / std::sqrt(static_cast<S>(dh));

    // Second sub-layer.
    Matrix<S> dr2 = detail::layer_norm_backward(dy, c.xhat2, c.rstd2, p.ln2_gamma, g.ln2_gamma, g.ln2_beta);
    g.w2.noalias() += c.act.transpose() * dr2;
    g.b2.row(0) += dr2.colwise().sum();
    Matrix<S> dpre = dr2 * p.w2.transpose();
    dpre.array() *= detail::gelu_grad(c.pre_act).array();
    g.w1.noalias() += c.x1.transpose() * dpre;
    g.b1.row(0) += dpre.colwise().sum();
    Matrix<S> dx1 = dr2;
    dx1.noalias() += dpre * p.w1.transpose();

    // First sub-layer.
    Matrix<S> dr1 = detail::layer_norm_backward(dx1, c.xhat1, c.rstd1, p.ln1_gamma, g.ln1_gamma, g.ln1_beta);
    g.wo.noalias() += c.context.transpose() * dr1;
    g.bo.row(0) += dr1.colwise().sum();
    const Matrix<S> dcontext = dr1 * p.wo.transpose();
    Matrix<S> dq(dy.rows(), d), dk(dy.rows(), d), dv(dy.rows(), d);
    for (int h = 0; h < heads; ++h) {
        const Eigen::Index off = h * dh;
        const Matrix<S>& prob = c.probs[static_cast<std::size_t>(h)];
        const auto dctx = dcontext.middleCols(off, dh);
        dv.middleCols(off, dh).noalias() = prob.transpose() * dctx;
        Matrix<S> dprob = dctx * c.v.middleCols(off, dh).transpose();
        // softmax backward: ds = P * (dP - rowsum(dP * P))
        const Column<S> inner = (dprob.array() * prob.array()).rowwise().sum();
        Matrix<S> dscores = (prob.array() * (dprob.array().colwise() - inner.array())) * scale;
        dq.middleCols(off, dh).noalias() = dscores * c.k.middleCols(off, dh);
        dk.middleCols(off, dh).noalias() = dscores.transpose() * c.q.middleCols(off, dh);
    }
    g.wq.noalias() += c.input.transpose() * dq;
    g.bq.row(0) += dq.colwise().sum();
    g.wk.noalias() += c.input.transpose() * dk;
    g.bk.row(0) += dk.colwise().sum();
    g.wv.noalias() += c.input.transpose() * dv;
    g.bv.row(0) += dv.colwise().sum();
    Matrix<S> dx = dr1;
    dx.noalias() += dq * p.wq.transpose();
    dx.noalias() += dk * p.wk.transpose();
    dx.noalias() += dv * p.wv.transpose();
    return dx;
}

/// H^(L) from H^(0) through every layer; L = 0 returns the input unchanged.
template <class S>
Matrix<S> encode(const Matrix<S>& h0, const EncoderParams<S>& params, const ModelConfig& config,
                 const AttentionMask& mask) {
    require_shape(h0.cols() == config.hidden, "H0 width differs from hidden size");
    require_shape(static_cast<std::size_t>(h0.rows()) == mask.size(), "H0 rows differ from mask length");
    Matrix<S> h = h0;
    const S eps = static_cast<S>(config.layer_norm_eps);
    for (const auto& layer : params.layers) h = layer_forward(layer, h, mask, config.heads, eps);
    return h;
}

/// Forward pass that keeps every intermediate needed by backward().
/// hidden[0] is the embedding output, hidden[l] the output of layer l.
template <class S>
struct EncoderTrace {
    std::vector<int> ids;
    AttentionMask mask;
    std::vector<Matrix<S>> hidden;
    std::vector<LayerCache<S>> caches;

    const Matrix<S>& output() const { return hidden.back(); }
};

template <class S>
EncoderTrace<S> forward(const EncoderParams<S>& params, const ModelConfig& config, std::span<const int> ids,
                        const AttentionMask& mask, bool keep_caches = true) {
    EncoderTrace<S> t;
    t.ids.assign(ids.begin(), ids.end());
    t.mask = mask;
    t.hidden.reserve(params.layers.size() + 1);
    t.hidden.push_back(embed(ids, params, config));
    require_shape(mask.size() == ids.size(), "mask length differs from input length");
    if (keep_caches) t.caches.resize(params.layers.size());
    const S eps = static_cast<S>(config.layer_norm_eps);
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        t.hidden.push_back(layer_forward(params.layers[l], t.hidden.back(), mask, config.heads, eps,
                                         keep_caches ? &t.caches[l] : nullptr));
    }
    return t;
}

template <class S>
EncoderTrace<S> forward(const EncoderParams<S>& params, const ModelConfig& config, std::span<const int> ids,
                        bool keep_caches = true) {
    return forward(params, config, ids, AttentionMask::all(ids.size()), keep_caches);
}

/// Backpropagates gradients injected at any hidden layer. d_hidden[l] is
/// dL/dH^(l) (an empty matrix means zero); gradients accumulate into `g`.
template <class S>
void backward(const EncoderParams<S>& params, const ModelConfig& config, const EncoderTrace<S>& trace,
              const std::vector<Matrix<S>>& d_hidden, EncoderParams<S>& g) {
    const std::size_t L = params.layers.size();
    require_shape(d_hidden.size() == L + 1, "need one gradient slot per hidden layer");
    require_shape(trace.caches.size() == L, "trace was recorded without caches");
    const Eigen::Index n = static_cast<Eigen::Index>(trace.ids.size());
    Matrix<S> grad = d_hidden[L].size() ? d_hidden[L] : Matrix<S>::Zero(n, config.hidden);
    for (std::size_t l = L; l-- > 0;) {
        grad = layer_backward(params.layers[l], trace.caches[l], grad, config.heads, g.layers[l]);
        if (d_hidden[l].size()) grad += d_hidden[l];
    }
    for (Eigen::Index i = 0; i < n; ++i) {
        g.token_embedding.row(trace.ids[static_cast<std::size_t>(i)]) += grad.row(i);
        g.position_embedding.row(i) += grad.row(i);
    }
}

/// p = H_m W^T + B for the k gathered [MASK] representations.
template <class S>
Matrix<S> pmp_logits(const Matrix<S>& h_masked, const Matrix<S>& weight, const Matrix<S>& bias) {
    require_shape(h_masked.cols() == weight.cols(), "representation width differs from head weight");
    require_shape(bias.rows() == 1 && bias.cols() == weight.rows(), "head bias shape");
    Matrix<S> logits = h_masked * weight.transpose();
    logits.rowwise() += bias.row(0);
    return logits;
}

template <class S>
Matrix<S> pmp_logits(const Matrix<S>& h_masked, const EncoderParams<S>& params) {
    return pmp_logits(h_masked, params.head_weight, params.head_bias);
}

/// Accumulates head gradients and returns dL/dH_m.
template <class S>
Matrix<S> pmp_head_backward(const Matrix<S>& h_masked, const Matrix<S>& d_logits, const EncoderParams<S>& params,
                            EncoderParams<S>& g) {
    g.head_weight.noalias() += d_logits.transpose() * h_masked;
    g.head_bias.row(0) += d_logits.colwise().sum();
    return d_logits * params.head_weight;
}

// ---------------------------------------------------------------------------
// Teacher -> student structure transfer

/// Teacher layer (0-based) for every student layer, uniform stride: student
/// layer j' (1-based) takes teacher layer j' * L_t / L_s.
inline std::vector<int> uniform_layer_selection(int teacher_layers, int student_layers) {
    std::vector<int> sel;
    if (student_layers <= 0) return sel;
    require(student_layers <= teacher_layers, ErrorCode::kBadSelection, "student deeper than teacher");
    for (int j = 1; j <= student_layers; ++j) sel.push_back(j * teacher_layers / student_layers - 1);
    return sel;
}

inline bool same_width(const ModelConfig& a, const ModelConfig& b) {
    return a.hidden == b.hidden && a.ffn == b.ffn && a.heads == b.heads && a.vocab_size == b.vocab_size &&
           a.max_len == b.max_len && a.num_labels == b.num_labels;
}

/// When widths agree, student layer j' copies teacher layer selection[j'] and
/// the embeddings and head are copied; otherwise the student is freshly
/// initialized from `seed` and only the selection is validated.
template <class S>
EncoderParams<S> init_student_from_teacher(const EncoderParams<S>& teacher, const ModelConfig& teacher_config,
                                           const ModelConfig& student_config, std::span<const int> selection,
                                           std::uint64_t seed) {
    require(selection.size() == static_cast<std::size_t>(student_config.layers), ErrorCode::kBadSelection,
            "selection names " + std::to_string(selection.size()) + " layers for a " +
                std::to_string(student_config.layers) + "-layer student");
    for (int j : selection)
        require(j >= 0 && j < teacher_config.layers, ErrorCode::kBadSelection,
                "teacher layer " + std::to_string(j) + " out of range");
    check_shapes(teacher, teacher_config);
    if (!same_width(teacher_config, student_config)) return init_params<S>(student_config, seed);
    EncoderParams<S> student;
    student.token_embedding = teacher.token_embedding;
    student.position_embedding = teacher.position_embedding;
    for (int j : selection) student.layers.push_back(teacher.layers[static_cast<std::size_t>(j)]);
    student.head_weight = teacher.head_weight;
    student.head_bias = teacher.head_bias;
    return student;
}

}  // namespace pmp
