#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "pmp/eval.hpp"
#include "pmp/model.hpp"
#include "test_util.hpp"

using namespace pmp;
using pmp::testing::max_gradient_error;
using pmp::testing::random_matrix;

namespace {

ModelConfig tiny_config(int layers = 2) {
    ModelConfig c;
    c.layers = layers;
    c.hidden = 8;
    c.ffn = 12;
    c.heads = 2;
    c.vocab_size = 11;
    c.max_len = 9;
    c.num_labels = 4;
    return c;
}

/// Random parameters with non-trivial biases and layer-norm terms so every
/// gradient path is exercised.
EncoderParams<double> random_params(const ModelConfig& c, std::uint64_t seed) {
    Rng rng(seed);
    auto p = init_params<double>(c, rng, 0.5);
    for_each_tensor(p, [&](const std::string&, Matrix<double>& m) {
        if (m.rows() == 1) m += random_matrix(rng, 1, m.cols(), 0.3);
    });
    return p;
}

/// Straight loop implementation of one post-norm layer.
Matrix<double> naive_layer(const LayerParams<double>& p, const Matrix<double>& x, const std::vector<int>& keep,
                           int heads, double eps) {
    const auto n = x.rows();
    const auto d = x.cols();
    const auto dh = d / heads;
    auto affine = [](const Matrix<double>& in, const Matrix<double>& w, const Matrix<double>& b) {
        Matrix<double> out(in.rows(), w.cols());
        for (Eigen::Index i = 0; i < in.rows(); ++i)
            for (Eigen::Index j = 0; j < w.cols(); ++j) {
                double s = b(0, j);
                for (Eigen::Index k = 0; k < in.cols(); ++k) s += in(i, k) * w(k, j);
                out(i, j) = s;
            }
        return out;
    };
    auto norm = [&](const Matrix<double>& in, const Matrix<double>& g, const Matrix<double>& b) {
        Matrix<double> out(in.rows(), in.cols());
        for (Eigen::Index i = 0; i < in.rows(); ++i) {
            double mean = 0, var = 0;
            for (Eigen::Index j = 0; j < in.cols(); ++j) mean += in(i, j) / static_cast<double>(in.cols());
            for (Eigen::Index j = 0; j < in.cols(); ++j)
                var += (in(i, j) - mean) * (in(i, j) - mean) / static_cast<double>(in.cols());
            for (Eigen::Index j = 0; j < in.cols(); ++j)
                out(i, j) = g(0, j) * (in(i, j) - mean) / std::sqrt(var + eps) + b(0, j);
        }
        return out;
    };
    const Matrix<double> q = affine(x, p.wq, p.bq), k = affine(x, p.wk, p.bk), v = affine(x, p.wv, p.bv);
    Matrix<double> ctx = Matrix<double>::Zero(n, d);
    for (int h = 0; h < heads; ++h)
        for (Eigen::Index i = 0; i < n; ++i) {
            std::vector<double> w(static_cast<std::size_t>(n), 0.0);
            double z = 0;
            for (Eigen::Index j = 0; j < n; ++j) {
                if (!keep[static_cast<std::size_t>(j)]) continue;
                double s = 0;
                for (Eigen::Index t = 0; t < dh; ++t) s += q(i, h * dh + t) * k(j, h * dh + t);
                w[static_cast<std::size_t>(j)] = std::exp(s / std::sqrt(static_cast<double>(dh)));
                z += w[static_cast<std::size_t>(j)];
            }
            for (Eigen::Index j = 0; j < n; ++j)
                for (Eigen::Index t = 0; t < dh; ++t) ctx(i, h * dh + t) += w[static_cast<std::size_t>(j)] / z * v(j, h * dh + t);
        }
    const Matrix<double> x1 = norm(affine(ctx, p.wo, p.bo) + x, p.ln1_gamma, p.ln1_beta);
    Matrix<double> a = affine(x1, p.w1, p.b1);
    for (Eigen::Index i = 0; i < a.size(); ++i)
        a.data()[i] = 0.5 * a.data()[i] * (1 + std::erf(a.data()[i] / std::sqrt(2.0)));
    return norm(affine(a, p.w2, p.b2) + x1, p.ln2_gamma, p.ln2_beta);
}

}  // namespace

TEST(Presets, ShapesFollowTheArchitectureTable) {
    struct Row {
        const char* name;
        int layers, hidden, ffn, heads;
    };
    for (const Row& r : {Row{"teacher", 12, 768, 3072, 12}, Row{"h768", 6, 768, 3072, 12}, Row{"h256", 6, 256, 1024, 8},
                         Row{"h312", 4, 312, 1200, 12}, Row{"teacher-desk", 4, 64, 256, 4},
                         Row{"student-desk", 2, 32, 128, 2}}) {
        const auto c = ModelConfig::from_preset(r.name);
        EXPECT_EQ(c.layers, r.layers) << r.name;
        EXPECT_EQ(c.hidden, r.hidden) << r.name;
        EXPECT_EQ(c.ffn, r.ffn) << r.name;
        EXPECT_EQ(c.heads, r.heads) << r.name;
        EXPECT_EQ(c.hidden % c.heads, 0);
    }
}

TEST(Presets, SizeRatiosMatchTheReportedPercentages) {
    const auto teacher = ModelConfig::from_preset("teacher");
    for (auto [name, expected] : {std::pair{"h256", 10.1}, std::pair{"h312", 11.2}, std::pair{"h768", 58.4}}) {
        const double ratio = size_ratio(ModelConfig::from_preset(name), teacher);
        EXPECT_LT(std::abs(ratio - expected) / expected, 0.02) << name << " " << ratio;
    }
}

TEST(Presets, ClosedFormCountMatchesAllocatedTensors) {
    for (const char* name : {"teacher-desk", "student-desk"}) {
        const auto c = ModelConfig::from_preset(name, 57, 4);
        EXPECT_EQ(parameter_count(init_params<float>(c, 3)), parameter_count(c)) << name;
    }
    // Hand count for a 1-layer d=2 f=3 model, 5 ids, 4 positions, 2 labels:
    // embeddings (5+4)*2, attention 4*(4+2), ffn (6+3)+(6+2), norms 4*2, head 2*3.
    ModelConfig c;
    c.layers = 1, c.hidden = 2, c.ffn = 3, c.heads = 1, c.vocab_size = 5, c.max_len = 4, c.num_labels = 2;
    EXPECT_EQ(parameter_count(c), 18u + 24u + 17u + 8u + 6u);
}

TEST(Presets, InvalidConfigurationsRejected) {
    EXPECT_THROW(ModelConfig::from_preset("h1024"), Error);
    auto c = tiny_config();
    c.heads = 3;
    EXPECT_THROW(c.validate(), Error);
}

TEST(Embedding, RejectsOutOfRangeIdsAndLongInputs) {
    const auto c = tiny_config();
    const auto p = init_params<double>(c, 1);
    const std::vector<int> bad{1, 11};
    try {
        embed<double>(bad, p, c);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::kIdOutOfRange);
    }
    const std::vector<int> long_ids(10, 1);
    try {
        embed<double>(long_ids, p, c);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::kShapeMismatch);
    }
}

TEST(Embedding, SumsTokenAndPosition) {
    const auto c = tiny_config();
    const auto p = init_params<double>(c, 1);
    const std::vector<int> ids{4, 4, 7};
    const auto h = embed<double>(ids, p, c);
    for (int i = 0; i < 3; ++i)
        EXPECT_EQ(h.row(i), p.token_embedding.row(ids[static_cast<std::size_t>(i)]) + p.position_embedding.row(i));
}

TEST(Layer, MatchesLoopImplementation) {
    const auto c = tiny_config(1);
    const auto p = random_params(c, 5);
    Rng rng(9);
    const Matrix<double> x = random_matrix(rng, 6, c.hidden);
    const std::vector<int> keep{1, 1, 1, 1, 0, 0};
    AttentionMask mask{{1, 1, 1, 1, 0, 0}};
    const auto fast = layer_forward(p.layers[0], x, mask, c.heads, c.layer_norm_eps);
    const auto slow = naive_layer(p.layers[0], x, keep, c.heads, c.layer_norm_eps);
    EXPECT_LT((fast - slow).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Layer, PaddingDoesNotChangeValidPositions) {
    const auto c = tiny_config();
    const auto p = random_params(c, 6);
    const std::vector<int> ids{3, 5, 8, 2};
    const auto padded = pad_input(ids, 7, c);
    EXPECT_EQ(padded.ids, (std::vector<int>{3, 5, 8, 2, c.pad_id, c.pad_id, c.pad_id}));
    const auto a = forward(p, c, ids, false).output();
    const auto b = forward(p, c, padded.ids, padded.mask, false).output();
    EXPECT_LT((a - b.topRows(4)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Layer, ZeroLayersReturnsEmbedding) {
    const auto c = tiny_config(0);
    const auto p = init_params<double>(c, 2);
    const std::vector<int> ids{1, 2};
    const auto t = forward(p, c, ids);
    ASSERT_EQ(t.hidden.size(), 1u);
    EXPECT_EQ(t.output(), embed<double>(ids, p, c));
}

TEST(Backward, MatchesFiniteDifferencesAtEveryParameter) {
    const auto c = tiny_config();
    auto p = random_params(c, 7);
    Rng rng(11);
    const std::vector<int> ids{1, 4, 9, 4, 2, 0, 0};
    const AttentionMask mask = AttentionMask::prefix(5, 7);
    // L = <R_L, H^(L)> + <R_1, H^(1)>, so gradients enter at two depths.
    const Matrix<double> r_top = random_matrix(rng, 7, c.hidden);
    const Matrix<double> r_mid = random_matrix(rng, 7, c.hidden);
    auto loss = [&] {
        const auto t = forward(p, c, ids, mask, false);
        return (t.hidden[2].array() * r_top.array()).sum() + (t.hidden[1].array() * r_mid.array()).sum();
    };
    const auto trace = forward(p, c, ids, mask);
    auto g = zeros_like(p);
    backward(p, c, trace, {Matrix<double>(), r_mid, r_top}, g);
    // The key bias has an exactly zero gradient (softmax ignores a constant
    // shift of the scores), so entries are compared relative to at least 1e-4.
    for_each_tensor_pair(p, g, [&](const std::string& name, Matrix<double>& param, Matrix<double>& grad) {
        EXPECT_LT(max_gradient_error(param, grad, loss, 1e-5, 1e-4), 1e-5) << name;
    });
}

TEST(Backward, HeadGradientsMatchFiniteDifferences) {
    const auto c = tiny_config(1);
    auto p = random_params(c, 8);
    Rng rng(12);
    const Matrix<double> h = random_matrix(rng, 5, c.hidden);
    const Matrix<double> r = random_matrix(rng, 5, c.num_labels);
    auto loss = [&] { return (pmp_logits(h, p).array() * r.array()).sum(); };
    auto g = zeros_like(p);
    Matrix<double> hv = h;
    const auto dh = pmp_head_backward(h, r, p, g);
    EXPECT_LT(max_gradient_error(p.head_weight, g.head_weight, loss), 1e-6);
    EXPECT_LT(max_gradient_error(p.head_bias, g.head_bias, loss), 1e-6);
    auto loss_h = [&] { return (pmp_logits(hv, p).array() * r.array()).sum(); };
    EXPECT_LT(max_gradient_error(hv, dh, loss_h), 1e-6);
}

TEST(StudentInit, CopiesSelectedTeacherLayers) {
    auto tc = tiny_config(4);
    const auto teacher = init_params<double>(tc, 3);
    auto sc = tc;
    sc.layers = 2;
    const auto sel = uniform_layer_selection(4, 2);
    EXPECT_EQ(sel, (std::vector<int>{1, 3}));
    EXPECT_EQ(uniform_layer_selection(12, 6), (std::vector<int>{1, 3, 5, 7, 9, 11}));
    const auto student = init_student_from_teacher(teacher, tc, sc, sel, 0);
    ASSERT_EQ(student.layers.size(), 2u);
    for (std::size_t j = 0; j < 2; ++j)
        for (const auto& [name, member] : kLayerFields<double>)
            EXPECT_EQ(student.layers[j].*member, teacher.layers[static_cast<std::size_t>(sel[j])].*member) << name;
    EXPECT_EQ(student.token_embedding, teacher.token_embedding);
    EXPECT_EQ(student.head_weight, teacher.head_weight);
}

TEST(StudentInit, NarrowStudentIsFreshlyInitialized) {
    const auto tc = ModelConfig::from_preset("teacher-desk", 40);
    const auto sc = ModelConfig::from_preset("student-desk", 40);
    const auto teacher = init_params<float>(tc, 1);
    const auto student = init_student_from_teacher(teacher, tc, sc, uniform_layer_selection(4, 2), 5);
    EXPECT_NO_THROW(check_shapes(student, sc));
    EXPECT_TRUE(params_equal(student, init_params<float>(sc, 5)));
    const std::vector<int> bad{0, 4};
    try {
        init_student_from_teacher(teacher, tc, sc, bad, 5);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::kBadSelection);
    }
}

TEST(Params, ShapeCheckNamesTheOffendingTensor) {
    const auto c = tiny_config();
    auto p = init_params<float>(c, 1);
    p.layers[1].w1.resize(3, 3);
    try {
        check_shapes(p, c);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::kShapeMismatch);
        EXPECT_NE(std::string(e.what()).find("layers.1.w1"), std::string::npos);
    }
}

TEST(Params, InitIsDeterministicAndBounded) {
    const auto c = tiny_config();
    const auto a = init_params<float>(c, 4);
    EXPECT_TRUE(params_equal(a, init_params<float>(c, 4)));
    EXPECT_FALSE(params_equal(a, init_params<float>(c, 5)));
    EXPECT_LE(a.token_embedding.cwiseAbs().maxCoeff(), 0.04f + 1e-6f);  // truncated at two sigma
    EXPECT_EQ(a.layers[0].ln1_gamma, Matrix<float>::Ones(1, c.hidden));
}
