#include <gtest/gtest.h>

#include "pmp/distill.hpp"
#include "pmp/synthetic.hpp"
#include "test_util.hpp"

using namespace pmp;
using pmp::testing::max_gradient_error;

namespace {

using Pairs = std::vector<std::pair<int, int>>;

struct Fixture {
    std::vector<EncodedSequence> corpus;
    ModelConfig teacher, student;
};

Fixture fixture() {
    const auto synth = make_synthetic_corpus(GrammarConfig{}, 100, 4);
    const auto vocab = Vocabulary::build(synth.oracle);
    Fixture f;
    f.corpus = encode_corpus(synth.oracle, vocab);
    f.teacher.layers = 4, f.teacher.hidden = 12, f.teacher.ffn = 16, f.teacher.heads = 2;
    f.student.layers = 2, f.student.hidden = 8, f.student.ffn = 12, f.student.heads = 2;
    for (auto* c : {&f.teacher, &f.student}) {
        c->vocab_size = static_cast<int>(vocab.size());
        c->max_len = 256;
    }
    return f;
}

ErrorCode code_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "expected an error";
    return ErrorCode::kFormat;
}

}  // namespace

TEST(LayerMap, UniformStride) {
    EXPECT_EQ(LayerMap::uniform(12, 6).pairs, (Pairs{{1, 2}, {2, 4}, {3, 6}, {4, 8}, {5, 10}, {6, 12}}));
    EXPECT_EQ(LayerMap::uniform(4, 2).pairs, (Pairs{{1, 2}, {2, 4}}));
    EXPECT_EQ(LayerMap::uniform(3, 3).pairs, (Pairs{{1, 1}, {2, 2}, {3, 3}}));
}

TEST(LayerMap, ValidationErrors) {
    EXPECT_EQ(code_of([] { LayerMap{{{1, 2}}}.validate(4, 2); }), ErrorCode::kConfigMismatch);          // count
    EXPECT_EQ(code_of([] { LayerMap{{{1, 3}, {2, 3}}}.validate(4, 2); }), ErrorCode::kConfigMismatch);  // order
    EXPECT_EQ(code_of([] { LayerMap{{{1, 2}, {2, 5}}}.validate(4, 2); }), ErrorCode::kConfigMismatch);  // range
    EXPECT_EQ(code_of([] { LayerMap{{{2, 2}, {1, 4}}}.validate(4, 2); }), ErrorCode::kConfigMismatch);  // student
    EXPECT_NO_THROW((LayerMap{{{1, 1}, {2, 3}}}.validate(4, 2)));
}

TEST(Objective, IdenticalStudentHasZeroDistillationLoss) {
    auto f = fixture();
    const auto params = init_params<double>(f.teacher, 3);
    DistillConfig dc;
    const auto map = dc.layer_map(f.teacher.layers, f.teacher.layers);
    std::vector<Matrix<double>> proj(map.pairs.size(), identity_projection<double>(f.teacher.hidden, f.teacher.hidden));
    BatchSampler sampler(f.corpus.size(), 0);
    const auto batch = make_masked_batch(f.corpus, sampler, 4, 0, 0, f.teacher.mask_id, {});
    const auto stats = distill_objective<double>(params, f.teacher, params, f.teacher, proj, map, batch, dc, nullptr, nullptr);
    EXPECT_EQ(stats.hidden, 0.0);
    EXPECT_NEAR(stats.kd, 0.0, 1e-14);
    EXPECT_GT(stats.pmp.ce, 0.0);
}

TEST(Objective, GradientMatchesFiniteDifferences) {
    auto f = fixture();
    auto teacher = init_params<double>(f.teacher, 1);
    auto student = init_params<double>(f.student, 2);
    for (auto* p : {&teacher, &student})
        for_each_tensor(*p, [](const std::string& name, Matrix<double>& m) {
            if (name.find("gamma") == std::string::npos) m *= 10.0;
        });
    DistillConfig dc;
    dc.pmp.lambda = 0.3;
    dc.pmp.tau = 0.5;
    dc.alpha = 0.7, dc.beta = 0.5, dc.gamma = 0.9, dc.temperature = 2.0;
    const auto map = dc.layer_map(f.teacher.layers, f.student.layers);
    Rng rng(5);
    std::vector<Matrix<double>> proj{pmp::testing::random_matrix(rng, 8, 12), pmp::testing::random_matrix(rng, 8, 12)};
    BatchSampler sampler(f.corpus.size(), 0);
    const auto batch = make_masked_batch(f.corpus, sampler, 2, 0, 0, f.student.mask_id, {});

    auto grads = zeros_like(student);
    std::vector<Matrix<double>> pgrads{Matrix<double>::Zero(8, 12), Matrix<double>::Zero(8, 12)};
    const auto stats = distill_objective(teacher, f.teacher, student, f.student, proj, map, batch, dc, &grads, &pgrads);
    EXPECT_GT(stats.hidden, 0.0);
    EXPECT_GT(stats.kd, 0.0);
    auto loss = [&] {
        return distill_objective<double>(teacher, f.teacher, student, f.student, proj, map, batch, dc, nullptr, nullptr)
            .pmp.loss;
    };
    EXPECT_LT(max_gradient_error(student.head_weight, grads.head_weight, loss, 1e-6, 1e-5), 1e-5);
    EXPECT_LT(max_gradient_error(student.layers[0].w2, grads.layers[0].w2, loss, 1e-6, 1e-5), 1e-5);
    EXPECT_LT(max_gradient_error(student.layers[1].wq, grads.layers[1].wq, loss, 1e-6, 1e-5), 1e-5);
    EXPECT_LT(max_gradient_error(student.token_embedding, grads.token_embedding, loss, 1e-6, 1e-5), 1e-5);
    EXPECT_LT(max_gradient_error(proj[0], pgrads[0], loss, 1e-6, 1e-5), 1e-5);
    EXPECT_LT(max_gradient_error(proj[1], pgrads[1], loss, 1e-6, 1e-5), 1e-5);
}

TEST(Distill, WithoutTeacherTermsEqualsPretraining) {
    const auto f = fixture();
    const auto teacher = init_params<float>(f.teacher, 1);
    const auto student = init_params<float>(f.student, 2);
    DistillConfig dc;
    dc.alpha = 0, dc.beta = 0, dc.gamma = 1;
    dc.pmp.steps = 8;
    dc.pmp.batch_size = 3;
    dc.pmp.seed = 7;
    const auto d = distill(teacher, f.teacher, f.corpus, student, f.student, dc);
    const auto p = pretrain(f.corpus, student, f.student, dc.pmp);
    EXPECT_TRUE(params_equal(d.params, p.params));
    for (std::size_t s = 0; s < p.history.size(); ++s) EXPECT_EQ(d.history[s].pmp.loss, p.history[s].loss);
}

TEST(Distill, ProjectionsLearnOnlyWithHiddenTerm) {
    const auto f = fixture();
    const auto teacher = init_params<float>(f.teacher, 1);
    const auto student = init_params<float>(f.student, 2);
    DistillConfig dc;
    dc.pmp.steps = 4;
    dc.pmp.batch_size = 2;
    const auto with = distill(teacher, f.teacher, f.corpus, student, f.student, dc);
    ASSERT_EQ(with.projections.size(), 2u);
    EXPECT_NE(with.projections[0], identity_projection<float>(8, 12));
    dc.alpha = 0;
    const auto without = distill(teacher, f.teacher, f.corpus, student, f.student, dc);
    EXPECT_EQ(without.projections[0], identity_projection<float>(8, 12));
    EXPECT_EQ(without.history[0].hidden, 0.0);
    EXPECT_GT(without.history[0].kd, 0.0);
}

TEST(Distill, RejectsMismatchedModels) {
    const auto f = fixture();
    auto other = f.student;
    other.vocab_size += 1;
    const auto teacher = init_params<float>(f.teacher, 1);
    const auto student = init_params<float>(other, 2);
    DistillConfig dc;
    dc.pmp.steps = 1;
    EXPECT_EQ(code_of([&] { distill(teacher, f.teacher, f.corpus, student, other, dc); }), ErrorCode::kConfigMismatch);
}

TEST(DistillConfig, JsonRoundTrip) {
    DistillConfig dc;
    dc.temperature = 4;
    dc.alpha = 0.5;
    dc.layer_pairs = {{1, 1}, {2, 4}};
    dc.pmp.lambda = 0.2;
    const nlohmann::json j = dc;
    const auto back = j.get<DistillConfig>();
    EXPECT_EQ(back.temperature, 4);
    EXPECT_EQ(back.alpha, 0.5);
    EXPECT_EQ(back.beta, 1.0);
    EXPECT_EQ(back.layer_pairs, dc.layer_pairs);
    EXPECT_EQ(back.pmp.lambda, 0.2);
    EXPECT_EQ(back.pmp.preset, "student-desk");
}
