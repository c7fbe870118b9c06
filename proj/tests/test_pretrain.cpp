#include <gtest/gtest.h>

#include <algorithm>
#include <cstdio>
#include <set>
#include <vector>

#include "pmp/pretrain.hpp"
#include "pmp/synthetic.hpp"
#include "test_util.hpp"

using namespace pmp;

namespace {

EncodedSequence numbered(std::size_t n, int first_label = 0) {
    EncodedSequence s;
    for (std::size_t i = 0; i < n; ++i) {
        s.ids.push_back(SpecialTokens::kCount + static_cast<int>(i % 20));
        s.labels.push_back(i % 5 == 4 ? 1 + (first_label + static_cast<int>(i)) % 3 : 0);
    }
    return s;
}

struct TinyCorpus {
    std::vector<EncodedSequence> sequences;
    ModelConfig config;
};

TinyCorpus tiny_corpus() {
    const auto synth = make_synthetic_corpus(GrammarConfig{}, 120, 3);
    const auto vocab = Vocabulary::build(synth.oracle);
    TinyCorpus t;
    t.sequences = encode_corpus(synth.oracle, vocab);
    t.config.layers = 2;
    t.config.hidden = 16;
    t.config.ffn = 32;
    t.config.heads = 2;
    t.config.vocab_size = static_cast<int>(vocab.size());
    t.config.max_len = 256;
    t.config.num_labels = 4;
    return t;
}

}  // namespace

TEST(Masking, CountIsFifteenPercentFloored) {
    EXPECT_EQ(mask_count(512), 76u);
    EXPECT_EQ(mask_count(6), 0u);
    EXPECT_EQ(min_maskable_length(), 7u);
    for (std::size_t n = 7; n <= 512; ++n) EXPECT_EQ(mask_count(n), n * 15 / 100) << n;
}

TEST(Masking, EveryLengthMasksExactlyTheSelectedPositions) {
    Rng rng(1);
    for (std::size_t n = 7; n <= 512; ++n) {
        const auto seq = numbered(n);
        const auto ex = make_masked_example(seq, SpecialTokens::kMask, {.pad_to = 520}, rng);
        ASSERT_EQ(ex.mask_positions.size(), n * 15 / 100);
        ASSERT_EQ(ex.input_ids.size(), 520u);
        ASSERT_EQ(ex.attention.valid_count(), n);
        const std::set<std::size_t> chosen(ex.mask_positions.begin(), ex.mask_positions.end());
        ASSERT_EQ(chosen.size(), ex.mask_positions.size());
        for (std::size_t i = 0; i < 520; ++i) {
            if (i >= n) {
                ASSERT_EQ(ex.input_ids[i], SpecialTokens::kPad);  // padding is never masked
                ASSERT_FALSE(chosen.count(i));
            } else if (chosen.count(i)) {
                ASSERT_EQ(ex.input_ids[i], SpecialTokens::kMask);
            } else {
                ASSERT_EQ(ex.input_ids[i], seq.ids[i]);
            }
        }
        for (std::size_t k = 0; k < ex.mask_positions.size(); ++k)
            ASSERT_EQ(ex.mark_labels[k], seq.labels[ex.mask_positions[k]]);
    }
}

TEST(Masking, TooShortSequencesRejected) {
    Rng rng(1);
    try {
        make_masked_example(numbered(6), SpecialTokens::kMask, {}, rng);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::kTooShort);
    }
}

TEST(Masking, UniformSelectionFrequencies) {
    Rng rng(8);
    const auto seq = numbered(20);
    std::vector<int> hits(20, 0);
    const int draws = 40000;
    for (int d = 0; d < draws; ++d)
        for (std::size_t p : make_masked_example(seq, SpecialTokens::kMask, {}, rng).mask_positions) ++hits[p];
    for (int h : hits) EXPECT_NEAR(h / static_cast<double>(draws), 0.15, 0.01);
}

TEST(Masking, BalancedSelectionFavoursMarks) {
    Rng rng(9);
    const auto seq = numbered(40);  // every fifth token carries a mark
    double marked_uniform = 0, marked_balanced = 0;
    for (int d = 0; d < 5000; ++d) {
        for (int l : make_masked_example(seq, SpecialTokens::kMask, {}, rng).mark_labels) marked_uniform += l != 0;
        for (int l : make_masked_example(seq, SpecialTokens::kMask, {.balanced = true}, rng).mark_labels)
            marked_balanced += l != 0;
    }
    EXPECT_GT(marked_balanced, 2 * marked_uniform);
}

TEST(Sampler, EachEpochVisitsEverySequenceOnce) {
    BatchSampler sampler(10, 4);
    for (int epoch = 0; epoch < 3; ++epoch) {
        auto order = sampler.next(10);
        std::sort(order.begin(), order.end());
        for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(order[i], i);
    }
}

TEST(Objective, GradientMatchesFiniteDifferences) {
    auto t = tiny_corpus();
    t.config.hidden = 8;
    t.config.ffn = 12;
    auto params = init_params<double>(t.config, 2);
    for_each_tensor(params, [](const std::string&, Matrix<double>& m) { m *= 10.0; });  // leave the flat regime
    for (auto& l : params.layers) l.ln1_gamma.setOnes(), l.ln2_gamma.setOnes();
    PretrainConfig pc;
    pc.lambda = 0.4;
    pc.tau = 0.5;
    BatchSampler sampler(t.sequences.size(), 1);
    const auto batch = make_masked_batch(t.sequences, sampler, 3, 1, 0, t.config.mask_id, {});
    auto grads = zeros_like(params);
    pmp_objective(params, t.config, batch, pc, &grads);
    auto loss = [&] { return pmp_objective<double>(params, t.config, batch, pc, nullptr).loss; };
    EXPECT_LT(pmp::testing::max_gradient_error(params.head_weight, grads.head_weight, loss, 1e-6, 1e-5), 1e-5);
    EXPECT_LT(pmp::testing::max_gradient_error(params.layers[1].w1, grads.layers[1].w1, loss, 1e-6, 1e-5), 1e-5);
    EXPECT_LT(pmp::testing::max_gradient_error(params.layers[0].wv, grads.layers[0].wv, loss, 1e-6, 1e-5), 1e-5);
}

TEST(Pretrain, DeterministicForASeed) {
    const auto t = tiny_corpus();
    PretrainConfig pc;
    pc.steps = 5;
    pc.batch_size = 4;
    const auto a = pretrain(t.sequences, init_params<float>(t.config, 1), t.config, pc);
    const auto b = pretrain(t.sequences, init_params<float>(t.config, 1), t.config, pc);
    EXPECT_TRUE(params_equal(a.params, b.params));
    pc.seed = 1;
    const auto c = pretrain(t.sequences, init_params<float>(t.config, 1), t.config, pc);
    EXPECT_FALSE(params_equal(a.params, c.params));
}

TEST(Pretrain, LearnsTheGrammarMarks) {
    const auto t = tiny_corpus();
    PretrainConfig pc;
    pc.steps = 300;
    pc.batch_size = 8;
    pc.lr = 2e-3;
    const auto init = init_params<float>(t.config, 1);
    const double before = evaluate_masked_accuracy(init, t.config, t.sequences, 5);
    const auto result = pretrain(t.sequences, init, t.config, pc);
    const double after = evaluate_masked_accuracy(result.params, t.config, t.sequences, 5);
    std::size_t o = 0, total = 0;
    for (const auto& s : t.sequences)
        for (int l : s.labels) o += l == 0, ++total;
    const double majority = static_cast<double>(o) / static_cast<double>(total);
    std::printf("masked accuracy %.4f -> %.4f (all-O %.4f)\n", before, after, majority);
    EXPECT_GT(after, majority);
    EXPECT_LT(result.history.back().loss, result.history.front().loss);
}

TEST(Pretrain, CheckpointCallbackCadence) {
    const auto t = tiny_corpus();
    PretrainConfig pc;
    pc.steps = 6;
    pc.batch_size = 2;
    pc.checkpoint_every = 2;
    std::vector<long> seen;
    pretrain<float>(t.sequences, init_params<float>(t.config, 1), t.config, pc,
                    [&](long step, const EncoderParams<float>&) { seen.push_back(step); });
    EXPECT_EQ(seen, (std::vector<long>{2, 4, 6}));
}

TEST(Pretrain, ConfigValidation) {
    PretrainConfig pc;
    pc.lambda = 1.5;
    EXPECT_THROW(pc.validate(), Error);
    pc = {};
    pc.tau = 0;
    EXPECT_THROW(pc.validate(), Error);
    const nlohmann::json j = PretrainConfig{};
    EXPECT_EQ(j.get<PretrainConfig>().lambda, 0.1);
}
