#include <gtest/gtest.h>

#include <filesystem>

#include "oracles.hpp"
#include "pmp/finetune.hpp"
#include "pmp/synthetic.hpp"

using namespace pmp;
using pmp::testing::max_gradient_error;

namespace {

const MarkSet kMarks = MarkSet::fine_tune_default();
const Label kComma = *kMarks.from_name("COMMA");
const Label kPeriod = *kMarks.from_name("PERIOD");

LabeledSequence four_tokens() {
    return LabeledSequence{{"x1", "x2", "x3", "x4"}, {Label::O, kComma, Label::O, kPeriod}};
}

WordSegmentation pairs() { return WordSegmentation{{{0, 2}, {2, 4}}}; }

Vocabulary vocab_of(const std::vector<LabeledSequence>& seqs) { return Vocabulary::build(seqs); }

struct Task {
    SyntheticCorpus corpus;
    Vocabulary vocab;
    LongestMatchSegmenter segmenter;
    ModelConfig config;
    std::vector<SlotExample> train, dev;
};

Task tiny_task(int hidden = 16) {
    Task t;
    t.corpus = make_synthetic_corpus(GrammarConfig{}, 240, 6);
    t.vocab = Vocabulary::build(t.corpus.oracle);
    t.segmenter = LongestMatchSegmenter(t.corpus.lexicon);
    t.config.layers = 1;
    t.config.hidden = hidden;
    t.config.ffn = 2 * hidden;
    t.config.heads = 2;
    t.config.vocab_size = static_cast<int>(t.vocab.size());
    t.config.max_len = 96;
    t.config.num_labels = 4;
    std::vector<LabeledSequence> train(t.corpus.oracle.begin(), t.corpus.oracle.begin() + 100);
    std::vector<LabeledSequence> dev(t.corpus.oracle.begin() + 100, t.corpus.oracle.end());
    t.train = prepare_slot_examples(train, t.segmenter, t.vocab, t.config);
    t.dev = prepare_slot_examples(dev, t.segmenter, t.vocab, t.config);
    return t;
}

FinetuneConfig quick_finetune() {
    FinetuneConfig fc;
    fc.epochs = 10;
    fc.lr = 1e-2;
    fc.batch_size = 4;
    return fc;
}

}  // namespace

TEST(Slots, InsertedAfterEveryWord) {
    const auto seq = four_tokens();
    const auto vocab = vocab_of({seq});
    const auto slots = insert_mask_slots(seq, pairs(), vocab, 16);
    const int m = SpecialTokens::kMask;
    EXPECT_EQ(slots.slotted_ids,
              (std::vector<int>{vocab.id("x1"), vocab.id("x2"), m, vocab.id("x3"), vocab.id("x4"), m}));
    EXPECT_EQ(slots.slot_positions, (std::vector<std::size_t>{2, 5}));
    EXPECT_EQ(slots.word_end_token_index, (std::vector<std::size_t>{1, 3}));
    EXPECT_EQ(slots.gold_slots, (std::vector<Label>{kComma, kPeriod}));
}

TEST(Slots, SingleTokenWordsAlternate) {
    const auto seq = four_tokens();
    const auto vocab = vocab_of({seq});
    const auto slots = insert_mask_slots(seq, WordSegmentation::single_tokens(4), vocab, 8);
    EXPECT_EQ(slots.slot_positions, (std::vector<std::size_t>{1, 3, 5, 7}));
    EXPECT_EQ(slots.gold_slots, seq.labels);
}

TEST(Slots, TooLongAfterSlots) {
    const auto seq = four_tokens();
    const auto vocab = vocab_of({seq});
    EXPECT_NO_THROW(insert_mask_slots(seq, pairs(), vocab, 6));
    try {
        insert_mask_slots(seq, pairs(), vocab, 5);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::kTooLongAfterSlots);
    }
}

TEST(Slots, MidWordMarkMovesToTheSlot) {
    const LabeledSequence seq{{"a", "b", "c"}, {kComma, Label::O, Label::O}};
    const auto vocab = vocab_of({seq});
    SlotReport report;
    const auto slots = insert_mask_slots(seq, WordSegmentation{{{0, 2}, {2, 3}}}, vocab, 8, SpecialTokens::kMask, &report);
    EXPECT_EQ(slots.gold_slots, (std::vector<Label>{kComma, Label::O}));
    EXPECT_EQ(report.remapped_marks, 1u);
}

TEST(Projection, ForcesOInsideWords) {
    const std::vector<Label> preds{kComma, kPeriod};
    EXPECT_EQ(project_outputs(preds, pairs(), 4), (std::vector<Label>{Label::O, kComma, Label::O, kPeriod}));
    const std::vector<Label> singles{kComma, Label::O, kPeriod};
    EXPECT_EQ(project_outputs(singles, WordSegmentation::single_tokens(3), 3), singles);
    try {
        project_outputs(preds, WordSegmentation::single_tokens(3), 3);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::kLengthMismatch);
    }
}

TEST(Projection, RoundTripRestoresSyntheticText) {
    const auto r = pmp::testing::slot_round_trip(1000, 11);
    EXPECT_EQ(r.sequences, 1000u);
    EXPECT_EQ(r.exact, r.sequences);
    EXPECT_EQ(r.ids_preserved, r.sequences);
    EXPECT_EQ(r.remapped, 0u);
    EXPECT_GT(r.random_positions, 10000u);
    EXPECT_EQ(r.random_violations, 0u);
}

TEST(Split, PiecesFitAndConcatenateBack) {
    const auto t = tiny_task();
    for (std::size_t i = 0; i < 30; ++i) {
        const auto& seq = t.corpus.oracle[i];
        const auto seg = segment_words(seq, t.segmenter);
        LabeledSequence joined;
        for (const auto& [piece, piece_seg] : split_for_slots(seq, seg, 20)) {
            ASSERT_LE(piece.size() + piece_seg.word_count(), 20u);
            ASSERT_TRUE(piece_seg.tiles(piece.size()));
            joined.tokens.insert(joined.tokens.end(), piece.tokens.begin(), piece.tokens.end());
            joined.labels.insert(joined.labels.end(), piece.labels.begin(), piece.labels.end());
        }
        EXPECT_EQ(joined, seq);
    }
    const LabeledSequence one_word{{"a", "b", "c"}, {Label::O, Label::O, Label::O}};
    EXPECT_THROW(split_for_slots(one_word, WordSegmentation{{{0, 3}}}, 3), Error);
}

TEST(Objective, LossIsSlotCrossEntropyOnly) {
    auto t = tiny_task(8);
    auto params = init_params<double>(t.config, 3);
    for_each_tensor(params, [](const std::string& name, Matrix<double>& m) {
        if (name.find("gamma") == std::string::npos) m *= 10.0;
    });
    const std::vector<const SlotExample*> batch{&t.train[0], &t.train[1]};
    auto grads = zeros_like(params);
    const double loss = slot_batch_step(params, t.config, batch, grads);

    // Oracle: CE over the slot logits computed independently.
    std::vector<int> labels;
    Matrix<double> logits(0, t.config.num_labels);
    for (const auto* ex : batch) {
        const auto l = slot_logits(params, t.config, ex->slots);
        logits.conservativeResize(logits.rows() + l.rows(), Eigen::NoChange);
        logits.bottomRows(l.rows()) = l;
        for (Label g : ex->slots.gold_slots) labels.push_back(index(g));
    }
    EXPECT_NEAR(loss, ce_loss(logits, std::span<const int>(labels)).value, 1e-12);

    auto value = [&] {
        auto scratch = zeros_like(params);
        return slot_batch_step(params, t.config, batch, scratch);
    };
    EXPECT_LT(max_gradient_error(params.head_weight, grads.head_weight, value, 1e-6, 1e-5), 1e-5);
    EXPECT_LT(max_gradient_error(params.layers[0].w1, grads.layers[0].w1, value, 1e-6, 1e-5), 1e-5);
    EXPECT_LT(max_gradient_error(params.position_embedding, grads.position_embedding, value, 1e-5, 1e-4), 1e-5);
}

TEST(Objective, HeadStartsFromThePretrainedHead) {
    const auto t = tiny_task();
    const auto params = init_params<float>(t.config, 2);
    const auto& slots = t.train[0].slots;
    const auto trace = forward(params, t.config, std::span<const int>(slots.slotted_ids), false);
    const Matrix<float> expected =
        pmp_logits(gather_rows(trace.output(), std::span<const std::size_t>(slots.slot_positions)), params);
    EXPECT_EQ(slot_logits(params, t.config, slots), expected);
}

TEST(Finetune, ZeroEpochsLeavesParametersUnchanged) {
    const auto t = tiny_task();
    const auto params = init_params<float>(t.config, 2);
    FinetuneConfig fc;
    fc.epochs = 0;
    const auto r = finetune(params, t.config, t.train, t.dev, kMarks, fc);
    EXPECT_TRUE(params_equal(r.best, params));
    EXPECT_TRUE(params_equal(r.last, params));
    EXPECT_EQ(r.best_epoch, 0);
}

TEST(Finetune, LearnsAndPicksTheBestEpoch) {
    const auto t = tiny_task();
    int hooks = 0;
    const auto r = finetune<float>(init_params<float>(t.config, 2), t.config, t.train, t.dev, kMarks, quick_finetune(),
                                   [&](const EpochRecord&, const EncoderParams<float>&) { ++hooks; });
    EXPECT_EQ(hooks, 10);
    ASSERT_EQ(r.epochs.size(), 10u);
    double best = 0;
    for (const auto& e : r.epochs) best = std::max(best, e.dev.f1);
    EXPECT_EQ(r.epochs[static_cast<std::size_t>(r.best_epoch - 1)].dev.f1, best);
    EXPECT_EQ(evaluate_slots(r.best, t.config, t.dev, kMarks).f1, best);
    // A from-scratch one-layer model learns slowly; it must at least beat
    // the all-O predictor (F1 0) and lower its training loss.
    EXPECT_GT(best, 0.0);
    EXPECT_LT(r.epochs.back().train_loss, r.epochs.front().train_loss);
    const auto again = finetune<float>(init_params<float>(t.config, 2), t.config, t.train, t.dev, kMarks, quick_finetune());
    EXPECT_TRUE(params_equal(r.last, again.last));
}

TEST(Punctuator, RestoresMarksAndStripsExistingOnes) {
    const auto t = tiny_task();
    const auto r = finetune<float>(init_params<float>(t.config, 2), t.config, t.train, t.dev, kMarks, quick_finetune());
    Checkpoint ckpt;
    ckpt.config = t.config;
    ckpt.marks = kMarks;
    ckpt.vocab = t.vocab;
    ckpt.params = r.best;
    ckpt.lexicon = t.segmenter;
    const auto dir = std::filesystem::temp_directory_path() / "pmp_test_punctuator";
    save_checkpoint(dir, ckpt);
    const auto punct = Punctuator::from_checkpoint(load_checkpoint(dir));
    std::filesystem::remove_all(dir);

    const std::string& doc = t.corpus.documents.back();  // a dev document
    std::string bare;
    for (char32_t cp : utf8::decode(doc))
        if (!kMarks.is_surface(cp)) utf8::append(bare, cp);
    const std::string restored = punct.punctuate(bare);
    EXPECT_EQ(strip_and_label(restored, kMarks).tokens, strip_and_label(doc, kMarks).tokens);
    std::size_t stripped = 0;
    EXPECT_EQ(punct.punctuate(doc, &stripped), restored);
    EXPECT_GT(stripped, 0u);
    try {
        punct.punctuate("，。 ");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::kEmptyInput);
    }
}
