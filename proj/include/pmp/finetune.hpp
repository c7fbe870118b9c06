#pragma once

// Slot-tagging fine-tuning: a [M] token follows every segmented word, the
// head classifies each [M], and token-level labels are recovered by putting
// the slot's class on the word's last token and O everywhere inside words.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmp/checkpoint.hpp"
#include "pmp/corpus.hpp"
#include "pmp/error.hpp"
#include "pmp/eval.hpp"
#include "pmp/log.hpp"
#include "pmp/losses.hpp"
#include "pmp/model.hpp"
#include "pmp/optim.hpp"
#include "pmp/pretrain.hpp"
#include "pmp/segment.hpp"
#include "pmp/vocab.hpp"

namespace pmp {

struct SlotSequence {
    std::vector<int> slotted_ids;
    std::vector<std::size_t> slot_positions;        // index of each [M] in slotted_ids
    std::vector<std::size_t> word_end_token_index;  // source token whose label the slot carries
    std::vector<Label> gold_slots;
};

struct SlotReport {
    std::size_t remapped_marks = 0;  // marks found inside a word, moved to its slot
};

/// (w_1, [M], w_2, [M], ..., w_K, [M]); slot k takes the label of word k's
/// final token. A mark inside a word moves to that word's slot.
inline SlotSequence insert_mask_slots(const LabeledSequence& seq, const WordSegmentation& seg, const Vocabulary& vocab,
                                      std::size_t max_len, int mask_id = SpecialTokens::kMask,
                                      SlotReport* report = nullptr) {
    require(seq.tokens.size() == seq.labels.size(), ErrorCode::kLengthMismatch, "tokens and labels differ in length");
    require(seg.tiles(seq.size()), ErrorCode::kLengthMismatch, "segmentation does not tile the sequence");
    const std::size_t slotted = seq.size() + seg.word_count();
    require(slotted <= max_len, ErrorCode::kTooLongAfterSlots,
            std::to_string(seq.size()) + " tokens + " + std::to_string(seg.word_count()) + " slots exceed max_len " +
                std::to_string(max_len));
    SlotSequence out;
    out.slotted_ids.reserve(slotted);
    for (const auto& [start, end] : seg.groups) {
        Label gold = seq.labels[end - 1];
        for (std::size_t i = start; i < end; ++i) {
            out.slotted_ids.push_back(vocab.id(seq.tokens[i]));
            if (i + 1 < end && seq.labels[i] != Label::O) {
                if (report) ++report->remapped_marks;
                if (gold == Label::O) gold = seq.labels[i];
            }
        }
        out.slot_positions.push_back(out.slotted_ids.size());
        out.word_end_token_index.push_back(end - 1);
        out.gold_slots.push_back(gold);
        out.slotted_ids.push_back(mask_id);
    }
    return out;
}

/// y_hat: slot_preds[k] on the final token of word k, O elsewhere.
inline std::vector<Label> project_outputs(std::span<const Label> slot_preds, const WordSegmentation& seg,
                                          std::size_t n) {
    require(slot_preds.size() == seg.word_count(), ErrorCode::kLengthMismatch,
            std::to_string(slot_preds.size()) + " slot predictions for " + std::to_string(seg.word_count()) + " words");
    require(seg.tiles(n), ErrorCode::kLengthMismatch, "segmentation does not tile the output length");
    std::vector<Label> out(n, Label::O);
    for (std::size_t k = 0; k < slot_preds.size(); ++k) out[seg.groups[k].second - 1] = slot_preds[k];
    return out;
}

/// Cuts a sequence at word boundaries so every piece satisfies
/// tokens + words <= max_len. A single word longer than that is an error.
inline std::vector<std::pair<LabeledSequence, WordSegmentation>> split_for_slots(const LabeledSequence& seq,
                                                                                 const WordSegmentation& seg,
                                                                                 std::size_t max_len) {
    std::vector<std::pair<LabeledSequence, WordSegmentation>> pieces;
    std::size_t w = 0;
    while (w < seg.word_count()) {
        const std::size_t base = seg.groups[w].first;
        std::size_t used = 0;
        std::size_t end_word = w;
        while (end_word < seg.word_count()) {
            const std::size_t len = seg.groups[end_word].second - seg.groups[end_word].first;
            if (used + len + 1 > max_len) break;
            used += len + 1;
            ++end_word;
        }
        require(end_word > w, ErrorCode::kTooLongAfterSlots, "a single word does not fit in max_len with its slot");
        LabeledSequence piece;
        WordSegmentation piece_seg;
        const std::size_t stop = seg.groups[end_word - 1].second;
        piece.tokens.assign(seq.tokens.begin() + static_cast<std::ptrdiff_t>(base),
                            seq.tokens.begin() + static_cast<std::ptrdiff_t>(stop));
        piece.labels.assign(seq.labels.begin() + static_cast<std::ptrdiff_t>(base),
                            seq.labels.begin() + static_cast<std::ptrdiff_t>(stop));
        for (std::size_t k = w; k < end_word; ++k)
            piece_seg.groups.emplace_back(seg.groups[k].first - base, seg.groups[k].second - base);
        pieces.emplace_back(std::move(piece), std::move(piece_seg));
        w = end_word;
    }
    return pieces;
}

/// One fine-tuning / evaluation unit: the slotted input plus what is needed
/// to score it at token level.
struct SlotExample {
    SlotSequence slots;
    WordSegmentation segmentation;
    std::vector<Label> gold_tokens;
};

template <WordSegmenter Seg>
std::vector<SlotExample> prepare_slot_examples(const std::vector<LabeledSequence>& seqs, const Seg& segmenter,
                                               const Vocabulary& vocab, const ModelConfig& config,
                                               SlotReport* report = nullptr) {
    std::vector<SlotExample> out;
    const auto max_len = static_cast<std::size_t>(config.max_len);
    for (const auto& seq : seqs) {
        if (seq.empty()) continue;
        const WordSegmentation seg = segment_words(seq, segmenter);
        for (auto& [piece, piece_seg] : split_for_slots(seq, seg, max_len)) {
            SlotExample ex;
            ex.slots = insert_mask_slots(piece, piece_seg, vocab, max_len, config.mask_id, report);
            ex.segmentation = std::move(piece_seg);
            ex.gold_tokens = std::move(piece.labels);
            out.push_back(std::move(ex));
        }
    }
    return out;
}

/// Slot logits (K x |Y|) for one example.
template <class S>
Matrix<S> slot_logits(const EncoderParams<S>& params, const ModelConfig& config, const SlotSequence& slots) {
    const auto trace = forward(params, config, std::span<const int>(slots.slotted_ids), false);
    return pmp_logits(gather_rows(trace.output(), std::span<const std::size_t>(slots.slot_positions)), params);
}

template <class S>
std::vector<Label> predict_slots(const EncoderParams<S>& params, const ModelConfig& config, const SlotSequence& slots) {
    const Matrix<S> logits = slot_logits(params, config, slots);
    std::vector<Label> out;
    out.reserve(static_cast<std::size_t>(logits.rows()));
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        Eigen::Index arg = 0;
        logits.row(i).maxCoeff(&arg);
        out.push_back(label_at(static_cast<int>(arg)));
    }
    return out;
}

/// Token-level metrics of a model over prepared examples.
template <class S>
MetricsReport evaluate_slots(const EncoderParams<S>& params, const ModelConfig& config,
                             const std::vector<SlotExample>& examples, const MarkSet& marks, bool include_o = false) {
    std::vector<std::vector<Label>> pred, gold;
    pred.reserve(examples.size());
    gold.reserve(examples.size());
    for (const auto& ex : examples) {
        const auto slots = predict_slots(params, config, ex.slots);
        pred.push_back(project_outputs(std::span<const Label>(slots), ex.segmentation, ex.gold_tokens.size()));
        gold.push_back(ex.gold_tokens);
    }
    MetricsReport report = prf1(pred, gold, marks, include_o);
    report.parameter_count = parameter_count(params);
    return report;
}

struct FinetuneConfig {
    int epochs = 10;
    double lr = 3e-5;
    int batch_size = 16;
    double warmup_fraction = 0.1;
    double weight_decay = 1e-5;
    double max_grad_norm = 1.0;
    std::uint64_t seed = 0;
    bool include_o_in_overall = false;

    void validate() const {
        require(epochs >= 0 && lr > 0 && batch_size > 0, ErrorCode::kConfigMismatch,
                "epochs must be non-negative, lr and batch_size positive");
        require(warmup_fraction >= 0 && warmup_fraction <= 1, ErrorCode::kConfigMismatch, "warm-up outside [0, 1]");
    }
};

inline void to_json(nlohmann::json& j, const FinetuneConfig& c) {
    j = {{"epochs", c.epochs},
         {"lr", c.lr},
         {"batch_size", c.batch_size},
         {"warmup_fraction", c.warmup_fraction},
         {"weight_decay", c.weight_decay},
         {"max_grad_norm", c.max_grad_norm},
         {"seed", c.seed},
         {"include_o_in_overall", c.include_o_in_overall}};
}

inline void from_json(const nlohmann::json& j, FinetuneConfig& c) {
    const FinetuneConfig d;
    c.epochs = j.value("epochs", d.epochs);
    c.lr = j.value("lr", d.lr);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.warmup_fraction = j.value("warmup_fraction", d.warmup_fraction);
    c.weight_decay = j.value("weight_decay", d.weight_decay);
    c.max_grad_norm = j.value("max_grad_norm", d.max_grad_norm);
    c.seed = j.value("seed", d.seed);
    c.include_o_in_overall = j.value("include_o_in_overall", d.include_o_in_overall);
    c.validate();
}

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0;
    MetricsReport dev;
};

template <class S>
struct FinetuneResult {
    EncoderParams<S> best;
    EncoderParams<S> last;
    int best_epoch = 0;  // 0 when no epoch ran
    std::vector<EpochRecord> epochs;
};

/// Mean CE over the slot positions of a batch; gradients accumulate into g.
/// Only [M] rows receive a nonzero output gradient.
template <class S>
S slot_batch_step(const EncoderParams<S>& params, const ModelConfig& config, const std::vector<const SlotExample*>& batch,
                  EncoderParams<S>& g) {
    std::vector<EncoderTrace<S>> traces;
    std::size_t total = 0;
    for (const auto* ex : batch) total += ex->slots.slot_positions.size();
    Matrix<S> reps(static_cast<Eigen::Index>(total), config.hidden);
    std::vector<int> labels;
    labels.reserve(total);
    std::size_t row = 0;
    for (const auto* ex : batch) {
        traces.push_back(forward(params, config, std::span<const int>(ex->slots.slotted_ids), true));
        for (std::size_t k = 0; k < ex->slots.slot_positions.size(); ++k) {
            reps.row(static_cast<Eigen::Index>(row++)) =
                traces.back().output().row(static_cast<Eigen::Index>(ex->slots.slot_positions[k]));
            labels.push_back(index(ex->slots.gold_slots[k]));
        }
    }
    const Matrix<S> logits = pmp_logits(reps, params);
    const auto ce = ce_loss(logits, std::span<const int>(labels));
    const Matrix<S> d_reps = pmp_head_backward(reps, ce.grad, params, g);
    row = 0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        std::vector<Matrix<S>> slots(traces[b].hidden.size());
        Matrix<S>& top = slots.back();
        top = Matrix<S>::Zero(static_cast<Eigen::Index>(batch[b]->slots.slotted_ids.size()), config.hidden);
        for (std::size_t p : batch[b]->slots.slot_positions)
            top.row(static_cast<Eigen::Index>(p)) = d_reps.row(static_cast<Eigen::Index>(row++));
        backward(params, config, traces[b], slots, g);
    }
    return ce.value;
}

using EpochHook = std::function<void(const EpochRecord&, const EncoderParams<float>&)>;

/// AdamW with linear warm-up/decay, clipped gradients, CE over slots only;
/// dev overall F1 picks the best epoch.
template <class S>
FinetuneResult<S> finetune(EncoderParams<S> params, const ModelConfig& config, const std::vector<SlotExample>& train,
                           const std::vector<SlotExample>& dev, const MarkSet& marks, const FinetuneConfig& fc,
                           const std::function<void(const EpochRecord&, const EncoderParams<S>&)>& on_epoch = {}) {
    fc.validate();
    check_shapes(params, config);
    FinetuneResult<S> result;
    result.best = params;
    if (fc.epochs == 0) {
        result.last = std::move(params);
        return result;
    }
    require(!train.empty(), ErrorCode::kEmptyBatch, "fine-tuning set is empty");
    const auto batches_per_epoch = static_cast<long>((train.size() + fc.batch_size - 1) / fc.batch_size);
    const LinearSchedule schedule{batches_per_epoch * fc.epochs, fc.warmup_fraction};
    EncoderParams<S> grads = zeros_like(params);
    ParamRefs<S> refs;
    refs.add(params, grads);
    AdamW<S> optimizer({.lr = fc.lr, .weight_decay = fc.weight_decay});
    Rng rng(derive_seed(fc.seed, 0xF17E));
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    double best_f1 = -1;
    long step = 0;
    for (int epoch = 1; epoch <= fc.epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(fc.batch_size)) {
            std::vector<const SlotExample*> batch;
            for (std::size_t i = start; i < std::min(order.size(), start + static_cast<std::size_t>(fc.batch_size)); ++i)
                batch.push_back(&train[order[i]]);
            refs.zero_grads();
            loss_sum += static_cast<double>(slot_batch_step(params, config, batch, grads));
            clip_grad_norm(refs.grads, fc.max_grad_norm);
            optimizer.step(refs, fc.lr * schedule.factor(step++));
        }
        EpochRecord record;
        record.epoch = epoch;
        record.train_loss = loss_sum / static_cast<double>(batches_per_epoch);
        record.dev = evaluate_slots(params, config, dev.empty() ? train : dev, marks, fc.include_o_in_overall);
        log::info("finetune epoch ", epoch, "/", fc.epochs, " loss ", record.train_loss, " dev F1 ", record.dev.f1);
        if (record.dev.f1 > best_f1) {
            best_f1 = record.dev.f1;
            result.best = params;
            result.best_epoch = epoch;
        }
        if (on_epoch) on_epoch(record, params);
        result.epochs.push_back(std::move(record));
    }
    result.last = std::move(params);
    return result;
}

// ---------------------------------------------------------------------------
// Inference

/// A fine-tuned model with everything punctuate() needs.
struct Punctuator {
    ModelConfig config;
    MarkSet marks;
    Vocabulary vocab;
    EncoderParams<float> params;
    LongestMatchSegmenter segmenter;

    static Punctuator from_checkpoint(Checkpoint ckpt) {
        return {ckpt.config, ckpt.marks, std::move(ckpt.vocab), std::move(ckpt.params),
                ckpt.lexicon ? std::move(*ckpt.lexicon) : LongestMatchSegmenter{}};
    }

    /// Labels for already-tokenized input, one per token.
    std::vector<Label> label_tokens(const LabeledSequence& seq) const {
        const WordSegmentation seg = segment_words(seq, segmenter);
        std::vector<Label> out;
        out.reserve(seq.size());
        for (auto& [piece, piece_seg] : split_for_slots(seq, seg, static_cast<std::size_t>(config.max_len))) {
            const auto slots = insert_mask_slots(piece, piece_seg, vocab, static_cast<std::size_t>(config.max_len),
                                                 config.mask_id);
            const auto preds = predict_slots(params, config, slots);
            const auto labels = project_outputs(std::span<const Label>(preds), piece_seg, piece.size());
            out.insert(out.end(), labels.begin(), labels.end());
        }
        return out;
    }

    /// Punctuated version of `raw`. Marks already present are removed first
    /// (counted in *stripped when given).
    std::string punctuate(std::string_view raw, std::size_t* stripped = nullptr) const {
        std::size_t removed = 0;
        for (char32_t cp : utf8::decode(raw)) removed += marks.is_surface(cp) ? 1 : 0;
        if (removed) log::warn("punctuate: removed ", removed, " existing punctuation marks from input");
        if (stripped) *stripped = removed;
        LabeledSequence seq;
        seq.tokens = tokenize(raw, marks);
        require(!seq.tokens.empty(), ErrorCode::kEmptyInput, "nothing to punctuate");
        seq.labels.assign(seq.tokens.size(), Label::O);
        seq.labels = label_tokens(seq);
        return restore_text(seq, marks, Spacing::kLatin);
    }
};

inline std::string punctuate(const Checkpoint& ckpt, std::string_view raw_text) {
    return Punctuator::from_checkpoint(ckpt).punctuate(raw_text);
}

}  // namespace pmp
