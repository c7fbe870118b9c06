#pragma once

// Punctuation-mark prediction pre-training: every selected position is
// replaced by [MASK] and the model predicts the punctuation class that
// followed the hidden token, under a CE + supervised-contrastive objective.

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmp/corpus.hpp"
#include "pmp/error.hpp"
#include "pmp/log.hpp"
#include "pmp/losses.hpp"
#include "pmp/model.hpp"
#include "pmp/optim.hpp"
#include "pmp/rng.hpp"
#include "pmp/vocab.hpp"

namespace pmp {

/// Token ids and class ids of one LabeledSequence.
struct EncodedSequence {
    std::vector<int> ids;
    std::vector<int> labels;

    std::size_t size() const { return ids.size(); }
};

inline EncodedSequence encode_sequence(const LabeledSequence& seq, const Vocabulary& vocab) {
    EncodedSequence e;
    e.ids = vocab.encode(seq.tokens);
    e.labels.reserve(seq.labels.size());
    for (Label l : seq.labels) e.labels.push_back(index(l));
    return e;
}

inline std::vector<EncodedSequence> encode_corpus(const std::vector<LabeledSequence>& seqs, const Vocabulary& vocab) {
    std::vector<EncodedSequence> out;
    out.reserve(seqs.size());
    for (const auto& s : seqs) out.push_back(encode_sequence(s, vocab));
    return out;
}

struct MaskingOptions {
    double ratio = 0.15;
    /// Draw positions with non-O positions up-weighted to match the O mass.
    bool balanced = false;
    /// Pad input_ids with [PAD] to this length (0 = no padding).
    std::size_t pad_to = 0;
};

/// Positions to mask for an effective (non-padding) length n: floor(n * ratio).
inline std::size_t mask_count(std::size_t n, double ratio = 0.15) {
    // The epsilon keeps exact products such as 20 * 0.15 from flooring down.
    return static_cast<std::size_t>(std::floor(static_cast<double>(n) * ratio + 1e-9));
}

/// Shortest sequence that still yields one masked position.
inline std::size_t min_maskable_length(double ratio = 0.15) {
    std::size_t n = 1;
    while (mask_count(n, ratio) == 0) ++n;
    return n;
}

struct MaskedExample {
    std::vector<int> input_ids;
    std::vector<std::size_t> mask_positions;
    std::vector<int> mark_labels;
    AttentionMask attention;
};

inline MaskedExample make_masked_example(const EncodedSequence& seq, int mask_id, const MaskingOptions& options,
                                         Rng& rng) {
    const std::size_t n = seq.size();
    require(seq.labels.size() == n, ErrorCode::kLengthMismatch, "ids and labels differ in length");
    const std::size_t k = mask_count(n, options.ratio);
    require(k >= 1, ErrorCode::kTooShort,
            "sequence of " + std::to_string(n) + " tokens is too short to mask (need " +
                std::to_string(min_maskable_length(options.ratio)) + ")");

    MaskedExample ex;
    if (!options.balanced) {
        ex.mask_positions = rng.sample_without_replacement(n, k);
    } else {
        // Weighted sampling without replacement (Efraimidis-Spirakis keys).
        std::size_t marked = 0;
        for (int l : seq.labels) marked += l != 0 ? 1 : 0;
        const double boost = marked == 0 ? 1.0 : std::max(1.0, static_cast<double>(n - marked) / marked);
        std::vector<std::pair<double, std::size_t>> keys(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double w = seq.labels[i] != 0 ? boost : 1.0;
            double u = rng.uniform();
            while (u <= 0.0) u = rng.uniform();
            keys[i] = {std::log(u) / w, i};
        }
        std::partial_sort(keys.begin(), keys.begin() + static_cast<std::ptrdiff_t>(k), keys.end(),
                          [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
        for (std::size_t i = 0; i < k; ++i) ex.mask_positions.push_back(keys[i].second);
    }
    std::sort(ex.mask_positions.begin(), ex.mask_positions.end());

    const std::size_t length = std::max(n, options.pad_to);
    ex.input_ids = seq.ids;
    ex.input_ids.resize(length, SpecialTokens::kPad);
    ex.attention = AttentionMask::prefix(n, length);
    for (std::size_t p : ex.mask_positions) {
        ex.input_ids[p] = mask_id;
        ex.mark_labels.push_back(seq.labels[p]);
    }
    return ex;
}

inline MaskedExample make_masked_example(const LabeledSequence& seq, const Vocabulary& vocab,
                                         const MaskingOptions& options, Rng& rng) {
    return make_masked_example(encode_sequence(seq, vocab), SpecialTokens::kMask, options, rng);
}

struct PretrainConfig {
    double lambda = 0.1;
    double tau = 0.07;
    double lr = 4e-4;
    int batch_size = 8;
    int steps = 2000;
    std::uint64_t seed = 0;
    double warmup_fraction = 0.1;
    double weight_decay = 0.01;
    double max_grad_norm = 1.0;
    double mask_ratio = 0.15;
    bool balanced_masking = false;
    bool scl_include_anchor = false;
    int checkpoint_every = 0;  // 0: only the final state
    std::string preset = "teacher-desk";

    void validate() const {
        require(lambda >= 0 && lambda <= 1, ErrorCode::kConfigMismatch, "lambda must lie in [0, 1]");
        require(tau > 0, ErrorCode::kConfigMismatch, "tau must be positive");
        require(lr > 0 && batch_size > 0 && steps >= 0, ErrorCode::kConfigMismatch,
                "lr and batch_size must be positive, steps non-negative");
        require(mask_ratio > 0 && mask_ratio <= 1, ErrorCode::kConfigMismatch, "mask ratio must lie in (0, 1]");
        require(max_grad_norm >= 0 && weight_decay >= 0, ErrorCode::kConfigMismatch, "negative regularizer");
    }
};

inline void to_json(nlohmann::json& j, const PretrainConfig& c) {
    j = {{"lambda", c.lambda},
         {"tau", c.tau},
         {"lr", c.lr},
         {"batch_size", c.batch_size},
         {"steps", c.steps},
         {"seed", c.seed},
         {"warmup_fraction", c.warmup_fraction},
         {"weight_decay", c.weight_decay},
         {"max_grad_norm", c.max_grad_norm},
         {"mask_ratio", c.mask_ratio},
         {"balanced_masking", c.balanced_masking},
         {"scl_include_anchor", c.scl_include_anchor},
         {"checkpoint_every", c.checkpoint_every},
         {"preset", c.preset}};
}

inline void from_json(const nlohmann::json& j, PretrainConfig& c) {
    const PretrainConfig d;
    c.lambda = j.value("lambda", d.lambda);
    c.tau = j.value("tau", d.tau);
    c.lr = j.value("lr", d.lr);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.steps = j.value("steps", d.steps);
    c.seed = j.value("seed", d.seed);
    c.warmup_fraction = j.value("warmup_fraction", d.warmup_fraction);
    c.weight_decay = j.value("weight_decay", d.weight_decay);
    c.max_grad_norm = j.value("max_grad_norm", d.max_grad_norm);
    c.mask_ratio = j.value("mask_ratio", d.mask_ratio);
    c.balanced_masking = j.value("balanced_masking", d.balanced_masking);
    c.scl_include_anchor = j.value("scl_include_anchor", d.scl_include_anchor);
    c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
    c.preset = j.value("preset", j.value("model", d.preset));
    c.validate();
}

/// Epoch-wise shuffled cursor over sequence indices.
class BatchSampler {
public:
    BatchSampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(derive_seed(seed, 0xBA7C)) {
        require(n > 0, ErrorCode::kEmptyBatch, "cannot sample from an empty corpus");
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        rng_.shuffle(order_);
    }

    std::vector<std::size_t> next(std::size_t batch) {
        std::vector<std::size_t> out;
        out.reserve(batch);
        while (out.size() < batch) {
            if (cursor_ == order_.size()) {
                rng_.shuffle(order_);
                cursor_ = 0;
            }
            out.push_back(order_[cursor_++]);
        }
        return out;
    }

private:
    std::vector<std::size_t> order_;
    Rng rng_;
    std::size_t cursor_ = 0;
};

/// The masked batch fed to the model at one optimizer step; each example
/// draws from its own derived seed.
inline std::vector<MaskedExample> make_masked_batch(const std::vector<EncodedSequence>& corpus, BatchSampler& sampler,
                                                    int batch_size, std::uint64_t seed, long step, int mask_id,
                                                    const MaskingOptions& options) {
    std::vector<MaskedExample> batch;
    for (std::size_t idx : sampler.next(static_cast<std::size_t>(batch_size))) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(step) * 1000003ULL + idx));
        batch.push_back(make_masked_example(corpus[idx], mask_id, options, rng));
    }
    return batch;
}

/// Forward state of a masked batch: per-example traces plus the pooled
/// [MASK] representations (rows in example order) and their head logits.
template <class S>
struct MaskedBatchForward {
    std::vector<EncoderTrace<S>> traces;
    std::vector<std::size_t> offsets;  // first pooled row of each example
    Matrix<S> reps;
    Matrix<S> logits;
    std::vector<int> labels;
};

template <class S>
MaskedBatchForward<S> forward_masked_batch(const EncoderParams<S>& params, const ModelConfig& config,
                                           const std::vector<MaskedExample>& batch, bool keep_caches) {
    MaskedBatchForward<S> f;
    std::size_t total = 0;
    for (const auto& ex : batch) total += ex.mask_positions.size();
    f.reps.resize(static_cast<Eigen::Index>(total), config.hidden);
    std::size_t row = 0;
    for (const auto& ex : batch) {
        f.traces.push_back(forward(params, config, std::span<const int>(ex.input_ids), ex.attention, keep_caches));
        f.offsets.push_back(row);
        const auto& out = f.traces.back().output();
        for (std::size_t p : ex.mask_positions)
            f.reps.row(static_cast<Eigen::Index>(row++)) = out.row(static_cast<Eigen::Index>(p));
        f.labels.insert(f.labels.end(), ex.mark_labels.begin(), ex.mark_labels.end());
    }
    f.logits = pmp_logits(f.reps, params);
    return f;
}

struct StepStats {
    double loss = 0;
    double ce = 0;
    double scl = 0;
    double accuracy = 0;  // argmax accuracy at the masked positions
    double grad_norm = 0;
    std::size_t masked = 0;
};

inline void to_json(nlohmann::json& j, const StepStats& s) {
    j = {{"loss", s.loss}, {"ce", s.ce}, {"scl", s.scl}, {"accuracy", s.accuracy}, {"grad_norm", s.grad_norm},
         {"masked", s.masked}};
}

template <class S>
double masked_accuracy(const Matrix<S>& logits, std::span<const int> labels) {
    if (labels.empty()) return 0.0;
    std::size_t hits = 0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        Eigen::Index arg = 0;
        logits.row(i).maxCoeff(&arg);
        hits += arg == labels[static_cast<std::size_t>(i)] ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

/// L_PMP on a forwarded batch, with the gradient with respect to the logits
/// (CE part) and the pooled representations (SCL part) kept separate so the
/// caller can route them through the head.
template <class S>
struct PmpTerms {
    S ce{};
    S scl{};
    S total{};
    Matrix<S> d_logits;
    Matrix<S> d_reps;
};

template <class S>
PmpTerms<S> pmp_terms(const MaskedBatchForward<S>& f, double lambda, double tau, bool include_anchor) {
    PmpTerms<S> t;
    const auto lam = static_cast<S>(lambda);
    auto ce = ce_loss(f.logits, std::span<const int>(f.labels));
    t.ce = ce.value;
    t.d_logits = ce.grad * (S(1) - lam);
    t.d_reps = Matrix<S>::Zero(f.reps.rows(), f.reps.cols());
    if (f.reps.rows() >= 2) {
        auto scl = scl_loss(f.reps, std::span<const int>(f.labels), static_cast<S>(tau),
                            SclOptions{.include_anchor_in_denominator = include_anchor});
        t.scl = scl.value;
        if (lam != S(0)) t.d_reps = scl.grad * lam;
    }
    t.total = pmp_loss(t.ce, t.scl, lam);
    return t;
}

/// Sends pooled-representation gradients back to each example's final
/// hidden layer; returns per-example gradient slots ready for backward().
template <class S>
std::vector<std::vector<Matrix<S>>> route_rep_grads(const MaskedBatchForward<S>& f,
                                                    const std::vector<MaskedExample>& batch, const Matrix<S>& d_reps,
                                                    int hidden) {
    std::vector<std::vector<Matrix<S>>> slots(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const std::size_t layers = f.traces[b].hidden.size();
        slots[b].resize(layers);
        Matrix<S>& top = slots[b][layers - 1];
        top = Matrix<S>::Zero(static_cast<Eigen::Index>(batch[b].input_ids.size()), hidden);
        for (std::size_t i = 0; i < batch[b].mask_positions.size(); ++i)
            top.row(static_cast<Eigen::Index>(batch[b].mask_positions[i])) +=
                d_reps.row(static_cast<Eigen::Index>(f.offsets[b] + i));
    }
    return slots;
}

/// Loss (1 - lambda) CE + lambda SCL on one masked batch. When `grads` is
/// given, the gradient of that loss is accumulated into it.
template <class S>
StepStats pmp_objective(const EncoderParams<S>& params, const ModelConfig& config,
                        const std::vector<MaskedExample>& batch, const PretrainConfig& pc, EncoderParams<S>* grads) {
    auto fwd = forward_masked_batch(params, config, batch, grads != nullptr);
    auto terms = pmp_terms(fwd, pc.lambda, pc.tau, pc.scl_include_anchor);
    if (grads) {
        Matrix<S> d_reps = pmp_head_backward(fwd.reps, terms.d_logits, params, *grads);
        d_reps += terms.d_reps;
        auto slots = route_rep_grads(fwd, batch, d_reps, config.hidden);
        for (std::size_t b = 0; b < batch.size(); ++b) backward(params, config, fwd.traces[b], slots[b], *grads);
    }
    StepStats stats;
    stats.loss = static_cast<double>(terms.total);
    stats.ce = static_cast<double>(terms.ce);
    stats.scl = static_cast<double>(terms.scl);
    stats.accuracy = masked_accuracy(fwd.logits, std::span<const int>(fwd.labels));
    stats.masked = fwd.labels.size();
    return stats;
}

template <class S>
struct PretrainResult {
    EncoderParams<S> params;
    std::vector<StepStats> history;
};

template <class S>
PretrainResult<S> pretrain(const std::vector<EncodedSequence>& corpus, EncoderParams<S> params,
                           const ModelConfig& config, const PretrainConfig& pc,
                           const std::function<void(long, const EncoderParams<S>&)>& on_checkpoint = {}) {
    pc.validate();
    check_shapes(params, config);
    require(!corpus.empty(), ErrorCode::kEmptyBatch, "pre-training corpus is empty");
    const std::size_t min_len = min_maskable_length(pc.mask_ratio);
    std::vector<EncodedSequence> usable;
    for (const auto& s : corpus)
        if (s.size() >= min_len && s.size() <= static_cast<std::size_t>(config.max_len)) usable.push_back(s);
    require(!usable.empty(), ErrorCode::kTooShort, "no sequence is long enough to mask");
    if (usable.size() < corpus.size())
        log::warn("pretrain: skipped ", corpus.size() - usable.size(), " sequences outside [", min_len, ", ",
                  config.max_len, "] tokens");

    PretrainResult<S> result;
    EncoderParams<S> grads = zeros_like(params);
    ParamRefs<S> refs;
    refs.add(params, grads);
    AdamW<S> optimizer({.lr = pc.lr, .weight_decay = pc.weight_decay});
    const LinearSchedule schedule{pc.steps, pc.warmup_fraction};
    BatchSampler sampler(usable.size(), pc.seed);
    const MaskingOptions masking{.ratio = pc.mask_ratio, .balanced = pc.balanced_masking};

    for (long step = 0; step < pc.steps; ++step) {
        const auto batch = make_masked_batch(usable, sampler, pc.batch_size, pc.seed, step, config.mask_id, masking);
        refs.zero_grads();
        StepStats stats = pmp_objective(params, config, batch, pc, &grads);
        stats.grad_norm = clip_grad_norm(refs.grads, pc.max_grad_norm);
        optimizer.step(refs, pc.lr * schedule.factor(step));
        result.history.push_back(stats);

        if ((step + 1) % 100 == 0 || step + 1 == pc.steps)
            log::debug("pretrain step ", step + 1, "/", pc.steps, " loss ", stats.loss, " acc ", stats.accuracy);
        if (on_checkpoint && pc.checkpoint_every > 0 && (step + 1) % pc.checkpoint_every == 0)
            on_checkpoint(step + 1, params);
    }
    result.params = std::move(params);
    return result;
}

/// Masked-position accuracy of a model on freshly masked copies of `corpus`.
template <class S>
double evaluate_masked_accuracy(const EncoderParams<S>& params, const ModelConfig& config,
                                const std::vector<EncodedSequence>& corpus, std::uint64_t seed, double ratio = 0.15) {
    std::size_t hits = 0, total = 0;
    const std::size_t min_len = min_maskable_length(ratio);
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        if (corpus[i].size() < min_len || corpus[i].size() > static_cast<std::size_t>(config.max_len)) continue;
        Rng rng(derive_seed(seed, i));
        const auto ex = make_masked_example(corpus[i], config.mask_id, {.ratio = ratio}, rng);
        const auto trace = forward(params, config, std::span<const int>(ex.input_ids), ex.attention, false);
        const auto logits = pmp_logits(gather_rows(trace.output(), std::span<const std::size_t>(ex.mask_positions)), params);
        hits += static_cast<std::size_t>(std::llround(masked_accuracy(logits, std::span<const int>(ex.mark_labels)) *
                                                      static_cast<double>(ex.mark_labels.size())));
        total += ex.mark_labels.size();
    }
    return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

}  // namespace pmp
