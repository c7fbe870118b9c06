#pragma once

// A stochastic sentence grammar whose punctuation is a deterministic function
// of the local tokens, used as a test corpus with a known Bayes-optimal score.
//
//   sentence := [header "："] clause ("，" clause)* "。"
//   clause   := content-word+ (conjunction | closing-word)
//
// Every header word is followed by COLON, every conjunction by COMMA and
// every closing word by PERIOD; nothing else is punctuated. Designated words
// are two characters drawn from a character set disjoint from content words,
// so a longest-match segmenter over the emitted lexicon always places them
// on word boundaries.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmp/corpus.hpp"
#include "pmp/error.hpp"
#include "pmp/rng.hpp"
#include "pmp/utf8.hpp"

namespace pmp {

struct GrammarConfig {
    // Target class frequencies O : COMMA : PERIOD : COLON (any common scale).
    double ratio_o = 4332870;
    double ratio_comma = 434981;
    double ratio_period = 83248;
    double ratio_colon = 33304;

    std::string content_chars = "患者发热咳嗽头痛恶心呕吐腹泻胸闷气短乏力食欲睡眠体重血压";
    std::vector<std::string> header_words{"主诉", "诊断", "病史", "检查"};
    std::vector<std::string> conjunctions{"但是", "并且", "然后", "同时"};
    std::vector<std::string> closing_words{"良好", "稳定", "缓解", "减轻"};
    int content_vocabulary = 40;  // distinct content words
    std::uint64_t lexicon_seed = 2024;
    int clause_jitter = 2;  // content tokens per clause vary by +/- this
    int min_sentences_per_document = 1;
    int max_sentences_per_document = 3;
};

inline void from_json(const nlohmann::json& j, GrammarConfig& g) {
    const GrammarConfig d;
    g.ratio_o = j.value("ratio_o", d.ratio_o);
    g.ratio_comma = j.value("ratio_comma", d.ratio_comma);
    g.ratio_period = j.value("ratio_period", d.ratio_period);
    g.ratio_colon = j.value("ratio_colon", d.ratio_colon);
    if (j.contains("ratios")) {
        const auto r = j.at("ratios").get<std::vector<double>>();
        require(r.size() == 4, ErrorCode::kBadRatios, "grammar ratios need four entries (O, COMMA, PERIOD, COLON)");
        g.ratio_o = r[0];
        g.ratio_comma = r[1];
        g.ratio_period = r[2];
        g.ratio_colon = r[3];
    }
    g.content_vocabulary = j.value("content_vocabulary", d.content_vocabulary);
    g.lexicon_seed = j.value("lexicon_seed", d.lexicon_seed);
    g.clause_jitter = j.value("clause_jitter", d.clause_jitter);
    g.min_sentences_per_document = j.value("min_sentences_per_document", d.min_sentences_per_document);
    g.max_sentences_per_document = j.value("max_sentences_per_document", d.max_sentences_per_document);
}

inline void to_json(nlohmann::json& j, const GrammarConfig& g) {
    j = {{"ratios", {g.ratio_o, g.ratio_comma, g.ratio_period, g.ratio_colon}},
         {"content_vocabulary", g.content_vocabulary},
         {"lexicon_seed", g.lexicon_seed},
         {"clause_jitter", g.clause_jitter},
         {"min_sentences_per_document", g.min_sentences_per_document},
         {"max_sentences_per_document", g.max_sentences_per_document}};
}

struct SyntheticCorpus {
    std::vector<std::string> documents;     // punctuated text, one per line
    std::vector<LabeledSequence> oracle;    // labels as built by the grammar
    std::vector<std::string> lexicon;       // every grammar word
};

/// Per-sentence expectations derived from the target ratios.
struct GrammarPlan {
    double commas_per_sentence = 0;
    double header_probability = 0;
    double content_per_clause = 0;
};

inline GrammarPlan plan_grammar(const GrammarConfig& g) {
    const bool finite = std::isfinite(g.ratio_o + g.ratio_comma + g.ratio_period + g.ratio_colon);
    require(finite && g.ratio_o >= 0 && g.ratio_comma >= 0 && g.ratio_colon >= 0 && g.ratio_period > 0,
            ErrorCode::kBadRatios, "grammar ratios must be non-negative with PERIOD > 0");
    GrammarPlan p;
    p.commas_per_sentence = g.ratio_comma / g.ratio_period;
    p.header_probability = g.ratio_colon / g.ratio_period;
    require(p.header_probability <= 1.0, ErrorCode::kBadRatios, "at most one COLON per PERIOD is supported");
    // Each designated word contributes one O token (its first character).
    const double o_per_sentence = g.ratio_o / g.ratio_period;
    const double clauses = p.commas_per_sentence + 1.0;
    const double content = o_per_sentence - p.header_probability - p.commas_per_sentence - 1.0;
    p.content_per_clause = content / clauses;
    require(p.content_per_clause >= 1.0, ErrorCode::kBadRatios,
            "O ratio too small: every clause needs at least one content token");
    return p;
}

namespace detail {

inline std::vector<std::string> content_words(const GrammarConfig& g) {
    const auto chars = utf8::decode(g.content_chars);
    require(!chars.empty(), ErrorCode::kConfigMismatch, "grammar needs content characters");
    Rng rng(g.lexicon_seed);
    std::set<std::string> seen;
    std::vector<std::string> words;
    // Single characters guarantee any clause budget can be filled exactly.
    for (int i = 0; i < std::min<int>(6, static_cast<int>(chars.size())); ++i) {
        auto w = utf8::encode(chars[static_cast<std::size_t>(i)]);
        if (seen.insert(w).second) words.push_back(w);
    }
    int guard = 0;
    while (static_cast<int>(words.size()) < g.content_vocabulary && guard++ < 100000) {
        const auto len = 2 + rng.uniform_index(2);
        std::string w;
        for (std::uint64_t k = 0; k < len; ++k) utf8::append(w, chars[rng.uniform_index(chars.size())]);
        if (seen.insert(w).second) words.push_back(w);
    }
    return words;
}

inline void check_disjoint(const GrammarConfig& g) {
    std::set<char32_t> content;
    for (char32_t c : utf8::decode(g.content_chars)) content.insert(c);
    std::set<char32_t> firsts;
    for (const auto* group : {&g.header_words, &g.conjunctions, &g.closing_words}) {
        require(!group->empty(), ErrorCode::kConfigMismatch, "grammar word groups must be non-empty");
        for (const auto& w : *group) {
            const auto cps = utf8::decode(w);
            require(cps.size() == 2, ErrorCode::kConfigMismatch, "designated word '" + w + "' must be two characters");
            for (char32_t c : cps)
                require(!content.contains(c), ErrorCode::kConfigMismatch,
                        "designated word '" + w + "' shares a character with the content set");
            require(firsts.insert(cps[0]).second, ErrorCode::kConfigMismatch,
                    "designated words must start with distinct characters");
        }
    }
}

/// Exactly round(p * n) of the n slots set, at random positions.
inline std::vector<char> spread(std::size_t n, double p, Rng& rng) {
    const auto count = static_cast<std::size_t>(std::llround(p * static_cast<double>(n)));
    std::vector<char> flags(n, 0);
    for (std::size_t i = 0; i < std::min(count, n); ++i) flags[i] = 1;
    rng.shuffle(flags);
    return flags;
}

}  // namespace detail

inline SyntheticCorpus make_synthetic_corpus(const GrammarConfig& g, std::size_t sentences, std::uint64_t seed) {
    require(sentences >= 100, ErrorCode::kConfigMismatch, "synthetic corpus needs at least 100 sentences");
    require(g.min_sentences_per_document >= 1 && g.max_sentences_per_document >= g.min_sentences_per_document,
            ErrorCode::kConfigMismatch, "bad sentences-per-document range");
    const GrammarPlan plan = plan_grammar(g);
    detail::check_disjoint(g);
    const MarkSet marks = MarkSet::fine_tune_default();
    const Label comma = *marks.from_name("COMMA");
    const Label period = *marks.from_name("PERIOD");
    const Label colon = *marks.from_name("COLON");

    SyntheticCorpus corpus;
    const auto content = detail::content_words(g);
    corpus.lexicon = content;
    for (const auto* group : {&g.header_words, &g.conjunctions, &g.closing_words})
        corpus.lexicon.insert(corpus.lexicon.end(), group->begin(), group->end());

    Rng rng(derive_seed(seed, 0x6A33));
    const auto base_commas = static_cast<int>(std::floor(plan.commas_per_sentence));
    const auto extra_comma = detail::spread(sentences, plan.commas_per_sentence - base_commas, rng);
    const auto header = detail::spread(sentences, plan.header_probability, rng);
    const double per_clause = plan.content_per_clause;
    const auto base_content = static_cast<int>(std::floor(per_clause));

    std::string text;
    LabeledSequence seq;
    auto emit_word = [&](const std::string& word, Label last) {
        text += word;
        const auto cps = utf8::decode(word);
        for (std::size_t i = 0; i < cps.size(); ++i) {
            seq.tokens.push_back(utf8::encode(cps[i]));
            seq.labels.push_back(i + 1 == cps.size() ? last : Label::O);
        }
        if (last != Label::O) utf8::append(text, marks.surface(last));
    };
    auto pick = [&](const std::vector<std::string>& words) { return words[rng.uniform_index(words.size())]; };

    std::size_t in_document = 0;
    std::size_t document_target = 0;
    for (std::size_t s = 0; s < sentences; ++s) {
        if (in_document == 0) {
            document_target = static_cast<std::size_t>(g.min_sentences_per_document) +
                              rng.uniform_index(static_cast<std::uint64_t>(g.max_sentences_per_document -
                                                                           g.min_sentences_per_document + 1));
        }
        if (header[s]) emit_word(pick(g.header_words), colon);
        const int clauses = base_commas + extra_comma[s] + 1;
        for (int c = 0; c < clauses; ++c) {
            int budget = base_content + (rng.bernoulli(per_clause - base_content) ? 1 : 0);
            if (g.clause_jitter > 0)
                budget += static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(2 * g.clause_jitter + 1))) -
                          g.clause_jitter;
            budget = std::max(budget, 1);
            while (budget > 0) {
                std::string w = pick(content);
                while (static_cast<int>(utf8::decode(w).size()) > budget) w = pick(content);
                budget -= static_cast<int>(utf8::decode(w).size());
                emit_word(w, Label::O);
            }
            const bool last = c + 1 == clauses;
            emit_word(pick(last ? g.closing_words : g.conjunctions), last ? period : comma);
        }
        if (++in_document == document_target || s + 1 == sentences) {
            corpus.documents.push_back(std::move(text));
            corpus.oracle.push_back(std::move(seq));
            text.clear();
            seq = {};
            in_document = 0;
        }
    }
    return corpus;
}

}  // namespace pmp
