#pragma once

// Punctuated text <-> labeled token sequences, dataset splits and per-class
// statistics.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmp/error.hpp"
#include "pmp/rng.hpp"
#include "pmp/utf8.hpp"

namespace pmp {

/// Class id of a punctuation mark inside a MarkSet. O (no punctuation) is
/// always id 0; the active marks follow in set order.
enum class Label : std::uint8_t { O = 0 };

constexpr int index(Label label) { return static_cast<int>(label); }
constexpr Label label_at(int i) { return static_cast<Label>(static_cast<std::uint8_t>(i)); }

struct MarkInfo {
    std::string name;  // canonical upper-case class name, e.g. "COMMA"
    char32_t surface;  // the one character this class stands for
};

/// The active punctuation classes. Each non-O class maps to exactly one
/// surface character and back.
class MarkSet {
public:
    MarkSet() : MarkSet(std::vector<MarkInfo>{}) {}

    explicit MarkSet(std::vector<MarkInfo> marks) : marks_(std::move(marks)) {
        for (std::size_t i = 0; i < marks_.size(); ++i) {
            require(!marks_[i].name.empty() && marks_[i].name != "O", ErrorCode::kUnknownMark,
                    "mark names must be non-empty and differ from O");
            for (std::size_t j = 0; j < i; ++j) {
                require(marks_[j].name != marks_[i].name, ErrorCode::kUnknownMark,
                        "duplicate mark " + marks_[i].name);
                require(marks_[j].surface != marks_[i].surface, ErrorCode::kUnknownMark,
                        "marks " + marks_[j].name + " and " + marks_[i].name + " share a surface character");
            }
        }
        require(marks_.size() < 255, ErrorCode::kUnknownMark, "too many marks");
    }

    /// {O, COMMA, PERIOD, COLON}
    static MarkSet fine_tune_default() { return parse("comma,period,colon"); }

    /// The fine-tune set plus QUESTION.
    static MarkSet pretrain_default() { return parse("comma,period,colon,question"); }

    static std::optional<char32_t> builtin_surface(std::string_view upper_name) {
        if (upper_name == "COMMA") return U'，';
        if (upper_name == "PERIOD") return U'。';
        if (upper_name == "COLON") return U'：';
        if (upper_name == "QUESTION") return U'？';
        if (upper_name == "EXCLAMATION") return U'！';
        if (upper_name == "SEMICOLON") return U'；';
        if (upper_name == "ENUMERATION") return U'、';
        return std::nullopt;
    }

    /// Comma-separated list of names; built-in names resolve to their
    /// full-width character, anything else must be written `name=char`.
    static MarkSet parse(std::string_view csv) {
        std::vector<MarkInfo> marks;
        std::size_t start = 0;
        while (start <= csv.size()) {
            std::size_t end = csv.find(',', start);
            if (end == std::string_view::npos) end = csv.size();
            std::string item(csv.substr(start, end - start));
            start = end + 1;
            item.erase(0, item.find_first_not_of(" \t"));
            item.erase(item.find_last_not_of(" \t") + 1);
            if (item.empty()) {
                if (end == csv.size()) break;
                continue;
            }
            std::string name = item;
            std::optional<char32_t> surface;
            if (auto eq = item.find('='); eq != std::string::npos) {
                name = item.substr(0, eq);
                auto cps = utf8::decode(item.substr(eq + 1));
                require(cps.size() == 1, ErrorCode::kUnknownMark, "mark '" + item + "' needs exactly one character");
                surface = cps[0];
            }
            for (auto& c : name) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
            if (!surface) surface = builtin_surface(name);
            require(surface.has_value(), ErrorCode::kUnknownMark, "unknown mark '" + name + "'");
            marks.push_back({name, *surface});
            if (end == csv.size()) break;
        }
        return MarkSet(std::move(marks));
    }

    /// Number of classes, O included.
    std::size_t size() const { return marks_.size() + 1; }
    std::size_t mark_count() const { return marks_.size(); }

    std::string_view name(Label label) const {
        const int i = index(label);
        require(i >= 0 && i < static_cast<int>(size()), ErrorCode::kUnknownMark,
                "label id " + std::to_string(i) + " outside mark set");
        return i == 0 ? std::string_view("O") : std::string_view(marks_[i - 1].name);
    }

    char32_t surface(Label label) const {
        const int i = index(label);
        require(i > 0 && i < static_cast<int>(size()), ErrorCode::kUnknownMark,
                "label id " + std::to_string(i) + " has no surface character");
        return marks_[i - 1].surface;
    }

    std::optional<Label> from_name(std::string_view name) const {
        std::string upper(name);
        for (auto& c : upper) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
        if (upper == "O") return Label::O;
        for (std::size_t i = 0; i < marks_.size(); ++i)
            if (marks_[i].name == upper) return label_at(static_cast<int>(i) + 1);
        return std::nullopt;
    }

    std::optional<Label> from_surface(char32_t cp) const {
        for (std::size_t i = 0; i < marks_.size(); ++i)
            if (marks_[i].surface == cp) return label_at(static_cast<int>(i) + 1);
        return std::nullopt;
    }

    bool is_surface(char32_t cp) const { return from_surface(cp).has_value(); }

    bool contains(Label label) const { return index(label) < static_cast<int>(size()); }

    /// Sentence-terminating classes, used as preferred chunk boundaries.
    bool ends_sentence(Label label) const {
        if (label == Label::O || !contains(label)) return false;
        const auto& n = marks_[index(label) - 1].name;
        return n == "PERIOD" || n == "QUESTION" || n == "EXCLAMATION";
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out{"O"};
        for (const auto& m : marks_) out.push_back(m.name);
        return out;
    }

    /// Round-trips through parse().
    std::string to_csv() const {
        std::string out;
        for (const auto& m : marks_) {
            if (!out.empty()) out += ',';
            out += m.name;
            if (builtin_surface(m.name) != m.surface) out += "=" + utf8::encode(m.surface);
        }
        return out;
    }

    const std::vector<MarkInfo>& marks() const { return marks_; }

    friend bool operator==(const MarkSet& a, const MarkSet& b) {
        if (a.marks_.size() != b.marks_.size()) return false;
        for (std::size_t i = 0; i < a.marks_.size(); ++i)
            if (a.marks_[i].name != b.marks_[i].name || a.marks_[i].surface != b.marks_[i].surface) return false;
        return true;
    }

private:
    std::vector<MarkInfo> marks_;
};

/// Punctuation-free tokens; labels[i] is the mark that followed tokens[i].
struct LabeledSequence {
    std::vector<std::string> tokens;
    std::vector<Label> labels;

    std::size_t size() const { return tokens.size(); }
    bool empty() const { return tokens.empty(); }

    friend bool operator==(const LabeledSequence&, const LabeledSequence&) = default;
};

enum class AdjacentPolicy {
    kKeepFirst,  // keep the first mark of a run, drop the rest, count a warning
    kStrict,     // raise kAdjacentMarks
};

struct StripReport {
    std::size_t dropped_adjacent = 0;
    std::size_t dropped_leading = 0;
};

/// Splits text into tokens: one per CJK code point, otherwise maximal runs
/// of non-space, non-CJK characters. Mark characters of `marks` are never
/// part of a token.
inline std::vector<std::string> tokenize(std::string_view text, const MarkSet& marks) {
    std::vector<std::string> tokens;
    std::string run;
    auto flush = [&] {
        if (!run.empty()) tokens.push_back(std::move(run));
        run.clear();
    };
    for (char32_t cp : utf8::decode(text)) {
        if (utf8::is_space(cp) || marks.is_surface(cp)) {
            flush();
        } else if (utf8::is_cjk(cp)) {
            flush();
            tokens.push_back(utf8::encode(cp));
        } else {
            utf8::append(run, cp);
        }
    }
    flush();
    return tokens;
}

inline LabeledSequence strip_and_label(std::string_view text, const MarkSet& marks,
                                       AdjacentPolicy policy = AdjacentPolicy::kKeepFirst,
                                       StripReport* report = nullptr) {
    LabeledSequence seq;
    std::string run;
    bool last_marked = false;  // the last token already received a mark
    auto push = [&](std::string token) {
        seq.tokens.push_back(std::move(token));
        seq.labels.push_back(Label::O);
        last_marked = false;
    };
    auto flush = [&] {
        if (!run.empty()) push(std::move(run));
        run.clear();
    };
    for (char32_t cp : utf8::decode(text)) {
        if (auto mark = marks.from_surface(cp)) {
            flush();
            if (seq.tokens.empty()) {
                if (report) ++report->dropped_leading;
            } else if (last_marked) {
                require(policy != AdjacentPolicy::kStrict, ErrorCode::kAdjacentMarks,
                        "adjacent punctuation after token " + std::to_string(seq.tokens.size() - 1));
                if (report) ++report->dropped_adjacent;
            } else {
                seq.labels.back() = *mark;
                last_marked = true;
            }
        } else if (utf8::is_space(cp)) {
            flush();
        } else if (utf8::is_cjk(cp)) {
            flush();
            push(utf8::encode(cp));
        } else {
            utf8::append(run, cp);
        }
    }
    flush();
    require(!seq.tokens.empty(), ErrorCode::kEmptyAfterStrip, "no tokens remain after removing punctuation");
    return seq;
}

enum class Spacing {
    kConcatenate,  // tokens joined directly (CJK text)
    kLatin,        // a space between two adjacent non-CJK tokens
};

inline std::string restore_text(const LabeledSequence& seq, const MarkSet& marks,
                                Spacing spacing = Spacing::kConcatenate) {
    require(seq.tokens.size() == seq.labels.size(), ErrorCode::kLengthMismatch, "tokens and labels differ in length");
    std::string out;
    auto cjk_edge = [](const std::string& token, bool front) {
        auto cps = utf8::decode(token);
        return !cps.empty() && utf8::is_cjk(front ? cps.front() : cps.back());
    };
    for (std::size_t i = 0; i < seq.tokens.size(); ++i) {
        require(marks.contains(seq.labels[i]), ErrorCode::kUnknownMark,
                "label id " + std::to_string(index(seq.labels[i])) + " outside the active mark set");
        if (spacing == Spacing::kLatin && i > 0 && !cjk_edge(seq.tokens[i - 1], false) &&
            !cjk_edge(seq.tokens[i], true)) {
            out += ' ';
        }
        out += seq.tokens[i];
        if (seq.labels[i] != Label::O) utf8::append(out, marks.surface(seq.labels[i]));
    }
    return out;
}

/// Cuts a long sequence into pieces of at most `max_tokens`, preferring to
/// cut right after a sentence-ending mark; pieces with no such mark inside
/// the window are hard-split.
inline std::vector<LabeledSequence> chunk_sequence(const LabeledSequence& seq, std::size_t max_tokens,
                                                   const MarkSet& marks) {
    require(max_tokens > 0, ErrorCode::kConfigMismatch, "max_tokens must be positive");
    std::vector<LabeledSequence> out;
    std::size_t start = 0;
    while (start < seq.size()) {
        std::size_t end = std::min(seq.size(), start + max_tokens);
        if (end < seq.size()) {
            for (std::size_t i = end; i > start; --i) {
                if (marks.ends_sentence(seq.labels[i - 1])) {
                    end = i;
                    break;
                }
            }
        }
        LabeledSequence piece;
        piece.tokens.assign(seq.tokens.begin() + start, seq.tokens.begin() + end);
        piece.labels.assign(seq.labels.begin() + start, seq.labels.begin() + end);
        out.push_back(std::move(piece));
        start = end;
    }
    return out;
}

struct SplitRatios {
    double train = 0.8;
    double dev = 0.1;
    double test = 0.1;
};

struct DatasetSplit {
    std::vector<LabeledSequence> train;
    std::vector<LabeledSequence> dev;
    std::vector<LabeledSequence> test;
    std::uint64_t seed = 0;
    SplitRatios ratios;
};

inline void validate(const SplitRatios& r) {
    const bool ok = r.train >= 0 && r.dev >= 0 && r.test >= 0 && std::isfinite(r.train + r.dev + r.test) &&
                    std::abs(r.train + r.dev + r.test - 1.0) <= 1e-9;
    require(ok, ErrorCode::kBadRatios, "split ratios must be non-negative and sum to 1");
}

/// Deterministic shuffle, floor-allocated dev/test sizes, remainder to train.
inline DatasetSplit split_corpus(std::vector<LabeledSequence> sequences, const SplitRatios& ratios,
                                 std::uint64_t seed) {
    validate(ratios);
    Rng rng(derive_seed(seed, 0x5E11));
    rng.shuffle(sequences);
    const double n = static_cast<double>(sequences.size());
    // The epsilon absorbs products like 0.29 * 100 = 28.999999999999996.
    auto floor_count = [&](double r) { return static_cast<std::size_t>(std::floor(r * n + 1e-9)); };
    const std::size_t n_dev = floor_count(ratios.dev);
    const std::size_t n_test = floor_count(ratios.test);
    const std::size_t n_train = sequences.size() - n_dev - n_test;

    DatasetSplit split;
    split.seed = seed;
    split.ratios = ratios;
    auto it = std::make_move_iterator(sequences.begin());
    split.train.assign(it, it + static_cast<std::ptrdiff_t>(n_train));
    split.dev.assign(it + static_cast<std::ptrdiff_t>(n_train),
                     it + static_cast<std::ptrdiff_t>(n_train + n_dev));
    split.test.assign(it + static_cast<std::ptrdiff_t>(n_train + n_dev), std::make_move_iterator(sequences.end()));
    return split;
}

/// Label counts per split (rows train, dev, test) and per class (O first).
struct CorpusStats {
    std::vector<std::string> classes;
    std::array<std::vector<std::size_t>, 3> counts;

    static constexpr std::array<std::string_view, 3> kSplitNames{"Train", "Dev", "Test"};

    std::string to_tsv() const {
        std::ostringstream os;
        os << "Split";
        for (const auto& c : classes) os << '\t' << c;
        os << '\n';
        for (std::size_t s = 0; s < 3; ++s) {
            os << kSplitNames[s];
            for (auto v : counts[s]) os << '\t' << v;
            os << '\n';
        }
        return os.str();
    }
};

inline std::vector<std::size_t> label_counts(const std::vector<LabeledSequence>& seqs, const MarkSet& marks) {
    std::vector<std::size_t> counts(marks.size(), 0);
    for (const auto& s : seqs) {
        for (Label l : s.labels) {
            require(marks.contains(l), ErrorCode::kUnknownMark, "label outside mark set");
            ++counts[static_cast<std::size_t>(index(l))];
        }
    }
    return counts;
}

inline CorpusStats corpus_stats(const DatasetSplit& split, const MarkSet& marks) {
    CorpusStats stats;
    stats.classes = marks.names();
    stats.counts = {label_counts(split.train, marks), label_counts(split.dev, marks), label_counts(split.test, marks)};
    return stats;
}

// ---------------------------------------------------------------------------
// JSON-lines dataset files: {"tokens": [...], "labels": ["O", "COMMA", ...]}

inline nlohmann::json to_json(const LabeledSequence& seq, const MarkSet& marks) {
    nlohmann::json labels = nlohmann::json::array();
    for (Label l : seq.labels) labels.push_back(std::string(marks.name(l)));
    return {{"tokens", seq.tokens}, {"labels", std::move(labels)}};
}

inline LabeledSequence from_json(const nlohmann::json& j, const MarkSet& marks) {
    require(j.is_object() && j.contains("tokens") && j.contains("labels"), ErrorCode::kFormat,
            "sequence record needs 'tokens' and 'labels'");
    LabeledSequence seq;
    seq.tokens = j.at("tokens").get<std::vector<std::string>>();
    for (const auto& name : j.at("labels")) {
        auto label = marks.from_name(name.get<std::string>());
        require(label.has_value(), ErrorCode::kUnknownMark, "unknown label '" + name.get<std::string>() + "'");
        seq.labels.push_back(*label);
    }
    require(seq.tokens.size() == seq.labels.size(), ErrorCode::kLengthMismatch,
            "record has " + std::to_string(seq.tokens.size()) + " tokens but " +
                std::to_string(seq.labels.size()) + " labels");
    for (const auto& t : seq.tokens) {
        for (char32_t cp : utf8::decode(t))
            require(!marks.is_surface(cp), ErrorCode::kFormat, "token '" + t + "' contains a mark character");
    }
    return seq;
}

inline void write_jsonl(const std::filesystem::path& path, const std::vector<LabeledSequence>& seqs,
                        const MarkSet& marks) {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorCode::kIo, "cannot write " + path.string());
    for (const auto& s : seqs) out << to_json(s, marks).dump() << '\n';
    require(static_cast<bool>(out), ErrorCode::kIo, "write failed for " + path.string());
}

inline std::vector<LabeledSequence> read_jsonl(const std::filesystem::path& path, const MarkSet& marks) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorCode::kIo, "cannot read " + path.string());
    std::vector<LabeledSequence> seqs;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            seqs.push_back(from_json(nlohmann::json::parse(line), marks));
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorCode::kFormat, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return seqs;
}

}  // namespace pmp
