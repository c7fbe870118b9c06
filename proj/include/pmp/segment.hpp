#pragma once

#include <algorithm>
#include <concepts>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "pmp/corpus.hpp"
#include "pmp/error.hpp"
#include "pmp/utf8.hpp"

namespace pmp {

/// Word boundaries over a token sequence as half-open [start, end) ranges.
struct WordSegmentation {
    std::vector<std::pair<std::size_t, std::size_t>> groups;

    std::size_t word_count() const { return groups.size(); }

    /// True when the groups are ordered, non-empty and exactly cover [0, n).
    bool tiles(std::size_t n) const {
        std::size_t cursor = 0;
        for (const auto& [start, end] : groups) {
            if (start != cursor || end <= start) return false;
            cursor = end;
        }
        return cursor == n;
    }

    /// Index of the last token of every word.
    std::vector<std::size_t> word_ends() const {
        std::vector<std::size_t> ends;
        ends.reserve(groups.size());
        for (const auto& g : groups) ends.push_back(g.second - 1);
        return ends;
    }

    static WordSegmentation single_tokens(std::size_t n) {
        WordSegmentation seg;
        for (std::size_t i = 0; i < n; ++i) seg.groups.emplace_back(i, i + 1);
        return seg;
    }

    friend bool operator==(const WordSegmentation&, const WordSegmentation&) = default;
};

template <class S>
concept WordSegmenter = requires(const S& s, std::span<const std::string> tokens) {
    { s.segment(tokens) } -> std::same_as<WordSegmentation>;
};

/// Dictionary-based greedy longest match. At every position the longest run
/// of tokens whose concatenation is a lexicon entry becomes one word; if no
/// entry matches, the single token is a word.
class LongestMatchSegmenter {
public:
    LongestMatchSegmenter() = default;

    explicit LongestMatchSegmenter(std::vector<std::string> words) {
        for (auto& w : words) add(std::move(w));
    }

    void add(std::string word) {
        if (word.empty()) return;
        max_chars_ = std::max(max_chars_, utf8::decode(word).size());
        lexicon_.insert(std::move(word));
    }

    std::size_t size() const { return lexicon_.size(); }

    std::vector<std::string> words() const {
        std::vector<std::string> out(lexicon_.begin(), lexicon_.end());
        std::sort(out.begin(), out.end());
        return out;
    }

    WordSegmentation segment(std::span<const std::string> tokens) const {
        WordSegmentation seg;
        const std::size_t n = tokens.size();
        std::size_t i = 0;
        while (i < n) {
            std::size_t best = i + 1;
            if (!lexicon_.empty()) {
                // Every token holds at least one character, so a lexicon
                // word spans at most max_chars_ tokens.
                const std::size_t limit = std::min(n, i + max_chars_);
                std::string joined = tokens[i];
                for (std::size_t j = i + 1; j < limit; ++j) {
                    joined += tokens[j];
                    if (lexicon_.contains(joined)) best = j + 1;
                }
            }
            seg.groups.emplace_back(i, best);
            i = best;
        }
        return seg;
    }

    /// One word per line; blank lines and surrounding whitespace ignored.
    static LongestMatchSegmenter load(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        require(static_cast<bool>(in), ErrorCode::kIo, "cannot read lexicon " + path.string());
        LongestMatchSegmenter seg;
        std::string line;
        while (std::getline(in, line)) {
            line.erase(0, line.find_first_not_of(" \t\r"));
            line.erase(line.find_last_not_of(" \t\r") + 1);
            if (!line.empty()) seg.add(line);
        }
        return seg;
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary);
        require(static_cast<bool>(out), ErrorCode::kIo, "cannot write lexicon " + path.string());
        for (const auto& w : words()) out << w << '\n';
    }

private:
    std::unordered_set<std::string> lexicon_;
    std::size_t max_chars_ = 0;
};

static_assert(WordSegmenter<LongestMatchSegmenter>);

template <WordSegmenter S>
WordSegmentation segment_words(const LabeledSequence& seq, const S& segmenter) {
    require(!seq.empty(), ErrorCode::kEmptyInput, "cannot segment an empty sequence");
    WordSegmentation seg = segmenter.segment(std::span<const std::string>(seq.tokens));
    require(seg.tiles(seq.size()), ErrorCode::kFormat, "segmenter output does not tile the sequence");
    return seg;
}

}  // namespace pmp
