#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "pmp/corpus.hpp"
#include "pmp/error.hpp"

namespace pmp {

/// Fixed ids of the special tokens; every vocabulary starts with them.
struct SpecialTokens {
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kCls = 2;
    static constexpr int kSep = 3;
    static constexpr int kMask = 4;
    static constexpr int kCount = 5;
};

class Vocabulary {
public:
    Vocabulary() : tokens_{"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"} { reindex(); }

    /// Specials followed by every distinct token, sorted for determinism.
    static Vocabulary build(const std::vector<LabeledSequence>& seqs) {
        std::vector<std::string> seen;
        std::unordered_map<std::string, bool> have;
        for (const auto& s : seqs)
            for (const auto& t : s.tokens)
                if (have.emplace(t, true).second) seen.push_back(t);
        std::sort(seen.begin(), seen.end());
        Vocabulary v;
        for (auto& t : seen) v.tokens_.push_back(std::move(t));
        v.reindex();
        return v;
    }

    std::size_t size() const { return tokens_.size(); }

    int id(const std::string& token) const {
        auto it = index_.find(token);
        return it == index_.end() ? SpecialTokens::kUnk : it->second;
    }

    const std::string& token(int id) const {
        require(id >= 0 && static_cast<std::size_t>(id) < tokens_.size(), ErrorCode::kIdOutOfRange,
                "token id " + std::to_string(id));
        return tokens_[static_cast<std::size_t>(id)];
    }

    std::vector<int> encode(const std::vector<std::string>& tokens) const {
        std::vector<int> ids;
        ids.reserve(tokens.size());
        for (const auto& t : tokens) ids.push_back(id(t));
        return ids;
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary);
        require(static_cast<bool>(out), ErrorCode::kIo, "cannot write " + path.string());
        for (const auto& t : tokens_) out << t << '\n';
    }

    static Vocabulary load(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        require(static_cast<bool>(in), ErrorCode::kIo, "cannot read " + path.string());
        Vocabulary v;
        v.tokens_.clear();
        std::string line;
        while (std::getline(in, line)) v.tokens_.push_back(line);
        require(v.tokens_.size() >= SpecialTokens::kCount && v.tokens_[SpecialTokens::kMask] == "[MASK]",
                ErrorCode::kFormat, "vocabulary " + path.string() + " lacks the special tokens");
        v.reindex();
        return v;
    }

    friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

private:
    void reindex() {
        index_.clear();
        for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], static_cast<int>(i));
    }

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

}  // namespace pmp
