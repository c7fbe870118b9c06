#pragma once

// A prepared dataset: labeled, chunked and split sequences plus the
// vocabulary and word lexicon every stage shares. On disk it is a directory
// holding train/dev/test.jsonl, vocab.txt, lexicon.txt and meta.json.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmp/corpus.hpp"
#include "pmp/error.hpp"
#include "pmp/log.hpp"
#include "pmp/segment.hpp"
#include "pmp/synthetic.hpp"
#include "pmp/vocab.hpp"

namespace pmp {

struct DataOptions {
    std::string marks = "comma,period,colon";
    std::size_t chunk_tokens = 80;
    SplitRatios ratios;
    std::uint64_t seed = 0;
    AdjacentPolicy adjacent = AdjacentPolicy::kKeepFirst;
};

inline void to_json(nlohmann::json& j, const DataOptions& o) {
    j = {{"marks", o.marks},
         {"chunk_tokens", o.chunk_tokens},
         {"split", {o.ratios.train, o.ratios.dev, o.ratios.test}},
         {"seed", o.seed},
         {"strict_adjacent", o.adjacent == AdjacentPolicy::kStrict}};
}

inline void from_json(const nlohmann::json& j, DataOptions& o) {
    const DataOptions d;
    o.marks = j.value("marks", d.marks);
    o.chunk_tokens = j.value("chunk_tokens", d.chunk_tokens);
    if (j.contains("split")) {
        const auto r = j.at("split").get<std::vector<double>>();
        require(r.size() == 3, ErrorCode::kBadRatios, "split needs three ratios (train, dev, test)");
        o.ratios = {r[0], r[1], r[2]};
    }
    validate(o.ratios);
    o.seed = j.value("seed", d.seed);
    o.adjacent = j.value("strict_adjacent", false) ? AdjacentPolicy::kStrict : AdjacentPolicy::kKeepFirst;
}

struct PreparedData {
    MarkSet marks;
    DatasetSplit split;
    Vocabulary vocab;
    LongestMatchSegmenter segmenter;
    DataOptions options;
    StripReport strip;
    std::size_t skipped_documents = 0;  // nothing left after stripping
};

/// Labels every document (one per element), chunks, splits and builds the
/// vocabulary from the training split.
inline PreparedData build_dataset(const std::vector<std::string>& documents, const std::vector<std::string>& lexicon,
                                  const DataOptions& options) {
    PreparedData data;
    data.options = options;
    data.marks = MarkSet::parse(options.marks);
    std::vector<LabeledSequence> seqs;
    for (const auto& doc : documents) {
        if (doc.find_first_not_of(" \t\r\n") == std::string::npos) continue;
        LabeledSequence seq;
        try {
            seq = strip_and_label(doc, data.marks, options.adjacent, &data.strip);
        } catch (const Error& e) {
            if (e.code() != ErrorCode::kEmptyAfterStrip) throw;
            ++data.skipped_documents;
            continue;
        }
        for (auto& piece : chunk_sequence(seq, options.chunk_tokens, data.marks)) seqs.push_back(std::move(piece));
    }
    require(!seqs.empty(), ErrorCode::kEmptyInput, "no usable documents in the corpus");
    if (data.strip.dropped_adjacent || data.strip.dropped_leading)
        log::warn("build-corpus: dropped ", data.strip.dropped_adjacent, " adjacent and ", data.strip.dropped_leading,
                  " leading marks");
    if (data.skipped_documents) log::warn("build-corpus: skipped ", data.skipped_documents, " mark-only documents");
    data.split = split_corpus(std::move(seqs), options.ratios, options.seed);
    data.vocab = Vocabulary::build(data.split.train);
    for (const auto& w : lexicon) data.segmenter.add(w);
    return data;
}

/// Synthetic-grammar documents turned into a dataset in one step.
inline PreparedData build_synthetic_dataset(const GrammarConfig& grammar, std::size_t sentences,
                                            std::uint64_t corpus_seed, const DataOptions& options) {
    const SyntheticCorpus corpus = make_synthetic_corpus(grammar, sentences, corpus_seed);
    return build_dataset(corpus.documents, corpus.lexicon, options);
}

inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorCode::kIo, "cannot read " + path.string());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(std::move(line));
    }
    return lines;
}

inline void save_dataset(const std::filesystem::path& dir, const PreparedData& data) {
    std::filesystem::create_directories(dir);
    write_jsonl(dir / "train.jsonl", data.split.train, data.marks);
    write_jsonl(dir / "dev.jsonl", data.split.dev, data.marks);
    write_jsonl(dir / "test.jsonl", data.split.test, data.marks);
    data.vocab.save(dir / "vocab.txt");
    data.segmenter.save(dir / "lexicon.txt");
    const CorpusStats stats = corpus_stats(data.split, data.marks);
    nlohmann::json meta = {{"options", data.options},
                           {"marks", data.marks.to_csv()},
                           {"sizes", {data.split.train.size(), data.split.dev.size(), data.split.test.size()}},
                           {"counts", stats.counts},
                           {"dropped_adjacent", data.strip.dropped_adjacent},
                           {"dropped_leading", data.strip.dropped_leading},
                           {"skipped_documents", data.skipped_documents}};
    std::ofstream out(dir / "meta.json", std::ios::binary);
    require(static_cast<bool>(out), ErrorCode::kIo, "cannot write meta.json in " + dir.string());
    out << meta.dump(2) << '\n';
    std::ofstream tsv(dir / "stats.tsv", std::ios::binary);
    tsv << stats.to_tsv();
}

inline PreparedData load_dataset(const std::filesystem::path& dir) {
    std::ifstream in(dir / "meta.json", std::ios::binary);
    require(static_cast<bool>(in), ErrorCode::kIo, "no dataset metadata in " + dir.string());
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::kFormat, "bad meta.json in " + dir.string() + ": " + e.what());
    }
    PreparedData data;
    data.options = meta.at("options").get<DataOptions>();
    data.marks = MarkSet::parse(meta.at("marks").get<std::string>());
    data.split.train = read_jsonl(dir / "train.jsonl", data.marks);
    data.split.dev = read_jsonl(dir / "dev.jsonl", data.marks);
    data.split.test = read_jsonl(dir / "test.jsonl", data.marks);
    data.split.seed = data.options.seed;
    data.split.ratios = data.options.ratios;
    data.vocab = Vocabulary::load(dir / "vocab.txt");
    if (std::filesystem::exists(dir / "lexicon.txt")) data.segmenter = LongestMatchSegmenter::load(dir / "lexicon.txt");
    return data;
}

}  // namespace pmp
