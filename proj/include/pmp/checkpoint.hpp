#pragma once

// On-disk checkpoints: a directory holding
//   manifest.json  config, step, mark set, history, free-form extras
//   tensors.bin    named arrays with shape/dtype headers (little-endian)
//   vocab.txt      one token per line, id = line number
//   lexicon.txt    optional word list for the segmenter

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmp/corpus.hpp"
#include "pmp/error.hpp"
#include "pmp/model.hpp"
#include "pmp/segment.hpp"
#include "pmp/vocab.hpp"

namespace pmp {

static_assert(std::endian::native == std::endian::little, "tensor container assumes a little-endian host");

enum class DType : std::uint8_t { kF32 = 1, kF64 = 2 };

/// A 2-D array as stored in the container; data holds raw element bytes.
struct StoredTensor {
    DType dtype = DType::kF32;
    std::uint64_t rows = 0;
    std::uint64_t cols = 0;
    std::vector<char> data;

    template <class S>
    static StoredTensor from(const Matrix<S>& m) {
        StoredTensor t;
        t.dtype = std::is_same_v<S, double> ? DType::kF64 : DType::kF32;
        t.rows = static_cast<std::uint64_t>(m.rows());
        t.cols = static_cast<std::uint64_t>(m.cols());
        t.data.resize(static_cast<std::size_t>(m.size()) * sizeof(S));
        std::memcpy(t.data.data(), m.data(), t.data.size());
        return t;
    }

    template <class S>
    Matrix<S> as() const {
        Matrix<S> m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        if (dtype == DType::kF32) {
            Matrix<float> f(m.rows(), m.cols());
            std::memcpy(f.data(), data.data(), data.size());
            m = f.template cast<S>();
        } else {
            Matrix<double> f(m.rows(), m.cols());
            std::memcpy(f.data(), data.data(), data.size());
            m = f.template cast<S>();
        }
        return m;
    }
};

using TensorMap = std::map<std::string, StoredTensor>;

inline constexpr char kTensorMagic[8] = {'P', 'M', 'P', 'T', 'N', 'S', 'R', '1'};

inline void write_tensors(const std::filesystem::path& path, const std::vector<std::pair<std::string, StoredTensor>>& tensors) {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorCode::kIo, "cannot write " + path.string());
    auto put = [&](const auto& v) { out.write(reinterpret_cast<const char*>(&v), sizeof(v)); };
    out.write(kTensorMagic, sizeof(kTensorMagic));
    put(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        put(static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        put(static_cast<std::uint8_t>(t.dtype));
        put(static_cast<std::uint32_t>(2));
        put(t.rows);
        put(t.cols);
        out.write(t.data.data(), static_cast<std::streamsize>(t.data.size()));
    }
    require(static_cast<bool>(out), ErrorCode::kIo, "write failed for " + path.string());
}

inline TensorMap read_tensors(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorCode::kIo, "cannot read " + path.string());
    auto get = [&](auto& v) {
        in.read(reinterpret_cast<char*>(&v), sizeof(v));
        require(static_cast<bool>(in), ErrorCode::kFormat, "truncated tensor file " + path.string());
    };
    char magic[8];
    in.read(magic, sizeof(magic));
    require(in && std::memcmp(magic, kTensorMagic, sizeof(magic)) == 0, ErrorCode::kFormat,
            path.string() + " is not a tensor container");
    std::uint32_t count = 0;
    get(count);
    TensorMap tensors;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint32_t name_len = 0;
        get(name_len);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        std::uint8_t dtype = 0;
        std::uint32_t ndim = 0;
        StoredTensor t;
        get(dtype);
        get(ndim);
        require(ndim == 2 && (dtype == 1 || dtype == 2), ErrorCode::kFormat, "unsupported tensor header for " + name);
        t.dtype = static_cast<DType>(dtype);
        get(t.rows);
        get(t.cols);
        t.data.resize(static_cast<std::size_t>(t.rows * t.cols) * (dtype == 1 ? 4 : 8));
        in.read(t.data.data(), static_cast<std::streamsize>(t.data.size()));
        require(static_cast<bool>(in), ErrorCode::kFormat, "truncated data for tensor " + name);
        tensors.emplace(std::move(name), std::move(t));
    }
    return tensors;
}

/// Everything needed to resume or run a model.
struct Checkpoint {
    ModelConfig config;
    MarkSet marks;
    Vocabulary vocab;
    EncoderParams<float> params;
    std::int64_t step = 0;
    nlohmann::json history = nlohmann::json::array();
    nlohmann::json extra = nlohmann::json::object();
    std::vector<std::pair<std::string, Matrix<float>>> extra_tensors;
    std::optional<LongestMatchSegmenter> lexicon;
};

inline void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt) {
    std::filesystem::create_directories(dir);
    check_shapes(ckpt.params, ckpt.config);
    std::vector<std::pair<std::string, StoredTensor>> tensors;
    for_each_tensor(ckpt.params,
                    [&](const std::string& name, const Matrix<float>& m) { tensors.emplace_back(name, StoredTensor::from(m)); });
    for (const auto& [name, m] : ckpt.extra_tensors) tensors.emplace_back("extra." + name, StoredTensor::from(m));
    write_tensors(dir / "tensors.bin", tensors);
    ckpt.vocab.save(dir / "vocab.txt");
    if (ckpt.lexicon) ckpt.lexicon->save(dir / "lexicon.txt");
    nlohmann::json manifest = {{"format", "pmp-checkpoint/1"},
                               {"config", ckpt.config},
                               {"step", ckpt.step},
                               {"marks", ckpt.marks.to_csv()},
                               {"history", ckpt.history},
                               {"extra", ckpt.extra}};
    std::ofstream out(dir / "manifest.json", std::ios::binary);
    require(static_cast<bool>(out), ErrorCode::kIo, "cannot write manifest in " + dir.string());
    out << manifest.dump(2) << '\n';
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json", std::ios::binary);
    require(static_cast<bool>(in), ErrorCode::kIo, "no checkpoint manifest in " + dir.string());
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::kFormat, "bad manifest in " + dir.string() + ": " + e.what());
    }
    Checkpoint ckpt;
    ckpt.config = manifest.at("config").get<ModelConfig>();
    ckpt.step = manifest.value("step", std::int64_t{0});
    ckpt.marks = MarkSet::parse(manifest.at("marks").get<std::string>());
    ckpt.history = manifest.value("history", nlohmann::json::array());
    ckpt.extra = manifest.value("extra", nlohmann::json::object());
    ckpt.vocab = Vocabulary::load(dir / "vocab.txt");
    if (std::filesystem::exists(dir / "lexicon.txt")) ckpt.lexicon = LongestMatchSegmenter::load(dir / "lexicon.txt");

    TensorMap tensors = read_tensors(dir / "tensors.bin");
    ckpt.params.layers.resize(static_cast<std::size_t>(ckpt.config.layers));
    for_each_tensor(ckpt.params, [&](const std::string& name, Matrix<float>& m) {
        auto it = tensors.find(name);
        require(it != tensors.end(), ErrorCode::kFormat, "checkpoint lacks tensor " + name);
        m = it->second.as<float>();
    });
    for (const auto& [name, t] : tensors)
        if (name.rfind("extra.", 0) == 0) ckpt.extra_tensors.emplace_back(name.substr(6), t.as<float>());
    check_shapes(ckpt.params, ckpt.config);
    require(static_cast<int>(ckpt.vocab.size()) == ckpt.config.vocab_size, ErrorCode::kFormat,
            "vocabulary size differs from model config");
    require(static_cast<int>(ckpt.marks.size()) == ckpt.config.num_labels, ErrorCode::kFormat,
            "mark set size differs from model config");
    return ckpt;
}

}  // namespace pmp
