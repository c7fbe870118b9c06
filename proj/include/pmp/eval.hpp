#pragma once

#include <algorithm>
#include <cstddef>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmp/corpus.hpp"
#include "pmp/error.hpp"
#include "pmp/model.hpp"

namespace pmp {

struct ClassMetrics {
    std::string name;
    double precision = 0;  // percent
    double recall = 0;
    double f1 = 0;
    std::size_t true_positives = 0;
    std::size_t predicted = 0;
    std::size_t support = 0;  // gold occurrences
};

/// Per-class and macro-averaged precision/recall/F1 in percent, plus the
/// model size it was measured on.
struct MetricsReport {
    std::vector<ClassMetrics> classes;
    double precision = 0;
    double recall = 0;
    double f1 = 0;
    bool overall_includes_o = false;
    std::size_t parameter_count = 0;
    double size_ratio = 100.0;  // percent of the reference model

    const ClassMetrics& at(std::string_view name) const {
        for (const auto& c : classes)
            if (c.name == name) return c;
        throw Error(ErrorCode::kUnknownMark, "no metrics for class " + std::string(name));
    }

    /// Header matching tsv_row(): per class P, R, F1, then overall P, R, F1.
    std::string tsv_header() const {
        std::ostringstream os;
        os << "model";
        for (const auto& c : classes) os << '\t' << c.name << "_P\t" << c.name << "_R\t" << c.name << "_F1";
        os << "\tOverall_P\tOverall_R\tOverall_F1\tparams\tsize_ratio";
        return os.str();
    }

    std::string tsv_row(const std::string& model) const {
        std::ostringstream os;
        os << model << std::fixed << std::setprecision(2);
        for (const auto& c : classes) os << '\t' << c.precision << '\t' << c.recall << '\t' << c.f1;
        os << '\t' << precision << '\t' << recall << '\t' << f1 << '\t' << parameter_count << '\t' << size_ratio;
        return os.str();
    }
};

inline void to_json(nlohmann::json& j, const MetricsReport& r) {
    nlohmann::json classes = nlohmann::json::array();
    for (const auto& c : r.classes)
        classes.push_back({{"name", c.name},
                           {"precision", c.precision},
                           {"recall", c.recall},
                           {"f1", c.f1},
                           {"tp", c.true_positives},
                           {"predicted", c.predicted},
                           {"support", c.support}});
    j = {{"classes", classes},   {"precision", r.precision},
         {"recall", r.recall},   {"f1", r.f1},
         {"overall_includes_o", r.overall_includes_o},
         {"parameter_count", r.parameter_count},
         {"size_ratio", r.size_ratio}};
}

inline void from_json(const nlohmann::json& j, MetricsReport& r) {
    r.classes.clear();
    for (const auto& c : j.at("classes")) {
        r.classes.push_back({c.at("name").get<std::string>(), c.at("precision").get<double>(),
                             c.at("recall").get<double>(), c.at("f1").get<double>(), c.at("tp").get<std::size_t>(),
                             c.at("predicted").get<std::size_t>(), c.at("support").get<std::size_t>()});
    }
    r.precision = j.at("precision").get<double>();
    r.recall = j.at("recall").get<double>();
    r.f1 = j.at("f1").get<double>();
    r.overall_includes_o = j.value("overall_includes_o", false);
    r.parameter_count = j.value("parameter_count", std::size_t{0});
    r.size_ratio = j.value("size_ratio", 100.0);
}

/// Harmonic mean, 0 when both inputs are 0.
inline double harmonic_f1(double p, double r) { return p + r == 0 ? 0.0 : 2.0 * p * r / (p + r); }

/// Token-level tallies per class. A ratio with an empty denominator is 100
/// when the numerator side is empty too (nothing to find, nothing wrongly
/// found), else 0. Overall is the macro mean over the mark classes, with O
/// joining the mean only when include_o is set.
inline MetricsReport prf1(const std::vector<std::vector<Label>>& pred, const std::vector<std::vector<Label>>& gold,
                          const MarkSet& marks, bool include_o = false) {
    require(pred.size() == gold.size(), ErrorCode::kLengthMismatch,
            "prediction and gold sequence counts differ (" + std::to_string(pred.size()) + " vs " +
                std::to_string(gold.size()) + ")");
    const std::size_t k = marks.size();
    std::vector<std::size_t> tp(k, 0), npred(k, 0), ngold(k, 0);
    for (std::size_t s = 0; s < pred.size(); ++s) {
        require(pred[s].size() == gold[s].size(), ErrorCode::kLengthMismatch,
                "sequence " + std::to_string(s) + " has mismatched prediction length");
        for (std::size_t i = 0; i < pred[s].size(); ++i) {
            const auto p = static_cast<std::size_t>(index(pred[s][i]));
            const auto g = static_cast<std::size_t>(index(gold[s][i]));
            require(p < k && g < k, ErrorCode::kUnknownMark, "label outside mark set");
            ++npred[p];
            ++ngold[g];
            if (p == g) ++tp[p];
        }
    }
    MetricsReport report;
    report.overall_includes_o = include_o;
    std::size_t averaged = 0;
    for (std::size_t c = include_o ? 0 : 1; c < k; ++c) {
        ClassMetrics m;
        m.name = std::string(marks.name(label_at(static_cast<int>(c))));
        m.true_positives = tp[c];
        m.predicted = npred[c];
        m.support = ngold[c];
        const bool absent = npred[c] == 0 && ngold[c] == 0;
        m.precision = npred[c] ? 100.0 * static_cast<double>(tp[c]) / static_cast<double>(npred[c]) : (absent ? 100.0 : 0.0);
        m.recall = ngold[c] ? 100.0 * static_cast<double>(tp[c]) / static_cast<double>(ngold[c]) : (absent ? 100.0 : 0.0);
        m.f1 = harmonic_f1(m.precision, m.recall);
        report.precision += m.precision;
        report.recall += m.recall;
        report.f1 += m.f1;
        ++averaged;
        report.classes.push_back(std::move(m));
    }
    if (averaged) {
        report.precision /= static_cast<double>(averaged);
        report.recall /= static_cast<double>(averaged);
        report.f1 /= static_cast<double>(averaged);
    }
    return report;
}

/// 100 * params(a) / params(b)
template <class S>
double size_ratio(const EncoderParams<S>& a, const EncoderParams<S>& b) {
    return 100.0 * static_cast<double>(parameter_count(a)) / static_cast<double>(parameter_count(b));
}

inline double size_ratio(const ModelConfig& a, const ModelConfig& b) {
    return 100.0 * static_cast<double>(parameter_count(a)) / static_cast<double>(parameter_count(b));
}

/// Element-wise mean of reports with identical class layout.
inline MetricsReport mean_report(const std::vector<MetricsReport>& reports) {
    require(!reports.empty(), ErrorCode::kEmptyBatch, "no reports to average");
    MetricsReport out = reports.front();
    const auto n = static_cast<double>(reports.size());
    for (auto& c : out.classes) c = ClassMetrics{.name = c.name};
    out.precision = out.recall = out.f1 = 0;
    for (const auto& r : reports) {
        require(r.classes.size() == out.classes.size(), ErrorCode::kShapeMismatch, "report class layouts differ");
        for (std::size_t c = 0; c < r.classes.size(); ++c) {
            out.classes[c].precision += r.classes[c].precision / n;
            out.classes[c].recall += r.classes[c].recall / n;
            out.classes[c].f1 += r.classes[c].f1 / n;
            out.classes[c].true_positives += r.classes[c].true_positives;
            out.classes[c].predicted += r.classes[c].predicted;
            out.classes[c].support += r.classes[c].support;
        }
        out.precision += r.precision / n;
        out.recall += r.recall / n;
        out.f1 += r.f1 / n;
    }
    return out;
}

}  // namespace pmp
