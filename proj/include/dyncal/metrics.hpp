#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dyncal/errors.hpp"
#include "dyncal/math.hpp"

namespace dyncal {

enum class PredictionLevel { video, study };

inline std::string to_string(PredictionLevel level) {
    return level == PredictionLevel::video ? "video" : "study";
}

inline PredictionLevel prediction_level_from_string(const std::string& s) {
    if (s == "video") return PredictionLevel::video;
    if (s == "study") return PredictionLevel::study;
    throw DataError("unknown prediction level \"" + s + "\"");
}

struct Prediction {
    std::vector<double> probs;
    int label = 0;
    std::map<std::string, std::string> tags;
};

struct PredictionSet {
    PredictionLevel level = PredictionLevel::video;
    int num_classes = 0;
    std::map<std::string, Prediction> entries; // keyed by id

    void check() const {
        for (const auto& [id, p] : entries) {
            if (p.probs.size() != static_cast<std::size_t>(num_classes))
                throw DataError("probability vector length mismatch for \"" + id + "\"");
            double sum = 0.0;
            for (double x : p.probs) {
                if (!std::isfinite(x) || x < 0.0)
                    throw DataError("invalid probability entry for \"" + id + "\"");
                sum += x;
            }
            if (std::abs(sum - 1.0) > 1e-6)
                throw DataError("probabilities for \"" + id + "\" sum to " + std::to_string(sum));
            if (p.label < 0 || p.label >= num_classes)
                throw DataError("label out of range for \"" + id + "\"");
        }
    }
};

// Argmax decision rule; ties break toward the lowest class index.
inline int predicted_class(std::span<const double> probs) {
    return argmax(probs);
}

// Softmax-response selector: the maximum probability.
inline double confidence(std::span<const double> probs) {
    return probs[static_cast<std::size_t>(argmax(probs))];
}

namespace detail {

struct ClassCounts {
    std::size_t total = 0;
    std::size_t correct = 0;
};

// Mean per-class recall over classes present in the pairs.
inline double balanced_accuracy_of(const std::vector<std::pair<int, int>>& label_pred) {
    std::map<int, ClassCounts> per_class;
    for (const auto& [label, pred] : label_pred) {
        auto& c = per_class[label];
        ++c.total;
        if (pred == label) ++c.correct;
    }
    if (per_class.empty()) throw DataError("empty prediction set");
    double sum = 0.0;
    for (const auto& [cls, c] : per_class)
        sum += static_cast<double>(c.correct) / static_cast<double>(c.total);
    return sum / static_cast<double>(per_class.size());
}

inline void require_nonempty(const PredictionSet& preds) {
    if (preds.entries.empty()) throw DataError("empty prediction set");
}

} // namespace detail

inline double balanced_accuracy(const PredictionSet& preds) {
    detail::require_nonempty(preds);
    std::vector<std::pair<int, int>> pairs;
    pairs.reserve(preds.entries.size());
    for (const auto& [id, p] : preds.entries)
        pairs.emplace_back(p.label, predicted_class(p.probs));
    return detail::balanced_accuracy_of(pairs);
}

// Per-class mean absolute class-index error, averaged over present classes.
inline double balanced_mae(const PredictionSet& preds) {
    detail::require_nonempty(preds);
    std::map<int, std::pair<double, std::size_t>> per_class; // label -> (abs error sum, count)
    for (const auto& [id, p] : preds.entries) {
        auto& acc = per_class[p.label];
        acc.first += std::abs(predicted_class(p.probs) - p.label);
        ++acc.second;
    }
    double sum = 0.0;
    for (const auto& [cls, acc] : per_class)
        sum += acc.first / static_cast<double>(acc.second);
    return sum / static_cast<double>(per_class.size());
}

// Per-class expected calibration error, averaged over present classes.
// Within the class-c subset: confidence = max probability, correctness =
// (predicted class == c), equal-width bins on [0,1] with the last bin closed.
inline double balanced_ece(const PredictionSet& preds, int num_bins = 15) {
    detail::require_nonempty(preds);
    if (num_bins < 1) throw UsageError("num_bins must be positive");
    struct Bin {
        std::size_t count = 0;
        double conf_sum = 0.0;
        std::size_t correct = 0;
    };
    std::map<int, std::vector<Bin>> per_class;
    std::map<int, std::size_t> class_totals;
    for (const auto& [id, p] : preds.entries) {
        double conf = confidence(p.probs);
        int bin = std::min(static_cast<int>(conf * num_bins), num_bins - 1);
        auto& bins = per_class.try_emplace(p.label, static_cast<std::size_t>(num_bins)).first->second;
        auto& b = bins[static_cast<std::size_t>(bin)];
        ++b.count;
        b.conf_sum += conf;
        if (predicted_class(p.probs) == p.label) ++b.correct;
        ++class_totals[p.label];
    }
    double sum = 0.0;
    for (const auto& [cls, bins] : per_class) {
        double n_c = static_cast<double>(class_totals[cls]);
        double ece_c = 0.0;
        for (const auto& b : bins) {
            if (b.count == 0) continue;
            double acc_b = static_cast<double>(b.correct) / static_cast<double>(b.count);
            double conf_b = b.conf_sum / static_cast<double>(b.count);
            ece_c += (static_cast<double>(b.count) / n_c) * std::abs(acc_b - conf_b);
        }
        sum += ece_c;
    }
    return sum / static_cast<double>(per_class.size());
}

// Fraction of samples whose selector value strictly exceeds tau.
inline double coverage(const PredictionSet& preds, double tau) {
    detail::require_nonempty(preds);
    std::size_t covered = 0;
    for (const auto& [id, p] : preds.entries)
        if (confidence(p.probs) > tau) ++covered;
    return static_cast<double>(covered) / static_cast<double>(preds.entries.size());
}

inline double selective_balanced_accuracy(const PredictionSet& preds, double tau) {
    detail::require_nonempty(preds);
    std::vector<std::pair<int, int>> pairs;
    for (const auto& [id, p] : preds.entries)
        if (confidence(p.probs) > tau)
            pairs.emplace_back(p.label, predicted_class(p.probs));
    if (pairs.empty()) throw DataError("no samples covered at threshold " + std::to_string(tau));
    return detail::balanced_accuracy_of(pairs);
}

inline std::vector<double> default_coverage_grid() {
    std::vector<double> grid(51);
    for (int i = 0; i < 51; ++i) grid[static_cast<std::size_t>(i)] = 0.50 + 0.01 * i;
    return grid;
}

struct SelectiveConfig {
    std::vector<double> coverage_grid = default_coverage_grid();

    void check() const {
        if (coverage_grid.empty()) throw UsageError("coverage grid is empty");
        double prev = 0.0;
        for (double q : coverage_grid) {
            if (!(q > 0.0) || q > 1.0) throw UsageError("coverage grid values must lie in (0,1]");
            if (q <= prev && prev != 0.0) throw UsageError("coverage grid must be strictly increasing");
            prev = q;
        }
    }
};

struct SelectiveRow {
    double target_coverage = 0.0;
    double tau = 0.0;      // selector value of the last covered sample
    double coverage = 0.0; // achieved coverage (nearest-rank, may overshoot target)
    double accuracy = 0.0; // balanced accuracy on the covered subset
};

struct SelectiveReport {
    std::vector<SelectiveRow> rows;
    double aurc = 0.0; // mean of accuracy*coverage over rows; higher is better
};

// Risk-coverage sweep under an explicit per-sample selector. For each target
// coverage q the covered subset is the top ceil(q*n) samples by
// (selector desc, id asc); the achieved coverage ceil(q*n)/n is reported.
inline SelectiveReport compute_aurc(const PredictionSet& preds,
                                    const std::map<std::string, double>& selector,
                                    const SelectiveConfig& cfg = {}) {
    detail::require_nonempty(preds);
    cfg.check();
    struct Item {
        double score;
        const std::string* id;
        int label;
        int pred;
    };
    std::vector<Item> items;
    items.reserve(preds.entries.size());
    for (const auto& [id, p] : preds.entries) {
        auto it = selector.find(id);
        if (it == selector.end()) throw DataError("selector value missing for \"" + id + "\"");
        if (!std::isfinite(it->second)) throw DataError("non-finite selector value for \"" + id + "\"");
        items.push_back({it->second, &id, p.label, predicted_class(p.probs)});
    }
    std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) {
        if (a.score != b.score) return a.score > b.score;
        return *a.id < *b.id;
    });

    const std::size_t n = items.size();
    SelectiveReport report;
    report.rows.reserve(cfg.coverage_grid.size());
    std::map<int, detail::ClassCounts> per_class;
    std::size_t taken = 0;
    for (double q : cfg.coverage_grid) {
        auto m = static_cast<std::size_t>(
            std::clamp(std::ceil(q * static_cast<double>(n) - 1e-9), 1.0, static_cast<double>(n)));
        while (taken < m) {
            auto& c = per_class[items[taken].label];
            ++c.total;
            if (items[taken].pred == items[taken].label) ++c.correct;
            ++taken;
        }
        double acc = 0.0;
        for (const auto& [cls, c] : per_class)
            acc += static_cast<double>(c.correct) / static_cast<double>(c.total);
        acc /= static_cast<double>(per_class.size());
        SelectiveRow row;
        row.target_coverage = q;
        row.tau = items[m - 1].score;
        row.coverage = static_cast<double>(m) / static_cast<double>(n);
        row.accuracy = acc;
        report.rows.push_back(row);
    }
    double sum = 0.0;
    for (const auto& row : report.rows) sum += row.accuracy * row.coverage;
    report.aurc = sum / static_cast<double>(report.rows.size());
    return report;
}

// Same sweep with the softmax-response selector.
inline SelectiveReport compute_aurc(const PredictionSet& preds, const SelectiveConfig& cfg = {}) {
    std::map<std::string, double> selector;
    for (const auto& [id, p] : preds.entries) selector.emplace(id, confidence(p.probs));
    return compute_aurc(preds, selector, cfg);
}

// ---------------------------------------------------------------------------
// Subgroup confidence report: grouped means plus per-sample rows for CSV.

struct SubgroupSample {
    std::string id;
    std::string tag_value;
    bool correct = false;
    double confidence = 0.0;
};

struct SubgroupRow {
    std::string tag_value;
    bool correct = false;
    std::size_t count = 0;
    double mean_confidence = 0.0;
};

struct SubgroupReport {
    std::string tag_key;
    std::vector<SubgroupRow> rows;        // sorted by (tag_value, correct)
    std::vector<SubgroupSample> samples;  // sorted by id
};

inline SubgroupReport subgroup_confidence_report(const PredictionSet& preds,
                                                 const std::string& tag_key) {
    detail::require_nonempty(preds);
    SubgroupReport report;
    report.tag_key = tag_key;
    bool tag_seen = false;
    std::map<std::pair<std::string, bool>, std::pair<std::size_t, double>> groups;
    for (const auto& [id, p] : preds.entries) {
        SubgroupSample s;
        s.id = id;
        auto it = p.tags.find(tag_key);
        if (it != p.tags.end()) {
            s.tag_value = it->second;
            tag_seen = true;
        } else {
            s.tag_value = "(absent)";
        }
        s.correct = predicted_class(p.probs) == p.label;
        s.confidence = confidence(p.probs);
        auto& g = groups[{s.tag_value, s.correct}];
        ++g.first;
        g.second += s.confidence;
        report.samples.push_back(std::move(s));
    }
    if (!tag_seen) throw DataError("tag \"" + tag_key + "\" is not present on any sample");
    for (const auto& [key, g] : groups) {
        SubgroupRow row;
        row.tag_value = key.first;
        row.correct = key.second;
        row.count = g.first;
        row.mean_confidence = g.second / static_cast<double>(g.first);
        report.rows.push_back(std::move(row));
    }
    return report;
}

inline void write_subgroup_csv(const SubgroupReport& report, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write subgroup report " + path.string());
    out << "id,tag,correct,confidence\n";
    for (const auto& s : report.samples) {
        out << s.id << ',' << s.tag_value << ',' << (s.correct ? 1 : 0) << ','
            << nlohmann::json(s.confidence).dump() << "\n";
    }
    if (!out) throw DataError("I/O failure writing " + path.string());
}

// ---------------------------------------------------------------------------
// Combined evaluation report and file formats.

struct MetricsReport {
    PredictionLevel level = PredictionLevel::video;
    double balanced_accuracy = 0.0;
    double balanced_mae = 0.0;
    double balanced_ece = 0.0;
    double aurc = 0.0;
    std::vector<SelectiveRow> rows;
};

inline MetricsReport evaluate_predictions(const PredictionSet& preds,
                                          const SelectiveConfig& cfg = {}) {
    preds.check();
    MetricsReport report;
    report.level = preds.level;
    report.balanced_accuracy = balanced_accuracy(preds);
    report.balanced_mae = balanced_mae(preds);
    report.balanced_ece = balanced_ece(preds);
    SelectiveReport sel = compute_aurc(preds, cfg);
    report.aurc = sel.aurc;
    report.rows = std::move(sel.rows);
    return report;
}

inline void write_metrics_report(const MetricsReport& report, const std::filesystem::path& path) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : report.rows)
        rows.push_back({{"tau", row.tau}, {"coverage", row.coverage}, {"accuracy", row.accuracy}});
    nlohmann::json j{{"level", to_string(report.level)},
                     {"balanced_accuracy", report.balanced_accuracy},
                     {"balanced_mae", report.balanced_mae},
                     {"balanced_ece", report.balanced_ece},
                     {"aurc", report.aurc},
                     {"rows", std::move(rows)}};
    std::ofstream out(path);
    if (!out) throw DataError("cannot write metrics report " + path.string());
    out << j.dump(2) << "\n";
    if (!out) throw DataError("I/O failure writing " + path.string());
}

inline MetricsReport read_metrics_report(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open metrics report " + path.string());
    try {
        nlohmann::json j = nlohmann::json::parse(in);
        MetricsReport report;
        report.level = prediction_level_from_string(j.at("level").get<std::string>());
        report.balanced_accuracy = j.at("balanced_accuracy").get<double>();
        report.balanced_mae = j.at("balanced_mae").get<double>();
        report.balanced_ece = j.at("balanced_ece").get<double>();
        report.aurc = j.at("aurc").get<double>();
        for (const auto& r : j.at("rows")) {
            SelectiveRow row;
            row.tau = r.at("tau").get<double>();
            row.coverage = r.at("coverage").get<double>();
            row.accuracy = r.at("accuracy").get<double>();
            report.rows.push_back(row);
        }
        return report;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + ": malformed metrics report: " + std::string(e.what()));
    }
}

// Prediction file: header {"level","num_classes"} then {"id","probs","label"[,"tags"]} lines.
inline void write_predictions(const PredictionSet& preds, const std::filesystem::path& path) {
    preds.check();
    std::ofstream out(path);
    if (!out) throw DataError("cannot write prediction file " + path.string());
    nlohmann::json header{{"level", to_string(preds.level)}, {"num_classes", preds.num_classes}};
    out << header.dump() << "\n";
    for (const auto& [id, p] : preds.entries) {
        nlohmann::json j{{"id", id}, {"probs", p.probs}, {"label", p.label}};
        if (!p.tags.empty()) j["tags"] = p.tags;
        out << j.dump() << "\n";
    }
    if (!out) throw DataError("I/O failure writing " + path.string());
}

inline PredictionSet read_predictions(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open prediction file " + path.string());
    PredictionSet preds;
    std::string line;
    std::size_t line_no = 0;
    bool have_header = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            nlohmann::json j = nlohmann::json::parse(line);
            if (!have_header) {
                preds.level = prediction_level_from_string(j.at("level").get<std::string>());
                preds.num_classes = j.at("num_classes").get<int>();
                have_header = true;
                continue;
            }
            Prediction p;
            std::string id = j.at("id").get<std::string>();
            p.probs = j.at("probs").get<std::vector<double>>();
            p.label = j.at("label").get<int>();
            if (j.contains("tags")) p.tags = j.at("tags").get<std::map<std::string, std::string>>();
            if (!preds.entries.emplace(std::move(id), std::move(p)).second)
                throw DataError(path.string() + ":" + std::to_string(line_no) + ": duplicate id");
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path.string() + ":" + std::to_string(line_no) +
                            ": malformed prediction line: " + e.what());
        }
    }
    if (!have_header) throw DataError(path.string() + ": missing header line");
    try {
        preds.check();
    } catch (const DataError& e) {
        throw DataError(path.string() + ": " + e.what());
    }
    return preds;
}

} // namespace dyncal
