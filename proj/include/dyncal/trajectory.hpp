#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dyncal/errors.hpp"
#include "dyncal/math.hpp"

namespace dyncal {

enum class Split { train, val, test };

inline std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    throw DataError("unknown split value");
}

inline Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw DataError("unknown split \"" + s + "\"");
}

// One (sample, epoch) observation of the recorded training dynamics.
struct LogitRecord {
    std::string sample_id;
    std::string study_id;
    std::string view;
    Split split = Split::train;
    int label = 0;
    int epoch = 0;
    std::vector<double> logits;
    std::map<std::string, std::string> tags;
};

// Inclusive epoch range.
struct EpochWindow {
    int lo = 0;
    int hi = 0;
    bool contains(int epoch) const { return epoch >= lo && epoch <= hi; }
    bool operator==(const EpochWindow&) const = default;
};

struct ValidationIssue {
    std::size_t record_index = 0; // index into the record list (or line number at load)
    std::string rule;
    std::string detail;
};

struct ValidationReport {
    std::vector<ValidationIssue> errors;
    std::vector<ValidationIssue> warnings;
    std::map<Split, std::size_t> split_counts;
    int num_classes = 0;
    int num_epochs = 0;

    bool ok() const { return errors.empty(); }

    std::string summary(std::size_t max_items = 8) const {
        std::ostringstream os;
        for (std::size_t i = 0; i < errors.size() && i < max_items; ++i) {
            if (i) os << "; ";
            os << "record " << errors[i].record_index << ": " << errors[i].rule;
            if (!errors[i].detail.empty()) os << " (" << errors[i].detail << ")";
        }
        if (errors.size() > max_items) os << "; ... " << errors.size() << " errors total";
        return os.str();
    }
};

// All epochs of one sample, logits ordered by ascending epoch.
struct SampleTrajectory {
    std::string sample_id;
    std::string study_id;
    std::string view;
    Split split = Split::train;
    int label = 0;
    std::map<std::string, std::string> tags;
    std::vector<std::vector<double>> logits_by_epoch; // parallel to store.epochs()
};

// Immutable collection of per-(sample, epoch) logit records on a dense epoch
// grid. Samples are kept sorted by id so every traversal is deterministic.
class TrajectoryStore {
public:
    TrajectoryStore() = default;

    // Groups records, validates against all store invariants and throws
    // DataError with the offending record indices on failure.
    static TrajectoryStore from_records(const std::vector<LogitRecord>& records) {
        ValidationReport report = validate(records);
        if (!report.ok()) throw DataError("invalid trajectory data: " + report.summary());
        TrajectoryStore store;
        store.num_classes_ = report.num_classes;

        std::set<int> epoch_set;
        for (const auto& r : records) epoch_set.insert(r.epoch);
        store.epochs_.assign(epoch_set.begin(), epoch_set.end());

        std::map<std::string, std::map<int, const LogitRecord*>> grouped;
        for (const auto& r : records) grouped[r.sample_id][r.epoch] = &r;
        store.samples_.reserve(grouped.size());
        for (const auto& [id, by_epoch] : grouped) {
            const LogitRecord& first = *by_epoch.begin()->second;
            SampleTrajectory traj;
            traj.sample_id = id;
            traj.study_id = first.study_id;
            traj.view = first.view;
            traj.split = first.split;
            traj.label = first.label;
            traj.tags = first.tags;
            traj.logits_by_epoch.reserve(store.epochs_.size());
            for (const auto& [epoch, rec] : by_epoch)
                traj.logits_by_epoch.push_back(rec->logits);
            store.samples_.push_back(std::move(traj));
        }
        return store;
    }

    // Checks every TrajectoryStore invariant without building the store.
    static ValidationReport validate(const std::vector<LogitRecord>& records) {
        ValidationReport report;
        if (records.empty()) {
            report.errors.push_back({0, "empty input", "no records"});
            return report;
        }
        std::size_t num_classes = records.front().logits.size();
        report.num_classes = static_cast<int>(num_classes);

        std::set<int> epoch_set;
        std::map<std::string, std::set<int>> sample_epochs;
        std::map<std::string, std::size_t> first_index;
        for (std::size_t i = 0; i < records.size(); ++i) {
            const LogitRecord& r = records[i];
            if (r.logits.size() != num_classes)
                report.errors.push_back({i, "inconsistent class count",
                    "expected " + std::to_string(num_classes) + " logits, got " +
                    std::to_string(r.logits.size())});
            if (!all_finite(r.logits))
                report.errors.push_back({i, "non-finite logit", "sample " + r.sample_id});
            if (r.label < 0 || static_cast<std::size_t>(r.label) >= num_classes)
                report.errors.push_back({i, "label out of range",
                    "label " + std::to_string(r.label)});
            if (r.epoch < 1)
                report.errors.push_back({i, "epoch out of range",
                    "epoch " + std::to_string(r.epoch)});
            epoch_set.insert(r.epoch);
            if (!sample_epochs[r.sample_id].insert(r.epoch).second)
                report.errors.push_back({i, "duplicate sample epoch",
                    "sample " + r.sample_id + " epoch " + std::to_string(r.epoch)});

            auto [it, inserted] = first_index.emplace(r.sample_id, i);
            if (!inserted) {
                const LogitRecord& f = records[it->second];
                if (f.split != r.split || f.label != r.label || f.study_id != r.study_id ||
                    f.view != r.view || f.tags != r.tags)
                    report.errors.push_back({i, "metadata mismatch",
                        "sample " + r.sample_id + " disagrees with record " +
                        std::to_string(it->second)});
            }
            report.split_counts[r.split]++;
        }
        if (num_classes < 2)
            report.errors.push_back({0, "class count too small",
                "C = " + std::to_string(num_classes)});
        report.num_epochs = static_cast<int>(epoch_set.size());
        for (const auto& [id, epochs] : sample_epochs) {
            if (epochs.size() == epoch_set.size()) continue;
            std::ostringstream missing;
            std::size_t shown = 0;
            for (int e : epoch_set) {
                if (epochs.count(e)) continue;
                if (shown++) missing << ",";
                if (shown > 5) { missing << "..."; break; }
                missing << e;
            }
            report.errors.push_back({first_index[id], "missing epochs",
                "sample " + id + " lacks epochs " + missing.str()});
        }
        if (report.split_counts[Split::train] == 0)
            report.warnings.push_back({0, "empty train split", ""});
        return report;
    }

    int num_classes() const { return num_classes_; }
    int num_epochs() const { return static_cast<int>(epochs_.size()); }
    const std::vector<int>& epochs() const { return epochs_; }
    const std::vector<SampleTrajectory>& samples() const { return samples_; }
    bool empty() const { return samples_.empty(); }

    EpochWindow full_window() const {
        if (epochs_.empty()) throw DataError("store has no epochs");
        return {epochs_.front(), epochs_.back()};
    }

    const SampleTrajectory* find(const std::string& sample_id) const {
        auto it = std::lower_bound(samples_.begin(), samples_.end(), sample_id,
            [](const SampleTrajectory& s, const std::string& id) { return s.sample_id < id; });
        if (it == samples_.end() || it->sample_id != sample_id) return nullptr;
        return &*it;
    }

    // Arithmetic mean of the sample's logits over the window (default: all
    // epochs), summed in ascending-epoch order.
    std::vector<double> average_logits(const std::string& sample_id,
                                       std::optional<EpochWindow> window = {}) const {
        const SampleTrajectory* traj = find(sample_id);
        if (!traj) throw DataError("unknown sample \"" + sample_id + "\"");
        return average_logits(*traj, window);
    }

    std::vector<double> average_logits(const SampleTrajectory& traj,
                                       std::optional<EpochWindow> window = {}) const {
        std::vector<double> sum(static_cast<std::size_t>(num_classes_), 0.0);
        std::size_t count = 0;
        for (std::size_t t = 0; t < epochs_.size(); ++t) {
            if (window && !window->contains(epochs_[t])) continue;
            const auto& v = traj.logits_by_epoch[t];
            for (std::size_t c = 0; c < v.size(); ++c) sum[c] += v[c];
            ++count;
        }
        if (count == 0) throw DataError("empty epoch window for sample \"" + traj.sample_id + "\"");
        for (double& x : sum) x /= static_cast<double>(count);
        return sum;
    }

    // Sub-store with only the requested split. Preserves C and the epoch set
    // even when the result is empty.
    TrajectoryStore split_view(Split split) const {
        TrajectoryStore out;
        out.num_classes_ = num_classes_;
        out.epochs_ = epochs_;
        for (const auto& s : samples_)
            if (s.split == split) out.samples_.push_back(s);
        return out;
    }

private:
    int num_classes_ = 0;
    std::vector<int> epochs_;
    std::vector<SampleTrajectory> samples_; // sorted by sample_id
};

namespace detail {

inline LogitRecord record_from_json(const nlohmann::json& j) {
    LogitRecord r;
    r.sample_id = j.at("sample_id").get<std::string>();
    r.study_id = j.at("study_id").get<std::string>();
    r.view = j.at("view").get<std::string>();
    r.split = split_from_string(j.at("split").get<std::string>());
    r.label = j.at("label").get<int>();
    r.epoch = j.at("epoch").get<int>();
    r.logits = j.at("logits").get<std::vector<double>>();
    if (j.contains("tags"))
        r.tags = j.at("tags").get<std::map<std::string, std::string>>();
    return r;
}

inline nlohmann::json record_to_json(const SampleTrajectory& s, int epoch,
                                     const std::vector<double>& logits) {
    nlohmann::json j{
        {"sample_id", s.sample_id}, {"study_id", s.study_id}, {"view", s.view},
        {"split", to_string(s.split)}, {"label", s.label}, {"epoch", epoch},
        {"logits", logits}};
    if (!s.tags.empty()) j["tags"] = s.tags;
    return j;
}

} // namespace detail

// Parses a line-delimited trajectory file, one JSON record per line.
// Validation failures are reported with 1-based line numbers.
inline TrajectoryStore load_trajectories(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open trajectory file " + path.string());
    std::vector<LogitRecord> records;
    std::vector<std::size_t> lines;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            records.push_back(detail::record_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path.string() + ":" + std::to_string(line_no) +
                            ": malformed record: " + e.what());
        }
        lines.push_back(line_no);
    }
    ValidationReport report = TrajectoryStore::validate(records);
    if (!report.ok()) {
        // Rewrite record indices as line numbers before reporting.
        for (auto& issue : report.errors)
            if (issue.record_index < lines.size())
                issue.record_index = lines[issue.record_index];
        throw DataError(path.string() + ": " + report.summary());
    }
    return TrajectoryStore::from_records(records);
}

inline void save_trajectories(const TrajectoryStore& store, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write trajectory file " + path.string());
    for (const auto& s : store.samples())
        for (std::size_t t = 0; t < store.epochs().size(); ++t)
            out << detail::record_to_json(s, store.epochs()[t], s.logits_by_epoch[t]).dump()
                << "\n";
    if (!out) throw DataError("I/O failure writing " + path.string());
}

} // namespace dyncal
