#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dyncal/calibration.hpp"
#include "dyncal/errors.hpp"
#include "dyncal/math.hpp"
#include "dyncal/trajectory.hpp"

namespace dyncal {

enum class PseudoMethod { rt4u, pseudo_t, pseudo_d, onehot };

inline std::string to_string(PseudoMethod m) {
    switch (m) {
        case PseudoMethod::rt4u: return "rt4u";
        case PseudoMethod::pseudo_t: return "pseudo_t";
        case PseudoMethod::pseudo_d: return "pseudo_d";
        case PseudoMethod::onehot: return "onehot";
    }
    throw DataError("unknown pseudo-label method");
}

inline PseudoMethod pseudo_method_from_string(const std::string& s) {
    if (s == "rt4u") return PseudoMethod::rt4u;
    if (s == "pseudo_t") return PseudoMethod::pseudo_t;
    if (s == "pseudo_d") return PseudoMethod::pseudo_d;
    if (s == "onehot") return PseudoMethod::onehot;
    throw DataError("unknown pseudo-label method \"" + s + "\"");
}

// Per-sample soft label vectors for the train split of one store.
struct PseudoLabelSet {
    PseudoMethod method = PseudoMethod::onehot;
    int num_classes = 0;
    EpochWindow window{};
    std::map<std::string, std::vector<double>> entries; // sample_id -> probs

    void check() const {
        for (const auto& [id, p] : entries) {
            if (p.size() != static_cast<std::size_t>(num_classes))
                throw DataError("pseudo-label length mismatch for sample \"" + id + "\"");
            double sum = 0.0;
            for (double x : p) {
                if (!(x > 0.0)) throw DataError("non-positive pseudo-label entry for sample \"" + id + "\"");
                sum += x;
            }
            if (std::abs(sum - 1.0) > 1e-9)
                throw DataError("pseudo-label for sample \"" + id + "\" sums to " + std::to_string(sum));
        }
    }
};

namespace detail {

inline const TrajectoryStore& require_train(const TrajectoryStore& store) {
    for (const auto& s : store.samples())
        if (s.split == Split::train) return store;
    throw DataError("store has an empty train split");
}

inline EpochWindow resolve_window(const TrajectoryStore& store, std::optional<EpochWindow> window) {
    EpochWindow w = window.value_or(store.full_window());
    bool any = false;
    for (int e : store.epochs()) any = any || w.contains(e);
    if (!any) throw DataError("epoch window contains no recorded epochs");
    return w;
}

} // namespace detail

// Per-sample mean of the per-epoch softmaxes (softmax first, then average).
inline PseudoLabelSet make_rt4u(const TrajectoryStore& store,
                                std::optional<EpochWindow> window = {}) {
    detail::require_train(store);
    PseudoLabelSet set;
    set.method = PseudoMethod::rt4u;
    set.num_classes = store.num_classes();
    set.window = detail::resolve_window(store, window);
    for (const auto& s : store.samples()) {
        if (s.split != Split::train) continue;
        std::vector<double> mean(static_cast<std::size_t>(store.num_classes()), 0.0);
        std::size_t count = 0;
        for (std::size_t t = 0; t < store.epochs().size(); ++t) {
            if (!set.window.contains(store.epochs()[t])) continue;
            std::vector<double> p = softmax(s.logits_by_epoch[t]);
            for (std::size_t c = 0; c < p.size(); ++c) mean[c] += p[c];
            ++count;
        }
        for (double& x : mean) x /= static_cast<double>(count);
        set.entries.emplace(s.sample_id, std::move(mean));
    }
    set.check();
    return set;
}

// Softmax of gamma times the epoch-averaged logits (average first, then scale).
inline PseudoLabelSet make_pseudo_t(const TrajectoryStore& store, TemperatureParam gamma,
                                    std::optional<EpochWindow> window = {}) {
    detail::require_train(store);
    PseudoLabelSet set;
    set.method = PseudoMethod::pseudo_t;
    set.num_classes = store.num_classes();
    set.window = detail::resolve_window(store, window);
    for (const auto& s : store.samples()) {
        if (s.split != Split::train) continue;
        std::vector<double> v = store.average_logits(s, set.window);
        set.entries.emplace(s.sample_id, softmax(apply_temperature(gamma, v)));
    }
    set.check();
    return set;
}

// Softmax of A v + b with v the epoch-averaged logits.
inline PseudoLabelSet make_pseudo_d(const TrajectoryStore& store, const DirichletMap& map,
                                    std::optional<EpochWindow> window = {}) {
    detail::require_train(store);
    if (map.num_classes() != store.num_classes())
        throw DataError("calibration map dimension does not match store class count");
    PseudoLabelSet set;
    set.method = PseudoMethod::pseudo_d;
    set.num_classes = store.num_classes();
    set.window = detail::resolve_window(store, window);
    for (const auto& s : store.samples()) {
        if (s.split != Split::train) continue;
        std::vector<double> v = store.average_logits(s, set.window);
        set.entries.emplace(s.sample_id, softmax(apply_dirichlet(map, v)));
    }
    set.check();
    return set;
}

// Indicator of the recorded label with a 1e-6 floor so entries stay positive:
// (onehot + eps) / (1 + C*eps).
inline PseudoLabelSet make_onehot(const TrajectoryStore& store) {
    detail::require_train(store);
    constexpr double eps = 1e-6;
    PseudoLabelSet set;
    set.method = PseudoMethod::onehot;
    set.num_classes = store.num_classes();
    set.window = store.full_window();
    double denom = 1.0 + static_cast<double>(store.num_classes()) * eps;
    for (const auto& s : store.samples()) {
        if (s.split != Split::train) continue;
        std::vector<double> p(static_cast<std::size_t>(store.num_classes()), eps / denom);
        p[static_cast<std::size_t>(s.label)] = (1.0 + eps) / denom;
        set.entries.emplace(s.sample_id, std::move(p));
    }
    set.check();
    return set;
}

// ---------------------------------------------------------------------------
// Pseudo-label file: header line {"num_classes":C,"epoch_window":[lo,hi]}
// followed by one {"sample_id","method","probs"} object per sample.

inline void write_pseudo_labels(const PseudoLabelSet& set, const std::filesystem::path& path) {
    set.check();
    std::ofstream out(path);
    if (!out) throw DataError("cannot write pseudo-label file " + path.string());
    nlohmann::json header{{"num_classes", set.num_classes},
                          {"epoch_window", {set.window.lo, set.window.hi}}};
    out << header.dump() << "\n";
    std::string method = to_string(set.method);
    for (const auto& [id, probs] : set.entries) {
        nlohmann::json j{{"sample_id", id}, {"method", method}, {"probs", probs}};
        out << j.dump() << "\n";
    }
    if (!out) throw DataError("I/O failure writing " + path.string());
}

inline PseudoLabelSet read_pseudo_labels(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open pseudo-label file " + path.string());
    std::string line;
    std::size_t line_no = 0;
    PseudoLabelSet set;
    bool have_header = false, have_method = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
            if (!have_header) {
                set.num_classes = j.at("num_classes").get<int>();
                auto w = j.at("epoch_window").get<std::vector<int>>();
                if (w.size() != 2) throw DataError(path.string() + ":1: epoch_window must be [lo,hi]");
                set.window = {w[0], w[1]};
                have_header = true;
                continue;
            }
            std::string id = j.at("sample_id").get<std::string>();
            PseudoMethod method = pseudo_method_from_string(j.at("method").get<std::string>());
            if (!have_method) {
                set.method = method;
                have_method = true;
            } else if (method != set.method) {
                throw DataError(path.string() + ":" + std::to_string(line_no) +
                                ": mixed method tags in one file");
            }
            auto probs = j.at("probs").get<std::vector<double>>();
            if (!set.entries.emplace(id, std::move(probs)).second)
                throw DataError(path.string() + ":" + std::to_string(line_no) +
                                ": duplicate sample \"" + id + "\"");
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path.string() + ":" + std::to_string(line_no) +
                            ": malformed pseudo-label line: " + e.what());
        }
    }
    if (!have_header) throw DataError(path.string() + ": missing header line");
    if (set.entries.empty()) throw DataError(path.string() + ": no pseudo-label entries");
    try {
        set.check();
    } catch (const DataError& e) {
        throw DataError(path.string() + ": " + e.what());
    }
    return set;
}

} // namespace dyncal
