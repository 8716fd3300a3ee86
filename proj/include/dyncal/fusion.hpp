#pragma once

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dyncal/errors.hpp"
#include "dyncal/metrics.hpp"

namespace dyncal {

// All videos of one patient exam; member labels agree with the study label.
struct StudyGroup {
    std::string study_id;
    std::vector<std::string> video_ids;
    std::vector<std::vector<double>> probs; // parallel to video_ids
    int label = 0;
};

// Worst-case aggregation: if every member predicts the normal class, return
// the mean of all member vectors, otherwise the mean over the members whose
// predicted class differs from the normal class.
inline std::vector<double> fuse_study(const StudyGroup& group, int normal_class = 0) {
    if (group.probs.empty()) throw DataError("study \"" + group.study_id + "\" has no members");
    const std::size_t C = group.probs.front().size();
    for (const auto& p : group.probs)
        if (p.size() != C)
            throw DataError("member vector length mismatch in study \"" + group.study_id + "\"");
    if (normal_class < 0 || static_cast<std::size_t>(normal_class) >= C)
        throw UsageError("normal class index out of range");

    std::vector<const std::vector<double>*> members;
    for (const auto& p : group.probs)
        if (predicted_class(p) != normal_class) members.push_back(&p);
    if (members.empty())
        for (const auto& p : group.probs) members.push_back(&p);

    std::vector<double> fused(C, 0.0);
    for (const auto* p : members)
        for (std::size_t c = 0; c < C; ++c) fused[c] += (*p)[c];
    for (double& x : fused) x /= static_cast<double>(members.size());
    return fused;
}

// Group a video-level prediction set by study and fuse each group. Study tags
// are the union of member tags; disagreeing values for one key are an error.
inline PredictionSet fuse_all(const PredictionSet& videos,
                              const std::map<std::string, std::string>& study_map,
                              int normal_class = 0) {
    videos.check();
    if (videos.level != PredictionLevel::video)
        throw UsageError("fusion expects video-level predictions");

    struct Partial {
        StudyGroup group;
        std::map<std::string, std::string> tags;
        bool have_label = false;
    };
    std::map<std::string, Partial> studies;
    for (const auto& [video_id, p] : videos.entries) {
        auto it = study_map.find(video_id);
        if (it == study_map.end())
            throw DataError("video \"" + video_id + "\" is missing from the study map");
        Partial& partial = studies[it->second];
        StudyGroup& g = partial.group;
        g.study_id = it->second;
        if (partial.have_label && g.label != p.label)
            throw DataError("label disagreement within study \"" + it->second + "\"");
        g.label = p.label;
        partial.have_label = true;
        g.video_ids.push_back(video_id);
        g.probs.push_back(p.probs);
        for (const auto& [key, value] : p.tags) {
            auto [pos, inserted] = partial.tags.emplace(key, value);
            if (!inserted && pos->second != value)
                throw DataError("conflicting values for tag \"" + key + "\" in study \"" +
                                it->second + "\"");
        }
    }

    PredictionSet fused;
    fused.level = PredictionLevel::study;
    fused.num_classes = videos.num_classes;
    for (auto& [study_id, partial] : studies) {
        Prediction p;
        p.probs = fuse_study(partial.group, normal_class);
        p.label = partial.group.label;
        p.tags = std::move(partial.tags);
        fused.entries.emplace(study_id, std::move(p));
    }
    fused.check();
    return fused;
}

// Study map file: one {"video_id","study_id"} object per line.
inline void write_study_map(const std::map<std::string, std::string>& study_map,
                            const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write study map " + path.string());
    for (const auto& [video_id, study_id] : study_map) {
        nlohmann::json j{{"video_id", video_id}, {"study_id", study_id}};
        out << j.dump() << "\n";
    }
    if (!out) throw DataError("I/O failure writing " + path.string());
}

inline std::map<std::string, std::string> read_study_map(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open study map " + path.string());
    std::map<std::string, std::string> study_map;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            nlohmann::json j = nlohmann::json::parse(line);
            std::string video_id = j.at("video_id").get<std::string>();
            std::string study_id = j.at("study_id").get<std::string>();
            if (!study_map.emplace(std::move(video_id), std::move(study_id)).second)
                throw DataError(path.string() + ":" + std::to_string(line_no) +
                                ": duplicate video id");
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path.string() + ":" + std::to_string(line_no) +
                            ": malformed study map line: " + e.what());
        }
    }
    if (study_map.empty()) throw DataError(path.string() + ": empty study map");
    return study_map;
}

} // namespace dyncal
