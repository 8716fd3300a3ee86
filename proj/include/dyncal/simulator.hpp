#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dyncal/errors.hpp"
#include "dyncal/math.hpp"
#include "dyncal/metrics.hpp"
#include "dyncal/pseudo_labels.hpp"
#include "dyncal/rng.hpp"
#include "dyncal/trajectory.hpp"

namespace dyncal {

struct SimConfig {
    int num_classes = 3;
    int num_studies = 200;
    int views_min = 2;
    int views_max = 5;
    int feature_dim = 8;
    int num_epochs = 40;
    double difficulty_alpha = 2.0;
    double difficulty_beta = 2.0;
    double label_noise_rate = 0.05;
    double margin_max = 6.0;
    double noise_scale = 0.5;
    double confusion_kappa = 0.7;
    double subgroup_rate = 0.141;
    double subgroup_difficulty_boost = 0.3;
    double split_train = 0.8;
    double split_val = 0.1;
    double split_test = 0.1;
    std::uint64_t seed = 0;
    // Test hook: difficulty as a function of (study index, view index) instead
    // of a Beta draw. Not serialized; manifests echo only the scalar fields.
    std::optional<std::function<double(int, int)>> difficulty_override;

    void check() const {
        if (num_classes < 2) throw UsageError("num_classes must be at least 2");
        if (num_classes > feature_dim)
            throw UsageError("num_classes may not exceed feature_dim (class means need distinct axes)");
        if (num_studies < 1) throw UsageError("num_studies must be positive");
        if (views_min < 1 || views_max < views_min)
            throw UsageError("views range must satisfy 1 <= min <= max");
        if (num_epochs < 1) throw UsageError("num_epochs must be positive");
        if (!(difficulty_alpha > 0.0) || !(difficulty_beta > 0.0))
            throw UsageError("difficulty Beta shapes must be positive");
        if (!(label_noise_rate >= 0.0) || label_noise_rate >= 1.0)
            throw UsageError("label_noise_rate must lie in [0,1)");
        if (!(margin_max > 0.0)) throw UsageError("margin_max must be positive");
        if (!(noise_scale >= 0.0)) throw UsageError("noise_scale must be nonnegative");
        if (confusion_kappa < 0.0 || confusion_kappa > 1.0)
            throw UsageError("confusion_kappa must lie in [0,1]");
        if (subgroup_rate < 0.0 || subgroup_rate > 1.0)
            throw UsageError("subgroup_rate must lie in [0,1]");
        if (subgroup_difficulty_boost < 0.0 || subgroup_difficulty_boost > 1.0)
            throw UsageError("subgroup_difficulty_boost must lie in [0,1]");
        if (split_train < 0.0 || split_val < 0.0 || split_test < 0.0 ||
            std::abs(split_train + split_val + split_test - 1.0) > 1e-9)
            throw UsageError("split fractions must be nonnegative and sum to 1");
    }
};

inline void to_json(nlohmann::json& j, const SimConfig& cfg) {
    j = nlohmann::json{{"num_classes", cfg.num_classes},
                       {"num_studies", cfg.num_studies},
                       {"views_min", cfg.views_min},
                       {"views_max", cfg.views_max},
                       {"feature_dim", cfg.feature_dim},
                       {"num_epochs", cfg.num_epochs},
                       {"difficulty_alpha", cfg.difficulty_alpha},
                       {"difficulty_beta", cfg.difficulty_beta},
                       {"label_noise_rate", cfg.label_noise_rate},
                       {"margin_max", cfg.margin_max},
                       {"noise_scale", cfg.noise_scale},
                       {"confusion_kappa", cfg.confusion_kappa},
                       {"subgroup_rate", cfg.subgroup_rate},
                       {"subgroup_difficulty_boost", cfg.subgroup_difficulty_boost},
                       {"split_train", cfg.split_train},
                       {"split_val", cfg.split_val},
                       {"split_test", cfg.split_test},
                       {"seed", cfg.seed}};
}

inline void from_json(const nlohmann::json& j, SimConfig& cfg) {
    j.at("num_classes").get_to(cfg.num_classes);
    j.at("num_studies").get_to(cfg.num_studies);
    j.at("views_min").get_to(cfg.views_min);
    j.at("views_max").get_to(cfg.views_max);
    j.at("feature_dim").get_to(cfg.feature_dim);
    j.at("num_epochs").get_to(cfg.num_epochs);
    j.at("difficulty_alpha").get_to(cfg.difficulty_alpha);
    j.at("difficulty_beta").get_to(cfg.difficulty_beta);
    j.at("label_noise_rate").get_to(cfg.label_noise_rate);
    j.at("margin_max").get_to(cfg.margin_max);
    j.at("noise_scale").get_to(cfg.noise_scale);
    j.at("subgroup_rate").get_to(cfg.subgroup_rate);
    j.at("subgroup_difficulty_boost").get_to(cfg.subgroup_difficulty_boost);
    j.at("confusion_kappa").get_to(cfg.confusion_kappa);
    j.at("split_train").get_to(cfg.split_train);
    j.at("split_val").get_to(cfg.split_val);
    j.at("split_test").get_to(cfg.split_test);
    j.at("seed").get_to(cfg.seed);
}

struct VideoRow {
    std::string video_id;
    std::string study_id;
    Split split = Split::train;
    int latent_class = 0;
    int label = 0; // recorded label; differs from latent_class on noise-flipped studies
    double difficulty = 0.0;
    bool subgroup = false;
    std::vector<double> features;
};

struct SyntheticDataset {
    SimConfig config;
    std::vector<VideoRow> rows; // generation order: study-major, then view
};

// Ordinal neighbor toward the interior; class 1's confusable is 2.
inline int confusable_class(int cls, int num_classes) {
    if (cls == 0) return 1;
    if (cls == num_classes - 1) return num_classes - 2;
    return cls + 1;
}

namespace detail {

// Largest-remainder apportionment of num_studies across the three splits,
// remainders broken in train/val/test order, then a Fisher-Yates shuffle.
inline std::vector<Split> study_split_tags(const SimConfig& cfg, RandomStream& rng) {
    const double fractions[3] = {cfg.split_train, cfg.split_val, cfg.split_test};
    const Split splits[3] = {Split::train, Split::val, Split::test};
    int counts[3];
    double remainders[3];
    int assigned = 0;
    for (int i = 0; i < 3; ++i) {
        double exact = fractions[i] * cfg.num_studies;
        counts[i] = static_cast<int>(std::floor(exact + 1e-9));
        remainders[i] = exact - counts[i];
        assigned += counts[i];
    }
    int order[3] = {0, 1, 2};
    std::stable_sort(order, order + 3, [&](int a, int b) { return remainders[a] > remainders[b]; });
    for (int k = 0; assigned < cfg.num_studies; ++k, ++assigned) ++counts[order[k % 3]];
    std::vector<Split> tags;
    tags.reserve(static_cast<std::size_t>(cfg.num_studies));
    for (int i = 0; i < 3; ++i)
        tags.insert(tags.end(), static_cast<std::size_t>(counts[i]), splits[i]);
    rng.shuffle(tags);
    return tags;
}

inline std::string study_name(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "s%04d", index);
    return buf;
}

inline std::string view_name(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "v%02d", index);
    return buf;
}

} // namespace detail

// Deterministic generator. Draw order: split tags (shuffled), then per study
// (latent class, subgroup flag, view count), per video (difficulty, feature
// noise), and last the study-level label flip. Label noise acts on whole
// studies so member labels stay consistent for fusion; the flip probability
// couples to the study's mean difficulty.
inline SyntheticDataset simulate_dataset(const SimConfig& cfg) {
    cfg.check();
    SyntheticDataset dataset;
    dataset.config = cfg;
    RandomStream rng(cfg.seed);
    std::vector<Split> split_tags = detail::study_split_tags(cfg, rng);

    const auto F = static_cast<std::size_t>(cfg.feature_dim);
    for (int s = 0; s < cfg.num_studies; ++s) {
        const std::string study_id = detail::study_name(s);
        const int latent = rng.uniform_int(0, cfg.num_classes - 1);
        const bool subgroup = rng.bernoulli(cfg.subgroup_rate);
        const int views = rng.uniform_int(cfg.views_min, cfg.views_max);
        const int confusable = confusable_class(latent, cfg.num_classes);

        std::vector<VideoRow> study_rows;
        double difficulty_sum = 0.0;
        for (int v = 0; v < views; ++v) {
            VideoRow row;
            row.video_id = study_id + "_" + detail::view_name(v);
            row.study_id = study_id;
            row.split = split_tags[static_cast<std::size_t>(s)];
            row.latent_class = latent;
            row.subgroup = subgroup;
            double d;
            if (cfg.difficulty_override) {
                d = (*cfg.difficulty_override)(s, v);
                if (!(d >= 0.0) || d > 1.0)
                    throw UsageError("difficulty override must return values in [0,1]");
            } else {
                d = rng.beta(cfg.difficulty_alpha, cfg.difficulty_beta);
            }
            if (subgroup) d += cfg.subgroup_difficulty_boost * (1.0 - d);
            row.difficulty = d;
            difficulty_sum += d;

            row.features.resize(F);
            for (std::size_t f = 0; f < F; ++f) row.features[f] = rng.normal(0.0, 1.0);
            const double mix = d * cfg.confusion_kappa;
            row.features[static_cast<std::size_t>(latent)] += 2.0 * (1.0 - mix);
            row.features[static_cast<std::size_t>(confusable)] += 2.0 * mix;
            study_rows.push_back(std::move(row));
        }

        const double mean_d = difficulty_sum / static_cast<double>(views);
        const double flip_p = std::min(1.0, cfg.label_noise_rate * (0.5 + mean_d));
        const bool flipped = rng.bernoulli(flip_p);
        for (auto& row : study_rows) {
            row.label = flipped ? confusable : latent;
            dataset.rows.push_back(std::move(row));
        }
    }
    return dataset;
}

// Synthetic training dynamics for each video. The target class is the latent
// class, so noise-flipped studies produce trajectories that disagree with the
// recorded label. Epoch draw order per video: classes in index order.
inline TrajectoryStore simulate_trajectories(const SimConfig& cfg, const SyntheticDataset& dataset) {
    cfg.check();
    if (nlohmann::json(cfg) != nlohmann::json(dataset.config))
        throw DataError("config does not match the dataset manifest");

    RandomStream rng(cfg.seed + 1); // separate stream from dataset generation
    const int C = cfg.num_classes;
    const int T = cfg.num_epochs;
    std::vector<LogitRecord> records;
    records.reserve(dataset.rows.size() * static_cast<std::size_t>(T));
    for (const auto& row : dataset.rows) {
        const int confusable = confusable_class(row.latent_class, C);
        const double d = row.difficulty;
        const double hard_sigma = cfg.noise_scale * (1.0 + d);
        for (int t = 1; t <= T; ++t) {
            const double progress = static_cast<double>(t) / static_cast<double>(T);
            LogitRecord rec;
            rec.sample_id = row.video_id;
            rec.study_id = row.study_id;
            rec.view = row.video_id.substr(row.study_id.size() + 1);
            rec.split = row.split;
            rec.label = row.label;
            rec.epoch = t;
            rec.tags["subgroup"] = row.subgroup ? "true" : "false";
            rec.logits.resize(static_cast<std::size_t>(C));
            for (int c = 0; c < C; ++c) {
                double mean = 0.0;
                double sigma = cfg.noise_scale;
                if (c == row.latent_class) {
                    mean = cfg.margin_max * (1.0 - d) * progress;
                    sigma = hard_sigma;
                } else if (c == confusable) {
                    mean = cfg.margin_max * d * cfg.confusion_kappa * progress;
                    sigma = hard_sigma;
                }
                rec.logits[static_cast<std::size_t>(c)] = rng.normal(mean, sigma);
            }
            records.push_back(std::move(rec));
        }
    }
    return TrajectoryStore::from_records(records);
}

// ---------------------------------------------------------------------------
// Toy multinomial-logistic model.

struct ToyModel {
    std::vector<std::vector<double>> W; // C x F
    std::vector<double> b;              // C

    int num_classes() const { return static_cast<int>(W.size()); }
    int feature_dim() const { return W.empty() ? 0 : static_cast<int>(W.front().size()); }

    static ToyModel zeros(int C, int F) {
        ToyModel m;
        m.W.assign(static_cast<std::size_t>(C), std::vector<double>(static_cast<std::size_t>(F), 0.0));
        m.b.assign(static_cast<std::size_t>(C), 0.0);
        return m;
    }

    std::vector<double> logits(std::span<const double> x) const {
        if (x.size() != static_cast<std::size_t>(feature_dim()))
            throw DataError("feature vector length does not match the model");
        std::vector<double> z(W.size());
        for (std::size_t c = 0; c < W.size(); ++c) {
            double acc = b[c];
            for (std::size_t f = 0; f < x.size(); ++f) acc += W[c][f] * x[f];
            z[c] = acc;
        }
        return z;
    }
};

// (feature vector, soft target) pairs for one gradient step.
using FeatureBatch = std::vector<std::pair<std::vector<double>, std::vector<double>>>;

inline double toy_loss(const ToyModel& model, const FeatureBatch& batch) {
    if (batch.empty()) throw DataError("empty training batch");
    double total = 0.0;
    for (const auto& [x, q] : batch)
        total += soft_cross_entropy(model.logits(x), q);
    return total / static_cast<double>(batch.size());
}

struct ToyGradient {
    std::vector<std::vector<double>> dW;
    std::vector<double> db;
};

// Mean soft-target cross-entropy gradient: delta = softmax(Wx+b) - q.
inline ToyGradient toy_loss_gradient(const ToyModel& model, const FeatureBatch& batch) {
    if (batch.empty()) throw DataError("empty training batch");
    const auto C = static_cast<std::size_t>(model.num_classes());
    const auto F = static_cast<std::size_t>(model.feature_dim());
    ToyGradient g;
    g.dW.assign(C, std::vector<double>(F, 0.0));
    g.db.assign(C, 0.0);
    const double inv_n = 1.0 / static_cast<double>(batch.size());
    for (const auto& [x, q] : batch) {
        std::vector<double> p = softmax(model.logits(x));
        for (std::size_t c = 0; c < C; ++c) {
            const double delta = (p[c] - q[c]) * inv_n;
            g.db[c] += delta;
            for (std::size_t f = 0; f < F; ++f) g.dW[c][f] += delta * x[f];
        }
    }
    return g;
}

struct ToyTrainConfig {
    double learning_rate = 0.1;
    int epochs = 0; // 0 means the dataset's num_epochs
    std::uint64_t seed = 0;

    void check() const {
        if (!(learning_rate > 0.0)) throw UsageError("learning rate must be positive");
        if (epochs < 0) throw UsageError("epochs must be nonnegative");
    }
};

struct ToyTrainResult {
    ToyModel model;
    TrajectoryStore dynamics; // per-epoch post-update logits on train and val rows
};

// Full-batch gradient descent from zero initialization on the train split.
// labels == nullptr trains against one-hot recorded labels; otherwise the
// pseudo-label set must cover every train video.
inline ToyTrainResult train_toy(const SyntheticDataset& dataset, const PseudoLabelSet* labels,
                                const ToyTrainConfig& cfg = {}) {
    cfg.check();
    dataset.config.check();
    const int C = dataset.config.num_classes;
    const int F = dataset.config.feature_dim;
    const int T = cfg.epochs > 0 ? cfg.epochs : dataset.config.num_epochs;
    if (labels && labels->num_classes != C)
        throw DataError("pseudo-label class count does not match the dataset");

    FeatureBatch batch;
    std::vector<const VideoRow*> train_rows, recorded_rows;
    for (const auto& row : dataset.rows) {
        if (row.split == Split::train) {
            train_rows.push_back(&row);
            std::vector<double> q;
            if (labels) {
                auto it = labels->entries.find(row.video_id);
                if (it == labels->entries.end())
                    throw DataError("pseudo-labels missing train video \"" + row.video_id + "\"");
                q = it->second;
            } else {
                q.assign(static_cast<std::size_t>(C), 0.0);
                q[static_cast<std::size_t>(row.label)] = 1.0;
            }
            batch.emplace_back(row.features, std::move(q));
        }
        if (row.split == Split::train || row.split == Split::val) recorded_rows.push_back(&row);
    }
    if (batch.empty()) throw DataError("dataset has no train rows");

    ToyModel model = ToyModel::zeros(C, F);
    std::vector<LogitRecord> records;
    records.reserve(recorded_rows.size() * static_cast<std::size_t>(T));
    for (int t = 1; t <= T; ++t) {
        ToyGradient g = toy_loss_gradient(model, batch);
        for (std::size_t c = 0; c < model.W.size(); ++c) {
            model.b[c] -= cfg.learning_rate * g.db[c];
            for (std::size_t f = 0; f < model.W[c].size(); ++f)
                model.W[c][f] -= cfg.learning_rate * g.dW[c][f];
        }
        for (const VideoRow* row : recorded_rows) {
            LogitRecord rec;
            rec.sample_id = row->video_id;
            rec.study_id = row->study_id;
            rec.view = row->video_id.substr(row->study_id.size() + 1);
            rec.split = row->split;
            rec.label = row->label;
            rec.epoch = t;
            rec.tags["subgroup"] = row->subgroup ? "true" : "false";
            rec.logits = model.logits(row->features);
            records.push_back(std::move(rec));
        }
    }
    ToyTrainResult result{std::move(model), TrajectoryStore::from_records(records)};
    return result;
}

inline PredictionSet predict_toy(const ToyModel& model, const std::vector<VideoRow>& rows) {
    PredictionSet preds;
    preds.level = PredictionLevel::video;
    preds.num_classes = model.num_classes();
    for (const auto& row : rows) {
        Prediction p;
        p.probs = softmax(model.logits(row.features));
        p.label = row.label;
        p.tags["subgroup"] = row.subgroup ? "true" : "false";
        preds.entries.emplace(row.video_id, std::move(p));
    }
    preds.check();
    return preds;
}

inline std::vector<VideoRow> split_rows(const SyntheticDataset& dataset, Split split) {
    std::vector<VideoRow> rows;
    for (const auto& row : dataset.rows)
        if (row.split == split) rows.push_back(row);
    return rows;
}

inline std::map<std::string, std::string> study_map_of(const SyntheticDataset& dataset) {
    std::map<std::string, std::string> study_map;
    for (const auto& row : dataset.rows) study_map.emplace(row.video_id, row.study_id);
    return study_map;
}

// ---------------------------------------------------------------------------
// Dataset and model files.

inline void write_dataset(const SyntheticDataset& dataset, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write dataset file " + path.string());
    nlohmann::json manifest{
        {"type", "synthetic_dataset"},
        {"config", dataset.config},
        {"rng", RandomStream::algorithm()},
        {"generation_order",
         "split tags (shuffled); per study: latent, subgroup, views; per video: "
         "difficulty, features; study label flip last"}};
    out << manifest.dump() << "\n";
    for (const auto& row : dataset.rows) {
        nlohmann::json j{{"video_id", row.video_id},   {"study_id", row.study_id},
                         {"split", to_string(row.split)}, {"latent_class", row.latent_class},
                         {"label", row.label},         {"difficulty", row.difficulty},
                         {"subgroup", row.subgroup},   {"features", row.features}};
        out << j.dump() << "\n";
    }
    if (!out) throw DataError("I/O failure writing " + path.string());
}

inline SyntheticDataset read_dataset(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open dataset file " + path.string());
    SyntheticDataset dataset;
    std::string line;
    std::size_t line_no = 0;
    bool have_manifest = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            nlohmann::json j = nlohmann::json::parse(line);
            if (!have_manifest) {
                if (j.value("type", "") != "synthetic_dataset")
                    throw DataError(path.string() + ":1: not a synthetic dataset manifest");
                dataset.config = j.at("config").get<SimConfig>();
                have_manifest = true;
                continue;
            }
            VideoRow row;
            row.video_id = j.at("video_id").get<std::string>();
            row.study_id = j.at("study_id").get<std::string>();
            row.split = split_from_string(j.at("split").get<std::string>());
            row.latent_class = j.at("latent_class").get<int>();
            row.label = j.at("label").get<int>();
            row.difficulty = j.at("difficulty").get<double>();
            row.subgroup = j.at("subgroup").get<bool>();
            row.features = j.at("features").get<std::vector<double>>();
            if (row.latent_class < 0 || row.latent_class >= dataset.config.num_classes ||
                row.label < 0 || row.label >= dataset.config.num_classes)
                throw DataError(path.string() + ":" + std::to_string(line_no) +
                                ": class index out of range");
            if (row.features.size() != static_cast<std::size_t>(dataset.config.feature_dim))
                throw DataError(path.string() + ":" + std::to_string(line_no) +
                                ": feature length mismatch");
            if (!all_finite(row.features))
                throw DataError(path.string() + ":" + std::to_string(line_no) +
                                ": non-finite feature");
            dataset.rows.push_back(std::move(row));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path.string() + ":" + std::to_string(line_no) +
                            ": malformed dataset line: " + e.what());
        }
    }
    if (!have_manifest) throw DataError(path.string() + ": missing manifest line");
    if (dataset.rows.empty()) throw DataError(path.string() + ": dataset has no rows");
    return dataset;
}

inline void write_toy_model(const ToyModel& model, const std::filesystem::path& path) {
    nlohmann::json j{{"W", model.W},
                     {"b", model.b},
                     {"F", model.feature_dim()},
                     {"C", model.num_classes()}};
    std::ofstream out(path);
    if (!out) throw DataError("cannot write model file " + path.string());
    out << j.dump() << "\n";
    if (!out) throw DataError("I/O failure writing " + path.string());
}

inline ToyModel read_toy_model(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open model file " + path.string());
    try {
        nlohmann::json j = nlohmann::json::parse(in);
        ToyModel model;
        model.W = j.at("W").get<std::vector<std::vector<double>>>();
        model.b = j.at("b").get<std::vector<double>>();
        const auto C = j.at("C").get<int>();
        const auto F = j.at("F").get<int>();
        if (model.num_classes() != C || model.b.size() != static_cast<std::size_t>(C))
            throw DataError(path.string() + ": model class count mismatch");
        for (const auto& wr : model.W) {
            if (wr.size() != static_cast<std::size_t>(F))
                throw DataError(path.string() + ": model row length mismatch");
            if (!all_finite(wr)) throw DataError(path.string() + ": non-finite model weight");
        }
        if (!all_finite(model.b)) throw DataError(path.string() + ": non-finite model bias");
        return model;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + ": malformed model file: " + std::string(e.what()));
    }
}

} // namespace dyncal
