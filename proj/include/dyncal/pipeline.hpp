#pragma once

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dyncal/calibration.hpp"
#include "dyncal/errors.hpp"
#include "dyncal/fusion.hpp"
#include "dyncal/metrics.hpp"
#include "dyncal/pseudo_labels.hpp"
#include "dyncal/simulator.hpp"
#include "dyncal/trajectory.hpp"

namespace dyncal {

// Epoch-averaged logits with labels for one split, as consumed by the fitters.
inline LabeledLogits epoch_averaged_split(const TrajectoryStore& store, Split split,
                                          std::optional<EpochWindow> window = {}) {
    LabeledLogits out;
    for (const auto& s : store.samples())
        if (s.split == split) out.emplace_back(store.average_logits(s, window), s.label);
    if (out.empty()) throw DataError("trajectory store has no " + to_string(split) + " samples");
    return out;
}

struct PipelineConfig {
    SimConfig sim;
    // The pipeline runs both calibration fits to full convergence by default; the
    // plain OptimizerConfig defaults are sized for quick one-off fits instead.
    OptimizerConfig optimizer{.learning_rate = 0.1, .max_iters = 50000};
    RegularizerConfig regularizer;
    SelectiveConfig selective;
    ToyTrainConfig toy;
    std::optional<EpochWindow> epoch_window;
    std::filesystem::path out_dir = "out";
    std::string subgroup_tag = "subgroup";
    int normal_class = 0;

    void check() const {
        sim.check();
        check_optimizer_config(optimizer);
        selective.check();
        toy.check();
        if (normal_class < 0 || normal_class >= sim.num_classes)
            throw UsageError("normal_class out of range");
        if (epoch_window && epoch_window->lo > epoch_window->hi)
            throw UsageError("epoch window must satisfy lo <= hi");
        if (out_dir.empty()) throw UsageError("out_dir must be set");
    }
};

inline void to_json(nlohmann::json& j, const PipelineConfig& cfg) {
    j = nlohmann::json{{"sim", cfg.sim},
                       {"optimizer",
                        {{"learning_rate", cfg.optimizer.learning_rate},
                         {"max_iters", cfg.optimizer.max_iters},
                         {"grad_tolerance", cfg.optimizer.grad_tolerance}}},
                       {"regularizer",
                        {{"lambda1", cfg.regularizer.lambda1}, {"lambda2", cfg.regularizer.lambda2}}},
                       {"selective", {{"coverage_grid", cfg.selective.coverage_grid}}},
                       {"toy", {{"learning_rate", cfg.toy.learning_rate}, {"epochs", cfg.toy.epochs}}},
                       {"out_dir", cfg.out_dir.string()},
                       {"subgroup_tag", cfg.subgroup_tag},
                       {"normal_class", cfg.normal_class}};
    if (cfg.epoch_window)
        j["epoch_window"] = {cfg.epoch_window->lo, cfg.epoch_window->hi};
    else
        j["epoch_window"] = nullptr;
}

// Partial config objects are allowed; absent fields keep their defaults.
inline void from_json(const nlohmann::json& j, PipelineConfig& cfg) {
    if (j.contains("sim")) cfg.sim = j.at("sim").get<SimConfig>();
    if (j.contains("optimizer")) {
        const auto& o = j.at("optimizer");
        if (o.contains("learning_rate")) o.at("learning_rate").get_to(cfg.optimizer.learning_rate);
        if (o.contains("max_iters")) o.at("max_iters").get_to(cfg.optimizer.max_iters);
        if (o.contains("grad_tolerance")) o.at("grad_tolerance").get_to(cfg.optimizer.grad_tolerance);
    }
    if (j.contains("regularizer")) {
        const auto& r = j.at("regularizer");
        if (r.contains("lambda1")) r.at("lambda1").get_to(cfg.regularizer.lambda1);
        if (r.contains("lambda2")) r.at("lambda2").get_to(cfg.regularizer.lambda2);
    }
    if (j.contains("selective") && j.at("selective").contains("coverage_grid"))
        j.at("selective").at("coverage_grid").get_to(cfg.selective.coverage_grid);
    if (j.contains("toy")) {
        const auto& t = j.at("toy");
        if (t.contains("learning_rate")) t.at("learning_rate").get_to(cfg.toy.learning_rate);
        if (t.contains("epochs")) t.at("epochs").get_to(cfg.toy.epochs);
    }
    if (j.contains("epoch_window") && !j.at("epoch_window").is_null()) {
        auto w = j.at("epoch_window").get<std::vector<int>>();
        if (w.size() != 2) throw DataError("epoch_window must be [lo,hi]");
        cfg.epoch_window = EpochWindow{w[0], w[1]};
    }
    if (j.contains("out_dir")) cfg.out_dir = j.at("out_dir").get<std::string>();
    if (j.contains("subgroup_tag")) j.at("subgroup_tag").get_to(cfg.subgroup_tag);
    if (j.contains("normal_class")) j.at("normal_class").get_to(cfg.normal_class);
}

struct MethodOutcome {
    PseudoMethod method = PseudoMethod::onehot;
    MetricsReport video;
    MetricsReport study;
};

struct PipelineResult {
    std::filesystem::path out_dir;
    TemperatureFit temperature;
    DirichletFit dirichlet;
    std::vector<MethodOutcome> outcomes; // order: onehot, rt4u, pseudo_t, pseudo_d
};

inline constexpr std::array<PseudoMethod, 4> kPipelineMethods = {
    PseudoMethod::onehot, PseudoMethod::rt4u, PseudoMethod::pseudo_t, PseudoMethod::pseudo_d};

namespace detail {

inline void write_stage_marker(const std::filesystem::path& out_dir, const std::string& stage,
                               const std::string& what) {
    std::ofstream out(out_dir / "FAILED_STAGE.txt");
    if (out) out << stage << "\n" << what << "\n";
}

} // namespace detail

// Runs the full experiment: simulate, train the base model, calibrate its
// validation dynamics, build all four pseudo-label sets, retrain per method,
// evaluate at video level, fuse, evaluate at study level. Every artifact is
// written under cfg.out_dir; a failure leaves FAILED_STAGE.txt beside the
// artifacts produced so far.
inline PipelineResult run_pipeline(const PipelineConfig& cfg) {
    cfg.check();
    std::filesystem::create_directories(cfg.out_dir);
    const auto& dir = cfg.out_dir;
    std::string stage = "simulate";
    try {
        SyntheticDataset dataset = simulate_dataset(cfg.sim);
        write_dataset(dataset, dir / "dataset.jsonl");
        TrajectoryStore synthetic = simulate_trajectories(cfg.sim, dataset);
        save_trajectories(synthetic, dir / "synthetic_trajectories.jsonl");
        auto study_map = study_map_of(dataset);
        write_study_map(study_map, dir / "study_map.jsonl");

        stage = "train-toy";
        ToyTrainConfig base_cfg = cfg.toy;
        base_cfg.seed = cfg.sim.seed;
        ToyTrainResult base = train_toy(dataset, nullptr, base_cfg);
        save_trajectories(base.dynamics, dir / "dynamics.jsonl");
        write_toy_model(base.model, dir / "model_base.json");

        stage = "calibrate";
        LabeledLogits val = epoch_averaged_split(base.dynamics, Split::val, cfg.epoch_window);
        PipelineResult result;
        result.out_dir = dir;
        result.temperature = fit_temperature(val, cfg.optimizer);
        write_calibration(CalibrationRecord::from(result.temperature),
                          dir / "calibration_temperature.json");
        result.dirichlet = fit_dirichlet(val, cfg.regularizer, cfg.optimizer);
        write_calibration(CalibrationRecord::from(result.dirichlet),
                          dir / "calibration_dirichlet.json");

        stage = "pseudo";
        std::map<PseudoMethod, PseudoLabelSet> labels;
        labels.emplace(PseudoMethod::onehot, make_onehot(base.dynamics));
        labels.emplace(PseudoMethod::rt4u, make_rt4u(base.dynamics, cfg.epoch_window));
        labels.emplace(PseudoMethod::pseudo_t,
                       make_pseudo_t(base.dynamics, result.temperature.param, cfg.epoch_window));
        labels.emplace(PseudoMethod::pseudo_d,
                       make_pseudo_d(base.dynamics, result.dirichlet.map, cfg.epoch_window));
        for (const auto& [method, set] : labels)
            write_pseudo_labels(set, dir / ("labels_" + to_string(method) + ".jsonl"));

        std::vector<VideoRow> test_rows = split_rows(dataset, Split::test);
        if (test_rows.empty()) throw DataError("simulated dataset has no test rows");
        for (PseudoMethod method : kPipelineMethods) {
            const std::string name = to_string(method);
            stage = "retrain:" + name;
            ToyTrainConfig method_cfg = cfg.toy;
            method_cfg.seed = cfg.sim.seed;
            ToyTrainResult trained = train_toy(dataset, &labels.at(method), method_cfg);
            write_toy_model(trained.model, dir / ("model_" + name + ".json"));

            stage = "evaluate:" + name;
            PredictionSet preds = predict_toy(trained.model, test_rows);
            write_predictions(preds, dir / ("predictions_" + name + ".jsonl"));
            MethodOutcome outcome;
            outcome.method = method;
            outcome.video = evaluate_predictions(preds, cfg.selective);
            write_metrics_report(outcome.video, dir / ("report_video_" + name + ".json"));
            write_subgroup_csv(subgroup_confidence_report(preds, cfg.subgroup_tag),
                               dir / ("subgroup_" + name + ".csv"));

            stage = "fuse:" + name;
            PredictionSet fused = fuse_all(preds, study_map, cfg.normal_class);
            write_predictions(fused, dir / ("fused_" + name + ".jsonl"));
            outcome.study = evaluate_predictions(fused, cfg.selective);
            write_metrics_report(outcome.study, dir / ("report_study_" + name + ".json"));
            result.outcomes.push_back(std::move(outcome));
        }

        stage = "summary";
        nlohmann::json methods = nlohmann::json::array();
        for (const auto& outcome : result.outcomes) {
            auto block = [](const MetricsReport& r) {
                return nlohmann::json{{"balanced_mae", r.balanced_mae},
                                      {"balanced_accuracy", r.balanced_accuracy},
                                      {"balanced_ece", r.balanced_ece},
                                      {"aurc", r.aurc}};
            };
            methods.push_back({{"method", to_string(outcome.method)},
                               {"video", block(outcome.video)},
                               {"study", block(outcome.study)}});
        }
        nlohmann::json summary{
            {"config", cfg},
            {"calibration",
             {{"temperature",
               {{"gamma", result.temperature.param.gamma},
                {"converged", result.temperature.converged}}},
              {"dirichlet", {{"converged", result.dirichlet.converged}}}}},
            {"methods", std::move(methods)}};
        std::ofstream out(dir / "summary.json");
        if (!out) throw DataError("cannot write summary.json");
        out << summary.dump(2) << "\n";
        if (!out) throw DataError("I/O failure writing summary.json");
        return result;
    } catch (const std::exception& e) {
        detail::write_stage_marker(dir, stage, e.what());
        throw;
    }
}

// Fixed-width comparison table: one row per method, video and study metrics.
inline std::string format_comparison_table(const PipelineResult& result) {
    std::string table =
        "method    vMAE    vACC    vECE    vAURC   sMAE    sACC    sECE    sAURC\n";
    for (const auto& outcome : result.outcomes) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%-9s %-7.4f %-7.4f %-7.4f %-7.4f %-7.4f %-7.4f %-7.4f %.4f\n",
                      to_string(outcome.method).c_str(), outcome.video.balanced_mae,
                      outcome.video.balanced_accuracy, outcome.video.balanced_ece,
                      outcome.video.aurc, outcome.study.balanced_mae,
                      outcome.study.balanced_accuracy, outcome.study.balanced_ece,
                      outcome.study.aurc);
        table += buf;
    }
    return table;
}

} // namespace dyncal
