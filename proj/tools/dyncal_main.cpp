// Command-line front end: simulate, train-toy, calibrate, pseudo, evaluate,
// fuse, and pipeline subcommands over the library's file formats.
// Exit codes: 0 success, 1 usage/validation error, 2 data error,
// 3 non-convergence warning (output file still written).

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "dyncal/dyncal.hpp"

namespace fs = std::filesystem;

namespace {

struct CommonOpts {
    std::string config_path;
    std::uint64_t seed = 0;
    std::string out_dir;
    CLI::Option* seed_opt = nullptr;
    CLI::Option* out_dir_opt = nullptr;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_path,
                    "JSON config file mirroring the pipeline config; flags override it");
    opts.seed_opt = cmd->add_option("--seed", opts.seed, "master random seed");
    opts.out_dir_opt = cmd->add_option("--out-dir", opts.out_dir, "output directory");
}

dyncal::PipelineConfig load_config(const CommonOpts& opts) {
    dyncal::PipelineConfig cfg;
    if (!opts.config_path.empty()) {
        std::ifstream in(opts.config_path);
        if (!in) throw dyncal::UsageError("cannot open config file " + opts.config_path);
        try {
            cfg = nlohmann::json::parse(in).get<dyncal::PipelineConfig>();
        } catch (const nlohmann::json::exception& e) {
            throw dyncal::UsageError("malformed config file " + opts.config_path + ": " + e.what());
        }
    }
    if (opts.seed_opt && opts.seed_opt->count() > 0) {
        cfg.sim.seed = opts.seed;
        cfg.toy.seed = opts.seed;
        cfg.optimizer.seed = opts.seed;
    }
    if (opts.out_dir_opt && opts.out_dir_opt->count() > 0) cfg.out_dir = opts.out_dir;
    return cfg;
}

std::optional<dyncal::EpochWindow> make_window(const CLI::Option* lo_opt, int lo,
                                               const CLI::Option* hi_opt, int hi) {
    const bool have_lo = lo_opt->count() > 0;
    const bool have_hi = hi_opt->count() > 0;
    if (have_lo != have_hi)
        throw dyncal::UsageError("--epoch-lo and --epoch-hi must be given together");
    if (!have_lo) return std::nullopt;
    if (lo > hi) throw dyncal::UsageError("epoch window must satisfy lo <= hi");
    return dyncal::EpochWindow{lo, hi};
}

void ensure_parent(const fs::path& file) {
    const fs::path dir = file.parent_path();
    if (!dir.empty()) fs::create_directories(dir);
}

void print_metrics_line(const dyncal::MetricsReport& report) {
    std::cout << dyncal::to_string(report.level) << " level: balanced_accuracy="
              << report.balanced_accuracy << " balanced_mae=" << report.balanced_mae
              << " balanced_ece=" << report.balanced_ece << " aurc=" << report.aurc << "\n";
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"calibrated training-dynamics pseudo-label toolkit"};
    app.require_subcommand(1);
    int warn_exit = 0;

    // simulate ---------------------------------------------------------------
    auto* sim_cmd = app.add_subcommand(
        "simulate", "generate a seeded synthetic dataset and its logit trajectories");
    CommonOpts sim_opts;
    add_common(sim_cmd, sim_opts);
    int sim_classes = 0, sim_studies = 0;
    auto* sim_classes_opt = sim_cmd->add_option("--classes", sim_classes, "number of classes");
    auto* sim_studies_opt = sim_cmd->add_option("--studies", sim_studies, "number of studies");
    sim_cmd->callback([&] {
        dyncal::PipelineConfig cfg = load_config(sim_opts);
        if (sim_classes_opt->count() > 0) cfg.sim.num_classes = sim_classes;
        if (sim_studies_opt->count() > 0) cfg.sim.num_studies = sim_studies;
        cfg.sim.check();
        fs::create_directories(cfg.out_dir);
        dyncal::SyntheticDataset dataset = dyncal::simulate_dataset(cfg.sim);
        dyncal::write_dataset(dataset, cfg.out_dir / "dataset.jsonl");
        dyncal::TrajectoryStore store = dyncal::simulate_trajectories(cfg.sim, dataset);
        dyncal::save_trajectories(store, cfg.out_dir / "trajectories.jsonl");
        std::size_t train = 0, val = 0, test = 0;
        for (const auto& row : dataset.rows) {
            if (row.split == dyncal::Split::train) ++train;
            else if (row.split == dyncal::Split::val) ++val;
            else ++test;
        }
        std::cout << "dataset: " << dataset.rows.size() << " videos (" << train << " train, "
                  << val << " val, " << test << " test), " << cfg.sim.num_classes
                  << " classes, " << cfg.sim.num_epochs << " epochs, seed " << cfg.sim.seed
                  << "\nwrote " << (cfg.out_dir / "dataset.jsonl").string() << " and "
                  << (cfg.out_dir / "trajectories.jsonl").string() << "\n";
    });

    // train-toy ---------------------------------------------------------------
    auto* train_cmd = app.add_subcommand(
        "train-toy", "train the toy linear classifier and record its dynamics");
    CommonOpts train_opts;
    add_common(train_cmd, train_opts);
    std::string train_dataset, train_labels;
    double train_lr = 0.1;
    int train_epochs = 0;
    train_cmd->add_option("--dataset", train_dataset, "dataset file")->required();
    train_cmd->add_option("--labels", train_labels, "pseudo-label file (default: recorded labels)");
    auto* train_lr_opt = train_cmd->add_option("--lr", train_lr, "learning rate");
    auto* train_epochs_opt =
        train_cmd->add_option("--epochs", train_epochs, "training epochs (0: dataset default)");
    train_cmd->callback([&] {
        dyncal::PipelineConfig cfg = load_config(train_opts);
        if (train_lr_opt->count() > 0) cfg.toy.learning_rate = train_lr;
        if (train_epochs_opt->count() > 0) cfg.toy.epochs = train_epochs;
        dyncal::SyntheticDataset dataset = dyncal::read_dataset(train_dataset);
        dyncal::PseudoLabelSet labels;
        const dyncal::PseudoLabelSet* labels_ptr = nullptr;
        if (!train_labels.empty()) {
            labels = dyncal::read_pseudo_labels(train_labels);
            labels_ptr = &labels;
        }
        dyncal::ToyTrainResult result = dyncal::train_toy(dataset, labels_ptr, cfg.toy);
        fs::create_directories(cfg.out_dir);
        dyncal::write_toy_model(result.model, cfg.out_dir / "model.json");
        dyncal::save_trajectories(result.dynamics, cfg.out_dir / "dynamics.jsonl");
        std::cout << "trained on " << dyncal::split_rows(dataset, dyncal::Split::train).size()
                  << " videos for " << result.dynamics.num_epochs() << " epochs\nwrote "
                  << (cfg.out_dir / "model.json").string() << " and "
                  << (cfg.out_dir / "dynamics.jsonl").string() << "\n";
    });

    // calibrate ---------------------------------------------------------------
    auto* cal_cmd = app.add_subcommand(
        "calibrate", "fit a temperature or affine logit map on validation dynamics");
    CommonOpts cal_opts;
    add_common(cal_cmd, cal_opts);
    std::string cal_traj, cal_method, cal_out;
    int cal_lo = 0, cal_hi = 0;
    double cal_lr = 0.0, cal_tol = 0.0, cal_l1 = 0.0, cal_l2 = 0.0;
    int cal_iters = 0;
    cal_cmd->add_option("--trajectories", cal_traj, "trajectory file")->required();
    cal_cmd->add_option("--method", cal_method, "temperature or dirichlet")
        ->required()
        ->check(CLI::IsMember({"temperature", "dirichlet"}));
    auto* cal_lo_opt = cal_cmd->add_option("--epoch-lo", cal_lo, "epoch window lower bound");
    auto* cal_hi_opt = cal_cmd->add_option("--epoch-hi", cal_hi, "epoch window upper bound");
    auto* cal_lr_opt = cal_cmd->add_option("--lr", cal_lr, "optimizer learning rate");
    auto* cal_iters_opt = cal_cmd->add_option("--max-iters", cal_iters, "optimizer iteration cap");
    auto* cal_tol_opt = cal_cmd->add_option("--tol", cal_tol, "gradient tolerance");
    auto* cal_l1_opt = cal_cmd->add_option("--lambda1", cal_l1, "bias penalty weight");
    auto* cal_l2_opt = cal_cmd->add_option("--lambda2", cal_l2, "off-diagonal penalty weight");
    auto* cal_out_opt = cal_cmd->add_option("--out", cal_out, "output calibration file");
    cal_cmd->callback([&] {
        dyncal::PipelineConfig cfg = load_config(cal_opts);
        if (cal_lr_opt->count() > 0) cfg.optimizer.learning_rate = cal_lr;
        if (cal_iters_opt->count() > 0) cfg.optimizer.max_iters = cal_iters;
        if (cal_tol_opt->count() > 0) cfg.optimizer.grad_tolerance = cal_tol;
        if (cal_l1_opt->count() > 0) cfg.regularizer.lambda1 = cal_l1;
        if (cal_l2_opt->count() > 0) cfg.regularizer.lambda2 = cal_l2;
        auto window = make_window(cal_lo_opt, cal_lo, cal_hi_opt, cal_hi);
        if (!window) window = cfg.epoch_window;

        dyncal::TrajectoryStore store = dyncal::load_trajectories(cal_traj);
        dyncal::LabeledLogits val =
            dyncal::epoch_averaged_split(store, dyncal::Split::val, window);
        fs::path out = cal_out_opt->count() > 0
                           ? fs::path(cal_out)
                           : cfg.out_dir / ("calibration_" + cal_method + ".json");
        ensure_parent(out);
        const double nll_before = dyncal::mean_nll(val);
        bool converged = false;
        if (cal_method == "temperature") {
            dyncal::TemperatureFit fit = dyncal::fit_temperature(val, cfg.optimizer);
            dyncal::write_calibration(dyncal::CalibrationRecord::from(fit), out);
            converged = fit.converged;
            std::cout << "gamma=" << fit.param.gamma << " nll " << nll_before << " -> "
                      << fit.final_nll << " (" << fit.iters << " iters)\nwrote " << out.string()
                      << "\n";
        } else {
            dyncal::DirichletFit fit =
                dyncal::fit_dirichlet(val, cfg.regularizer, cfg.optimizer);
            dyncal::write_calibration(dyncal::CalibrationRecord::from(fit), out);
            converged = fit.converged;
            std::cout << "nll " << nll_before << " -> " << fit.final_nll << ", objective "
                      << fit.final_objective << " (" << fit.iters << " iters)\nwrote "
                      << out.string() << "\n";
        }
        if (!converged) {
            std::cerr << "warning: optimizer did not reach the gradient tolerance\n";
            warn_exit = 3;
        }
    });

    // pseudo -------------------------------------------------------------------
    auto* pseudo_cmd =
        app.add_subcommand("pseudo", "build soft labels for the train split of a trajectory file");
    CommonOpts pseudo_opts;
    add_common(pseudo_cmd, pseudo_opts);
    std::string pseudo_traj, pseudo_method, pseudo_cal, pseudo_out;
    int pseudo_lo = 0, pseudo_hi = 0;
    pseudo_cmd->add_option("--trajectories", pseudo_traj, "trajectory file")->required();
    pseudo_cmd->add_option("--method", pseudo_method, "rt4u, pseudo_t, pseudo_d, or onehot")
        ->required()
        ->check(CLI::IsMember({"rt4u", "pseudo_t", "pseudo_d", "onehot"}));
    pseudo_cmd->add_option("--calibration", pseudo_cal,
                           "calibration file (required for pseudo_t/pseudo_d)");
    auto* pseudo_lo_opt = pseudo_cmd->add_option("--epoch-lo", pseudo_lo, "epoch window lower bound");
    auto* pseudo_hi_opt = pseudo_cmd->add_option("--epoch-hi", pseudo_hi, "epoch window upper bound");
    auto* pseudo_out_opt = pseudo_cmd->add_option("--out", pseudo_out, "output pseudo-label file");
    pseudo_cmd->callback([&] {
        dyncal::PipelineConfig cfg = load_config(pseudo_opts);
        auto window = make_window(pseudo_lo_opt, pseudo_lo, pseudo_hi_opt, pseudo_hi);
        if (!window) window = cfg.epoch_window;
        dyncal::PseudoMethod method = dyncal::pseudo_method_from_string(pseudo_method);

        dyncal::TrajectoryStore store = dyncal::load_trajectories(pseudo_traj);
        dyncal::PseudoLabelSet set;
        if (method == dyncal::PseudoMethod::rt4u || method == dyncal::PseudoMethod::onehot) {
            if (!pseudo_cal.empty())
                throw dyncal::UsageError("calibration not applicable to method " + pseudo_method);
            set = method == dyncal::PseudoMethod::rt4u ? dyncal::make_rt4u(store, window)
                                                       : dyncal::make_onehot(store);
        } else {
            if (pseudo_cal.empty())
                throw dyncal::UsageError("method " + pseudo_method + " requires --calibration");
            dyncal::CalibrationRecord rec = dyncal::read_calibration(pseudo_cal);
            if (method == dyncal::PseudoMethod::pseudo_t) {
                if (rec.type != dyncal::CalibrationRecord::Type::temperature)
                    throw dyncal::UsageError("map type mismatch: pseudo_t needs a temperature file");
                set = dyncal::make_pseudo_t(store, rec.gamma, window);
            } else {
                if (rec.type != dyncal::CalibrationRecord::Type::dirichlet)
                    throw dyncal::UsageError("map type mismatch: pseudo_d needs a dirichlet file");
                set = dyncal::make_pseudo_d(store, rec.map, window);
            }
        }
        fs::path out = pseudo_out_opt->count() > 0
                           ? fs::path(pseudo_out)
                           : cfg.out_dir / ("labels_" + pseudo_method + ".jsonl");
        ensure_parent(out);
        dyncal::write_pseudo_labels(set, out);
        std::cout << "wrote " << set.entries.size() << " " << pseudo_method
                  << " labels to " << out.string() << "\n";
    });

    // evaluate -------------------------------------------------------------------
    auto* eval_cmd = app.add_subcommand(
        "evaluate", "compute balanced metrics and the risk-coverage sweep for predictions");
    CommonOpts eval_opts;
    add_common(eval_cmd, eval_opts);
    std::string eval_preds, eval_dataset, eval_model, eval_split = "test";
    std::string eval_tag, eval_out, eval_subgroup_out;
    eval_cmd->add_option("--predictions", eval_preds, "prediction file");
    eval_cmd->add_option("--dataset", eval_dataset, "dataset file (with --model)");
    eval_cmd->add_option("--model", eval_model, "toy model file (with --dataset)");
    eval_cmd->add_option("--split", eval_split, "dataset split to predict")
        ->check(CLI::IsMember({"train", "val", "test"}));
    eval_cmd->add_option("--subgroup-tag", eval_tag, "tag key for the subgroup confidence CSV");
    auto* eval_out_opt = eval_cmd->add_option("--out", eval_out, "output report file");
    auto* eval_sub_opt =
        eval_cmd->add_option("--subgroup-out", eval_subgroup_out, "subgroup CSV path");
    eval_cmd->callback([&] {
        dyncal::PipelineConfig cfg = load_config(eval_opts);
        const bool from_file = !eval_preds.empty();
        const bool from_model = !eval_dataset.empty() || !eval_model.empty();
        if (from_file == from_model)
            throw dyncal::UsageError("pass either --predictions or both --dataset and --model");
        dyncal::PredictionSet preds;
        if (from_file) {
            preds = dyncal::read_predictions(eval_preds);
        } else {
            if (eval_dataset.empty() || eval_model.empty())
                throw dyncal::UsageError("--dataset and --model must be given together");
            dyncal::SyntheticDataset dataset = dyncal::read_dataset(eval_dataset);
            dyncal::ToyModel model = dyncal::read_toy_model(eval_model);
            preds = dyncal::predict_toy(
                model, dyncal::split_rows(dataset, dyncal::split_from_string(eval_split)));
        }
        dyncal::MetricsReport report = dyncal::evaluate_predictions(preds, cfg.selective);
        fs::path out =
            eval_out_opt->count() > 0 ? fs::path(eval_out) : cfg.out_dir / "report.json";
        ensure_parent(out);
        dyncal::write_metrics_report(report, out);
        print_metrics_line(report);
        std::cout << "wrote " << out.string() << "\n";
        if (!eval_tag.empty()) {
            fs::path sub_out = eval_sub_opt->count() > 0 ? fs::path(eval_subgroup_out)
                                                         : cfg.out_dir / "subgroup.csv";
            ensure_parent(sub_out);
            dyncal::write_subgroup_csv(dyncal::subgroup_confidence_report(preds, eval_tag),
                                       sub_out);
            std::cout << "wrote " << sub_out.string() << "\n";
        }
    });

    // fuse -------------------------------------------------------------------
    auto* fuse_cmd = app.add_subcommand(
        "fuse", "aggregate video predictions per study with the worst-case rule");
    CommonOpts fuse_opts;
    add_common(fuse_cmd, fuse_opts);
    std::string fuse_preds, fuse_map, fuse_out, fuse_report;
    int fuse_normal = 0;
    fuse_cmd->add_option("--predictions", fuse_preds, "video-level prediction file")->required();
    fuse_cmd->add_option("--study-map", fuse_map, "video-to-study map file")->required();
    auto* fuse_normal_opt =
        fuse_cmd->add_option("--normal-class", fuse_normal, "index of the normal class");
    auto* fuse_out_opt = fuse_cmd->add_option("--out", fuse_out, "fused prediction file");
    auto* fuse_report_opt = fuse_cmd->add_option("--report", fuse_report, "study-level report file");
    fuse_cmd->callback([&] {
        dyncal::PipelineConfig cfg = load_config(fuse_opts);
        if (fuse_normal_opt->count() > 0) cfg.normal_class = fuse_normal;
        dyncal::PredictionSet videos = dyncal::read_predictions(fuse_preds);
        auto study_map = dyncal::read_study_map(fuse_map);
        dyncal::PredictionSet fused = dyncal::fuse_all(videos, study_map, cfg.normal_class);
        fs::path out =
            fuse_out_opt->count() > 0 ? fs::path(fuse_out) : cfg.out_dir / "fused.jsonl";
        ensure_parent(out);
        dyncal::write_predictions(fused, out);
        dyncal::MetricsReport report = dyncal::evaluate_predictions(fused, cfg.selective);
        fs::path report_path = fuse_report_opt->count() > 0 ? fs::path(fuse_report)
                                                            : cfg.out_dir / "report_study.json";
        ensure_parent(report_path);
        dyncal::write_metrics_report(report, report_path);
        print_metrics_line(report);
        std::cout << "wrote " << out.string() << " and " << report_path.string() << "\n";
    });

    // pipeline -----------------------------------------------------------------
    auto* pipe_cmd = app.add_subcommand(
        "pipeline", "run simulate, train, calibrate, pseudo-label, retrain, evaluate, and fuse");
    CommonOpts pipe_opts;
    add_common(pipe_cmd, pipe_opts);
    pipe_cmd->callback([&] {
        dyncal::PipelineConfig cfg = load_config(pipe_opts);
        dyncal::PipelineResult result = dyncal::run_pipeline(cfg);
        std::cout << dyncal::format_comparison_table(result);
        std::cout << "artifacts in " << result.out_dir.string() << "\n";
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const dyncal::UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const dyncal::DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return warn_exit;
}
