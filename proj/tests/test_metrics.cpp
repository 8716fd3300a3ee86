#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dyncal/metrics.hpp"
#include "dyncal/rng.hpp"

using Catch::Approx;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / "dyncal_tests";
    fs::create_directories(dir);
    return dir / name;
}

void add(dyncal::PredictionSet& set, const std::string& id, std::vector<double> probs, int label,
         std::map<std::string, std::string> tags = {}) {
    dyncal::Prediction p;
    p.probs = std::move(probs);
    p.label = label;
    p.tags = std::move(tags);
    set.entries.emplace(id, std::move(p));
}

std::string padded_id(int i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "p%05d", i);
    return buf;
}

// Dirichlet(alpha,...,alpha) probabilities with the label drawn from them, so
// the predictor is calibrated by construction.
dyncal::PredictionSet calibrated_set(int n, int classes, double alpha, dyncal::RandomStream& rng) {
    dyncal::PredictionSet set;
    set.num_classes = classes;
    for (int i = 0; i < n; ++i) {
        std::vector<double> p(static_cast<std::size_t>(classes));
        double sum = 0.0;
        for (auto& x : p) {
            x = rng.gamma(alpha);
            sum += x;
        }
        for (auto& x : p) x /= sum;
        double u = rng.uniform();
        int label = classes - 1;
        double acc = 0.0;
        for (int c = 0; c < classes; ++c) {
            acc += p[static_cast<std::size_t>(c)];
            if (u < acc) {
                label = c;
                break;
            }
        }
        add(set, padded_id(i), std::move(p), label);
    }
    return set;
}

// Independent re-implementation of the per-class binned calibration error.
double brute_force_balanced_ece(const dyncal::PredictionSet& set, int num_bins) {
    std::map<int, std::vector<const dyncal::Prediction*>> by_class;
    for (const auto& [id, p] : set.entries) by_class[p.label].push_back(&p);
    double total = 0.0;
    for (const auto& [cls, members] : by_class) {
        double ece = 0.0;
        for (int b = 0; b < num_bins; ++b) {
            std::size_t count = 0, correct = 0;
            double conf_sum = 0.0;
            for (const auto* p : members) {
                double conf = dyncal::confidence(p->probs);
                int bin = std::min(static_cast<int>(conf * num_bins), num_bins - 1);
                if (bin != b) continue;
                ++count;
                conf_sum += conf;
                if (dyncal::predicted_class(p->probs) == cls) ++correct;
            }
            if (count == 0) continue;
            double acc = static_cast<double>(correct) / static_cast<double>(count);
            double conf = conf_sum / static_cast<double>(count);
            ece += (static_cast<double>(count) / static_cast<double>(members.size())) *
                   std::abs(acc - conf);
        }
        total += ece;
    }
    return total / static_cast<double>(by_class.size());
}

} // namespace

TEST_CASE("predicted_class takes the argmax with low-index tie-break") {
    REQUIRE(dyncal::predicted_class(std::vector<double>{0.2, 0.5, 0.3}) == 1);
    REQUIRE(dyncal::predicted_class(std::vector<double>{0.4, 0.4, 0.2}) == 0);
    REQUIRE(dyncal::predicted_class(std::vector<double>{1.0 / 3, 1.0 / 3, 1.0 / 3}) == 0);
}

TEST_CASE("balanced accuracy averages per-class recall") {
    dyncal::PredictionSet perfect;
    perfect.num_classes = 3;
    add(perfect, "a", {1.0, 0.0, 0.0}, 0);
    add(perfect, "b", {0.0, 1.0, 0.0}, 1);
    add(perfect, "c", {0.0, 0.0, 1.0}, 2);
    REQUIRE(dyncal::balanced_accuracy(perfect) == Approx(1.0).epsilon(1e-12));

    // labels [0,0,1], predictions [0,1,1]: recalls 1/2 and 1
    dyncal::PredictionSet mixed;
    mixed.num_classes = 2;
    add(mixed, "a", {0.9, 0.1}, 0);
    add(mixed, "b", {0.2, 0.8}, 0);
    add(mixed, "c", {0.3, 0.7}, 1);
    REQUIRE(dyncal::balanced_accuracy(mixed) == Approx(0.75).epsilon(1e-12));

    dyncal::PredictionSet degenerate;
    degenerate.num_classes = 3;
    for (int i = 0; i < 6; ++i)
        add(degenerate, "d" + std::to_string(i), {0.8, 0.1, 0.1}, i % 3);
    REQUIRE(dyncal::balanced_accuracy(degenerate) == Approx(1.0 / 3).epsilon(1e-12));

    REQUIRE_THROWS_AS(dyncal::balanced_accuracy(dyncal::PredictionSet{}), dyncal::DataError);
}

TEST_CASE("balanced MAE averages per-class absolute index error") {
    dyncal::PredictionSet perfect;
    perfect.num_classes = 3;
    add(perfect, "a", {1.0, 0.0, 0.0}, 0);
    add(perfect, "b", {0.0, 0.0, 1.0}, 2);
    REQUIRE(dyncal::balanced_mae(perfect) == Approx(0.0).margin(1e-12));

    // labels [0,1], predictions [0,2]: per-class errors 0 and 1
    dyncal::PredictionSet mixed;
    mixed.num_classes = 3;
    add(mixed, "a", {0.9, 0.05, 0.05}, 0);
    add(mixed, "b", {0.1, 0.2, 0.7}, 1);
    REQUIRE(dyncal::balanced_mae(mixed) == Approx(0.5).epsilon(1e-12));

    dyncal::PredictionSet worst;
    worst.num_classes = 3;
    add(worst, "a", {0.9, 0.05, 0.05}, 2);
    REQUIRE(dyncal::balanced_mae(worst) == Approx(2.0).epsilon(1e-12));
}

TEST_CASE("balanced ECE hand cases") {
    dyncal::PredictionSet one;
    one.num_classes = 3;
    add(one, "a", {1.0, 0.0, 0.0}, 0);
    REQUIRE(dyncal::balanced_ece(one) == Approx(0.0).margin(1e-12));

    // both class 0, both confidence 0.8, both correct: |1 - 0.8| = 0.2
    dyncal::PredictionSet pair;
    pair.num_classes = 2;
    add(pair, "a", {0.8, 0.2}, 0);
    add(pair, "b", {0.8, 0.2}, 0);
    REQUIRE(dyncal::balanced_ece(pair) == Approx(0.2).epsilon(1e-12));

    REQUIRE_THROWS_AS(dyncal::balanced_ece(one, 0), dyncal::UsageError);
}

TEST_CASE("a calibrated predictor has small balanced ECE") {
    dyncal::RandomStream rng(41);
    auto set = calibrated_set(10000, 3, 0.35, rng);
    double ece = dyncal::balanced_ece(set);
    REQUIRE(ece < 0.02);
    REQUIRE(ece == Approx(brute_force_balanced_ece(set, 15)).margin(1e-12));
}

TEST_CASE("balanced ECE matches a brute-force bin evaluator") {
    // constant-uniform predictor on a balanced 3-class set: ties break to
    // class 0, so class 0 is always correct (|1 - 1/3|) and the others never
    // are (|0 - 1/3|): mean is 4/9
    dyncal::PredictionSet uniform;
    uniform.num_classes = 3;
    for (int i = 0; i < 9; ++i)
        add(uniform, "u" + std::to_string(i), {1.0 / 3, 1.0 / 3, 1.0 / 3}, i % 3);
    double got = dyncal::balanced_ece(uniform);
    REQUIRE(got == Approx(brute_force_balanced_ece(uniform, 15)).margin(1e-15));
    REQUIRE(got == Approx(4.0 / 9).margin(1e-12));

    dyncal::RandomStream rng(7);
    for (int trial = 0; trial < 5; ++trial) {
        auto set = calibrated_set(60, 3, 1.0, rng);
        for (int bins : {1, 2, 15})
            REQUIRE(dyncal::balanced_ece(set, bins) ==
                    Approx(brute_force_balanced_ece(set, bins)).margin(1e-12));
    }
}

TEST_CASE("coverage counts selector values strictly above tau") {
    dyncal::PredictionSet set;
    set.num_classes = 2;
    add(set, "a", {0.9, 0.1}, 0);
    add(set, "b", {0.8, 0.2}, 0);
    add(set, "c", {0.6, 0.4}, 0);
    add(set, "d", {0.4, 0.6}, 1);
    REQUIRE(dyncal::coverage(set, 0.7) == Approx(0.5).epsilon(1e-12));
    REQUIRE(dyncal::coverage(set, -1.0) == Approx(1.0).epsilon(1e-12));
    REQUIRE(dyncal::coverage(set, 1.0) == Approx(0.0).margin(1e-12));
}

TEST_CASE("selective balanced accuracy restricts to the covered subset") {
    dyncal::PredictionSet set;
    set.num_classes = 2;
    add(set, "a", {0.9, 0.1}, 0);  // correct, conf 0.9
    add(set, "b", {0.2, 0.8}, 1);  // correct, conf 0.8
    add(set, "c", {0.6, 0.4}, 1);  // wrong, conf 0.6
    add(set, "d", {0.45, 0.55}, 0); // wrong, conf 0.55

    REQUIRE(dyncal::selective_balanced_accuracy(set, 0.0) ==
            Approx(dyncal::balanced_accuracy(set)).epsilon(1e-12));
    // tau at the median keeps only the two correct high-confidence samples
    REQUIRE(dyncal::selective_balanced_accuracy(set, 0.7) == Approx(1.0).epsilon(1e-12));
    REQUIRE_THROWS_AS(dyncal::selective_balanced_accuracy(set, 1.0), dyncal::DataError);
}

TEST_CASE("an oracle-confidence predictor is perfect at any usable threshold") {
    // correct samples get confidence 1, wrong ones the 2-class floor 0.5
    dyncal::PredictionSet set;
    set.num_classes = 2;
    for (int i = 0; i < 10; ++i) {
        bool wrong = i % 3 == 0;
        int label = i % 2;
        if (wrong)
            add(set, padded_id(i), {0.5, 0.5}, 1); // predicts 0 by tie-break
        else
            add(set, padded_id(i), label == 0 ? std::vector<double>{1.0, 0.0}
                                              : std::vector<double>{0.0, 1.0}, label);
    }
    for (double tau : {0.51, 0.75, 0.99})
        REQUIRE(dyncal::selective_balanced_accuracy(set, tau) == Approx(1.0).epsilon(1e-12));
}

TEST_CASE("risk-coverage sweep of a perfect always-confident predictor") {
    dyncal::PredictionSet set;
    set.num_classes = 3;
    for (int i = 0; i < 100; ++i) {
        int label = i % 3;
        std::vector<double> p(3, 0.0);
        p[static_cast<std::size_t>(label)] = 1.0;
        add(set, padded_id(i), std::move(p), label);
    }
    auto report = dyncal::compute_aurc(set);
    REQUIRE(report.rows.size() == 51);
    for (const auto& row : report.rows) {
        REQUIRE(row.accuracy == Approx(1.0).epsilon(1e-12));
        REQUIRE(row.coverage == Approx(row.target_coverage).margin(1e-9));
        REQUIRE(row.tau == Approx(1.0).epsilon(1e-12));
    }
    REQUIRE(report.aurc == Approx(0.75).margin(1e-12));
}

TEST_CASE("aurc of a selector independent of correctness is half the grid mean") {
    dyncal::RandomStream rng(11);
    dyncal::PredictionSet set;
    set.num_classes = 2;
    std::map<std::string, double> selector;
    for (int i = 0; i < 10000; ++i) {
        int label = i % 2;
        bool correct = rng.uniform() < 0.5;
        int pred = correct ? label : 1 - label;
        add(set, padded_id(i),
            pred == 0 ? std::vector<double>{0.6, 0.4} : std::vector<double>{0.4, 0.6}, label);
        selector.emplace(padded_id(i), rng.uniform());
    }
    auto report = dyncal::compute_aurc(set, selector);
    REQUIRE(report.aurc == Approx(0.5 * 0.75).margin(0.02));
}

TEST_CASE("an oracle selector beats a random selector on the same predictions") {
    dyncal::RandomStream rng(13);
    dyncal::PredictionSet set;
    set.num_classes = 3;
    std::map<std::string, double> oracle, random_sel;
    for (int i = 0; i < 500; ++i) {
        int label = i % 3;
        bool correct = rng.uniform() < 0.8;
        int pred = correct ? label : (label + 1) % 3;
        std::vector<double> p(3, 0.15);
        p[static_cast<std::size_t>(pred)] = 0.7;
        add(set, padded_id(i), std::move(p), label);
        oracle.emplace(padded_id(i), correct ? 1.0 : 0.0);
        random_sel.emplace(padded_id(i), rng.uniform());
    }
    double oracle_aurc = dyncal::compute_aurc(set, oracle).aurc;
    double random_aurc = dyncal::compute_aurc(set, random_sel).aurc;
    REQUIRE(oracle_aurc > random_aurc);

    // and it stays on top against a population of random selectors
    for (int k = 0; k < 100; ++k) {
        std::map<std::string, double> other;
        for (const auto& [id, p] : set.entries) other.emplace(id, rng.uniform());
        REQUIRE(oracle_aurc >= dyncal::compute_aurc(set, other).aurc);
    }
}

TEST_CASE("selective report self-consistency and coverage monotonicity") {
    dyncal::RandomStream rng(17);
    auto set = calibrated_set(400, 3, 1.0, rng);
    auto report = dyncal::compute_aurc(set);

    double sum = 0.0;
    for (const auto& row : report.rows) sum += row.accuracy * row.coverage;
    REQUIRE(report.aurc == sum / static_cast<double>(report.rows.size()));

    for (std::size_t i = 1; i < report.rows.size(); ++i) {
        REQUIRE(report.rows[i].coverage >= report.rows[i - 1].coverage);
        REQUIRE(report.rows[i].tau <= report.rows[i - 1].tau);
    }

    // coverage() itself is non-increasing in tau
    for (double tau = 0.0; tau < 1.0; tau += 0.01)
        REQUIRE(dyncal::coverage(set, tau + 0.01) <= dyncal::coverage(set, tau));
}

TEST_CASE("aurc validates its inputs") {
    dyncal::PredictionSet set;
    set.num_classes = 2;
    add(set, "a", {0.9, 0.1}, 0);

    dyncal::SelectiveConfig empty_grid;
    empty_grid.coverage_grid.clear();
    REQUIRE_THROWS_AS(dyncal::compute_aurc(set, empty_grid), dyncal::UsageError);

    dyncal::SelectiveConfig bad_range;
    bad_range.coverage_grid = {0.5, 1.2};
    REQUIRE_THROWS_AS(dyncal::compute_aurc(set, bad_range), dyncal::UsageError);

    dyncal::SelectiveConfig not_increasing;
    not_increasing.coverage_grid = {0.5, 0.5};
    REQUIRE_THROWS_AS(dyncal::compute_aurc(set, not_increasing), dyncal::UsageError);

    std::map<std::string, double> missing;
    REQUIRE_THROWS_AS(dyncal::compute_aurc(set, missing), dyncal::DataError);
}

TEST_CASE("balanced metrics ignore per-class duplication") {
    dyncal::RandomStream rng(19);
    auto set = calibrated_set(90, 3, 1.0, rng);
    double acc = dyncal::balanced_accuracy(set);
    double mae = dyncal::balanced_mae(set);
    double ece = dyncal::balanced_ece(set);

    // duplicate every class-1 sample three more times
    dyncal::PredictionSet dup = set;
    int copy = 0;
    for (const auto& [id, p] : set.entries) {
        if (p.label != 1) continue;
        for (int k = 0; k < 3; ++k) dup.entries.emplace("dup" + std::to_string(copy++) + id, p);
    }
    REQUIRE(dyncal::balanced_accuracy(dup) == Approx(acc).margin(1e-12));
    REQUIRE(dyncal::balanced_mae(dup) == Approx(mae).margin(1e-12));
    REQUIRE(dyncal::balanced_ece(dup) == Approx(ece).margin(1e-12));
}

TEST_CASE("subgroup confidence report groups by tag and correctness") {
    dyncal::PredictionSet uniform;
    uniform.num_classes = 2;
    for (int i = 0; i < 4; ++i)
        add(uniform, "s" + std::to_string(i), {0.9, 0.1}, 0, {{"valve", "true"}});
    auto single = dyncal::subgroup_confidence_report(uniform, "valve");
    REQUIRE(single.rows.size() == 1);
    REQUIRE(single.rows[0].tag_value == "true");
    REQUIRE(single.rows[0].correct);
    REQUIRE(single.rows[0].count == 4);
    REQUIRE(single.rows[0].mean_confidence == Approx(0.9).epsilon(1e-12));

    dyncal::PredictionSet mixed;
    mixed.num_classes = 2;
    add(mixed, "a1", {0.9, 0.1}, 0, {{"g", "a"}});   // a, correct, 0.9
    add(mixed, "a2", {0.7, 0.3}, 0, {{"g", "a"}});   // a, correct, 0.7
    add(mixed, "a3", {0.6, 0.4}, 1, {{"g", "a"}});   // a, wrong, 0.6
    add(mixed, "b1", {0.45, 0.55}, 1, {{"g", "b"}}); // b, correct, 0.55
    add(mixed, "b2", {0.85, 0.15}, 1, {{"g", "b"}}); // b, wrong, 0.85
    add(mixed, "b3", {0.05, 0.95}, 0, {{"g", "b"}}); // b, wrong, 0.95
    auto four = dyncal::subgroup_confidence_report(mixed, "g");
    REQUIRE(four.rows.size() == 4);
    REQUIRE(four.rows[0].tag_value == "a");
    REQUIRE_FALSE(four.rows[0].correct);
    REQUIRE(four.rows[0].mean_confidence == Approx(0.6).epsilon(1e-12));
    REQUIRE(four.rows[1].tag_value == "a");
    REQUIRE(four.rows[1].correct);
    REQUIRE(four.rows[1].mean_confidence == Approx(0.8).epsilon(1e-12));
    REQUIRE(four.rows[2].tag_value == "b");
    REQUIRE(four.rows[2].mean_confidence == Approx(0.9).epsilon(1e-12));
    REQUIRE(four.rows[3].tag_value == "b");
    REQUIRE(four.rows[3].mean_confidence == Approx(0.55).epsilon(1e-12));
    REQUIRE(four.samples.size() == 6);

    // untagged samples land in "(absent)" and every sample is counted
    dyncal::PredictionSet half;
    half.num_classes = 2;
    add(half, "t1", {0.9, 0.1}, 0, {{"g", "x"}});
    add(half, "t2", {0.9, 0.1}, 0, {{"g", "x"}});
    add(half, "u1", {0.9, 0.1}, 0);
    add(half, "u2", {0.2, 0.8}, 0);
    auto absent = dyncal::subgroup_confidence_report(half, "g");
    std::size_t total = 0;
    bool saw_absent = false;
    for (const auto& row : absent.rows) {
        total += row.count;
        saw_absent = saw_absent || row.tag_value == "(absent)";
    }
    REQUIRE(saw_absent);
    REQUIRE(total == half.entries.size());

    REQUIRE_THROWS_AS(dyncal::subgroup_confidence_report(half, "nonexistent"), dyncal::DataError);
}

TEST_CASE("subgroup CSV export writes one row per sample") {
    dyncal::PredictionSet set;
    set.num_classes = 2;
    add(set, "a", {0.75, 0.25}, 0, {{"g", "x"}});
    add(set, "b", {0.4, 0.6}, 0, {{"g", "y"}});
    auto report = dyncal::subgroup_confidence_report(set, "g");
    fs::path path = temp_file("subgroup.csv");
    dyncal::write_subgroup_csv(report, path);

    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    REQUIRE(line == "id,tag,correct,confidence");
    std::getline(in, line);
    REQUIRE(line == "a,x,1,0.75");
    std::getline(in, line);
    REQUIRE(line == "b,y,0,0.6");
}

TEST_CASE("metrics reports round-trip through files") {
    dyncal::RandomStream rng(23);
    auto set = calibrated_set(60, 3, 1.0, rng);
    set.level = dyncal::PredictionLevel::study;
    auto report = dyncal::evaluate_predictions(set);
    REQUIRE(report.aurc > 0.0);
    REQUIRE(report.rows.size() == 51);

    fs::path path = temp_file("report_roundtrip.json");
    dyncal::write_metrics_report(report, path);
    auto loaded = dyncal::read_metrics_report(path);
    REQUIRE(loaded.level == report.level);
    REQUIRE(loaded.balanced_accuracy == report.balanced_accuracy);
    REQUIRE(loaded.balanced_mae == report.balanced_mae);
    REQUIRE(loaded.balanced_ece == report.balanced_ece);
    REQUIRE(loaded.aurc == report.aurc);
    REQUIRE(loaded.rows.size() == report.rows.size());
    for (std::size_t i = 0; i < report.rows.size(); ++i) {
        REQUIRE(loaded.rows[i].tau == report.rows[i].tau);
        REQUIRE(loaded.rows[i].coverage == report.rows[i].coverage);
        REQUIRE(loaded.rows[i].accuracy == report.rows[i].accuracy);
    }
}

TEST_CASE("prediction files round-trip with tags") {
    dyncal::PredictionSet set;
    set.num_classes = 3;
    set.level = dyncal::PredictionLevel::video;
    add(set, "a", {0.5, 0.25, 0.25}, 0, {{"subgroup", "true"}});
    add(set, "b", {0.1, 0.6, 0.3}, 1);
    fs::path path = temp_file("preds_roundtrip.jsonl");
    dyncal::write_predictions(set, path);
    auto loaded = dyncal::read_predictions(path);
    REQUIRE(loaded.level == set.level);
    REQUIRE(loaded.num_classes == set.num_classes);
    REQUIRE(loaded.entries.size() == 2);
    REQUIRE(loaded.entries.at("a").probs == set.entries.at("a").probs);
    REQUIRE(loaded.entries.at("a").tags == set.entries.at("a").tags);
    REQUIRE(loaded.entries.at("b").label == 1);
}

TEST_CASE("prediction files are validated on read") {
    fs::path bad = temp_file("preds_bad.jsonl");
    {
        std::ofstream out(bad);
        out << R"({"level":"video","num_classes":2})" << "\n";
        out << R"({"id":"a","probs":[0.9,0.1],"label":0})" << "\n";
        out << R"({"id":"b","probs":"oops","label":0})" << "\n";
    }
    try {
        dyncal::read_predictions(bad);
        FAIL("expected a DataError");
    } catch (const dyncal::DataError& e) {
        REQUIRE(std::string(e.what()).find(":3:") != std::string::npos);
    }

    fs::path dup = temp_file("preds_dup.jsonl");
    {
        std::ofstream out(dup);
        out << R"({"level":"video","num_classes":2})" << "\n";
        out << R"({"id":"a","probs":[0.9,0.1],"label":0})" << "\n";
        out << R"({"id":"a","probs":[0.8,0.2],"label":0})" << "\n";
    }
    REQUIRE_THROWS_AS(dyncal::read_predictions(dup), dyncal::DataError);

    fs::path bad_sum = temp_file("preds_bad_sum.jsonl");
    {
        std::ofstream out(bad_sum);
        out << R"({"level":"video","num_classes":2})" << "\n";
        out << R"({"id":"a","probs":[0.9,0.2],"label":0})" << "\n";
    }
    REQUIRE_THROWS_AS(dyncal::read_predictions(bad_sum), dyncal::DataError);

    dyncal::PredictionSet bad_label;
    bad_label.num_classes = 2;
    add(bad_label, "a", {0.9, 0.1}, 5);
    REQUIRE_THROWS_AS(bad_label.check(), dyncal::DataError);
}
