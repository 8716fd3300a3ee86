#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dyncal/errors.hpp"
#include "dyncal/math.hpp"

namespace dyncal {

// Allowed temperature range. The fit clips to these bounds and reports when
// the optimum lands on one; a positive gamma keeps the argmax of the scaled
// logits equal to the argmax of the input.
inline constexpr double kGammaMin = 0.05;
inline constexpr double kGammaMax = 20.0;

struct TemperatureParam {
    double gamma = 1.0;
};

// Affine logit map z -> A z + b.
struct DirichletMap {
    std::vector<std::vector<double>> A; // C x C, row-major
    std::vector<double> b;              // C

    static DirichletMap identity(int num_classes) {
        DirichletMap m;
        auto n = static_cast<std::size_t>(num_classes);
        m.A.assign(n, std::vector<double>(n, 0.0));
        for (std::size_t i = 0; i < n; ++i) m.A[i][i] = 1.0;
        m.b.assign(n, 0.0);
        return m;
    }

    int num_classes() const { return static_cast<int>(b.size()); }

    bool finite() const {
        if (!all_finite(b)) return false;
        for (const auto& row : A)
            if (!all_finite(row)) return false;
        return true;
    }
};

struct OptimizerConfig {
    double learning_rate = 0.01;
    int max_iters = 5000;
    double grad_tolerance = 1e-7; // on the gradient infinity-norm
    std::uint64_t seed = 0;
};

struct RegularizerConfig {
    double lambda1 = 1.0; // bias penalty weight
    double lambda2 = 1.0; // off-diagonal penalty weight
};

// Validation-set logits paired with ground-truth labels.
using LabeledLogits = std::vector<std::pair<std::vector<double>, int>>;

inline void check_labeled_logits(const LabeledLogits& data) {
    if (data.empty()) throw DataError("empty validation list");
    std::size_t num_classes = data.front().first.size();
    for (const auto& [v, y] : data) {
        if (v.size() != num_classes) throw DataError("inconsistent class count in validation list");
        if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
            throw DataError("label out of range in validation list");
    }
}

inline void check_optimizer_config(const OptimizerConfig& cfg) {
    if (cfg.learning_rate <= 0.0) throw UsageError("learning_rate must be positive");
    if (cfg.max_iters <= 0) throw UsageError("max_iters must be positive");
    if (cfg.grad_tolerance <= 0.0) throw UsageError("grad_tolerance must be positive");
}

inline std::vector<double> apply_temperature(TemperatureParam gamma, std::span<const double> logits) {
    std::vector<double> out(logits.begin(), logits.end());
    for (double& x : out) x *= gamma.gamma;
    return out;
}

inline std::vector<double> apply_dirichlet(const DirichletMap& map, std::span<const double> logits) {
    auto n = static_cast<std::size_t>(map.num_classes());
    if (logits.size() != n || map.A.size() != n)
        throw DataError("apply_dirichlet: dimension mismatch");
    std::vector<double> out(n, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
        if (map.A[r].size() != n) throw DataError("apply_dirichlet: ragged matrix");
        double acc = map.b[r];
        for (std::size_t c = 0; c < n; ++c) acc += map.A[r][c] * logits[c];
        out[r] = acc;
    }
    return out;
}

// Mean cross-entropy of the raw logits against their labels.
inline double mean_nll(const LabeledLogits& data) {
    check_labeled_logits(data);
    double s = 0.0;
    for (const auto& [v, y] : data) s += cross_entropy(v, y);
    return s / static_cast<double>(data.size());
}

inline double temperature_nll(double gamma, const LabeledLogits& data) {
    check_labeled_logits(data);
    double s = 0.0;
    for (const auto& [v, y] : data)
        s += cross_entropy(apply_temperature({gamma}, v), y);
    return s / static_cast<double>(data.size());
}

// Mean cross-entropy of A v + b plus the two penalties
//   (lambda1 / C) |b|^2  and  (lambda2 / C^2) |offdiag(A)|^2.
inline double dirichlet_objective(const DirichletMap& map, const LabeledLogits& data,
                                  const RegularizerConfig& reg) {
    check_labeled_logits(data);
    auto n = static_cast<std::size_t>(map.num_classes());
    double ce = 0.0;
    for (const auto& [v, y] : data) ce += cross_entropy(apply_dirichlet(map, v), y);
    ce /= static_cast<double>(data.size());
    double bias_pen = 0.0;
    for (double x : map.b) bias_pen += x * x;
    double offdiag_pen = 0.0;
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < n; ++c)
            if (r != c) offdiag_pen += map.A[r][c] * map.A[r][c];
    double C = static_cast<double>(n);
    return ce + reg.lambda1 / C * bias_pen + reg.lambda2 / (C * C) * offdiag_pen;
}

struct DirichletGradient {
    std::vector<std::vector<double>> dA;
    std::vector<double> db;

    double inf_norm() const {
        double m = 0.0;
        for (const auto& row : dA)
            for (double x : row) m = std::max(m, std::abs(x));
        for (double x : db) m = std::max(m, std::abs(x));
        return m;
    }
};

// Analytic gradient of dirichlet_objective. For one sample the cross-entropy
// term back-propagates delta = softmax(A v + b) - onehot(y) through z = A v + b,
// giving dA += delta v^T and db += delta (averaged over samples).
inline DirichletGradient dirichlet_gradient(const DirichletMap& map, const LabeledLogits& data,
                                            const RegularizerConfig& reg) {
    check_labeled_logits(data);
    auto n = static_cast<std::size_t>(map.num_classes());
    DirichletGradient g;
    g.dA.assign(n, std::vector<double>(n, 0.0));
    g.db.assign(n, 0.0);
    double inv_n = 1.0 / static_cast<double>(data.size());
    for (const auto& [v, y] : data) {
        std::vector<double> p = softmax(apply_dirichlet(map, v));
        p[static_cast<std::size_t>(y)] -= 1.0;
        for (std::size_t r = 0; r < n; ++r) {
            double w = p[r] * inv_n;
            g.db[r] += w;
            for (std::size_t c = 0; c < n; ++c) g.dA[r][c] += w * v[c];
        }
    }
    double C = static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r) {
        g.db[r] += 2.0 * reg.lambda1 / C * map.b[r];
        for (std::size_t c = 0; c < n; ++c)
            if (r != c) g.dA[r][c] += 2.0 * reg.lambda2 / (C * C) * map.A[r][c];
    }
    return g;
}

struct TemperatureFit {
    TemperatureParam param;
    bool converged = false;
    bool bound_hit = false;
    int iters = 0;
    double final_nll = 0.0;
};

// Full-batch gradient descent on the mean validation NLL, starting from
// gamma = 1 and clipped to [kGammaMin, kGammaMax]. If a plain step would
// increase the objective the step is halved for that iteration, so the
// objective never rises above its value at gamma = 1. Deterministic.
inline TemperatureFit fit_temperature(const LabeledLogits& val, const OptimizerConfig& cfg = {}) {
    check_labeled_logits(val);
    check_optimizer_config(cfg);
    double inv_n = 1.0 / static_cast<double>(val.size());
    TemperatureFit fit;
    double gamma = 1.0;
    double obj = temperature_nll(gamma, val);
    auto gradient = [&](double g) {
        double acc = 0.0;
        for (const auto& [v, y] : val) {
            std::vector<double> p = softmax(apply_temperature({g}, v));
            double dot = 0.0;
            for (std::size_t c = 0; c < v.size(); ++c) dot += p[c] * v[c];
            acc += dot - v[static_cast<std::size_t>(y)];
        }
        return acc * inv_n;
    };
    double grad = gradient(gamma);
    int iter = 0;
    for (; iter < cfg.max_iters; ++iter) {
        if (std::abs(grad) <= cfg.grad_tolerance) { fit.converged = true; break; }
        double step = cfg.learning_rate;
        double next_gamma = gamma;
        double next_obj = obj;
        for (int halving = 0; halving < 40; ++halving) {
            double candidate = std::clamp(gamma - step * grad, kGammaMin, kGammaMax);
            double candidate_obj = temperature_nll(candidate, val);
            if (candidate_obj <= obj || candidate == gamma) {
                next_gamma = candidate;
                next_obj = candidate_obj;
                break;
            }
            step *= 0.5;
        }
        if (next_gamma == gamma) {
            // Either pinned at a bound or no descent possible at fp precision.
            bool at_bound = (gamma == kGammaMin && grad > 0.0) ||
                            (gamma == kGammaMax && grad < 0.0);
            fit.converged = at_bound;
            break;
        }
        gamma = next_gamma;
        obj = next_obj;
        grad = gradient(gamma);
    }
    fit.param.gamma = gamma;
    fit.bound_hit = (gamma == kGammaMin && grad > 0.0) || (gamma == kGammaMax && grad < 0.0);
    if (fit.bound_hit) fit.converged = true;
    fit.iters = iter;
    fit.final_nll = obj;
    return fit;
}

struct DirichletFit {
    DirichletMap map;
    bool converged = false;
    int iters = 0;
    double final_nll = 0.0;       // cross-entropy term at the returned map
    double final_objective = 0.0; // including penalties
};

// Full-batch gradient descent on dirichlet_objective from A = I, b = 0, with
// the same halve-on-increase guard as fit_temperature. The returned map never
// has a higher objective than the identity map. Deterministic.
inline DirichletFit fit_dirichlet(const LabeledLogits& val, const RegularizerConfig& reg = {},
                                  const OptimizerConfig& cfg = {}) {
    check_labeled_logits(val);
    check_optimizer_config(cfg);
    if (reg.lambda1 < 0.0 || reg.lambda2 < 0.0)
        throw UsageError("regularizer weights must be nonnegative");
    auto n = static_cast<std::size_t>(val.front().first.size());
    DirichletFit fit;
    DirichletMap map = DirichletMap::identity(static_cast<int>(n));
    double obj = dirichlet_objective(map, val, reg);
    DirichletGradient grad = dirichlet_gradient(map, val, reg);
    int iter = 0;
    for (; iter < cfg.max_iters; ++iter) {
        if (grad.inf_norm() <= cfg.grad_tolerance) { fit.converged = true; break; }
        double step = cfg.learning_rate;
        bool moved = false;
        for (int halving = 0; halving < 40; ++halving) {
            DirichletMap candidate = map;
            for (std::size_t r = 0; r < n; ++r) {
                candidate.b[r] -= step * grad.db[r];
                for (std::size_t c = 0; c < n; ++c) candidate.A[r][c] -= step * grad.dA[r][c];
            }
            double candidate_obj = dirichlet_objective(candidate, val, reg);
            if (candidate_obj <= obj) {
                map = std::move(candidate);
                obj = candidate_obj;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if (!moved) break; // no descent possible at fp precision
        grad = dirichlet_gradient(map, val, reg);
    }
    fit.map = std::move(map);
    fit.iters = iter;
    fit.final_objective = obj;
    double ce = 0.0;
    for (const auto& [v, y] : val) ce += cross_entropy(apply_dirichlet(fit.map, v), y);
    fit.final_nll = ce / static_cast<double>(val.size());
    return fit;
}

// ---------------------------------------------------------------------------
// Calibration map file: a single JSON object.

struct CalibrationRecord {
    enum class Type { temperature, dirichlet };
    Type type = Type::temperature;
    TemperatureParam gamma;
    DirichletMap map;
    bool converged = false;
    int iters = 0;
    double final_nll = 0.0;

    static CalibrationRecord from(const TemperatureFit& fit) {
        CalibrationRecord r;
        r.type = Type::temperature;
        r.gamma = fit.param;
        r.converged = fit.converged;
        r.iters = fit.iters;
        r.final_nll = fit.final_nll;
        return r;
    }

    static CalibrationRecord from(const DirichletFit& fit) {
        CalibrationRecord r;
        r.type = Type::dirichlet;
        r.map = fit.map;
        r.converged = fit.converged;
        r.iters = fit.iters;
        r.final_nll = fit.final_nll;
        return r;
    }
};

inline void write_calibration(const CalibrationRecord& rec, const std::filesystem::path& path) {
    nlohmann::json j;
    if (rec.type == CalibrationRecord::Type::temperature) {
        j["type"] = "temperature";
        j["gamma"] = rec.gamma.gamma;
    } else {
        j["type"] = "dirichlet";
        j["A"] = rec.map.A;
        j["b"] = rec.map.b;
    }
    j["converged"] = rec.converged;
    j["iters"] = rec.iters;
    j["final_nll"] = rec.final_nll;
    std::ofstream out(path);
    if (!out) throw DataError("cannot write calibration file " + path.string());
    out << j.dump() << "\n";
}

inline CalibrationRecord read_calibration(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open calibration file " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + ": malformed calibration file: " + e.what());
    }
    CalibrationRecord rec;
    try {
        std::string type = j.at("type").get<std::string>();
        if (type == "temperature") {
            rec.type = CalibrationRecord::Type::temperature;
            rec.gamma.gamma = j.at("gamma").get<double>();
            if (!(rec.gamma.gamma > 0.0) || !std::isfinite(rec.gamma.gamma))
                throw DataError(path.string() + ": gamma must be positive and finite");
        } else if (type == "dirichlet") {
            rec.type = CalibrationRecord::Type::dirichlet;
            rec.map.A = j.at("A").get<std::vector<std::vector<double>>>();
            rec.map.b = j.at("b").get<std::vector<double>>();
            if (rec.map.A.size() != rec.map.b.size())
                throw DataError(path.string() + ": A/b dimension mismatch");
            for (const auto& row : rec.map.A)
                if (row.size() != rec.map.b.size())
                    throw DataError(path.string() + ": A must be square");
            if (!rec.map.finite()) throw DataError(path.string() + ": non-finite map entries");
        } else {
            throw DataError(path.string() + ": unknown calibration type \"" + type + "\"");
        }
        rec.converged = j.at("converged").get<bool>();
        rec.iters = j.at("iters").get<int>();
        rec.final_nll = j.at("final_nll").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + ": malformed calibration file: " + e.what());
    }
    return rec;
}

} // namespace dyncal
