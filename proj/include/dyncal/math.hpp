#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "dyncal/errors.hpp"

namespace dyncal {

inline bool all_finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

// log(sum_c exp(v_c)), max-subtracted.
inline double log_sum_exp(std::span<const double> v) {
    if (v.empty()) throw DataError("log_sum_exp: empty vector");
    double m = *std::max_element(v.begin(), v.end());
    double s = 0.0;
    for (double x : v) s += std::exp(x - m);
    return m + std::log(s);
}

// Numerically stable softmax. Entries positive, sum to 1.
inline std::vector<double> softmax(std::span<const double> logits) {
    if (logits.empty()) throw DataError("softmax: empty vector");
    if (!all_finite(logits)) throw DataError("softmax: non-finite input");
    double m = *std::max_element(logits.begin(), logits.end());
    std::vector<double> out(logits.size());
    double s = 0.0;
    for (std::size_t c = 0; c < logits.size(); ++c) {
        out[c] = std::exp(logits[c] - m);
        s += out[c];
    }
    for (double& x : out) x /= s;
    return out;
}

// -log softmax(logits)[label]
inline double cross_entropy(std::span<const double> logits, int label) {
    if (label < 0 || static_cast<std::size_t>(label) >= logits.size())
        throw DataError("cross_entropy: label out of range");
    if (!all_finite(logits)) throw DataError("cross_entropy: non-finite input");
    return log_sum_exp(logits) - logits[static_cast<std::size_t>(label)];
}

// Cross-entropy against a soft target distribution: -sum_c q_c log p_c.
// Assumes the target sums to 1.
inline double soft_cross_entropy(std::span<const double> logits, std::span<const double> target) {
    if (logits.size() != target.size())
        throw DataError("soft_cross_entropy: dimension mismatch");
    double lse = log_sum_exp(logits);
    double dot = 0.0;
    for (std::size_t c = 0; c < logits.size(); ++c) dot += target[c] * logits[c];
    return lse - dot;
}

// First index attaining the maximum (ties break toward the lowest index).
inline std::size_t argmax(std::span<const double> v) {
    if (v.empty()) throw DataError("argmax: empty vector");
    return static_cast<std::size_t>(
        std::distance(v.begin(), std::max_element(v.begin(), v.end())));
}

// Shannon entropy of a probability vector, in nats. 0 log 0 := 0.
inline double entropy(std::span<const double> probs) {
    double h = 0.0;
    for (double p : probs)
        if (p > 0.0) h -= p * std::log(p);
    return h;
}

} // namespace dyncal
